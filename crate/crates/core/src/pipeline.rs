//! Memory-governed tiled restoration: plan tiles, restore them on a bounded
//! worker pool, stitch, and report.
//!
//! The deployment envelope this models is 300 MB of RAM backed by a 2 GB
//! virtual allowance on 3 shared cores. Admission control is predictive: a
//! closed-form peak estimate is compared against both budgets before any
//! tile is touched, warning past the RAM figure and refusing past the
//! virtual one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deconv;
use crate::degrade::BlurKernel;
use crate::error::{Error, Result};
use crate::metrics::{psnr, sobel_edges, ssim, QualityReport};
use crate::neural::{mimo_forward, ModelWeights, Tensor4};
use crate::raster::{self, plan_tiles, RasterImage, StitchAccumulator, TileRect};

/// Scale factor applied around the backend in
/// [`ProcessingMode::DownscaleProcessUpscale`].
pub const DOWNSCALE_FACTOR: usize = 4;

pub const RESTORATION_RESULT_SCHEMA_VERSION: u32 = 1;
pub const CAPTURE_REQUEST_SCHEMA_VERSION: u32 = 1;

/// Environment overrides honored by [`PipelineConfig::apply_env_overrides`].
pub const ENV_WORKERS: &str = "REFOCUS_WORKERS";
pub const ENV_MEMORY_BUDGET_MB: &str = "REFOCUS_MEMORY_BUDGET_MB";
pub const ENV_VIRTUAL_BUDGET_MB: &str = "REFOCUS_VIRTUAL_BUDGET_MB";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Wiener,
    RichardsonLucy,
    Neural,
}

impl BackendKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackendKind::Wiener => "wiener",
            BackendKind::RichardsonLucy => "richardson_lucy",
            BackendKind::Neural => "neural",
        }
    }
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wiener" => Ok(BackendKind::Wiener),
            "richardson_lucy" | "rl" => Ok(BackendKind::RichardsonLucy),
            "neural" => Ok(BackendKind::Neural),
            other => Err(Error::param(format!("unknown backend '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessingMode {
    /// Run the backend on tiles at capture resolution.
    TileNative,
    /// Shrink each tile by [`DOWNSCALE_FACTOR`] before the backend and
    /// expand the result, the geometry the deployed model was trained
    /// under. Assets must match the scale the backend actually sees.
    DownscaleProcessUpscale,
}

impl std::str::FromStr for ProcessingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tile_native" => Ok(ProcessingMode::TileNative),
            "downscale_process_upscale" => Ok(ProcessingMode::DownscaleProcessUpscale),
            other => Err(Error::param(format!("unknown processing mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub tile_size: usize,
    pub overlap: usize,
    pub backend: BackendKind,
    pub memory_budget_mb: f64,
    pub virtual_budget_mb: f64,
    pub workers: usize,
    pub mode: ProcessingMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tile_size: 256,
            overlap: 32,
            backend: BackendKind::Wiener,
            memory_budget_mb: 300.0,
            virtual_budget_mb: 2048.0,
            workers: 3,
            mode: ProcessingMode::DownscaleProcessUpscale,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::param("worker count must be at least 1"));
        }
        if self.tile_size == 0 || self.overlap >= self.tile_size {
            return Err(Error::param(format!(
                "require 0 <= overlap < tile_size, got tile {} overlap {}",
                self.tile_size, self.overlap
            )));
        }
        if !(self.memory_budget_mb.is_finite() && self.memory_budget_mb > 0.0)
            || !(self.virtual_budget_mb.is_finite() && self.virtual_budget_mb > 0.0)
        {
            return Err(Error::param("memory budgets must be positive"));
        }
        Ok(())
    }

    /// Fold `REFOCUS_WORKERS`, `REFOCUS_MEMORY_BUDGET_MB` and
    /// `REFOCUS_VIRTUAL_BUDGET_MB` into the config, then re-validate.
    /// Called once at process startup by the CLI, never implicitly.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(ENV_WORKERS) {
            self.workers = v
                .trim()
                .parse()
                .map_err(|_| Error::param(format!("{ENV_WORKERS} must be a positive integer")))?;
        }
        if let Ok(v) = std::env::var(ENV_MEMORY_BUDGET_MB) {
            self.memory_budget_mb = v
                .trim()
                .parse()
                .map_err(|_| Error::param(format!("{ENV_MEMORY_BUDGET_MB} must be a number")))?;
        }
        if let Ok(v) = std::env::var(ENV_VIRTUAL_BUDGET_MB) {
            self.virtual_budget_mb = v
                .trim()
                .parse()
                .map_err(|_| Error::param(format!("{ENV_VIRTUAL_BUDGET_MB} must be a number")))?;
        }
        self.validate()
    }
}

/// Restoration inputs the backend needs beyond the image itself.
#[derive(Debug, Clone)]
pub enum BackendAssets {
    Wiener { kernel: BlurKernel, nsr: f64 },
    RichardsonLucy { kernel: BlurKernel, iterations: usize },
    Neural { weights: ModelWeights },
}

impl BackendAssets {
    pub fn kind(&self) -> BackendKind {
        match self {
            BackendAssets::Wiener { .. } => BackendKind::Wiener,
            BackendAssets::RichardsonLucy { .. } => BackendKind::RichardsonLucy,
            BackendAssets::Neural { .. } => BackendKind::Neural,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RestorationResult {
    pub schema_version: u32,
    #[serde(skip)]
    pub output: RasterImage,
    pub elapsed_seconds: f64,
    pub estimated_peak_mb: f64,
    pub tiles_processed: usize,
    pub backend: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<QualityReport>,
}

const BYTES_PER_SAMPLE: f64 = 4.0;

/// Activation floats retained by one inference tape of the restorer on a
/// `th x tw` input, mirroring the node list of the forward builder: conv,
/// relu and add values at full, half and quarter resolution, the input
/// pyramid, the three residual heads, and the parameters themselves.
fn neural_activation_floats(weights: &ModelWeights, channels: usize, th: usize, tw: usize) -> f64 {
    let [w1, w2, w3] = weights.arch.widths();
    let a1 = (th * tw) as f64;
    let a2 = a1 / 4.0;
    let a4 = a1 / 16.0;
    let c = channels as f64;
    let full = 13.0 * w1 as f64 * a1 + w2 as f64 * a1;
    let half = 16.0 * w2 as f64 * a2 + w3 as f64 * a2;
    let quarter = 9.0 * w3 as f64 * a4;
    let heads = 3.0 * c * (a1 + a2 + a4);
    full + half + quarter + heads + weights.param_count() as f64
}

/// Per-tile working set in floats for one worker, by backend and mode.
///
/// Classical counts (t² = processed tile area, c = channels):
/// - wiener: `(4c + 16)·t²` — tile crop plus tapered copy (2c), restored
///   tile plus one in-flight result (2c), OTF and filter spectra (8), and
///   the per-channel transform set of real plane, spectrum and inverse (8).
/// - richardson_lucy: `(7c + 12)·t²` — estimate, forward, ratio, correction,
///   tile, restored and in-flight planes (7c) plus the convolution
///   transform set (12).
///
/// The neural backend retains every tape node, counted by
/// [`neural_activation_floats`], plus 4c·t² of crop, tensor and result
/// copies. Downscale mode shrinks the backend area 16-fold but adds the
/// padded and upscaled full-size planes (4c·t²).
fn tile_working_floats(config: &PipelineConfig, channels: usize, assets: &BackendAssets) -> f64 {
    let t = config.tile_size;
    let c = channels as f64;
    let (side, mode_extra) = match config.mode {
        ProcessingMode::TileNative => (t, 0.0),
        ProcessingMode::DownscaleProcessUpscale => {
            (t.div_ceil(DOWNSCALE_FACTOR), 4.0 * c * (t * t) as f64)
        }
    };
    let area = (side * side) as f64;
    let backend = match assets {
        BackendAssets::Wiener { .. } => (4.0 * c + 16.0) * area,
        BackendAssets::RichardsonLucy { .. } => (7.0 * c + 12.0) * area,
        BackendAssets::Neural { weights } => {
            neural_activation_floats(weights, channels, side, side) + 4.0 * c * area
        }
    };
    backend + mode_extra
}

/// Closed-form peak-memory prediction in MB:
///
/// `bytes = 4 · (input planes + output sum planes + workers · per-tile floats)`
///
/// with the per-tile term documented on [`tile_working_floats`]. The
/// prediction is what admission control trusts; the acceptance harness
/// holds it to within 25% of an instrumented allocation counter.
pub fn estimate_peak_mb(
    config: &PipelineConfig,
    width: usize,
    height: usize,
    channels: usize,
    assets: &BackendAssets,
) -> Result<f64> {
    config.validate()?;
    let planes = (width * height * channels) as f64;
    let floats = 2.0 * planes + config.workers as f64 * tile_working_floats(config, channels, assets);
    Ok(floats * BYTES_PER_SAMPLE / (1024.0 * 1024.0))
}

fn reflect_pad_to_multiple(img: &RasterImage, m: usize) -> Result<RasterImage> {
    let tw = img.width.div_ceil(m) * m;
    let th = img.height.div_ceil(m) * m;
    if tw == img.width && th == img.height {
        return Ok(img.clone());
    }
    let mut out = RasterImage::new(tw, th, img.channels)?;
    out.bit_depth_origin = img.bit_depth_origin;
    for c in 0..img.channels {
        for y in 0..th {
            let sy = raster::reflect_index(y as isize, img.height);
            for x in 0..tw {
                let sx = raster::reflect_index(x as isize, img.width);
                out.set(c, y, x, img.at(c, sy, sx));
            }
        }
    }
    Ok(out)
}

fn run_backend(tile: &RasterImage, assets: &BackendAssets) -> Result<RasterImage> {
    match assets {
        BackendAssets::Wiener { kernel, nsr } => {
            let tapered = deconv::edge_taper(tile, kernel)?;
            deconv::wiener(&tapered, kernel, *nsr)
        }
        BackendAssets::RichardsonLucy { kernel, iterations } => {
            deconv::richardson_lucy(tile, kernel, *iterations)
        }
        BackendAssets::Neural { weights } => {
            let padded = reflect_pad_to_multiple(tile, 4)?;
            let tensor: Tensor4<f32> = Tensor4::from_raster(&padded);
            let [full, _, _] = mimo_forward(weights, &tensor)?;
            let out = full.to_raster()?;
            out.crop(&TileRect {
                x: 0,
                y: 0,
                width: tile.width,
                height: tile.height,
            })
        }
    }
}

fn process_tile(
    tile: &RasterImage,
    config: &PipelineConfig,
    assets: &BackendAssets,
) -> Result<RasterImage> {
    match config.mode {
        ProcessingMode::TileNative => run_backend(tile, assets),
        ProcessingMode::DownscaleProcessUpscale => {
            let padded = reflect_pad_to_multiple(tile, DOWNSCALE_FACTOR)?;
            let small = raster::downscale(&padded, DOWNSCALE_FACTOR)?;
            let restored = run_backend(&small, assets)?;
            if restored.width != small.width || restored.height != small.height {
                return Err(Error::dims(
                    "backend changed tile dimensions".to_string(),
                ));
            }
            let up = raster::upscale(&restored, DOWNSCALE_FACTOR)?;
            up.crop(&TileRect {
                x: 0,
                y: 0,
                width: tile.width,
                height: tile.height,
            })
        }
    }
}

/// Restore a full image through the tiled chain.
///
/// Fails before touching any tile if the predicted peak exceeds the virtual
/// budget; warns on stderr past the RAM budget. The stitcher consumes tile
/// results strictly in plan order, so the output is bit-identical for any
/// worker count.
pub fn restore(
    img: &RasterImage,
    config: &PipelineConfig,
    assets: &BackendAssets,
) -> Result<RestorationResult> {
    config.validate()?;
    if assets.kind() != config.backend {
        return Err(Error::param(format!(
            "config selects the {} backend but assets are for {}",
            config.backend.as_str(),
            assets.kind().as_str()
        )));
    }
    if let BackendAssets::Neural { weights } = assets {
        weights.validate()?;
        if weights.arch.input_channels != img.channels {
            return Err(Error::dims(format!(
                "model expects {} channels, image has {}",
                weights.arch.input_channels, img.channels
            )));
        }
    }

    let estimated = estimate_peak_mb(config, img.width, img.height, img.channels, assets)?;
    if estimated > config.virtual_budget_mb {
        return Err(Error::BudgetExceeded {
            estimated_mb: estimated,
            budget_mb: config.virtual_budget_mb as u64,
        });
    }
    if estimated > config.memory_budget_mb {
        eprintln!(
            "warning: predicted peak {estimated:.1} MB exceeds the {:.0} MB RAM budget, relying on the virtual allowance",
            config.memory_budget_mb
        );
    }

    let start = Instant::now();
    let grid = plan_tiles(img.width, img.height, config.tile_size, config.overlap)?;
    let total = grid.tiles.len();
    let mut acc = StitchAccumulator::new(&grid, img.channels)?;

    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::sync_channel::<(usize, Result<RasterImage>)>(config.workers);

    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..config.workers {
            let tx = tx.clone();
            let (grid, next, stop) = (&grid, &next, &stop);
            scope.spawn(move || loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= total {
                    break;
                }
                let out = img
                    .crop(&grid.tiles[i])
                    .and_then(|tile| process_tile(&tile, config, assets));
                if tx.send((i, out)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending: BTreeMap<usize, RasterImage> = BTreeMap::new();
        let mut next_stitch = 0usize;
        while let Ok((i, out)) = rx.recv() {
            match out {
                Ok(tile) => {
                    pending.insert(i, tile);
                }
                Err(e) => {
                    stop.store(true, Ordering::Relaxed);
                    while rx.recv().is_ok() {}
                    return Err(e);
                }
            }
            while let Some(tile) = pending.remove(&next_stitch) {
                acc.add_tile(&grid.tiles[next_stitch], &tile)?;
                next_stitch += 1;
            }
        }
        if next_stitch != total {
            return Err(Error::dims("worker pool exited before finishing".to_string()));
        }
        Ok(())
    })?;

    let output = acc.finish()?;
    Ok(RestorationResult {
        schema_version: RESTORATION_RESULT_SCHEMA_VERSION,
        output,
        elapsed_seconds: start.elapsed().as_secs_f64().max(1e-9),
        estimated_peak_mb: estimated,
        tiles_processed: total,
        backend: config.backend.as_str().to_string(),
        report: None,
    })
}

/// One stored-capture job: which image to restore, with what backend, and
/// which extras to emit alongside it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureRequest {
    #[serde(default = "capture_request_version")]
    pub schema_version: u32,
    pub id: String,
    pub input_path: PathBuf,
    pub backend: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<f64>,
}

fn capture_request_version() -> u32 {
    CAPTURE_REQUEST_SCHEMA_VERSION
}

impl CaptureRequest {
    pub fn from_json(text: &str) -> Result<Self> {
        let request: CaptureRequest = serde_json::from_str(text)?;
        request.validate()?;
        Ok(request)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CAPTURE_REQUEST_SCHEMA_VERSION {
            return Err(Error::param(format!(
                "unsupported request schema version {}",
                self.schema_version
            )));
        }
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|ch| ch.is_ascii_alphanumeric() || ch == '-' || ch == '_')
        {
            return Err(Error::param(
                "request id must be non-empty [A-Za-z0-9_-]",
            ));
        }
        Ok(())
    }
}

/// Execute one capture request end to end and store the artifacts.
///
/// Writes the restored image, the `RestorationResult` JSON, and (when the
/// request asks for edges) the binary edge map. Filenames are
/// `{id}_{hash8}` with the hash taken over the encoded restored image, so
/// identical requests land on identical names. Returns the stored paths.
pub fn run_capture_chain(
    request: &CaptureRequest,
    config: &PipelineConfig,
    assets: &BackendAssets,
    store_dir: &Path,
) -> Result<Vec<PathBuf>> {
    request.validate()?;
    std::fs::create_dir_all(store_dir)?;
    let input = raster::load_raster(&request.input_path)?;

    let mut config = config.clone();
    config.backend = request.backend;
    let mut result = restore(&input, &config, assets)?;

    if let Some(reference_path) = &request.reference_path {
        let reference = raster::load_raster(reference_path)?;
        result.report = Some(QualityReport::new(
            Some(ssim(&result.output, &reference)?),
            Some(psnr(&result.output, &reference)?),
            None,
            None,
        )?);
    }

    let staging = store_dir.join(format!(".{}.incoming.png", request.id));
    raster::save_raster(&result.output, &staging)?;
    let encoded = std::fs::read(&staging)?;
    let digest = Sha256::digest(&encoded);
    let tag: String = digest[..4].iter().map(|b| format!("{b:02x}")).collect();

    let image_path = store_dir.join(format!("{}_{}.png", request.id, tag));
    std::fs::rename(&staging, &image_path)?;
    let mut stored = vec![image_path];

    let json_path = store_dir.join(format!("{}_{}.json", request.id, tag));
    std::fs::write(&json_path, serde_json::to_string_pretty(&result)? + "\n")?;
    stored.push(json_path);

    if let Some(threshold) = request.edges {
        let map = sobel_edges(&result.output, threshold)?;
        let edge_path = store_dir.join(format!("{}_{}_edges.png", request.id, tag));
        raster::save_raster(&map.to_image(), &edge_path)?;
        stored.push(edge_path);
    }
    Ok(stored)
}
