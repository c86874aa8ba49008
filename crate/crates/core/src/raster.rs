//! Planar float raster images, file I/O, and tiling.
//!
//! Images are stored channel-planar (`c * h * w` floats, nominal range
//! `[0, 1]`). All toolkit modules operate on [`RasterImage`]; conversions to
//! and from 8-bit sample formats happen only at file boundaries.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Capture geometry of the reference sensor this toolkit is sized for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub width_px: u32,
    pub height_px: u32,
    /// Ground sampling distance at the near edge of the swath, metres.
    pub gsd_min_m: f64,
    /// Ground sampling distance at the far edge of the swath, metres.
    pub gsd_max_m: f64,
    /// Whether frames arrive already quantized by an onboard JPEG stage.
    pub jpeg_at_origin: bool,
}

impl Default for SensorSpec {
    fn default() -> Self {
        SensorSpec {
            width_px: 2048,
            height_px: 1536,
            gsd_min_m: 37.5,
            gsd_max_m: 41.0,
            jpeg_at_origin: true,
        }
    }
}

impl SensorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::param("sensor dimensions must be positive"));
        }
        if !(self.gsd_min_m > 0.0 && self.gsd_min_m < self.gsd_max_m) {
            return Err(Error::param("require 0 < gsd_min_m < gsd_max_m"));
        }
        Ok(())
    }
}

/// A planar floating-point image. `data` holds `channels` planes of
/// `height * width` samples each, rows contiguous within a plane.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    /// Bit depth of the source samples (8 for files, 32 for synthetic data).
    pub bit_depth_origin: u8,
}

impl RasterImage {
    /// Zero-filled image. `channels` must be 1 or 3.
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::param("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::param(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        Ok(RasterImage {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            bit_depth_origin: 32,
        })
    }

    pub fn from_planes(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let mut img = RasterImage::new(width, height, channels)?;
        if data.len() != img.data.len() {
            return Err(Error::dims(format!(
                "plane data has {} samples, expected {}",
                data.len(),
                img.data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("image data contains NaN or infinity"));
        }
        img.data = data;
        Ok(img)
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn view(&self, c: usize) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.height, self.width), self.channel(c))
            .expect("plane length matches image dimensions")
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        let sum: f64 = self.data.iter().map(|&v| v as f64).sum();
        sum / self.data.len() as f64
    }

    /// Luminance plane: the single channel as-is for grayscale, the
    /// 0.299/0.587/0.114 weighting for RGB.
    pub fn luminance(&self) -> Vec<f32> {
        match self.channels {
            1 => self.channel(0).to_vec(),
            _ => {
                let (r, g, b) = (self.channel(0), self.channel(1), self.channel(2));
                r.iter()
                    .zip(g)
                    .zip(b)
                    .map(|((&r, &g), &b)| 0.299 * r + 0.587 * g + 0.114 * b)
                    .collect()
            }
        }
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn crop(&self, rect: &TileRect) -> Result<RasterImage> {
        if rect.x + rect.width > self.width || rect.y + rect.height > self.height {
            return Err(Error::dims(format!(
                "crop {}x{}+{}+{} exceeds image {}x{}",
                rect.width, rect.height, rect.x, rect.y, self.width, self.height
            )));
        }
        let mut out = RasterImage::new(rect.width, rect.height, self.channels)?;
        out.bit_depth_origin = self.bit_depth_origin;
        for c in 0..self.channels {
            for y in 0..rect.height {
                let src = (c * self.height + rect.y + y) * self.width + rect.x;
                let dst = (c * rect.height + y) * rect.width;
                out.data[dst..dst + rect.width]
                    .copy_from_slice(&self.data[src..src + rect.width]);
            }
        }
        Ok(out)
    }
}

/// Grow an image by `margin` pixels on every side, filling the new border by
/// half-sample mirror reflection. The result matches what reflect-boundary
/// filters assume lies outside the frame.
pub fn reflect_pad(img: &RasterImage, margin: usize) -> Result<RasterImage> {
    let (w, h) = (img.width + 2 * margin, img.height + 2 * margin);
    let mut out = RasterImage::new(w, h, img.channels)?;
    out.bit_depth_origin = img.bit_depth_origin;
    for c in 0..img.channels {
        let src = img.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            let sy = reflect_index(y as isize - margin as isize, img.height);
            for x in 0..w {
                let sx = reflect_index(x as isize - margin as isize, img.width);
                dst[y * w + x] = src[sy * img.width + sx];
            }
        }
    }
    Ok(out)
}

/// Half-sample symmetric reflection: `-1` maps to `0`, `n` maps to `n - 1`.
#[inline]
pub(crate) fn reflect_index(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

fn u8_to_f32(v: u8) -> f32 {
    v as f32 / 255.0
}

fn f32_to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Load a PPM (P6), PGM (P5), or 8-bit PNG image by file extension.
pub fn load_raster(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    match extension_of(path)?.as_str() {
        "ppm" | "pgm" => load_pnm(path),
        "png" => load_png(path),
        other => Err(Error::format(format!("unsupported image extension .{other}"))),
    }
}

/// Save to PPM, PGM, or PNG by file extension. PPM requires 3 channels and
/// PGM requires 1; PNG accepts either.
pub fn save_raster(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match extension_of(path)?.as_str() {
        "ppm" => save_pnm(img, path, 3),
        "pgm" => save_pnm(img, path, 1),
        "png" => save_png(img, path),
        other => Err(Error::format(format!("unsupported image extension .{other}"))),
    }
}

fn extension_of(path: &Path) -> Result<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .ok_or_else(|| Error::format(format!("{} has no file extension", path.display())))
}

fn load_pnm(path: &Path) -> Result<RasterImage> {
    let mut reader = BufReader::new(File::open(path)?);
    let magic = read_pnm_token(&mut reader)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::format(format!("bad PNM magic {other:?}"))),
    };
    let width: usize = parse_pnm_number(&read_pnm_token(&mut reader)?)?;
    let height: usize = parse_pnm_number(&read_pnm_token(&mut reader)?)?;
    let maxval: usize = parse_pnm_number(&read_pnm_token(&mut reader)?)?;
    if width == 0 || height == 0 {
        return Err(Error::format("PNM header declares zero dimensions"));
    }
    if maxval != 255 {
        return Err(Error::format(format!(
            "only 8-bit PNM supported, maxval was {maxval}"
        )));
    }
    let mut samples = vec![0u8; width * height * channels];
    reader.read_exact(&mut samples).map_err(|_| {
        Error::format("PNM payload truncated before width*height samples")
    })?;

    let mut img = RasterImage::new(width, height, channels)?;
    img.bit_depth_origin = 8;
    // File order is interleaved; storage is planar.
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let v = samples[(y * width + x) * channels + c];
                img.set(c, y, x, u8_to_f32(v));
            }
        }
    }
    Ok(img)
}

/// Read one whitespace-delimited PNM header token, skipping `#` comments.
fn read_pnm_token(reader: &mut impl BufRead) -> Result<String> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    loop {
        if reader.read(&mut byte)? == 0 {
            if token.is_empty() {
                return Err(Error::format("PNM header truncated"));
            }
            return Ok(token);
        }
        let ch = byte[0];
        if ch == b'#' && token.is_empty() {
            // Comment runs to end of line.
            let mut skipped = Vec::new();
            reader.read_until(b'\n', &mut skipped)?;
            continue;
        }
        if ch.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(ch as char);
    }
}

fn parse_pnm_number(token: &str) -> Result<usize> {
    token
        .parse::<usize>()
        .map_err(|_| Error::format(format!("bad PNM header field {token:?}")))
}

fn save_pnm(img: &RasterImage, path: &Path, channels: usize) -> Result<()> {
    if img.channels != channels {
        return Err(Error::dims(format!(
            "{} wants {channels} channel(s), image has {}",
            path.display(),
            img.channels
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    let magic = if channels == 3 { "P6" } else { "P5" };
    write!(w, "{magic}\n{} {}\n255\n", img.width, img.height)?;
    let mut row = vec![0u8; img.width * channels];
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..channels {
                row[x * channels + c] = f32_to_u8(img.at(c, y, x));
            }
        }
        w.write_all(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn load_png(path: &Path) -> Result<RasterImage> {
    let decoded = image::open(path)
        .map_err(|e| Error::format(format!("PNG decode failed: {e}")))?;
    use image::DynamicImage::*;
    let (width, height, channels, samples): (usize, usize, usize, Vec<u8>) = match decoded {
        ImageLuma8(g) => (g.width() as usize, g.height() as usize, 1, g.into_raw()),
        ImageRgb8(rgb) => (rgb.width() as usize, rgb.height() as usize, 3, rgb.into_raw()),
        ImageLumaA8(ga) => {
            let g = image::DynamicImage::ImageLumaA8(ga).to_luma8();
            (g.width() as usize, g.height() as usize, 1, g.into_raw())
        }
        ImageRgba8(rgba) => {
            let rgb = image::DynamicImage::ImageRgba8(rgba).to_rgb8();
            (rgb.width() as usize, rgb.height() as usize, 3, rgb.into_raw())
        }
        _ => return Err(Error::format("only 8-bit PNG images are supported")),
    };
    let mut img = RasterImage::new(width, height, channels)?;
    img.bit_depth_origin = 8;
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                img.set(c, y, x, u8_to_f32(samples[(y * width + x) * channels + c]));
            }
        }
    }
    Ok(img)
}

fn save_png(img: &RasterImage, path: &Path) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    let result = if img.channels == 1 {
        let buf: Vec<u8> = img.channel(0).iter().map(|&v| f32_to_u8(v)).collect();
        image::GrayImage::from_raw(w, h, buf)
            .expect("buffer sized from image dimensions")
            .save(path)
    } else {
        let mut buf = vec![0u8; img.width * img.height * 3];
        for y in 0..img.height {
            for x in 0..img.width {
                for c in 0..3 {
                    buf[(y * img.width + x) * 3 + c] = f32_to_u8(img.at(c, y, x));
                }
            }
        }
        image::RgbImage::from_raw(w, h, buf)
            .expect("buffer sized from image dimensions")
            .save(path)
    };
    result.map_err(|e| Error::format(format!("PNG encode failed: {e}")))
}

// ---------------------------------------------------------------------------
// Scaling and patch extraction
// ---------------------------------------------------------------------------

/// Area-average downscale by an integer factor. Both dimensions must be
/// divisible by `factor`; the global mean is preserved.
pub fn downscale(img: &RasterImage, factor: usize) -> Result<RasterImage> {
    if factor == 0 {
        return Err(Error::param("downscale factor must be positive"));
    }
    if img.width % factor != 0 || img.height % factor != 0 {
        return Err(Error::dims(format!(
            "{}x{} not divisible by downscale factor {factor}",
            img.width, img.height
        )));
    }
    let (ow, oh) = (img.width / factor, img.height / factor);
    let mut out = RasterImage::new(ow, oh, img.channels)?;
    out.bit_depth_origin = img.bit_depth_origin;
    let inv = 1.0 / (factor * factor) as f64;
    for c in 0..img.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += img.at(c, oy * factor + dy, ox * factor + dx) as f64;
                    }
                }
                out.set(c, oy, ox, (acc * inv) as f32);
            }
        }
    }
    Ok(out)
}

/// Bilinear upscale by an integer factor, sampling at pixel centers so that
/// `upscale` is the approximate right inverse of [`downscale`].
pub fn upscale(img: &RasterImage, factor: usize) -> Result<RasterImage> {
    if factor == 0 {
        return Err(Error::param("upscale factor must be positive"));
    }
    let (ow, oh) = (img.width * factor, img.height * factor);
    let mut out = RasterImage::new(ow, oh, img.channels)?;
    out.bit_depth_origin = img.bit_depth_origin;
    let f = factor as f32;
    for c in 0..img.channels {
        for oy in 0..oh {
            let sy = ((oy as f32 + 0.5) / f - 0.5).clamp(0.0, (img.height - 1) as f32);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(img.height - 1);
            let fy = sy - y0 as f32;
            for ox in 0..ow {
                let sx = ((ox as f32 + 0.5) / f - 0.5).clamp(0.0, (img.width - 1) as f32);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(img.width - 1);
                let fx = sx - x0 as f32;
                let v = (1.0 - fy) * (1.0 - fx) * img.at(c, y0, x0)
                    + (1.0 - fy) * fx * img.at(c, y0, x1)
                    + fy * (1.0 - fx) * img.at(c, y1, x0)
                    + fy * fx * img.at(c, y1, x1);
                out.set(c, oy, ox, v);
            }
        }
    }
    Ok(out)
}

/// All fully-interior `patch_size` square patches at the given stride, in
/// row-major order. Yields `((h-p)/s + 1) * ((w-p)/s + 1)` patches.
pub fn extract_patches(
    img: &RasterImage,
    patch_size: usize,
    stride: usize,
) -> Result<Vec<RasterImage>> {
    if patch_size == 0 || stride == 0 {
        return Err(Error::param("patch_size and stride must be positive"));
    }
    if patch_size > img.width || patch_size > img.height {
        return Err(Error::dims(format!(
            "patch {patch_size} exceeds image {}x{}",
            img.width, img.height
        )));
    }
    let mut patches = Vec::new();
    let mut y = 0;
    while y + patch_size <= img.height {
        let mut x = 0;
        while x + patch_size <= img.width {
            patches.push(img.crop(&TileRect {
                x,
                y,
                width: patch_size,
                height: patch_size,
            })?);
            x += stride;
        }
        y += stride;
    }
    Ok(patches)
}

// ---------------------------------------------------------------------------
// Tiling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// A tiling plan over one image: tile rectangles in row-major order, interior
/// neighbours sharing exactly `overlap` pixels, edge tiles clamped to the
/// image bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileGrid {
    pub schema_version: u32,
    pub image_width: usize,
    pub image_height: usize,
    pub tile_size: usize,
    pub overlap: usize,
    pub tiles: Vec<TileRect>,
}

pub const TILE_GRID_SCHEMA_VERSION: u32 = 1;

/// Starting offsets along one axis, plus the clamped extent of each tile.
fn axis_segments(extent: usize, tile: usize, overlap: usize) -> Vec<(usize, usize)> {
    let stride = tile - overlap;
    let mut segments = Vec::new();
    let mut pos = 0;
    loop {
        segments.push((pos, tile.min(extent - pos)));
        if pos + tile >= extent {
            return segments;
        }
        pos += stride;
    }
}

pub fn plan_tiles(
    width: usize,
    height: usize,
    tile_size: usize,
    overlap: usize,
) -> Result<TileGrid> {
    if width == 0 || height == 0 {
        return Err(Error::param("image dimensions must be positive"));
    }
    if tile_size == 0 || overlap >= tile_size {
        return Err(Error::param(format!(
            "require 0 <= overlap < tile_size, got tile {tile_size} overlap {overlap}"
        )));
    }
    let rows = axis_segments(height, tile_size, overlap);
    let cols = axis_segments(width, tile_size, overlap);
    let mut tiles = Vec::with_capacity(rows.len() * cols.len());
    for &(y, h) in &rows {
        for &(x, w) in &cols {
            tiles.push(TileRect {
                x,
                y,
                width: w,
                height: h,
            });
        }
    }
    Ok(TileGrid {
        schema_version: TILE_GRID_SCHEMA_VERSION,
        image_width: width,
        image_height: height,
        tile_size,
        overlap,
        tiles,
    })
}

impl TileGrid {
    /// Number of tile columns in the plan.
    pub fn cols(&self) -> usize {
        self.tiles.iter().filter(|t| t.y == 0).count()
    }

    pub fn rows(&self) -> usize {
        self.tiles.len() / self.cols().max(1)
    }

    /// Check coverage and overlap bookkeeping; used by tests and debug dumps.
    pub fn validate(&self) -> Result<()> {
        let mut covered = vec![false; self.image_width * self.image_height];
        for t in &self.tiles {
            if t.x + t.width > self.image_width || t.y + t.height > self.image_height {
                return Err(Error::dims("tile exceeds image bounds".to_string()));
            }
            for y in t.y..t.y + t.height {
                for x in t.x..t.x + t.width {
                    covered[y * self.image_width + x] = true;
                }
            }
        }
        if covered.iter().any(|&c| !c) {
            return Err(Error::dims("tile union does not cover the image".to_string()));
        }
        Ok(())
    }
}

/// Blend weight profile along one axis of a tile. Raised-cosine ramps span
/// the shared band with each in-image neighbour; borders that coincide with
/// the image edge stay at full weight.
fn axis_weights(start: usize, len: usize, extent: usize, overlap: usize) -> Vec<f32> {
    let mut w = vec![1.0f32; len];
    let ramp = overlap.min(len);
    if ramp == 0 {
        return w;
    }
    let denom = 2.0 * ramp as f32;
    if start > 0 {
        for i in 0..ramp {
            let s = (std::f32::consts::PI * (i as f32 + 0.5) / denom).sin();
            w[i] *= s * s;
        }
    }
    if start + len < extent {
        for i in 0..ramp {
            let s = (std::f32::consts::PI * (i as f32 + 0.5) / denom).sin();
            w[len - 1 - i] *= s * s;
        }
    }
    w
}

/// Reassemble processed tiles into a full image. Overlapping samples blend
/// under raised-cosine weights that sum to one across shared bands, so
/// stitching unprocessed crops reproduces the source image.
pub fn stitch(grid: &TileGrid, tiles: &[RasterImage]) -> Result<RasterImage> {
    if tiles.len() != grid.tiles.len() {
        return Err(Error::dims(format!(
            "{} tiles supplied for a plan of {}",
            tiles.len(),
            grid.tiles.len()
        )));
    }
    let channels = tiles
        .first()
        .map(|t| t.channels)
        .ok_or_else(|| Error::dims("empty tile plan".to_string()))?;

    let mut acc = StitchAccumulator::new(grid, channels)?;
    for (rect, tile) in grid.tiles.iter().zip(tiles) {
        acc.add_tile(rect, tile)?;
    }
    acc.finish()
}

/// Incremental stitcher used by both [`stitch`] and the tiled pipeline.
///
/// Normalization weights are not accumulated per pixel. The planned grid is
/// a row-by-column product, so the total weight at any pixel factors into
/// one sum per axis; those two short vectors are precomputed from the plan
/// and the only full-image state is the weighted sum planes themselves.
pub struct StitchAccumulator {
    width: usize,
    height: usize,
    channels: usize,
    overlap: usize,
    sum: Vec<f32>,
    col_total: Vec<f32>,
    row_total: Vec<f32>,
}

impl StitchAccumulator {
    pub fn new(grid: &TileGrid, channels: usize) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::param("channels must be 1 or 3"));
        }
        let mut col_total = vec![0.0f32; grid.image_width];
        let mut row_total = vec![0.0f32; grid.image_height];
        let col_segments: BTreeSet<(usize, usize)> =
            grid.tiles.iter().map(|t| (t.x, t.width)).collect();
        let row_segments: BTreeSet<(usize, usize)> =
            grid.tiles.iter().map(|t| (t.y, t.height)).collect();
        for (x, w) in col_segments {
            for (i, v) in axis_weights(x, w, grid.image_width, grid.overlap)
                .into_iter()
                .enumerate()
            {
                col_total[x + i] += v;
            }
        }
        for (y, h) in row_segments {
            for (i, v) in axis_weights(y, h, grid.image_height, grid.overlap)
                .into_iter()
                .enumerate()
            {
                row_total[y + i] += v;
            }
        }
        Ok(StitchAccumulator {
            width: grid.image_width,
            height: grid.image_height,
            channels,
            overlap: grid.overlap,
            sum: vec![0.0; grid.image_width * grid.image_height * channels],
            col_total,
            row_total,
        })
    }

    pub fn add_tile(&mut self, rect: &TileRect, tile: &RasterImage) -> Result<()> {
        if tile.width != rect.width || tile.height != rect.height {
            return Err(Error::dims(format!(
                "tile is {}x{}, plan rectangle is {}x{}",
                tile.width, tile.height, rect.width, rect.height
            )));
        }
        if tile.channels != self.channels {
            return Err(Error::dims("tile channel count changed mid-stitch".to_string()));
        }
        let wx = axis_weights(rect.x, rect.width, self.width, self.overlap);
        let wy = axis_weights(rect.y, rect.height, self.height, self.overlap);
        for ty in 0..rect.height {
            let row = (rect.y + ty) * self.width + rect.x;
            for tx in 0..rect.width {
                let w = wy[ty] * wx[tx];
                for c in 0..self.channels {
                    self.sum[c * self.width * self.height + row + tx] +=
                        w * tile.at(c, ty, tx);
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<RasterImage> {
        if self.col_total.iter().any(|&w| w <= 0.0) || self.row_total.iter().any(|&w| w <= 0.0)
        {
            return Err(Error::dims(
                "stitch plan leaves uncovered pixels".to_string(),
            ));
        }
        let plane = self.width * self.height;
        let mut data = vec![0.0f32; plane * self.channels];
        for y in 0..self.height {
            for x in 0..self.width {
                let w = self.row_total[y] * self.col_total[x];
                for c in 0..self.channels {
                    data[c * plane + y * self.width + x] =
                        self.sum[c * plane + y * self.width + x] / w;
                }
            }
        }
        RasterImage::from_planes(self.width, self.height, self.channels, data)
    }
}
