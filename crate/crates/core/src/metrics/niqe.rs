//! No-reference quality scoring against a multivariate Gaussian fit of
//! pristine-image statistics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::metrics::luminance_plane;
use crate::metrics::nss::{mscn, nss_features, NSS_FEATURE_LEN};
use crate::raster::{extract_patches, RasterImage};

/// Patch side used both when fitting and when scoring.
pub const NIQE_PATCH_SIZE: usize = 96;
/// Fraction of patches kept at fit time, ranked by local contrast.
pub const NIQE_SHARPNESS_KEEP: f64 = 0.75;

const MAGIC: &[u8; 4] = b"NIQE";
const VERSION: u16 = 1;
const MIN_FIT_PATCHES: usize = 200;
const MIN_SCORE_PATCHES: usize = 4;

/// Multivariate Gaussian over the 36-element feature vector, estimated from
/// sharp training patches.
#[derive(Debug, Clone, PartialEq)]
pub struct NiqeModel {
    pub patch_size: u32,
    /// Fraction of fit patches retained after the contrast ranking.
    pub sharpness_percentile: f64,
    pub feature_mean: Vec<f64>,
    /// Row-major 36x36 covariance.
    pub feature_covariance: Vec<f64>,
}

impl NiqeModel {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 16 {
            return Err(Error::param("model patch size below 16"));
        }
        if !(self.sharpness_percentile > 0.0 && self.sharpness_percentile <= 1.0) {
            return Err(Error::param("sharpness fraction outside (0, 1]"));
        }
        let d = NSS_FEATURE_LEN;
        if self.feature_mean.len() != d || self.feature_covariance.len() != d * d {
            return Err(Error::format(format!(
                "model dimensions {}/{} do not match the {d}-element feature vector",
                self.feature_mean.len(),
                self.feature_covariance.len()
            )));
        }
        if self
            .feature_mean
            .iter()
            .chain(&self.feature_covariance)
            .any(|v| !v.is_finite())
        {
            return Err(Error::format("model carries non-finite values".to_string()));
        }
        for i in 0..d {
            if self.feature_covariance[i * d + i] < 0.0 {
                return Err(Error::format(
                    "covariance diagonal must be non-negative".to_string(),
                ));
            }
            for j in 0..i {
                let a = self.feature_covariance[i * d + j];
                let b = self.feature_covariance[j * d + i];
                if (a - b).abs() > 1e-9 {
                    return Err(Error::format(format!(
                        "covariance asymmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&self.patch_size.to_le_bytes())?;
        out.write_all(&self.sharpness_percentile.to_le_bytes())?;
        for v in self.feature_mean.iter().chain(&self.feature_covariance) {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::format(format!("bad model magic {:02x?}", magic)));
        }
        let mut u16buf = [0u8; 2];
        input.read_exact(&mut u16buf).map_err(truncated)?;
        let version = u16::from_le_bytes(u16buf);
        if version != VERSION {
            return Err(Error::format(format!(
                "unsupported model version {version}"
            )));
        }
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf).map_err(truncated)?;
        let patch_size = u32::from_le_bytes(u32buf);
        let mut f64buf = [0u8; 8];
        input.read_exact(&mut f64buf).map_err(truncated)?;
        let sharpness_percentile = f64::from_le_bytes(f64buf);
        let mut read_block = |count: usize| -> Result<Vec<f64>> {
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                let mut buf = [0u8; 8];
                input.read_exact(&mut buf).map_err(truncated)?;
                values.push(f64::from_le_bytes(buf));
            }
            Ok(values)
        };
        let feature_mean = read_block(NSS_FEATURE_LEN)?;
        let feature_covariance = read_block(NSS_FEATURE_LEN * NSS_FEATURE_LEN)?;
        let model = NiqeModel {
            patch_size,
            sharpness_percentile,
            feature_mean,
            feature_covariance,
        };
        model.validate()?;
        Ok(model)
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("model file is truncated".to_string())
    } else {
        Error::Io(e)
    }
}

/// Mean local contrast of a patch, used to rank fit-time patches.
fn patch_sharpness(patch: &RasterImage) -> Result<f64> {
    let (_, sigma) = mscn(&luminance_plane(patch))?;
    Ok(sigma.iter().sum::<f64>() / sigma.len() as f64)
}

fn linear_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn mean_and_covariance(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len();
    let d = NSS_FEATURE_LEN;
    let mut mean = vec![0.0; d];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    for row in rows {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (row[j] - mean[j]) / denom;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i * d + j] = cov[j * d + i];
        }
    }
    (mean, cov)
}

/// Fit the pristine-statistics Gaussian from a corpus of sharp images.
///
/// Each image is cut into non-overlapping `NIQE_PATCH_SIZE` patches; the
/// sharpest three quarters (by mean local contrast) are kept, and at least
/// 200 patches must survive for the covariance to be trustworthy.
pub fn niqe_fit(corpus: &[RasterImage]) -> Result<NiqeModel> {
    if corpus.is_empty() {
        return Err(Error::param("empty fit corpus"));
    }
    let mut sharpness = Vec::new();
    let mut features = Vec::new();
    for img in corpus {
        for patch in extract_patches(img, NIQE_PATCH_SIZE, NIQE_PATCH_SIZE)? {
            sharpness.push(patch_sharpness(&patch)?);
            features.push(nss_features(&patch)?);
        }
    }
    if sharpness.is_empty() {
        return Err(Error::param(format!(
            "fit corpus produced no {NIQE_PATCH_SIZE}x{NIQE_PATCH_SIZE} patches"
        )));
    }
    let mut sorted = sharpness.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let threshold = linear_quantile(&sorted, 1.0 - NIQE_SHARPNESS_KEEP);
    let selected: Vec<Vec<f64>> = features
        .into_iter()
        .zip(&sharpness)
        .filter(|(_, &s)| s >= threshold)
        .map(|(f, _)| f)
        .collect();
    if selected.len() < MIN_FIT_PATCHES {
        return Err(Error::param(format!(
            "only {} sharp patches selected, need at least {MIN_FIT_PATCHES}",
            selected.len()
        )));
    }
    let (feature_mean, feature_covariance) = mean_and_covariance(&selected);
    let model = NiqeModel {
        patch_size: NIQE_PATCH_SIZE as u32,
        sharpness_percentile: NIQE_SHARPNESS_KEEP,
        feature_mean,
        feature_covariance,
    };
    model.validate()?;
    Ok(model)
}

/// Score an image against a fitted model; lower means closer to pristine
/// statistics.
///
/// All non-overlapping patches participate (no sharpness screening), though
/// patches whose statistics are degenerate, such as flat sky, are skipped. At
/// least four usable patches are required.
pub fn niqe_score(img: &RasterImage, model: &NiqeModel) -> Result<f64> {
    model.validate()?;
    let size = model.patch_size as usize;
    if img.width < size || img.height < size {
        return Err(Error::dims(format!(
            "image {}x{} smaller than the {size} scoring patch",
            img.width, img.height
        )));
    }
    let mut rows = Vec::new();
    for patch in extract_patches(img, size, size)? {
        match nss_features(&patch) {
            Ok(f) => rows.push(f),
            Err(Error::InvalidParam(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if rows.len() < MIN_SCORE_PATCHES {
        return Err(Error::param(format!(
            "{} usable patches, need at least {MIN_SCORE_PATCHES}",
            rows.len()
        )));
    }
    let (mean, cov) = mean_and_covariance(&rows);
    let d = NSS_FEATURE_LEN;

    let diff = DVector::from_iterator(
        d,
        model.feature_mean.iter().zip(&mean).map(|(a, b)| a - b),
    );
    let pooled = DMatrix::from_row_slice(d, d, &model.feature_covariance)
        .zip_map(&DMatrix::from_row_slice(d, d, &cov), |a, b| 0.5 * (a + b));
    let solved = match pooled.clone().try_inverse() {
        Some(inv) => inv * &diff,
        None => {
            pooled
                .pseudo_inverse(1e-12)
                .map_err(|e| Error::format(format!("covariance pooling failed: {e}")))?
                * &diff
        }
    };
    Ok(diff.dot(&solved).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{convolve, disk_kernel, shot_noise, ConvPath};
    use crate::synth;

    fn fit_corpus() -> Vec<RasterImage> {
        // 12 scenes x 25 patches leaves just over 200 after the sharpness cut.
        (0..12)
            .map(|k| synth::landscape(480, 480, 1, 900 + k).unwrap())
            .collect()
    }

    fn shared_model() -> &'static NiqeModel {
        static MODEL: std::sync::OnceLock<NiqeModel> = std::sync::OnceLock::new();
        MODEL.get_or_init(|| niqe_fit(&fit_corpus()).unwrap())
    }

    #[test]
    fn fit_produces_a_symmetric_positive_model() {
        let model = shared_model();
        assert_eq!(model.feature_mean.len(), NSS_FEATURE_LEN);
        model.validate().unwrap();
        let d = NSS_FEATURE_LEN;
        let cov = DMatrix::from_row_slice(d, d, &model.feature_covariance);
        let min_eig = cov
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        assert!(min_eig >= -1e-9, "covariance not PSD: {min_eig}");
    }

    #[test]
    fn fitting_twice_gives_an_identical_model() {
        let a = niqe_fit(&fit_corpus()).unwrap();
        let b = niqe_fit(&fit_corpus()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn disjoint_corpus_halves_agree_on_the_mean() {
        let first: Vec<RasterImage> = (0..11)
            .map(|k| synth::landscape(480, 480, 1, 1200 + k).unwrap())
            .collect();
        let second: Vec<RasterImage> = (0..11)
            .map(|k| synth::landscape(480, 480, 1, 1300 + k).unwrap())
            .collect();
        let a = niqe_fit(&first).unwrap();
        let b = niqe_fit(&second).unwrap();
        let dist: f64 = a
            .feature_mean
            .iter()
            .zip(&b.feature_mean)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 0.2, "split-half mean distance {dist}");
    }

    #[test]
    fn undersized_corpus_is_rejected() {
        // Two 480x480 scenes yield 50 patches, far short of the minimum.
        let corpus: Vec<RasterImage> = (0..2)
            .map(|k| synth::landscape(480, 480, 1, 950 + k).unwrap())
            .collect();
        let err = niqe_fit(&corpus).unwrap_err();
        assert!(err.to_string().contains("patches"), "{err}");
        assert!(niqe_fit(&[]).is_err());
    }

    #[test]
    fn blur_and_noise_raise_the_score() {
        let model = shared_model();
        let mut sharp_total = 0.0;
        let mut degraded_total = 0.0;
        for seed in 0..3u64 {
            let scene = synth::landscape(384, 384, 1, 700 + seed).unwrap();
            let blurred =
                convolve(&scene, &disk_kernel(5.0, 4).unwrap(), ConvPath::Fft).unwrap();
            let degraded = shot_noise(&blurred, 1500.0, seed).unwrap();
            sharp_total += niqe_score(&scene, model).unwrap();
            degraded_total += niqe_score(&degraded, model).unwrap();
        }
        assert!(
            degraded_total > sharp_total,
            "degraded {degraded_total} !> sharp {sharp_total}"
        );
    }

    #[test]
    fn scoring_is_deterministic() {
        let model = shared_model();
        let scene = synth::landscape(288, 288, 1, 711).unwrap();
        assert_eq!(
            niqe_score(&scene, model).unwrap(),
            niqe_score(&scene, model).unwrap()
        );
    }

    #[test]
    fn small_images_cannot_be_scored() {
        let model = shared_model();
        let tiny = synth::landscape(64, 64, 1, 712).unwrap();
        assert!(niqe_score(&tiny, model).is_err());
        // A single patch is too few even when the image fits the patch.
        let narrow = synth::landscape(96, 96, 1, 713).unwrap();
        assert!(niqe_score(&narrow, model).is_err());
    }

    #[test]
    fn model_round_trips_through_disk() {
        let model = shared_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pristine.niqe");
        model.save(&path).unwrap();
        let back = NiqeModel::load(&path).unwrap();
        assert_eq!(&back, model);
    }

    #[test]
    fn corrupted_model_files_are_rejected() {
        let model = shared_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pristine.niqe");
        model.save(&path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let short = dir.path().join("short.niqe");
        std::fs::write(&short, &bytes[..bytes.len() / 2]).unwrap();
        let err = NiqeModel::load(&short).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        let bad_magic = dir.path().join("magic.niqe");
        std::fs::write(&bad_magic, &wrong).unwrap();
        assert!(NiqeModel::load(&bad_magic).is_err());
    }
}
