//! Image quality measurement: full-reference PSNR and SSIM, natural-scene
//! statistics with NIQE and BRISQUE scoring, and Sobel edge maps for
//! delineation checks.

mod brisque;
mod nss;
mod niqe;

pub use brisque::{brisque_score, BrisqueModel};
pub use niqe::{niqe_fit, niqe_score, NiqeModel, NIQE_PATCH_SIZE, NIQE_SHARPNESS_KEEP};
pub use nss::{aggd_fit, mscn, nss_features, AggdFit, NSS_FEATURE_LEN};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{reflect_index, RasterImage};

/// Normalized 1-D Gaussian filter taps.
pub(crate) fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut win: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = win.iter().sum();
    for w in &mut win {
        *w /= sum;
    }
    win
}

/// Separable filtering with reflected boundaries; output matches input size.
pub(crate) fn filter_reflect(plane: &Array2<f64>, window: &[f64]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let r = (window.len() / 2) as isize;
    let mut rows = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (k, &wk) in window.iter().enumerate() {
                let sx = reflect_index(x + k as isize - r, w);
                acc += wk * plane[[y, sx]];
            }
            rows[[y, x as usize]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &wk) in window.iter().enumerate() {
                let sy = reflect_index(y + k as isize - r, h);
                acc += wk * rows[[sy, x]];
            }
            out[[y as usize, x]] = acc;
        }
    }
    out
}

/// Separable filtering keeping only the fully-covered interior
/// (`h - size + 1` by `w - size + 1`).
fn filter_valid(plane: &Array2<f64>, window: &[f64]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let size = window.len();
    let mut rows = Array2::zeros((h, w - size + 1));
    for y in 0..h {
        for x in 0..w - size + 1 {
            let mut acc = 0.0;
            for (k, &wk) in window.iter().enumerate() {
                acc += wk * plane[[y, x + k]];
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h - size + 1, w - size + 1));
    for y in 0..h - size + 1 {
        for x in 0..w - size + 1 {
            let mut acc = 0.0;
            for (k, &wk) in window.iter().enumerate() {
                acc += wk * rows[[y + k, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

pub(crate) fn luminance_plane(img: &RasterImage) -> Array2<f64> {
    Array2::from_shape_vec(
        (img.height, img.width),
        img.luminance().into_iter().map(|v| v as f64).collect(),
    )
    .expect("luminance length matches dimensions")
}

// ---------------------------------------------------------------------------
// Full-reference metrics
// ---------------------------------------------------------------------------

/// Peak signal-to-noise ratio in dB over all channels of a unit-range pair.
/// Identical images score positive infinity.
pub fn psnr(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(Error::dims("psnr operands differ in shape".to_string()));
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean structural similarity over an 11x11 Gaussian window
/// (sigma 1.5, K1 0.01, K2 0.03, unit dynamic range), computed on luminance
/// over the fully-covered interior.
pub fn ssim(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    const WINDOW: usize = 11;
    const C1: f64 = 1e-4; // (K1 * L)^2
    const C2: f64 = 9e-4; // (K2 * L)^2
    if a.width != b.width || a.height != b.height {
        return Err(Error::dims("ssim operands differ in shape".to_string()));
    }
    if a.width < WINDOW || a.height < WINDOW {
        return Err(Error::dims(format!(
            "ssim needs at least {WINDOW}x{WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let x = luminance_plane(a);
    let y = luminance_plane(b);
    let window = gaussian_window(WINDOW, 1.5);

    let mu_x = filter_valid(&x, &window);
    let mu_y = filter_valid(&y, &window);
    let xx = filter_valid(&(&x * &x), &window);
    let yy = filter_valid(&(&y * &y), &window);
    let xy = filter_valid(&(&x * &y), &window);

    let mut acc = 0.0;
    let mut count = 0usize;
    for ((((&mx, &my), &sxx), &syy), &sxy) in mu_x
        .iter()
        .zip(mu_y.iter())
        .zip(xx.iter())
        .zip(yy.iter())
        .zip(xy.iter())
    {
        let var_x = sxx - mx * mx;
        let var_y = syy - my * my;
        let cov = sxy - mx * my;
        let val = ((2.0 * mx * my + C1) * (2.0 * cov + C2))
            / ((mx * mx + my * my + C1) * (var_x + var_y + C2));
        acc += val;
        count += 1;
    }
    Ok(acc / count as f64)
}

// ---------------------------------------------------------------------------
// Edge map
// ---------------------------------------------------------------------------

/// Binary Sobel edge map of the luminance plane.
#[derive(Debug, Clone)]
pub struct EdgeMap {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    pub count: usize,
}

impl EdgeMap {
    /// Render as a black/white raster for export.
    pub fn to_image(&self) -> RasterImage {
        let data = self
            .mask
            .iter()
            .map(|&on| if on { 1.0 } else { 0.0 })
            .collect();
        RasterImage::from_planes(self.width, self.height, 1, data)
            .expect("mask dimensions are valid")
    }
}

/// Edge pixels where the Sobel gradient magnitude of the luminance plane
/// exceeds `threshold` (full-scale units, so a unit step registers 4).
pub fn sobel_edges(img: &RasterImage, threshold: f64) -> Result<EdgeMap> {
    if !(threshold.is_finite() && threshold >= 0.0) {
        return Err(Error::param("edge threshold must be non-negative"));
    }
    let plane = luminance_plane(img);
    let (h, w) = plane.dim();
    let mut mask = vec![false; h * w];
    let mut count = 0usize;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let sample = |dy: isize, dx: isize| -> f64 {
                plane[[reflect_index(y + dy, h), reflect_index(x + dx, w)]]
            };
            let gx = (sample(-1, 1) + 2.0 * sample(0, 1) + sample(1, 1))
                - (sample(-1, -1) + 2.0 * sample(0, -1) + sample(1, -1));
            let gy = (sample(1, -1) + 2.0 * sample(1, 0) + sample(1, 1))
                - (sample(-1, -1) + 2.0 * sample(-1, 0) + sample(-1, 1));
            if (gx * gx + gy * gy).sqrt() > threshold {
                mask[y as usize * w + x as usize] = true;
                count += 1;
            }
        }
    }
    Ok(EdgeMap {
        width: w,
        height: h,
        mask,
        count,
    })
}

// ---------------------------------------------------------------------------
// Quality report
// ---------------------------------------------------------------------------

/// Aggregated quality measurements for one image. At least one metric must be
/// present. PSNR serializes as the string `"inf"` for identical pairs, since
/// JSON has no infinity literal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub schema_version: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ssim: Option<f64>,
    #[serde(
        skip_serializing_if = "Option::is_none",
        default,
        with = "psnr_db_serde"
    )]
    pub psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub niqe: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub brisque: Option<f64>,
}

pub const QUALITY_REPORT_SCHEMA_VERSION: u32 = 1;

impl QualityReport {
    pub fn new(
        ssim: Option<f64>,
        psnr_db: Option<f64>,
        niqe: Option<f64>,
        brisque: Option<f64>,
    ) -> Result<Self> {
        if ssim.is_none() && psnr_db.is_none() && niqe.is_none() && brisque.is_none() {
            return Err(Error::param("quality report carries no metrics"));
        }
        Ok(QualityReport {
            schema_version: QUALITY_REPORT_SCHEMA_VERSION,
            ssim,
            psnr_db,
            niqe,
            brisque,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

mod psnr_db_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_infinite() => "inf".serialize(s),
            Some(x) => x.serialize(s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::Num(x)) => Ok(Some(x)),
            Some(Raw::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
            Some(Raw::Text(t)) => Err(serde::de::Error::custom(format!(
                "bad psnr value {t:?}"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{convolve, disk_kernel, ConvPath};
    use crate::synth;

    // ---- psnr ----

    #[test]
    fn identical_images_have_infinite_psnr() {
        let img = synth::landscape(32, 32, 3, 1).unwrap();
        assert_eq!(psnr(&img, &img).unwrap(), f64::INFINITY);
    }

    #[test]
    fn constant_offset_psnr_matches_closed_form() {
        let a = RasterImage::new(64, 64, 1).unwrap();
        let mut b = RasterImage::new(64, 64, 1).unwrap();
        b.data.fill(16.0 / 255.0);
        let db = psnr(&a, &b).unwrap();
        assert!((db - 24.0486).abs() < 0.01, "psnr {db}");
    }

    #[test]
    fn psnr_is_symmetric_and_shape_checked() {
        let a = synth::landscape(24, 24, 1, 2).unwrap();
        let b = synth::landscape(24, 24, 1, 3).unwrap();
        let ab = psnr(&a, &b).unwrap();
        let ba = psnr(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let c = RasterImage::new(23, 24, 1).unwrap();
        assert!(psnr(&a, &c).is_err());
    }

    // ---- ssim ----

    #[test]
    fn self_similarity_is_exactly_one() {
        let img = synth::landscape(48, 48, 3, 5).unwrap();
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = synth::landscape(48, 48, 1, 6).unwrap();
        let b = convolve(&a, &disk_kernel(2.0, 4).unwrap(), ConvPath::Fft).unwrap();
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn heavier_blur_scores_lower() {
        let img = synth::landscape(96, 96, 1, 7).unwrap();
        let mild = convolve(&img, &disk_kernel(2.0, 4).unwrap(), ConvPath::Fft).unwrap();
        let heavy = convolve(&img, &disk_kernel(5.0, 4).unwrap(), ConvPath::Fft).unwrap();
        let s_mild = ssim(&img, &mild).unwrap();
        let s_heavy = ssim(&img, &heavy).unwrap();
        assert!(s_mild < 1.0);
        assert!(s_heavy < s_mild, "{s_heavy} !< {s_mild}");
    }

    #[test]
    fn structural_inversion_scores_negative() {
        let n = 33usize;
        let mut a = RasterImage::new(n, n, 1).unwrap();
        for y in 0..n {
            for x in 0..n {
                a.set(0, y, x, ((x + y) % 2) as f32);
            }
        }
        let inv_data: Vec<f32> = a.data.iter().map(|v| 1.0 - v).collect();
        let b = RasterImage::from_planes(n, n, 1, inv_data).unwrap();
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.0, "ssim {s}");
    }

    #[test]
    fn tiny_images_are_rejected() {
        let img = RasterImage::new(10, 10, 1).unwrap();
        assert!(ssim(&img, &img).is_err());
    }

    // ---- sobel ----

    #[test]
    fn vertical_unit_step_registers_magnitude_four() {
        let n = 16usize;
        let mut img = RasterImage::new(n, n, 1).unwrap();
        for y in 0..n {
            for x in n / 2..n {
                img.set(0, y, x, 1.0);
            }
        }
        let edges = sobel_edges(&img, 3.9).unwrap();
        // Exactly the two columns flanking the step fire, every row.
        assert_eq!(edges.count, 2 * n);
        for y in 0..n {
            assert!(edges.mask[y * n + n / 2 - 1]);
            assert!(edges.mask[y * n + n / 2]);
        }
        // Above the step response nothing passes.
        assert_eq!(sobel_edges(&img, 4.1).unwrap().count, 0);
    }

    #[test]
    fn constant_images_have_no_edges() {
        let mut img = RasterImage::new(20, 20, 1).unwrap();
        img.data.fill(0.6);
        assert_eq!(sobel_edges(&img, 0.01).unwrap().count, 0);
    }

    #[test]
    fn raising_the_threshold_never_adds_edges() {
        let img = synth::landscape(64, 64, 1, 11).unwrap();
        let low = sobel_edges(&img, 0.1).unwrap().count;
        let high = sobel_edges(&img, 0.4).unwrap().count;
        assert!(high <= low);
    }

    #[test]
    fn blur_erases_threshold_crossings() {
        let img = synth::landscape(96, 96, 1, 13).unwrap();
        let blurred = convolve(&img, &disk_kernel(4.0, 4).unwrap(), ConvPath::Fft).unwrap();
        let sharp = sobel_edges(&img, 0.25).unwrap().count;
        let soft = sobel_edges(&blurred, 0.25).unwrap().count;
        assert!(soft < sharp, "{soft} !< {sharp}");
    }

    // ---- report ----

    #[test]
    fn report_requires_at_least_one_metric() {
        assert!(QualityReport::new(None, None, None, None).is_err());
    }

    #[test]
    fn infinite_psnr_serializes_as_inf_string() {
        let report =
            QualityReport::new(Some(1.0), Some(f64::INFINITY), None, None).unwrap();
        let json = report.to_json();
        assert!(json.contains("\"psnr_db\": \"inf\""), "{json}");
        let back = QualityReport::from_json(&json).unwrap();
        assert_eq!(back.psnr_db, Some(f64::INFINITY));
    }

    #[test]
    fn finite_report_round_trips() {
        let report =
            QualityReport::new(Some(0.87), Some(31.5), Some(4.2), Some(27.0)).unwrap();
        let back = QualityReport::from_json(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}
