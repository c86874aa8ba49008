//! Natural-scene statistics: mean-subtracted contrast-normalized
//! coefficients, asymmetric generalized Gaussian fitting, and the 36-element
//! feature vector shared by the no-reference quality scores.

use std::sync::OnceLock;

use ndarray::Array2;
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::metrics::{filter_reflect, gaussian_window, luminance_plane};
use crate::raster::RasterImage;

/// Two scales, each contributing a coefficient fit (2 values) plus four
/// pairwise-product fits (4 values each).
pub const NSS_FEATURE_LEN: usize = 36;

const MSCN_WINDOW: usize = 7;
const MSCN_SIGMA: f64 = 7.0 / 6.0;
const MSCN_STABILIZER: f64 = 1.0 / 255.0;

/// Mean-subtracted contrast-normalized coefficients of a luminance plane,
/// along with the local deviation plane used as the normalizer (handy as a
/// sharpness measure). The plane must cover the smoothing window.
pub fn mscn(plane: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let (h, w) = plane.dim();
    if h < MSCN_WINDOW || w < MSCN_WINDOW {
        return Err(Error::dims(format!(
            "mscn needs at least {MSCN_WINDOW}x{MSCN_WINDOW}, got {h}x{w}"
        )));
    }
    let window = gaussian_window(MSCN_WINDOW, MSCN_SIGMA);
    let mu = filter_reflect(plane, &window);
    let sq = filter_reflect(&(plane * plane), &window);
    let mut sigma = Array2::zeros(plane.dim());
    let mut coeffs = Array2::zeros(plane.dim());
    for ((c, s), (&v, (&m, &q))) in coeffs
        .iter_mut()
        .zip(sigma.iter_mut())
        .zip(plane.iter().zip(mu.iter().zip(sq.iter())))
    {
        let dev = (q - m * m).max(0.0).sqrt();
        *s = dev;
        *c = (v - m) / (dev + MSCN_STABILIZER);
    }
    Ok((coeffs, sigma))
}

/// Parameters of an asymmetric generalized Gaussian fitted by moment
/// matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggdFit {
    pub alpha: f64,
    pub eta: f64,
    pub beta_l: f64,
    pub beta_r: f64,
    pub sigma_l: f64,
    pub sigma_r: f64,
}

/// Shape-parameter grid with the moment ratio
/// rho(alpha) = gamma(2/alpha)^2 / (gamma(1/alpha) gamma(3/alpha))
/// precomputed once.
fn rho_table() -> &'static [(f64, f64)] {
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..=9800)
            .map(|k| {
                let alpha = 0.2 + 0.001 * k as f64;
                let rho =
                    gamma(2.0 / alpha).powi(2) / (gamma(1.0 / alpha) * gamma(3.0 / alpha));
                (alpha, rho)
            })
            .collect()
    })
}

/// Fit an asymmetric generalized Gaussian to `values` by matching the
/// one-sided second moments and the absolute-mean ratio against the
/// tabulated shape grid. Needs at least 100 samples for the moments to mean
/// anything.
pub fn aggd_fit(values: &[f64]) -> Result<AggdFit> {
    if values.len() < 100 {
        return Err(Error::param(format!(
            "aggd fit needs at least 100 samples, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mut sq_neg = 0.0;
    let mut count_neg = 0u64;
    let mut sq_pos = 0.0;
    let mut count_pos = 0u64;
    let mut abs_sum = 0.0;
    for &v in values {
        abs_sum += v.abs();
        if v < 0.0 {
            sq_neg += v * v;
            count_neg += 1;
        } else if v > 0.0 {
            sq_pos += v * v;
            count_pos += 1;
        }
    }
    let mean_sq = (sq_neg + sq_pos) / n;
    if mean_sq < 1e-24 {
        return Err(Error::param("aggd fit on (near-)constant data"));
    }
    let sigma_l = if count_neg > 0 {
        (sq_neg / count_neg as f64).sqrt().max(1e-12)
    } else {
        1e-12
    };
    let sigma_r = if count_pos > 0 {
        (sq_pos / count_pos as f64).sqrt().max(1e-12)
    } else {
        1e-12
    };

    let gamma_hat = sigma_l / sigma_r;
    let r_hat = (abs_sum / n).powi(2) / mean_sq;
    let big_r = r_hat * (gamma_hat.powi(3) + 1.0) * (gamma_hat + 1.0)
        / (gamma_hat.powi(2) + 1.0).powi(2);

    let mut alpha = rho_table()[0].0;
    let mut best = f64::INFINITY;
    for &(a, rho) in rho_table() {
        let d = (rho - big_r).powi(2);
        if d < best {
            best = d;
            alpha = a;
        }
    }

    let g1 = gamma(1.0 / alpha);
    let g2 = gamma(2.0 / alpha);
    let g3 = gamma(3.0 / alpha);
    let ratio = (g1 / g3).sqrt();
    let beta_l = sigma_l * ratio;
    let beta_r = sigma_r * ratio;
    let eta = (beta_r - beta_l) * g2 / g1;
    Ok(AggdFit {
        alpha,
        eta,
        beta_l,
        beta_r,
        sigma_l,
        sigma_r,
    })
}

/// Products of coefficients with their neighbor at offset (dy, dx), taken
/// over every position where both samples fall inside the plane.
fn paired_products(m: &Array2<f64>, dy: usize, dx: isize) -> Vec<f64> {
    let (h, w) = m.dim();
    let x_lo = (-dx).max(0) as usize;
    let x_hi = w - dx.max(0) as usize;
    let mut out = Vec::with_capacity((h - dy) * (x_hi - x_lo));
    for y in 0..h - dy {
        for x in x_lo..x_hi {
            out.push(m[[y, x]] * m[[y + dy, (x as isize + dx) as usize]]);
        }
    }
    out
}

/// Crop to even dimensions and average each 2x2 block.
fn halve(plane: &Array2<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Array2::zeros((h2, w2));
    for y in 0..h2 {
        for x in 0..w2 {
            out[[y, x]] = 0.25
                * (plane[[2 * y, 2 * x]]
                    + plane[[2 * y, 2 * x + 1]]
                    + plane[[2 * y + 1, 2 * x]]
                    + plane[[2 * y + 1, 2 * x + 1]]);
        }
    }
    out
}

fn scale_features(plane: &Array2<f64>, out: &mut Vec<f64>) -> Result<()> {
    let (coeffs, _) = mscn(plane)?;
    let flat: Vec<f64> = coeffs.iter().copied().collect();
    let fit = aggd_fit(&flat)?;
    out.push(fit.alpha);
    out.push(0.5 * (fit.sigma_l + fit.sigma_r));
    for (dy, dx) in [(0usize, 1isize), (1, 0), (1, 1), (1, -1)] {
        let fit = aggd_fit(&paired_products(&coeffs, dy, dx))?;
        out.push(fit.alpha);
        out.push(fit.eta);
        out.push(fit.beta_l);
        out.push(fit.beta_r);
    }
    Ok(())
}

/// The 36-element natural-scene-statistics vector: coefficient shape and
/// spread plus four neighbor-product fits, at full and half resolution.
pub fn nss_features(img: &RasterImage) -> Result<Vec<f64>> {
    if img.width < 64 || img.height < 64 {
        return Err(Error::dims(format!(
            "nss features need at least 64x64, got {}x{}",
            img.width, img.height
        )));
    }
    let plane = luminance_plane(img);
    let mut out = Vec::with_capacity(NSS_FEATURE_LEN);
    scale_features(&plane, &mut out)?;
    scale_features(&halve(&plane), &mut out)?;
    debug_assert_eq!(out.len(), NSS_FEATURE_LEN);
    Ok(out)
}
