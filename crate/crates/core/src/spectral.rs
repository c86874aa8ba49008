//! Frequency-domain analysis: 2-D FFTs, log spectra, radial profiles, blind
//! OTF estimation from degraded/reference pairs, and parametric defocus
//! fitting.
//!
//! The blind estimator divides cross spectra under Tikhonov regularization:
//! `H = D * conj(R) / (|R|^2 + eps)`. Both images are apodized with a
//! raised-cosine border window first so that non-periodic content does not
//! leak across the frame.

use std::cell::RefCell;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::degrade::{convolve, disk_kernel, BlurKernel, ConvPath};
use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Fraction of each border devoted to the raised-cosine apodization ramp.
pub const APODIZE_FRACTION: f64 = 0.08;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft2_complex(buf: &mut [Complex64], h: usize, w: usize, direction: FftDirection) {
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let row_fft = planner.plan_fft(w, direction);
        let mut scratch = vec![Complex64::default(); row_fft.get_inplace_scratch_len()];
        for row in buf.chunks_exact_mut(w) {
            row_fft.process_with_scratch(row, &mut scratch);
        }
        let col_fft = planner.plan_fft(h, direction);
        scratch.resize(col_fft.get_inplace_scratch_len().max(1), Complex64::default());
        let mut col = vec![Complex64::default(); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            col_fft.process_with_scratch(&mut col, &mut scratch);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
    });
}

/// Unnormalized forward DFT of a real plane.
pub(crate) fn fft2_real(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_complex(&mut buf, h, w, FftDirection::Forward);
    buf
}

/// Inverse DFT scaled by `1/(h*w)`; returns the real part.
pub(crate) fn ifft2_real(freq: &mut [Complex64], h: usize, w: usize) -> Vec<f64> {
    fft2_complex(freq, h, w, FftDirection::Inverse);
    let scale = 1.0 / (h * w) as f64;
    freq.iter().map(|c| c.re * scale).collect()
}

/// Forward 2-D DFT (unnormalized) of a real plane.
pub fn fft2(plane: &Array2<f64>) -> Array2<Complex64> {
    let (h, w) = plane.dim();
    let buf = fft2_real(plane.as_slice().expect("contiguous plane"), h, w);
    Array2::from_shape_vec((h, w), buf).expect("length preserved")
}

/// Inverse of [`fft2`], scaled so that `ifft2(fft2(x)) == x`.
pub fn ifft2(freq: &Array2<Complex64>) -> Array2<f64> {
    let (h, w) = freq.dim();
    let mut buf = freq.as_slice().expect("contiguous plane").to_vec();
    let out = ifft2_real(&mut buf, h, w);
    Array2::from_shape_vec((h, w), out).expect("length preserved")
}

/// Frequency response of a kernel over an `h x w` frame, laid out so that a
/// pointwise multiply in frequency space applies the kernel the same way the
/// spatial path does.
pub(crate) fn kernel_otf(kernel: &BlurKernel, h: usize, w: usize) -> Vec<Complex64> {
    let r = kernel.radius() as isize;
    let mut plane = vec![0.0f64; h * w];
    for ky in 0..kernel.size {
        for kx in 0..kernel.size {
            let dy = ky as isize - r;
            let dx = kx as isize - r;
            // The module correlates rather than convolves, so each tap lands
            // at the mirrored offset.
            let py = (-dy).rem_euclid(h as isize) as usize;
            let px = (-dx).rem_euclid(w as isize) as usize;
            plane[py * w + px] += kernel.taps[[ky, kx]];
        }
    }
    fft2_real(&plane, h, w)
}

/// Move the DC bin to the plane center.
pub fn fftshift(plane: &Array2<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[(y + h / 2) % h, (x + w / 2) % w]] = plane[[y, x]];
        }
    }
    out
}

fn luminance_f64(img: &RasterImage) -> Array2<f64> {
    let lum = img.luminance();
    Array2::from_shape_vec(
        (img.height, img.width),
        lum.into_iter().map(|v| v as f64).collect(),
    )
    .expect("luminance length matches dimensions")
}

fn apodize_profile(n: usize, frac: f64) -> Vec<f64> {
    let ramp = ((n as f64 * frac).round() as usize).clamp(1, n / 2);
    let mut prof = vec![1.0; n];
    for i in 0..ramp {
        let s = (std::f64::consts::PI * (i as f64 + 0.5) / (2.0 * ramp as f64)).sin();
        prof[i] *= s * s;
        prof[n - 1 - i] *= s * s;
    }
    prof
}

/// Raised-cosine border taper over `frac` of each side.
fn apodize(plane: &mut Array2<f64>, frac: f64) {
    let (h, w) = plane.dim();
    let py = apodize_profile(h, frac);
    let px = apodize_profile(w, frac);
    for y in 0..h {
        for x in 0..w {
            plane[[y, x]] *= py[y] * px[x];
        }
    }
}

/// Sum of the squared apodization window, which is separable:
/// `sum(w^2) = sum(py^2) * sum(px^2)`.
fn apodize_power(h: usize, w: usize, frac: f64) -> f64 {
    let sq = |prof: Vec<f64>| prof.iter().map(|v| v * v).sum::<f64>();
    sq(apodize_profile(h, frac)) * sq(apodize_profile(w, frac))
}

/// `log(1 + |FFT|)` of the luminance plane, fftshifted so DC sits centered.
pub fn log_spectrum(img: &RasterImage) -> Array2<f64> {
    let plane = luminance_f64(img);
    let (h, w) = plane.dim();
    let freq = fft2_real(plane.as_slice().unwrap(), h, w);
    let mag = Array2::from_shape_vec(
        (h, w),
        freq.iter().map(|c| c.norm().ln_1p()).collect::<Vec<f64>>(),
    )
    .unwrap();
    fftshift(&mag)
}

/// Min-max normalized [`log_spectrum`] as a grayscale image, for PGM export.
pub fn log_spectrum_image(img: &RasterImage) -> Result<RasterImage> {
    let spec = log_spectrum(img);
    let lo = spec.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = spec.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let data = spec.iter().map(|&v| ((v - lo) / span) as f32).collect();
    RasterImage::from_planes(img.width, img.height, 1, data)
}

// ---------------------------------------------------------------------------
// Radial profiles
// ---------------------------------------------------------------------------

/// Rotationally averaged spectrum: per-bin mean over annuli of normalized
/// radial frequency, bin centers strictly increasing over
/// `[0, sqrt(0.5)]` cycles/pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralProfile {
    pub schema_version: u32,
    pub bins: usize,
    pub radial_frequency: Vec<f64>,
    pub log_magnitude: Vec<f64>,
}

pub const PROFILE_SCHEMA_VERSION: u32 = 1;

/// Group a center-origin plane (see [`fftshift`]) into radial bins and
/// average. Bins no annulus reaches inherit the previous bin's mean.
pub fn radial_profile(plane: &Array2<f64>, bins: usize) -> Result<SpectralProfile> {
    if bins == 0 {
        return Err(Error::param("radial profile needs at least one bin"));
    }
    let (h, w) = plane.dim();
    if h == 0 || w == 0 {
        return Err(Error::param("radial profile needs a non-empty plane"));
    }
    let means = radial_mean(plane, bins);
    let r_max = 0.5f64.sqrt();
    let radial_frequency = (0..bins)
        .map(|k| (k as f64 + 0.5) * r_max / bins as f64)
        .collect();
    Ok(SpectralProfile {
        schema_version: PROFILE_SCHEMA_VERSION,
        bins,
        radial_frequency,
        log_magnitude: means,
    })
}

fn radial_mean(plane: &Array2<f64>, bins: usize) -> Vec<f64> {
    let (h, w) = plane.dim();
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let r_max = 0.5f64.sqrt();
    let mut sums = vec![0.0f64; bins];
    let mut counts = vec![0usize; bins];
    for y in 0..h {
        let fy = (y as f64 - cy) / h as f64;
        for x in 0..w {
            let fx = (x as f64 - cx) / w as f64;
            let r = (fy * fy + fx * fx).sqrt();
            let bin = ((r / r_max) * bins as f64) as usize;
            let bin = bin.min(bins - 1);
            sums[bin] += plane[[y, x]];
            counts[bin] += 1;
        }
    }
    let mut means = vec![0.0f64; bins];
    let mut last = 0.0;
    for k in 0..bins {
        if counts[k] > 0 {
            last = sums[k] / counts[k] as f64;
        }
        means[k] = last;
    }
    means
}

// ---------------------------------------------------------------------------
// Blind OTF estimation
// ---------------------------------------------------------------------------

/// Estimated optical transfer function over a full frame.
#[derive(Debug, Clone)]
pub struct OtfEstimate {
    pub width: usize,
    pub height: usize,
    pub complex_values: Vec<Complex64>,
    pub regularization_eps: f64,
}

/// Regularization floor proportional to the mean windowed reference power.
/// A scale near `1e-3` suits manual use on noisy pairs; [`estimate_otf_auto`]
/// derives its floor from the measured noise level instead.
pub fn reference_power_eps(reference: &RasterImage, scale: f64) -> f64 {
    let mut plane = luminance_f64(reference);
    apodize(&mut plane, APODIZE_FRACTION);
    let (h, w) = plane.dim();
    let freq = fft2_real(plane.as_slice().unwrap(), h, w);
    let mean_power =
        freq.iter().map(|c| c.norm_sqr()).sum::<f64>() / (h * w) as f64;
    scale * mean_power
}

/// Robust pixel-noise estimate from the luminance plane: the median absolute
/// response of the 3x3 difference-of-Laplacians operator, rescaled for
/// Gaussian noise (response std is 6 sigma, and the median of |N(0,s)| is
/// 0.6745 s). Structure mostly cancels under the operator and the median
/// shrugs off the edges that remain.
pub fn estimate_noise_sigma(img: &RasterImage) -> f64 {
    let plane = luminance_f64(img);
    let (h, w) = plane.dim();
    if h < 3 || w < 3 {
        return 0.0;
    }
    let mut responses = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let l = plane[[y - 1, x - 1]] - 2.0 * plane[[y - 1, x]] + plane[[y - 1, x + 1]]
                - 2.0 * (plane[[y, x - 1]] - 2.0 * plane[[y, x]] + plane[[y, x + 1]])
                + plane[[y + 1, x - 1]] - 2.0 * plane[[y + 1, x]] + plane[[y + 1, x + 1]];
            responses.push(l.abs());
        }
    }
    let mid = responses.len() / 2;
    responses.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
    responses[mid] / (6.0 * 0.6745)
}

/// Regularized spectral division of a degraded/reference pair.
pub fn estimate_otf(
    degraded: &RasterImage,
    reference: &RasterImage,
    eps: f64,
) -> Result<OtfEstimate> {
    if degraded.width != reference.width || degraded.height != reference.height {
        return Err(Error::dims(format!(
            "degraded {}x{} vs reference {}x{}",
            degraded.width, degraded.height, reference.width, reference.height
        )));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::param("regularization eps must be positive"));
    }
    let mut d = luminance_f64(degraded);
    let mut r = luminance_f64(reference);
    apodize(&mut d, APODIZE_FRACTION);
    apodize(&mut r, APODIZE_FRACTION);
    let (h, w) = d.dim();
    let df = fft2_real(d.as_slice().unwrap(), h, w);
    let rf = fft2_real(r.as_slice().unwrap(), h, w);
    let complex_values = df
        .iter()
        .zip(&rf)
        .map(|(dv, rv)| dv * rv.conj() / (rv.norm_sqr() + eps))
        .collect();
    Ok(OtfEstimate {
        width: w,
        height: h,
        complex_values,
        regularization_eps: eps,
    })
}

/// [`estimate_otf`] with a regularization floor matched to the measured
/// noise: the expected per-bin noise power of the windowed degraded plane,
/// `sigma^2 * sum(window^2)`. Noiseless pairs therefore get a nearly exact
/// division while noisy pairs are damped where the reference spectrum is
/// weak.
pub fn estimate_otf_auto(degraded: &RasterImage, reference: &RasterImage) -> Result<OtfEstimate> {
    let sigma = estimate_noise_sigma(degraded);
    let (h, w) = (degraded.height, degraded.width);
    let eps_noise = sigma * sigma * apodize_power(h, w, APODIZE_FRACTION);
    let floor = reference_power_eps(reference, 1e-8);
    estimate_otf(degraded, reference, eps_noise.max(floor).max(f64::MIN_POSITIVE))
}

/// Recover a spatial kernel from an OTF: inverse transform, center crop to
/// `support`, clip negative side lobes, renormalize.
pub fn kernel_from_otf(otf: &OtfEstimate, support: usize) -> Result<BlurKernel> {
    if support == 0 || support % 2 == 0 {
        return Err(Error::param(format!("support must be odd, got {support}")));
    }
    if support > otf.width || support > otf.height {
        return Err(Error::dims(format!(
            "support {support} exceeds OTF extent {}x{}",
            otf.width, otf.height
        )));
    }
    let (h, w) = (otf.height, otf.width);
    let mut freq = otf.complex_values.clone();
    let spatial = ifft2_real(&mut freq, h, w);
    let half = (support / 2) as isize;
    let mut taps = Array2::zeros((support, support));
    for dy in -half..=half {
        for dx in -half..=half {
            // Mirror back out of the correlation layout used by kernel_otf.
            let sy = (-dy).rem_euclid(h as isize) as usize;
            let sx = (-dx).rem_euclid(w as isize) as usize;
            taps[[(dy + half) as usize, (dx + half) as usize]] = spatial[sy * w + sx].max(0.0);
        }
    }
    BlurKernel::from_taps(taps)
        .map_err(|_| Error::param("estimated OTF does not describe a blur kernel".to_string()))
}

/// Zero-lag normalized cross-correlation of two kernels on a shared centered
/// support.
pub fn kernel_ncc(a: &BlurKernel, b: &BlurKernel) -> f64 {
    let size = a.size.max(b.size);
    let embed = |k: &BlurKernel| -> Vec<f64> {
        let off = (size - k.size) / 2;
        let mut out = vec![0.0f64; size * size];
        for y in 0..k.size {
            for x in 0..k.size {
                out[(y + off) * size + (x + off)] = k.taps[[y, x]];
            }
        }
        out
    };
    let pa = embed(a);
    let pb = embed(b);
    let n = (size * size) as f64;
    let ma = pa.iter().sum::<f64>() / n;
    let mb = pb.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..pa.len() {
        let xa = pa[i] - ma;
        let xb = pb[i] - mb;
        num += xa * xb;
        da += xa * xa;
        db += xb * xb;
    }
    if da <= 0.0 || db <= 0.0 {
        return 0.0;
    }
    num / (da * db).sqrt()
}

// ---------------------------------------------------------------------------
// Parametric defocus fit
// ---------------------------------------------------------------------------

/// Select the disk radius from `radius_grid` whose synthetic re-blur of the
/// reference best matches the degraded image's radial spectrum profile (sum
/// of squared per-bin differences). Ties break toward the smaller radius.
pub fn fit_defocus_radius(
    degraded: &RasterImage,
    reference: &RasterImage,
    radius_grid: &[f64],
) -> Result<f64> {
    if radius_grid.is_empty() {
        return Err(Error::param("radius grid is empty"));
    }
    if radius_grid.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::param("radius grid entries must be non-negative"));
    }
    if degraded.width != reference.width || degraded.height != reference.height {
        return Err(Error::dims("pair dimensions differ".to_string()));
    }
    let bins = (degraded.width.min(degraded.height) / 2).max(8);
    let target = magnitude_profile(degraded, bins);

    let mut grid: Vec<f64> = radius_grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best_radius = grid[0];
    let mut best_score = f64::INFINITY;
    for &radius in &grid {
        let kernel = disk_kernel(radius, 4)?;
        let blurred = convolve(reference, &kernel, ConvPath::Fft)?;
        let candidate = magnitude_profile(&blurred, bins);
        let score: f64 = target
            .iter()
            .zip(&candidate)
            .map(|(t, c)| (t - c) * (t - c))
            .sum();
        if score < best_score {
            best_score = score;
            best_radius = radius;
        }
    }
    Ok(best_radius)
}

fn magnitude_profile(img: &RasterImage, bins: usize) -> Vec<f64> {
    let mut plane = luminance_f64(img);
    apodize(&mut plane, APODIZE_FRACTION);
    let (h, w) = plane.dim();
    let freq = fft2_real(plane.as_slice().unwrap(), h, w);
    let mag = Array2::from_shape_vec(
        (h, w),
        freq.iter().map(|c| c.norm()).collect::<Vec<f64>>(),
    )
    .unwrap();
    radial_mean(&fftshift(&mag), bins)
}
