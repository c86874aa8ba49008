//! Degradation synthesis: blur kernels, convolution, spin blur, shot noise,
//! and scripted degradation chains.
//!
//! Chains are deterministic: every noise step derives its own RNG seed from
//! the chain seed and the step index, so inserting or removing steps never
//! shifts the randomness of the steps that follow.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{reflect_index, RasterImage};
use crate::spectral;

/// Odd square blur kernel with non-negative taps summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    pub size: usize,
    pub taps: Array2<f64>,
}

pub const KERNEL_SCHEMA_VERSION: u32 = 1;

impl BlurKernel {
    /// Build from raw taps; rejects negatives, even sizes, and zero mass,
    /// then normalizes the sum to exactly one.
    pub fn from_taps(taps: Array2<f64>) -> Result<Self> {
        let (h, w) = taps.dim();
        if h != w {
            return Err(Error::param(format!("kernel must be square, got {h}x{w}")));
        }
        if h == 0 || h % 2 == 0 {
            return Err(Error::param(format!("kernel size must be odd, got {h}")));
        }
        if taps.iter().any(|&t| !t.is_finite() || t < 0.0) {
            return Err(Error::param("kernel taps must be finite and non-negative"));
        }
        let sum: f64 = taps.sum();
        if sum <= 0.0 {
            return Err(Error::param("kernel has zero mass"));
        }
        Ok(BlurKernel {
            size: h,
            taps: taps / sum,
        })
    }

    pub fn identity() -> Self {
        BlurKernel {
            size: 1,
            taps: Array2::from_elem((1, 1), 1.0),
        }
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    /// 180-degree rotation; the adjoint kernel for Richardson-Lucy.
    pub fn flipped(&self) -> Self {
        let mut taps = self.taps.clone();
        taps.as_slice_mut().unwrap().reverse();
        BlurKernel {
            size: self.size,
            taps,
        }
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<Vec<f64>> = self
            .taps
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect();
        serde_json::to_string_pretty(&KernelJson {
            schema_version: KERNEL_SCHEMA_VERSION,
            size: self.size,
            taps: rows,
        })
        .expect("kernel serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let parsed: KernelJson = serde_json::from_str(text)?;
        if parsed.taps.len() != parsed.size
            || parsed.taps.iter().any(|r| r.len() != parsed.size)
        {
            return Err(Error::format("kernel JSON taps do not match declared size"));
        }
        let flat: Vec<f64> = parsed.taps.into_iter().flatten().collect();
        let taps = Array2::from_shape_vec((parsed.size, parsed.size), flat)
            .expect("shape checked above");
        BlurKernel::from_taps(taps)
    }
}

#[derive(Serialize, Deserialize)]
struct KernelJson {
    #[serde(default = "default_schema_version")]
    schema_version: u32,
    size: usize,
    taps: Vec<Vec<f64>>,
}

fn default_schema_version() -> u32 {
    1
}

/// Drop all-zero outer rings so kernels keep the smallest odd support.
fn trim_zero_border(taps: Array2<f64>) -> Array2<f64> {
    let mut lo = 0usize;
    let n = taps.nrows();
    while n - 2 * lo > 1 {
        let hi = n - 1 - lo;
        let ring_zero = (lo..=hi).all(|i| {
            taps[[lo, i]] == 0.0
                && taps[[hi, i]] == 0.0
                && taps[[i, lo]] == 0.0
                && taps[[i, hi]] == 0.0
        });
        if !ring_zero {
            break;
        }
        lo += 1;
    }
    if lo == 0 {
        return taps;
    }
    let m = n - 2 * lo;
    let mut out = Array2::zeros((m, m));
    for y in 0..m {
        for x in 0..m {
            out[[y, x]] = taps[[y + lo, x + lo]];
        }
    }
    out
}

/// Defocus disk of the given radius. Taps are the fraction of
/// `supersample^2` sub-samples per cell that fall inside the disk, so
/// `supersample = 1` tests cell centers only. Radii too small for the
/// sub-sample grid to see degrade to the identity kernel.
pub fn disk_kernel(radius: f64, supersample: usize) -> Result<BlurKernel> {
    if !(radius.is_finite() && radius >= 0.0) {
        return Err(Error::param("disk radius must be finite and non-negative"));
    }
    if supersample == 0 {
        return Err(Error::param("supersample must be positive"));
    }
    let half = radius.ceil() as usize;
    let size = 2 * half + 1;
    let mut taps = Array2::zeros((size, size));
    let r2 = radius * radius;
    let ss = supersample as f64;
    let mut total = 0.0;
    for iy in 0..size {
        for ix in 0..size {
            let dy = iy as f64 - half as f64;
            let dx = ix as f64 - half as f64;
            let mut hits = 0usize;
            for sy in 0..supersample {
                for sx in 0..supersample {
                    let y = dy - 0.5 + (sy as f64 + 0.5) / ss;
                    let x = dx - 0.5 + (sx as f64 + 0.5) / ss;
                    if x * x + y * y <= r2 {
                        hits += 1;
                    }
                }
            }
            let t = hits as f64;
            taps[[iy, ix]] = t;
            total += t;
        }
    }
    if total == 0.0 {
        return Ok(BlurKernel::identity());
    }
    BlurKernel::from_taps(trim_zero_border(taps))
}

/// Isotropic Gaussian with support `2 * ceil(3 sigma) + 1`.
pub fn gaussian_kernel(sigma: f64) -> Result<BlurKernel> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::param("gaussian sigma must be positive"));
    }
    let half = (3.0 * sigma).ceil() as usize;
    let size = 2 * half + 1;
    let mut taps = Array2::zeros((size, size));
    let inv = 1.0 / (2.0 * sigma * sigma);
    for iy in 0..size {
        for ix in 0..size {
            let dy = iy as f64 - half as f64;
            let dx = ix as f64 - half as f64;
            taps[[iy, ix]] = (-(dx * dx + dy * dy) * inv).exp();
        }
    }
    BlurKernel::from_taps(taps)
}

/// Linear motion smear: anti-aliased coverage of a `length x 1` pixel
/// rectangle rotated by `angle_deg` (counterclockwise from the x axis) about
/// the kernel center. `length = 1` is the identity.
pub fn motion_kernel(length: f64, angle_deg: f64) -> Result<BlurKernel> {
    if !(length.is_finite() && length >= 1.0) {
        return Err(Error::param("motion length must be at least 1"));
    }
    if length == 1.0 {
        // A one-pixel smear is no motion at all; the rasterized footprint
        // would otherwise leak into neighbor taps at rotated angles.
        return Ok(BlurKernel::identity());
    }
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let half = (length / 2.0 + 0.5).ceil() as usize;
    let size = 2 * half + 1;
    let ss = 4usize;
    let mut taps = Array2::zeros((size, size));
    for iy in 0..size {
        for ix in 0..size {
            let dy = iy as f64 - half as f64;
            let dx = ix as f64 - half as f64;
            let mut hits = 0usize;
            for sy in 0..ss {
                for sx in 0..ss {
                    let y = dy - 0.5 + (sy as f64 + 0.5) / ss as f64;
                    let x = dx - 0.5 + (sx as f64 + 0.5) / ss as f64;
                    let along = x * cos + y * sin;
                    let across = -x * sin + y * cos;
                    if along.abs() <= length / 2.0 && across.abs() <= 0.5 {
                        hits += 1;
                    }
                }
            }
            taps[[iy, ix]] = hits as f64;
        }
    }
    if taps.sum() == 0.0 {
        return Ok(BlurKernel::identity());
    }
    BlurKernel::from_taps(trim_zero_border(taps))
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvPath {
    Spatial,
    Fft,
}

/// Correlate the image with a kernel under half-sample reflected boundaries.
/// Every kernel this module builds is point symmetric, so correlation and
/// convolution coincide. The two paths agree to within FFT round-off.
pub fn convolve(img: &RasterImage, kernel: &BlurKernel, path: ConvPath) -> Result<RasterImage> {
    match path {
        ConvPath::Spatial => convolve_spatial(img, kernel),
        ConvPath::Fft => convolve_fft(img, kernel),
    }
}

fn convolve_spatial(img: &RasterImage, kernel: &BlurKernel) -> Result<RasterImage> {
    let r = kernel.radius() as isize;
    let (w, h) = (img.width, img.height);
    let mut out = RasterImage::new(w, h, img.channels)?;
    out.bit_depth_origin = img.bit_depth_origin;
    for c in 0..img.channels {
        let src = img.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0f64;
                for ky in -r..=r {
                    let sy = reflect_index(y + ky, h);
                    let row = sy * w;
                    for kx in -r..=r {
                        let sx = reflect_index(x + kx, w);
                        acc += kernel.taps[[(ky + r) as usize, (kx + r) as usize]]
                            * src[row + sx] as f64;
                    }
                }
                dst[y as usize * w + x as usize] = acc as f32;
            }
        }
    }
    Ok(out)
}

fn convolve_fft(img: &RasterImage, kernel: &BlurKernel) -> Result<RasterImage> {
    let r = kernel.radius();
    let (w, h) = (img.width, img.height);
    let (pw, ph) = (w + 2 * r, h + 2 * r);
    let otf = spectral::kernel_otf(kernel, ph, pw);

    let mut out = RasterImage::new(w, h, img.channels)?;
    out.bit_depth_origin = img.bit_depth_origin;
    let mut padded = vec![0.0f64; pw * ph];
    for c in 0..img.channels {
        let src = img.channel(c);
        for py in 0..ph {
            let sy = reflect_index(py as isize - r as isize, h);
            for px in 0..pw {
                let sx = reflect_index(px as isize - r as isize, w);
                padded[py * pw + px] = src[sy * w + sx] as f64;
            }
        }
        let mut freq = spectral::fft2_real(&padded, ph, pw);
        for (f, o) in freq.iter_mut().zip(&otf) {
            *f *= o;
        }
        let spatial = spectral::ifft2_real(&mut freq, ph, pw);
        let dst = out.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = spatial[(y + r) * pw + (x + r)] as f32;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Spin blur and shot noise
// ---------------------------------------------------------------------------

/// Rotational smear: the mean of `samples` bilinear rotations about `center`
/// (image center when `None`), with rotation angles placed at the midpoints
/// of `samples` equal slices of `[-extent/2, +extent/2]` degrees.
pub fn spin_blur(
    img: &RasterImage,
    extent_deg: f64,
    samples: usize,
    center: Option<(f64, f64)>,
) -> Result<RasterImage> {
    if !(extent_deg.is_finite() && extent_deg >= 0.0) {
        return Err(Error::param("spin extent must be finite and non-negative"));
    }
    if samples == 0 {
        return Err(Error::param("spin blur needs at least one sample"));
    }
    let (w, h) = (img.width, img.height);
    let (cx, cy) = center.unwrap_or(((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0));
    let mut acc = vec![0.0f64; img.data.len()];
    for s in 0..samples {
        let frac = (s as f64 + 0.5) / samples as f64;
        let theta = (-extent_deg / 2.0 + extent_deg * frac).to_radians();
        let (sin, cos) = theta.sin_cos();
        for c in 0..img.channels {
            let src = img.channel(c);
            let plane = c * w * h;
            for y in 0..h {
                let dy = y as f64 - cy;
                for x in 0..w {
                    let dx = x as f64 - cx;
                    // Inverse rotation carries output pixels back to source.
                    let sx = cx + dx * cos + dy * sin;
                    let sy = cy - dx * sin + dy * cos;
                    acc[plane + y * w + x] += bilinear_reflect(src, w, h, sx, sy);
                }
            }
        }
    }
    let inv = 1.0 / samples as f64;
    let data = acc.iter().map(|&v| (v * inv) as f32).collect();
    let mut out = RasterImage::from_planes(w, h, img.channels, data)?;
    out.bit_depth_origin = img.bit_depth_origin;
    Ok(out)
}

fn bilinear_reflect(plane: &[f32], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let xi = [
        reflect_index(x0 as isize, w),
        reflect_index(x0 as isize + 1, w),
    ];
    let yi = [
        reflect_index(y0 as isize, h),
        reflect_index(y0 as isize + 1, h),
    ];
    let v00 = plane[yi[0] * w + xi[0]] as f64;
    let v01 = plane[yi[0] * w + xi[1]] as f64;
    let v10 = plane[yi[1] * w + xi[0]] as f64;
    let v11 = plane[yi[1] * w + xi[1]] as f64;
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
}

/// Photon shot noise: each sample is drawn from
/// `Poisson(value * photons) / photons`. Deterministic for a given seed;
/// non-positive input values pass through as zero.
pub fn shot_noise(img: &RasterImage, photons: f64, seed: u64) -> Result<RasterImage> {
    if !(photons.is_finite() && photons > 0.0) {
        return Err(Error::param("photon count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(img.data.len());
    for &v in &img.data {
        let lambda = (v.max(0.0) as f64) * photons;
        if lambda == 0.0 {
            data.push(0.0);
            continue;
        }
        let poisson = Poisson::new(lambda)
            .map_err(|_| Error::param(format!("invalid Poisson rate {lambda}")))?;
        let count: f64 = poisson.sample(&mut rng);
        data.push((count / photons) as f32);
    }
    let mut out = RasterImage::from_planes(img.width, img.height, img.channels, data)?;
    out.bit_depth_origin = img.bit_depth_origin;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scripted chains
// ---------------------------------------------------------------------------

/// One step of a degradation chain. Serialized with a `kind` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DegradeStep {
    Gaussian { sigma: f64 },
    Defocus { radius: f64 },
    Motion { length: f64, angle_deg: f64 },
    Spin {
        extent_deg: f64,
        #[serde(default = "default_spin_samples")]
        samples: usize,
    },
    Shot { photons: f64 },
}

fn default_spin_samples() -> usize {
    32
}

/// An ordered, seeded degradation chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub seed: u64,
    pub steps: Vec<DegradeStep>,
}

impl DegradeSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: DegradeSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != 1 {
            return Err(Error::format(format!(
                "unsupported degrade spec schema_version {}",
                self.schema_version
            )));
        }
        for (i, step) in self.steps.iter().enumerate() {
            let ok = match step {
                DegradeStep::Gaussian { sigma } => sigma.is_finite() && *sigma > 0.0,
                DegradeStep::Defocus { radius } => radius.is_finite() && *radius >= 0.0,
                DegradeStep::Motion { length, angle_deg } => {
                    length.is_finite() && *length >= 1.0 && angle_deg.is_finite()
                }
                DegradeStep::Spin {
                    extent_deg,
                    samples,
                } => extent_deg.is_finite() && *extent_deg >= 0.0 && *samples >= 1,
                DegradeStep::Shot { photons } => photons.is_finite() && *photons > 0.0,
            };
            if !ok {
                return Err(Error::param(format!("step {i} has invalid parameters")));
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; mixes the chain seed with a step index so each
/// noise step gets an independent stream.
pub fn mix_seed(seed: u64, step_index: u64) -> u64 {
    let mut z = seed ^ step_index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Run a degradation chain over an image.
pub fn apply(spec: &DegradeSpec, img: &RasterImage) -> Result<RasterImage> {
    spec.validate()?;
    let mut current = img.clone();
    for (i, step) in spec.steps.iter().enumerate() {
        current = match step {
            DegradeStep::Gaussian { sigma } => {
                convolve(&current, &gaussian_kernel(*sigma)?, ConvPath::Fft)?
            }
            DegradeStep::Defocus { radius } => {
                convolve(&current, &disk_kernel(*radius, 4)?, ConvPath::Fft)?
            }
            DegradeStep::Motion { length, angle_deg } => {
                convolve(&current, &motion_kernel(*length, *angle_deg)?, ConvPath::Fft)?
            }
            DegradeStep::Spin {
                extent_deg,
                samples,
            } => spin_blur(&current, *extent_deg, *samples, None)?,
            DegradeStep::Shot { photons } => {
                shot_noise(&current, *photons, mix_seed(spec.seed, i as u64))?
            }
        };
    }
    Ok(current)
}

/// Default parameter ranges for randomized degradation sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentRanges {
    pub sigma: (f64, f64),
    pub defocus_radius: (f64, f64),
    pub motion_length: (f64, f64),
    pub spin_extent_deg: (f64, f64),
    pub photons: (f64, f64),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            sigma: (0.5, 3.0),
            defocus_radius: (2.0, 8.0),
            motion_length: (3.0, 15.0),
            spin_extent_deg: (0.5, 3.0),
            photons: (500.0, 5000.0),
        }
    }
}

impl AugmentRanges {
    /// One random blur drawn uniformly over the four blur families, followed
    /// by shot noise when `with_noise` is set.
    pub fn random_spec(&self, seed: u64, with_noise: bool) -> DegradeSpec {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xb1a5));
        let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| rng.gen_range(lo..=hi);
        let blur = match rng.gen_range(0..4u32) {
            0 => DegradeStep::Gaussian {
                sigma: uniform(&mut rng, self.sigma),
            },
            1 => DegradeStep::Defocus {
                radius: uniform(&mut rng, self.defocus_radius),
            },
            2 => DegradeStep::Motion {
                length: uniform(&mut rng, self.motion_length),
                angle_deg: rng.gen_range(0.0..180.0),
            },
            _ => DegradeStep::Spin {
                extent_deg: uniform(&mut rng, self.spin_extent_deg),
                samples: 32,
            },
        };
        let mut steps = vec![blur];
        if with_noise {
            steps.push(DegradeStep::Shot {
                photons: uniform(&mut rng, self.photons),
            });
        }
        DegradeSpec {
            schema_version: 1,
            seed,
            steps,
        }
    }
}
