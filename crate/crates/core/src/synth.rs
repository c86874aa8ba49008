//! Seeded synthetic scenes.
//!
//! Tests, benchmarks, and the toy training loop need repeatable imagery with
//! the rough statistics of overhead land scenes: a mosaic of fields with
//! optics-softened albedo boundaries, road-like lines, mid-band surface
//! texture, light grain, and smooth large-scale shading. The generator is
//! deterministic per seed and makes no attempt at radiometric realism
//! beyond that.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degrade::{convolve, gaussian_kernel, mix_seed, ConvPath};
use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Uniform [0,1) value from a 64-bit hash.
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Stateless per-lattice-point hash so pixels can be generated in any order.
fn cell_hash(seed: u64, cx: i64, cy: i64, tag: u64) -> u64 {
    let packed = (cx as u64).wrapping_mul(0x2545_f491_4f6c_dd1d)
        ^ (cy as u64).rotate_left(32)
        ^ tag.wrapping_mul(0x517c_c1b7_2722_0a95);
    mix_seed(seed, packed)
}

/// Smooth value noise: a coarse random lattice, bilinearly interpolated.
fn value_noise(
    width: usize,
    height: usize,
    cell: usize,
    amp: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let gw = width / cell + 2;
    let gh = height / cell + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(-amp..amp)).collect();
    let mut out = vec![0.0f64; width * height];
    for y in 0..height {
        let fy = y as f64 / cell as f64;
        let y0 = fy as usize;
        let ty = fy - y0 as f64;
        for x in 0..width {
            let fx = x as f64 / cell as f64;
            let x0 = fx as usize;
            let tx = fx - x0 as f64;
            let v00 = lattice[y0 * gw + x0];
            let v01 = lattice[y0 * gw + x0 + 1];
            let v10 = lattice[(y0 + 1) * gw + x0];
            let v11 = lattice[(y0 + 1) * gw + x0 + 1];
            out[y * width + x] =
                (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01) + ty * ((1.0 - tx) * v10 + tx * v11);
        }
    }
    out
}

/// Field mosaic via jittered-grid cellular regions: one site per grid cell,
/// each pixel takes the attributes of the nearest site among its 3x3
/// neighborhood. O(1) per pixel, so large frames stay cheap.
struct Mosaic {
    seed: u64,
    cell: f64,
}

impl Mosaic {
    fn region(&self, x: f64, y: f64) -> (i64, i64) {
        let gx = (x / self.cell).floor() as i64;
        let gy = (y / self.cell).floor() as i64;
        let mut best = f64::INFINITY;
        let mut id = (gx, gy);
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                let (cx, cy) = (gx + dx, gy + dy);
                let sx = (cx as f64 + unit(cell_hash(self.seed, cx, cy, 1))) * self.cell;
                let sy = (cy as f64 + unit(cell_hash(self.seed, cx, cy, 2))) * self.cell;
                let d = (x - sx) * (x - sx) + (y - sy) * (y - sy);
                if d < best {
                    best = d;
                    id = (cx, cy);
                }
            }
        }
        id
    }

    fn albedo(&self, id: (i64, i64)) -> f64 {
        0.15 + 0.65 * unit(cell_hash(self.seed, id.0, id.1, 3))
    }

    /// Fields carry grain; a minority of regions are water-flat.
    fn grain_amp(&self, id: (i64, i64)) -> f64 {
        if unit(cell_hash(self.seed, id.0, id.1, 4)) < 0.15 {
            0.002
        } else {
            0.006 + 0.008 * unit(cell_hash(self.seed, id.0, id.1, 5))
        }
    }
}

struct Road {
    px: f64,
    py: f64,
    sin: f64,
    cos: f64,
    half_width: f64,
    level: f64,
}

impl Road {
    fn coverage(&self, x: f64, y: f64) -> f64 {
        let d = ((x - self.px) * self.sin - (y - self.py) * self.cos).abs();
        (self.half_width + 0.5 - d).clamp(0.0, 1.0)
    }
}

/// Zero-mean, unit-variance surface texture with its energy in the
/// mid frequencies: white noise smoothed by a small Gaussian. This is the
///band a moderate defocus damages but a deconvolver can still bring back,
/// and it reads as plow rows and canopy rather than film grain.
fn midband_texture(width: usize, height: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = RasterImage::new(width, height, 1)?;
    for v in &mut noise.data {
        *v = rng.gen_range(-1.0f32..1.0);
    }
    let smooth = convolve(&noise, &gaussian_kernel(2.0)?, ConvPath::Fft)?;
    let mean = smooth.mean();
    let var = smooth
        .data
        .iter()
        .map(|&v| (v as f64 - mean) * (v as f64 - mean))
        .sum::<f64>()
        / smooth.data.len() as f64;
    let inv_std = 1.0 / var.sqrt().max(1e-12);
    Ok(smooth
        .data
        .iter()
        .map(|&v| (v as f64 - mean) * inv_std)
        .collect())
}

/// A deterministic land-cover-like scene in `[0.03, 0.97]`.
pub fn landscape(width: usize, height: usize, channels: usize, seed: u64) -> Result<RasterImage> {
    if width == 0 || height == 0 || channels == 0 {
        return Err(Error::dims("landscape dimensions must be positive".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5ce_e));
    let mosaic = Mosaic {
        seed: mix_seed(seed, 0x0f1e),
        cell: (width.min(height) as f64 / 10.0).clamp(8.0, 26.0),
    };

    // Large-scale shading from a few smooth octaves.
    let mut shade = vec![0.0f64; width * height];
    let mut cell = (width.min(height) / 4).max(2);
    let mut amp = 0.10;
    while cell >= 4 {
        let layer = value_noise(width, height, cell, amp, &mut rng);
        for (s, l) in shade.iter_mut().zip(&layer) {
            *s += l;
        }
        cell /= 2;
        amp *= 0.6;
    }

    let n_roads = ((width + height) / 56).clamp(4, 20) + rng.gen_range(0..4u32) as usize;
    let roads: Vec<Road> = (0..n_roads)
        .map(|_| {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            Road {
                px: rng.gen_range(0.0..width as f64),
                py: rng.gen_range(0.0..height as f64),
                sin: theta.sin(),
                cos: theta.cos(),
                half_width: rng.gen_range(0.6..1.4),
                level: if rng.gen_bool(0.5) { 0.90 } else { 0.08 },
            }
        })
        .collect();

    let mut flat = RasterImage::new(width, height, 1)?;
    for y in 0..height {
        for x in 0..width {
            let id = mosaic.region(x as f64, y as f64);
            let mut v = mosaic.albedo(id) + shade[y * width + x];
            for road in &roads {
                let cov = 0.85 * road.coverage(x as f64, y as f64);
                v = v * (1.0 - cov) + road.level * cov;
            }
            flat.data[y * width + x] = v as f32;
        }
    }

    // Small frames are only useful for shape plumbing; skip the optics pass
    // so a scene can be generated at any size the kernels would not fit.
    let structured = width.min(height) >= 16;
    if structured {
        // Sampled optics never deliver razor edges: soften the mosaic the way
        // a lens MTF would, then lay recoverable mid-band texture over it.
        flat = convolve(&flat, &gaussian_kernel(0.8)?, ConvPath::Fft)?;
    }
    let tex = if structured {
        midband_texture(width, height, mix_seed(seed, 0x7e47))?
    } else {
        vec![0.0f64; width * height]
    };

    let grain_seed = mix_seed(seed, 0x06a1);
    let mut base = vec![0.0f64; width * height];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let id = mosaic.region(x as f64, y as f64);
            let grain =
                (unit(cell_hash(grain_seed, x as i64, y as i64, 6)) - 0.5) * 2.0 * mosaic.grain_amp(id);
            base[i] = (flat.data[i] as f64 + 0.10 * tex[i] + grain).clamp(0.03, 0.97);
        }
    }

    let mut data = Vec::with_capacity(width * height * channels);
    if channels == 1 {
        data.extend(base.iter().map(|&v| v as f32));
    } else {
        // Correlated bands: shared structure with mild per-band tinting.
        for c in 0..channels {
            let tint = value_noise(width, height, (width.min(height) / 3).max(2), 0.05, &mut rng);
            let gain = 1.0 + 0.04 * c as f64;
            for i in 0..base.len() {
                data.push(((base[i] * gain + tint[i]).clamp(0.02, 0.98)) as f32);
            }
        }
    }
    RasterImage::from_planes(width, height, channels, data)
}

/// Blend a raised-cosine border band toward the image mean so opposite
/// edges agree. Deconvolution tests use this to isolate filter behavior
/// from boundary-model mismatch.
pub fn calm_border(img: &RasterImage, band: usize) -> Result<RasterImage> {
    if band * 2 >= img.width.min(img.height) {
        return Err(Error::dims(format!(
            "border band {band} too wide for {}x{}",
            img.width, img.height
        )));
    }
    let mean = img.mean() as f32;
    let ramp = |d: usize| -> f32 {
        if d >= band {
            1.0
        } else {
            let t = (d as f64 + 0.5) / band as f64;
            (0.5 - 0.5 * (std::f64::consts::PI * t).cos()) as f32
        }
    };
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            let wy = ramp(y.min(img.height - 1 - y));
            for x in 0..img.width {
                let w = wy.min(ramp(x.min(img.width - 1 - x)));
                // Interior pixels keep their bits; rebuilding them as
                // `mean + 1.0 * (v - mean)` would cost a rounding step.
                if w < 1.0 {
                    let v = img.at(c, y, x);
                    out.set(c, y, x, mean + w * (v - mean));
                }
            }
        }
    }
    Ok(out)
}
