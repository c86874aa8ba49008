//! Dense NCHW tensors and the convolution primitive. Everything is generic
//! over the float width so the gradient checker can rerun the exact same
//! computation in 64-bit.

use crate::error::{Error, Result};
use crate::raster::{reflect_index, RasterImage};

/// Float scalar the engine can run on.
pub trait Real: rustfft::FftNum + num_traits::Float + std::iter::Sum<Self> + Default {
    fn real(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn real(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn real(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Batched feature maps in NCHW layout. Convolution kernels reuse the same
/// container as (out-channels, in-channels, kh, kw).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T = f32> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::dims(format!(
                "tensor data length {} does not match {n}x{c}x{h}x{w}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("tensor values must be finite"));
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(n, c, y, x)]
    }

    /// Convert element type, round-tripping through f64.
    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::real(v.as_f64())).collect(),
        }
    }

    /// Single-image tensor from a raster; both use planar channel layout.
    pub fn from_raster(img: &RasterImage) -> Tensor4<T> {
        Tensor4 {
            n: 1,
            c: img.channels,
            h: img.height,
            w: img.width,
            data: img.data.iter().map(|&v| T::real(v as f64)).collect(),
        }
    }

    /// Back to a raster image; the tensor must hold exactly one sample.
    pub fn to_raster(&self) -> Result<RasterImage> {
        if self.n != 1 {
            return Err(Error::dims(format!(
                "cannot convert a batch of {} to one image",
                self.n
            )));
        }
        RasterImage::from_planes(
            self.w,
            self.h,
            self.c,
            self.data.iter().map(|v| v.as_f64() as f32).collect(),
        )
    }

    /// Concatenate same-shaped samples along the batch axis.
    pub fn stack(samples: &[Tensor4<T>]) -> Result<Tensor4<T>> {
        let first = samples
            .first()
            .ok_or_else(|| Error::param("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(samples.iter().map(|t| t.numel()).sum());
        for t in samples {
            if t.c != first.c || t.h != first.h || t.w != first.w {
                return Err(Error::dims("stacked tensors must share shape".to_string()));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4 {
            n: samples.iter().map(|t| t.n).sum(),
            c: first.c,
            h: first.h,
            w: first.w,
            data,
        })
    }
}

/// Average each 2x2 block; dimensions must be even.
pub fn downsample_area2<T: Real>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    if x.h % 2 != 0 || x.w % 2 != 0 {
        return Err(Error::dims(format!(
            "downsample needs even dims, got {}x{}",
            x.h, x.w
        )));
    }
    let quarter = T::real(0.25);
    let mut out = Tensor4::zeros(x.n, x.c, x.h / 2, x.w / 2);
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..x.h / 2 {
                for xx in 0..x.w / 2 {
                    let s = x.at(n, c, 2 * y, 2 * xx)
                        + x.at(n, c, 2 * y, 2 * xx + 1)
                        + x.at(n, c, 2 * y + 1, 2 * xx)
                        + x.at(n, c, 2 * y + 1, 2 * xx + 1);
                    let i = out.idx(n, c, y, xx);
                    out.data[i] = s * quarter;
                }
            }
        }
    }
    Ok(out)
}

/// Border handling for convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Cross-correlation of `x` with kernels `w` (out-ch, in-ch, kh, kw) and one
/// bias per output channel. Output spatial dims follow
/// (size + 2 pad - k) / stride + 1.
pub fn conv2d<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: &[T],
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> Result<Tensor4<T>> {
    if stride == 0 {
        return Err(Error::param("stride must be positive"));
    }
    if w.c != x.c {
        return Err(Error::dims(format!(
            "kernel expects {} input channels, tensor has {}",
            w.c, x.c
        )));
    }
    if b.len() != w.n {
        return Err(Error::dims(format!(
            "{} biases for {} output channels",
            b.len(),
            w.n
        )));
    }
    if x.h + 2 * pad < w.h || x.w + 2 * pad < w.w {
        return Err(Error::dims(format!(
            "kernel {}x{} larger than padded input {}x{}",
            w.h,
            w.w,
            x.h + 2 * pad,
            x.w + 2 * pad
        )));
    }
    if mode == PadMode::Reflect && pad >= x.h.min(x.w) {
        return Err(Error::dims(
            "reflect padding must be smaller than the input".to_string(),
        ));
    }
    let oh = (x.h + 2 * pad - w.h) / stride + 1;
    let ow = (x.w + 2 * pad - w.w) / stride + 1;
    let (ph, pw) = (x.h + 2 * pad, x.w + 2 * pad);
    let mut out = Tensor4::zeros(x.n, w.n, oh, ow);
    // Materializing the padded sample keeps every inner loop free of
    // boundary tests, so the tap updates run over contiguous rows.
    let mut padded = vec![T::zero(); x.c * ph * pw];
    for n in 0..x.n {
        fill_padded(&mut padded, x, n, pad, mode);
        for oc in 0..w.n {
            let out_base = out.idx(n, oc, 0, 0);
            out.data[out_base..out_base + oh * ow].fill(b[oc]);
            for ic in 0..x.c {
                let plane = &padded[ic * ph * pw..(ic + 1) * ph * pw];
                for ky in 0..w.h {
                    for kx in 0..w.w {
                        let wv = w.at(oc, ic, ky, kx);
                        for oy in 0..oh {
                            let src = (oy * stride + ky) * pw + kx;
                            let dst = out_base + oy * ow;
                            if stride == 1 {
                                let row = &plane[src..src + ow];
                                let orow = &mut out.data[dst..dst + ow];
                                for (o, &v) in orow.iter_mut().zip(row) {
                                    *o = *o + wv * v;
                                }
                            } else {
                                for i in 0..ow {
                                    out.data[dst + i] =
                                        out.data[dst + i] + wv * plane[src + i * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Copy one sample of `x` into `buf` with `pad` rings of border handling
/// applied, all channels, laid out as `c` contiguous padded planes.
pub(crate) fn fill_padded<T: Real>(
    buf: &mut [T],
    x: &Tensor4<T>,
    n: usize,
    pad: usize,
    mode: PadMode,
) {
    let (ph, pw) = (x.h + 2 * pad, x.w + 2 * pad);
    for ic in 0..x.c {
        let dst = &mut buf[ic * ph * pw..(ic + 1) * ph * pw];
        for py in 0..ph {
            let sy = py as isize - pad as isize;
            let row = &mut dst[py * pw..(py + 1) * pw];
            match mode {
                PadMode::Zero => {
                    if sy < 0 || sy >= x.h as isize {
                        row.fill(T::zero());
                        continue;
                    }
                    let src = x.idx(n, ic, sy as usize, 0);
                    row[..pad].fill(T::zero());
                    row[pad..pad + x.w].copy_from_slice(&x.data[src..src + x.w]);
                    row[pad + x.w..].fill(T::zero());
                }
                PadMode::Reflect => {
                    let my = reflect_index(sy, x.h);
                    let src = x.idx(n, ic, my, 0);
                    for (px, slot) in row.iter_mut().enumerate() {
                        let mx = reflect_index(px as isize - pad as isize, x.w);
                        *slot = x.data[src + mx];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor4::from_vec(n, c, h, w, data).unwrap()
    }

    /// Direct-summation reference with the same padding semantics.
    fn conv2d_oracle(
        x: &Tensor4<f32>,
        w: &Tensor4<f32>,
        b: &[f32],
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Tensor4<f32> {
        let oh = (x.h + 2 * pad - w.h) / stride + 1;
        let ow = (x.w + 2 * pad - w.w) / stride + 1;
        let mut out = Tensor4::zeros(x.n, w.n, oh, ow);
        for n in 0..x.n {
            for oc in 0..w.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[oc] as f64;
                        for ic in 0..x.c {
                            for ky in 0..w.h {
                                for kx in 0..w.w {
                                    let sy = (oy * stride + ky) as isize - pad as isize;
                                    let sx = (ox * stride + kx) as isize - pad as isize;
                                    let v = match mode {
                                        PadMode::Reflect => x.at(
                                            n,
                                            ic,
                                            reflect_index(sy, x.h),
                                            reflect_index(sx, x.w),
                                        ),
                                        PadMode::Zero => {
                                            if sy < 0
                                                || sy >= x.h as isize
                                                || sx < 0
                                                || sx >= x.w as isize
                                            {
                                                0.0
                                            } else {
                                                x.at(n, ic, sy as usize, sx as usize)
                                            }
                                        }
                                    };
                                    acc += v as f64 * w.at(oc, ic, ky, kx) as f64;
                                }
                            }
                        }
                        let i = out.idx(n, oc, oy, ox);
                        out.data[i] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn one_by_one_identity_kernel_passes_through() {
        let x = random_tensor(2, 3, 5, 6, 1);
        let mut w = Tensor4::zeros(3, 3, 1, 1);
        for c in 0..3 {
            let i = w.idx(c, c, 0, 0);
            w.data[i] = 1.0;
        }
        let y = conv2d(&x, &w, &[0.0; 3], 1, 0, PadMode::Zero).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn all_ones_kernel_on_constant_input_sums_the_window() {
        let x = Tensor4::from_vec(1, 1, 5, 5, vec![1.0f32; 25]).unwrap();
        let w = Tensor4::from_vec(1, 1, 3, 3, vec![1.0f32; 9]).unwrap();
        let y = conv2d(&x, &w, &[0.0], 1, 1, PadMode::Zero).unwrap();
        assert_eq!(y.at(0, 0, 2, 2), 9.0);
        // Zero padding starves the corners.
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        // Reflect padding keeps the full mass everywhere.
        let y = conv2d(&x, &w, &[0.0], 1, 1, PadMode::Reflect).unwrap();
        assert!(y.data.iter().all(|&v| (v - 9.0).abs() < 1e-6));
    }

    #[test]
    fn conv_matches_direct_summation_oracle() {
        for seed in 0..20u64 {
            let x = random_tensor(1, 2, 8, 8, seed);
            let w = random_tensor(3, 2, 3, 3, 100 + seed);
            let b = [0.1f32, -0.2, 0.05];
            for (stride, pad, mode) in [
                (1usize, 1usize, PadMode::Zero),
                (1, 1, PadMode::Reflect),
                (2, 1, PadMode::Reflect),
                (1, 0, PadMode::Zero),
            ] {
                let got = conv2d(&x, &w, &b, stride, pad, mode).unwrap();
                let want = conv2d_oracle(&x, &w, &b, stride, pad, mode);
                assert_eq!(got.shape(), want.shape());
                let max = got
                    .data
                    .iter()
                    .zip(&want.data)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                assert!(max <= 1e-5, "seed {seed} {stride}/{pad}/{mode:?}: {max}");
            }
        }
    }

    #[test]
    fn stride_two_halves_even_dimensions() {
        let x = random_tensor(1, 4, 16, 12, 7);
        let w = random_tensor(6, 4, 3, 3, 8);
        let y = conv2d(&x, &w, &vec![0.0; 6], 2, 1, PadMode::Reflect).unwrap();
        assert_eq!(y.shape(), [1, 6, 8, 6]);
    }

    #[test]
    fn channel_and_bias_mismatches_are_rejected() {
        let x = random_tensor(1, 3, 8, 8, 9);
        let w = random_tensor(4, 2, 3, 3, 10);
        assert!(conv2d(&x, &w, &[0.0; 4], 1, 1, PadMode::Zero).is_err());
        let w = random_tensor(4, 3, 3, 3, 11);
        assert!(conv2d(&x, &w, &[0.0; 3], 1, 1, PadMode::Zero).is_err());
        assert!(conv2d(&x, &w, &[0.0; 4], 0, 1, PadMode::Zero).is_err());
    }

    #[test]
    fn non_finite_data_is_rejected() {
        assert!(Tensor4::from_vec(1, 1, 1, 2, vec![1.0f32, f32::NAN]).is_err());
        assert!(Tensor4::<f32>::from_vec(1, 1, 1, 2, vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn casting_round_trips_through_f64() {
        let x = random_tensor(1, 2, 4, 4, 12);
        let back: Tensor4<f32> = x.cast::<f64>().cast();
        assert_eq!(back.data, x.data);
    }

    #[test]
    fn raster_round_trip_preserves_layout() {
        let img = crate::synth::landscape(12, 8, 3, 3).unwrap();
        let t: Tensor4<f32> = Tensor4::from_raster(&img);
        assert_eq!(t.shape(), [1, 3, 8, 12]);
        assert_eq!(t.at(0, 1, 2, 5), img.at(1, 2, 5));
        let back = t.to_raster().unwrap();
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn area_downsample_preserves_the_mean() {
        let x = random_tensor(2, 3, 8, 10, 13);
        let y = downsample_area2(&x).unwrap();
        assert_eq!(y.shape(), [2, 3, 4, 5]);
        let mean_x: f64 = x.data.iter().map(|&v| v as f64).sum::<f64>() / x.numel() as f64;
        let mean_y: f64 = y.data.iter().map(|&v| v as f64).sum::<f64>() / y.numel() as f64;
        assert!((mean_x - mean_y).abs() < 1e-6);
        assert!(downsample_area2(&random_tensor(1, 1, 7, 8, 14)).is_err());
    }

    #[test]
    fn stacking_concatenates_batches() {
        let a = random_tensor(1, 2, 4, 4, 15);
        let b = random_tensor(2, 2, 4, 4, 16);
        let s = Tensor4::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), [3, 2, 4, 4]);
        assert_eq!(&s.data[..a.numel()], &a.data[..]);
        assert_eq!(&s.data[a.numel()..], &b.data[..]);
        let c = random_tensor(1, 2, 5, 4, 17);
        assert!(Tensor4::stack(&[a, c]).is_err());
        assert!(Tensor4::<f32>::stack(&[]).is_err());
    }
}
