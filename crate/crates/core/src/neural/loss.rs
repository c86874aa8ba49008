//! Multi-scale content loss: per-scale mean absolute error plus a weighted
//! frequency-domain term on the same difference.

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::neural::graph::{Graph, NodeId};
use crate::neural::tensor::{Real, Tensor4};

/// Loss between output/target pyramids:
/// sum over scales of mean|d| + lambda * mean|FFT2(d)|, with d the
/// difference and the FFT applied per channel. Accumulation runs in f64.
pub fn content_loss<T: Real>(
    outputs: &[Tensor4<T>; 3],
    targets: &[Tensor4<T>; 3],
    lambda: f64,
) -> Result<f64> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::param("loss weight must be non-negative"));
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut total = 0.0;
    for (out, tgt) in outputs.iter().zip(targets) {
        if out.shape() != tgt.shape() {
            return Err(Error::dims(format!(
                "loss shapes differ: {:?} vs {:?}",
                out.shape(),
                tgt.shape()
            )));
        }
        let numel = out.numel() as f64;
        let l1: f64 = out
            .data
            .iter()
            .zip(&tgt.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .sum::<f64>()
            / numel;
        total += l1;
        if lambda > 0.0 {
            let mut spectral = 0.0;
            let (h, w) = (out.h, out.w);
            let row_fft = planner.plan_fft_forward(w);
            let col_fft = planner.plan_fft_forward(h);
            for s in 0..out.n {
                for c in 0..out.c {
                    let base = out.idx(s, c, 0, 0);
                    let mut plane: Vec<Complex<f64>> = (0..h * w)
                        .map(|k| {
                            Complex::new(
                                out.data[base + k].as_f64() - tgt.data[base + k].as_f64(),
                                0.0,
                            )
                        })
                        .collect();
                    for row in plane.chunks_exact_mut(w) {
                        row_fft.process(row);
                    }
                    let mut column = vec![Complex::new(0.0, 0.0); h];
                    for x in 0..w {
                        for y in 0..h {
                            column[y] = plane[y * w + x];
                        }
                        col_fft.process(&mut column);
                        for y in 0..h {
                            plane[y * w + x] = column[y];
                        }
                    }
                    spectral += plane.iter().map(|z| z.norm()).sum::<f64>();
                }
            }
            total += lambda * spectral / numel;
        }
    }
    Ok(total)
}

/// Graph version of [`content_loss`] for training; returns the scalar node.
pub fn content_loss_node<T: Real>(
    g: &mut Graph<T>,
    outputs: [NodeId; 3],
    targets: [NodeId; 3],
    lambda: f64,
) -> Result<NodeId> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::param("loss weight must be non-negative"));
    }
    let mut terms = Vec::with_capacity(6);
    for (out, tgt) in outputs.into_iter().zip(targets) {
        let l1 = g.l1_mean(out, tgt)?;
        terms.push((l1, T::one()));
        if lambda > 0.0 {
            let fft = g.fft_l1_mean(out, tgt)?;
            terms.push((fft, T::real(lambda)));
        }
    }
    g.scaled_sum(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pyramid(seed: u64) -> [Tensor4<f32>; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |h: usize, w: usize| {
            let data = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
            Tensor4::from_vec(1, 3, h, w, data).unwrap()
        };
        [make(16, 16), make(8, 8), make(4, 4)]
    }

    #[test]
    fn loss_is_zero_iff_outputs_equal_targets() {
        let p = random_pyramid(1);
        assert_eq!(content_loss(&p, &p, 0.1).unwrap(), 0.0);
        let q = random_pyramid(2);
        assert!(content_loss(&p, &q, 0.1).unwrap() > 0.0);
    }

    #[test]
    fn zero_lambda_reduces_to_multi_scale_l1() {
        let p = random_pyramid(3);
        let q = random_pyramid(4);
        let got = content_loss(&p, &q, 0.0).unwrap();
        let mut want = 0.0;
        for (a, b) in p.iter().zip(&q) {
            want += a
                .data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| ((x - y) as f64).abs())
                .sum::<f64>()
                / a.numel() as f64;
        }
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn fft_term_matches_a_hand_dft_on_a_4x4_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a_data: Vec<f32> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b_data: Vec<f32> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let a = Tensor4::from_vec(1, 1, 4, 4, a_data.clone()).unwrap();
        let b = Tensor4::from_vec(1, 1, 4, 4, b_data.clone()).unwrap();
        let zero = Tensor4::zeros(1, 1, 4, 4);
        let pyr_a = [a.clone(), zero.clone(), Tensor4::zeros(1, 1, 2, 2)];
        let pyr_b = [b.clone(), zero, Tensor4::zeros(1, 1, 2, 2)];
        // Pyramid shapes are unused beyond the first scale here (all zero),
        // so the difference is confined to the 4x4 plane.
        let lambda = 0.7;
        let got = content_loss(&pyr_a, &pyr_b, lambda).unwrap();

        let mut l1 = 0.0;
        let mut spectral = 0.0;
        for ky in 0..4 {
            for kx in 0..4 {
                let mut re = 0.0;
                let mut im = 0.0;
                for y in 0..4 {
                    for x in 0..4 {
                        let d = (a_data[y * 4 + x] - b_data[y * 4 + x]) as f64;
                        let angle = -2.0 * std::f64::consts::PI
                            * (ky as f64 * y as f64 / 4.0 + kx as f64 * x as f64 / 4.0);
                        re += d * angle.cos();
                        im += d * angle.sin();
                    }
                }
                spectral += (re * re + im * im).sqrt();
            }
        }
        for k in 0..16 {
            l1 += ((a_data[k] - b_data[k]) as f64).abs();
        }
        let want = l1 / 16.0 + lambda * spectral / 16.0;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn graph_loss_agrees_with_the_pure_evaluation() {
        let p = random_pyramid(6);
        let q = random_pyramid(7);
        let pure = content_loss(&p, &q, 0.1).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let outs = [
            g.leaf(p[0].cast(), false),
            g.leaf(p[1].cast(), false),
            g.leaf(p[2].cast(), false),
        ];
        let tgts = [
            g.leaf(q[0].cast(), false),
            g.leaf(q[1].cast(), false),
            g.leaf(q[2].cast(), false),
        ];
        let node = content_loss_node(&mut g, outs, tgts, 0.1).unwrap();
        assert!((g.scalar(node) - pure).abs() < 1e-9);
    }

    #[test]
    fn mismatched_shapes_and_bad_lambda_are_rejected() {
        let p = random_pyramid(8);
        let mut q = random_pyramid(9);
        q[1] = Tensor4::zeros(1, 3, 16, 16);
        assert!(content_loss(&p, &q, 0.1).is_err());
        let q = random_pyramid(10);
        assert!(content_loss(&p, &q, -0.5).is_err());
        assert!(content_loss(&p, &q, f64::NAN).is_err());
    }
}
