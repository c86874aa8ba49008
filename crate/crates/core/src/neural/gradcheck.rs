//! Finite-difference verification of the analytic gradients.
//!
//! The analytic side runs the 64-bit tape; the numeric side re-evaluates
//! the loss with individual weights nudged up and down and divides by the
//! step actually realized after 32-bit storage rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::neural::graph::Graph;
use crate::neural::loss::content_loss;
use crate::neural::model::{build_forward, pyramid, Architecture, ModelWeights};
use crate::neural::tensor::Tensor4;
use crate::neural::train::backward;

/// Lower bound on the number of probed parameters.
pub const GRADCHECK_MIN_SAMPLES: usize = 200;

/// Gradient magnitudes below this are treated as zero when forming the
/// relative error, so finite-difference noise on flat directions cannot
/// dominate the report.
const GRAD_ATOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub sampled: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
}

pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < GRAD_ATOL {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn loss_only(
    weights: &ModelWeights,
    inputs: &[Tensor4<f64>; 3],
    targets: &[Tensor4<f64>; 3],
    lambda: f64,
) -> Result<f64> {
    let mut g: Graph<f64> = Graph::new();
    let x1 = g.leaf(inputs[0].clone(), false);
    let x2 = g.leaf(inputs[1].clone(), false);
    let x4 = g.leaf(inputs[2].clone(), false);
    let model = build_forward(&mut g, weights, false, x1, x2, x4)?;
    let outputs = [
        g.value(model.outputs[0]).clone(),
        g.value(model.outputs[1]).clone(),
        g.value(model.outputs[2]).clone(),
    ];
    content_loss(&outputs, targets, lambda)
}

/// Central-difference slope of the loss along one stored weight.
pub(crate) fn numeric_slope(
    weights: &ModelWeights,
    inputs: &[Tensor4<f64>; 3],
    targets: &[Tensor4<f64>; 3],
    lambda: f64,
    eps: f64,
    name: &str,
    index: usize,
) -> Result<f64> {
    let mut probe = weights.clone();
    let original = probe.tensor(name)?.data[index];
    let plus = (original as f64 + eps) as f32;
    let minus = (original as f64 - eps) as f32;

    probe.tensor_mut(name)?.data[index] = plus;
    let loss_plus = loss_only(&probe, inputs, targets, lambda)?;
    probe.tensor_mut(name)?.data[index] = minus;
    let loss_minus = loss_only(&probe, inputs, targets, lambda)?;

    let step = plus as f64 - minus as f64;
    Ok((loss_plus - loss_minus) / step)
}

/// Compare analytic gradients against central differences on randomly
/// sampled parameters. Fewer than [`GRADCHECK_MIN_SAMPLES`] requested
/// probes are rounded up; sampling is without replacement.
/// Weights that keep the network inside one linear cell of its
/// piecewise-linear loss surface, for use as the verification fixture.
///
/// ReLU plus L1 makes the loss piecewise linear in every parameter, and a
/// central difference that straddles a kink carries an error set by the
/// slope jump, not by the step size. So the fixture pins every sample
/// away from the kinks: feature weights are shrunk, biases feeding a ReLU
/// are lifted to 0.5 so pre-activations stay strictly positive under a
/// 1e-3 nudge, and the output heads are saturated positive so every L1
/// residual keeps one sign. Every branch still carries gradient, so a
/// wrong analytic derivative anywhere in the model is still visible.
pub fn calibration_weights(seed: u64) -> ModelWeights {
    let relu_fed = [
        "in_conv", "enc1a", "enc2a", "mid3a", "dec1a", "dec2a", "down1", "down2", "scm2",
        "scm3", "up1", "up2",
    ];
    let mut weights = ModelWeights::init(Architecture::default(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x517c_c1b7);
    for name in weights.names() {
        let layer = name.split('.').next().unwrap().to_string();
        let head = layer.starts_with("out");
        let t = weights.tensor_mut(&name).unwrap();
        if name.ends_with(".w") {
            for v in &mut t.data {
                if head {
                    *v = rng.gen_range(-0.02..0.02);
                } else {
                    *v *= 0.05;
                }
            }
        } else if head {
            t.data.fill(1.0);
        } else if relu_fed.contains(&layer.as_str()) {
            t.data.fill(0.5);
        }
    }
    weights
}

pub fn gradcheck(
    weights: &ModelWeights,
    input: &Tensor4<f32>,
    target: &Tensor4<f32>,
    lambda: f64,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::param("finite-difference step must be positive"));
    }
    let input64: Tensor4<f64> = input.cast();
    let target64: Tensor4<f64> = target.cast();
    let (_, analytic) = backward(weights, &input64, &target64, lambda)?;

    let input_pyr = pyramid(&input64)?;
    let target_pyr = pyramid(&target64)?;
    let names = weights.names();
    let sizes: Vec<usize> = names
        .iter()
        .map(|n| weights.tensor(n).map(|t| t.numel()))
        .collect::<Result<_>>()?;
    let total: usize = sizes.iter().sum();
    let wanted = samples.max(GRADCHECK_MIN_SAMPLES).min(total);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = rand::seq::index::sample(&mut rng, total, wanted).into_vec();
    flat.sort_unstable();

    let mut report = GradCheckReport {
        sampled: 0,
        max_rel_error: 0.0,
        mean_rel_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
    };
    let mut rel_sum = 0.0;
    for flat_index in flat {
        let mut k = 0;
        let mut offset = flat_index;
        while offset >= sizes[k] {
            offset -= sizes[k];
            k += 1;
        }
        let numeric = numeric_slope(
            weights,
            &input_pyr,
            &target_pyr,
            lambda,
            eps,
            &names[k],
            offset,
        )?;
        let rel = relative_error(analytic[k][offset], numeric);
        rel_sum += rel;
        report.sampled += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_parameter = names[k].clone();
            report.worst_index = offset;
        }
    }
    report.mean_rel_error = rel_sum / report.sampled.max(1) as f64;
    Ok(report)
}
