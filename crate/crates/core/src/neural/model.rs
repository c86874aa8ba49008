//! Toy-scale multi-input multi-output restorer: a three-level U-shape that
//! takes the image pyramid as input and emits a restored estimate at every
//! level, each as input-plus-residual.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::neural::graph::{Graph, NodeId};
use crate::neural::tensor::{downsample_area2, PadMode, Real, Tensor4};

/// Channel geometry. The three levels run at base, double, and quadruple
/// width; every convolution is 3x3 with reflect padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub base_width: usize,
    pub input_channels: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            base_width: 8,
            input_channels: 3,
        }
    }
}

impl Architecture {
    pub fn widths(&self) -> [usize; 3] {
        [self.base_width, self.base_width * 2, self.base_width * 4]
    }

    /// Every convolution layer as (name, out-channels, in-channels).
    pub fn layers(&self) -> Vec<(&'static str, usize, usize)> {
        let [w1, w2, w3] = self.widths();
        let ic = self.input_channels;
        vec![
            ("in_conv", w1, ic),
            ("enc1a", w1, w1),
            ("enc1b", w1, w1),
            ("down1", w2, w1),
            ("scm2", w2, ic),
            ("enc2a", w2, w2),
            ("enc2b", w2, w2),
            ("down2", w3, w2),
            ("scm3", w3, ic),
            ("mid3a", w3, w3),
            ("mid3b", w3, w3),
            ("out3", ic, w3),
            ("up2", w2, w3),
            ("dec2a", w2, w2),
            ("dec2b", w2, w2),
            ("out2", ic, w2),
            ("up1", w1, w2),
            ("dec1a", w1, w1),
            ("dec1b", w1, w1),
            ("out1", ic, w1),
        ]
    }

    /// Expected parameter tensors: `<layer>.w` as [oc, ic, 3, 3] and
    /// `<layer>.b` as [oc].
    pub fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut shapes = BTreeMap::new();
        for (name, oc, ic) in self.layers() {
            shapes.insert(format!("{name}.w"), vec![oc, ic, 3, 3]);
            shapes.insert(format!("{name}.b"), vec![oc]);
        }
        shapes
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// The full parameter set, keyed by layer name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub arch: Architecture,
    tensors: BTreeMap<String, NamedTensor>,
}

impl ModelWeights {
    /// Fresh weights: uniform He-style fan-in scaling for the trunk, zeros
    /// for the residual output heads so an untrained model is the identity.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, oc, ic) in arch.layers() {
            let zero_head = name.starts_with("out");
            let fan_in = (ic * 9) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let wdata: Vec<f32> = (0..oc * ic * 9)
                .map(|_| {
                    if zero_head {
                        0.0
                    } else {
                        rng.gen_range(-bound..bound) as f32
                    }
                })
                .collect();
            tensors.insert(
                format!("{name}.w"),
                NamedTensor {
                    dims: vec![oc, ic, 3, 3],
                    data: wdata,
                },
            );
            tensors.insert(
                format!("{name}.b"),
                NamedTensor {
                    dims: vec![oc],
                    data: vec![0.0; oc],
                },
            );
        }
        ModelWeights { arch, tensors }
    }

    pub fn from_tensors(
        arch: Architecture,
        tensors: BTreeMap<String, NamedTensor>,
    ) -> Result<Self> {
        let weights = ModelWeights { arch, tensors };
        weights.validate()?;
        Ok(weights)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.arch.expected_shapes();
        for (name, dims) in &expected {
            match self.tensors.get(name) {
                None => {
                    return Err(Error::WeightFormat(format!("missing tensor {name}")));
                }
                Some(t) => {
                    if &t.dims != dims {
                        return Err(Error::WeightFormat(format!(
                            "tensor {name} has dims {:?}, expected {:?}",
                            t.dims, dims
                        )));
                    }
                    if t.data.len() != t.numel() {
                        return Err(Error::WeightFormat(format!(
                            "tensor {name} data length {} != {}",
                            t.data.len(),
                            t.numel()
                        )));
                    }
                    if t.data.iter().any(|v| !v.is_finite()) {
                        return Err(Error::WeightFormat(format!(
                            "tensor {name} carries non-finite values"
                        )));
                    }
                }
            }
        }
        for name in self.tensors.keys() {
            if !expected.contains_key(name) {
                return Err(Error::WeightFormat(format!(
                    "unexpected tensor {name} for this architecture"
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::WeightFormat(format!("missing tensor {name}")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut NamedTensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::WeightFormat(format!("missing tensor {name}")))
    }

    /// Names in stable iteration order.
    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NamedTensor)> {
        self.tensors.iter()
    }
}

/// Node handles for a model instance planted in a graph.
pub struct ModelGraph {
    /// Parameter leaves in `ModelWeights::names` order.
    pub params: Vec<(String, NodeId)>,
    /// Restored estimates at full, half, and quarter resolution.
    pub outputs: [NodeId; 3],
}

fn weight_leaf<T: Real>(
    g: &mut Graph<T>,
    weights: &ModelWeights,
    name: &str,
    trainable: bool,
) -> Result<NodeId> {
    let t = weights.tensor(name)?;
    let tensor = match t.dims.len() {
        4 => Tensor4::from_vec(
            t.dims[0],
            t.dims[1],
            t.dims[2],
            t.dims[3],
            t.data.iter().map(|&v| T::real(v as f64)).collect(),
        )?,
        1 => Tensor4::from_vec(
            1,
            t.dims[0],
            1,
            1,
            t.data.iter().map(|&v| T::real(v as f64)).collect(),
        )?,
        other => {
            return Err(Error::WeightFormat(format!(
                "tensor {name} has unsupported rank {other}"
            )))
        }
    };
    Ok(g.leaf(tensor, trainable))
}

struct LayerNodes {
    ids: BTreeMap<&'static str, (NodeId, NodeId)>,
}

impl LayerNodes {
    fn get(&self, name: &str) -> (NodeId, NodeId) {
        self.ids[name]
    }
}

/// Plant the forward computation in `g`. The pyramid inputs must already be
/// leaves; levels two and three expect the input downsampled 2x and 4x.
pub fn build_forward<T: Real>(
    g: &mut Graph<T>,
    weights: &ModelWeights,
    trainable: bool,
    x1: NodeId,
    x2: NodeId,
    x4: NodeId,
) -> Result<ModelGraph> {
    weights.validate()?;
    let shape = g.value(x1).shape();
    if shape[2] % 4 != 0 || shape[3] % 4 != 0 {
        return Err(Error::dims(format!(
            "input dims {}x{} must be divisible by 4",
            shape[2], shape[3]
        )));
    }
    if shape[1] != weights.arch.input_channels {
        return Err(Error::dims(format!(
            "model expects {} channels, input has {}",
            weights.arch.input_channels, shape[1]
        )));
    }

    let mut params = Vec::new();
    let mut ids = BTreeMap::new();
    for (name, _, _) in weights.arch.layers() {
        let w = weight_leaf(g, weights, &format!("{name}.w"), trainable)?;
        let b = weight_leaf(g, weights, &format!("{name}.b"), trainable)?;
        ids.insert(name, (w, b));
    }
    let layers = LayerNodes { ids };
    // params must follow ModelWeights::names (sorted) order for the trainer.
    for name in weights.names() {
        let layer = name.split('.').next().unwrap();
        let (w, b) = layers.get(layer);
        let id = if name.ends_with(".w") { w } else { b };
        params.push((name, id));
    }

    let conv = |g: &mut Graph<T>, layer: &str, x: NodeId, stride: usize| -> Result<NodeId> {
        let (w, b) = layers.get(layer);
        g.conv2d(x, w, b, stride, 1, PadMode::Reflect)
    };
    let res_block = |g: &mut Graph<T>, a: &str, b: &str, x: NodeId| -> Result<NodeId> {
        let h = conv(g, a, x, 1)?;
        let h = g.relu(h);
        let h = conv(g, b, h, 1)?;
        g.add(x, h)
    };

    let f1 = conv(g, "in_conv", x1, 1)?;
    let f1 = g.relu(f1);
    let f1 = res_block(g, "enc1a", "enc1b", f1)?;

    let d1 = conv(g, "down1", f1, 2)?;
    let d1 = g.relu(d1);
    let s2 = conv(g, "scm2", x2, 1)?;
    let s2 = g.relu(s2);
    let m2 = g.add(d1, s2)?;
    let f2 = res_block(g, "enc2a", "enc2b", m2)?;

    let d2 = conv(g, "down2", f2, 2)?;
    let d2 = g.relu(d2);
    let s3 = conv(g, "scm3", x4, 1)?;
    let s3 = g.relu(s3);
    let m3 = g.add(d2, s3)?;
    let f3 = res_block(g, "mid3a", "mid3b", m3)?;

    let r3 = conv(g, "out3", f3, 1)?;
    let o3 = g.add(x4, r3)?;

    let u2 = g.upsample_nearest2(f3);
    let u2 = conv(g, "up2", u2, 1)?;
    let u2 = g.relu(u2);
    let a2 = g.add(u2, f2)?;
    let g2 = res_block(g, "dec2a", "dec2b", a2)?;

    let r2 = conv(g, "out2", g2, 1)?;
    let o2 = g.add(x2, r2)?;

    let u1 = g.upsample_nearest2(g2);
    let u1 = conv(g, "up1", u1, 1)?;
    let u1 = g.relu(u1);
    let a1 = g.add(u1, f1)?;
    let g1 = res_block(g, "dec1a", "dec1b", a1)?;

    let r1 = conv(g, "out1", g1, 1)?;
    let o1 = g.add(x1, r1)?;

    Ok(ModelGraph {
        params,
        outputs: [o1, o2, o3],
    })
}

/// Input pyramid: the image itself plus 2x and 4x area-downsampled copies.
pub fn pyramid<T: Real>(x: &Tensor4<T>) -> Result<[Tensor4<T>; 3]> {
    let x2 = downsample_area2(x)?;
    let x4 = downsample_area2(&x2)?;
    Ok([x.clone(), x2, x4])
}

/// Run the restorer on a batch, returning estimates at full, half, and
/// quarter resolution.
pub fn mimo_forward(weights: &ModelWeights, img: &Tensor4<f32>) -> Result<[Tensor4<f32>; 3]> {
    if img.h % 4 != 0 || img.w % 4 != 0 {
        return Err(Error::dims(format!(
            "input dims {}x{} must be divisible by 4",
            img.h, img.w
        )));
    }
    let [x1, x2, x4] = pyramid(img)?;
    let mut g: Graph<f32> = Graph::new();
    let x1 = g.leaf(x1, false);
    let x2 = g.leaf(x2, false);
    let x4 = g.leaf(x4, false);
    let model = build_forward(&mut g, weights, false, x1, x2, x4)?;
    Ok([
        g.value(model.outputs[0]).clone(),
        g.value(model.outputs[1]).clone(),
        g.value(model.outputs[2]).clone(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(n: usize, h: usize, w: usize, seed: u64) -> Tensor4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor4::from_vec(n, 3, h, w, data).unwrap()
    }

    #[test]
    fn parameter_count_is_stable() {
        let w = ModelWeights::init(Architecture::default(), 0);
        assert_eq!(w.param_count(), 44_793);
        assert!(w.param_count() <= 50_000);
    }

    #[test]
    fn fresh_weights_validate_and_expose_all_layers() {
        let w = ModelWeights::init(Architecture::default(), 1);
        w.validate().unwrap();
        assert_eq!(w.names().len(), 40);
        assert_eq!(w.tensor("mid3a.w").unwrap().dims, vec![32, 32, 3, 3]);
        assert_eq!(w.tensor("out1.b").unwrap().dims, vec![3]);
    }

    #[test]
    fn zero_residual_heads_make_the_fresh_model_an_identity() {
        let w = ModelWeights::init(Architecture::default(), 2);
        let x = random_input(1, 16, 16, 3);
        let [o1, o2, o3] = mimo_forward(&w, &x).unwrap();
        let [p1, p2, p4] = pyramid(&x).unwrap();
        assert_eq!(o1.data, p1.data);
        assert_eq!(o2.data, p2.data);
        assert_eq!(o3.data, p4.data);
    }

    #[test]
    fn output_shapes_follow_the_pyramid() {
        let w = ModelWeights::init(Architecture::default(), 4);
        let x = random_input(1, 64, 64, 5);
        let [o1, o2, o3] = mimo_forward(&w, &x).unwrap();
        assert_eq!(o1.shape(), [1, 3, 64, 64]);
        assert_eq!(o2.shape(), [1, 3, 32, 32]);
        assert_eq!(o3.shape(), [1, 3, 16, 16]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut w = ModelWeights::init(Architecture::default(), 6);
        // Give the heads mass so the residual path participates.
        for name in ["out1.w", "out2.w", "out3.w"] {
            for (k, v) in w.tensor_mut(name).unwrap().data.iter_mut().enumerate() {
                *v = ((k % 7) as f32 - 3.0) * 0.01;
            }
        }
        let x = random_input(2, 16, 16, 7);
        let a = mimo_forward(&w, &x).unwrap();
        let b = mimo_forward(&w, &x).unwrap();
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(ta.data, tb.data);
        }
        // And the residual path actually changed something.
        let [p1, _, _] = pyramid(&x).unwrap();
        assert_ne!(a[0].data, p1.data);
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        let w = ModelWeights::init(Architecture::default(), 8);
        let x = random_input(1, 18, 16, 9);
        assert!(mimo_forward(&w, &x).is_err());
    }

    #[test]
    fn validation_catches_missing_wrong_and_extra_tensors() {
        let arch = Architecture::default();
        let good = ModelWeights::init(arch, 10);

        let mut tensors: BTreeMap<String, NamedTensor> =
            good.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        tensors.remove("up1.w");
        assert!(ModelWeights::from_tensors(arch, tensors.clone()).is_err());

        let mut tensors: BTreeMap<String, NamedTensor> =
            good.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        tensors.get_mut("up1.w").unwrap().dims = vec![8, 16, 5, 5];
        assert!(ModelWeights::from_tensors(arch, tensors).is_err());

        let mut tensors: BTreeMap<String, NamedTensor> =
            good.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        tensors.insert(
            "rogue.w".to_string(),
            NamedTensor {
                dims: vec![1],
                data: vec![0.0],
            },
        );
        assert!(ModelWeights::from_tensors(arch, tensors).is_err());
    }
}
