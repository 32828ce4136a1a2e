//! Dense MLP with fake-quantized weights.
//!
//! The forward pass multiplies by `Q(W)`; biases stay in full precision.
//! Backward returns the gradient with respect to each quantized weight value
//! together with the estimator factor `Q̂'(w)` at the latent weight, so the
//! caller decides how to combine them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bisim::{Evaluation, Model, TensorView, TensorViewMut};
use crate::error::{Error, Result};
use crate::estimator::{derivative, EstimatorSpec};
use crate::quantizer::QuantizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub quantizer: QuantizerConfig,
    pub estimator: EstimatorSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub layers: Vec<DenseLayer>,
}

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub width: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    /// `∂loss/∂Q(w)` per weight.
    pub weight: Vec<f64>,
    /// `Q̂'(w)` at the latent weight.
    pub estimator_factor: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<LayerGradients>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    /// `Δ = init_bound / min(|l|, u)`: the He init interval spans the clip range.
    Auto,
    Fixed(f64),
}

/// Per-layer quantizer recipe used at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSetup {
    pub bits: u32,
    pub binary: bool,
    pub step: StepSize,
    /// Clip codes; `None` means the symmetric default `[-2^(b-1), 2^(b-1) - 1]`.
    pub clip: Option<(i64, i64)>,
    /// MAD is re-bound to each layer's own representable range.
    pub estimator: EstimatorSpec,
}

impl QuantSetup {
    pub fn quantizer_for(&self, fan_in: usize) -> Result<QuantizerConfig> {
        self.quantizer_for_bound(he_bound(fan_in))
    }

    /// Like [`Self::quantizer_for`] with an explicit init bound.
    pub fn quantizer_for_bound(&self, bound: f64) -> Result<QuantizerConfig> {
        if self.binary {
            let delta = match self.step {
                StepSize::Auto => bound,
                StepSize::Fixed(d) => d,
            };
            return QuantizerConfig::binary(delta);
        }
        let (l, u) = match self.clip {
            Some(c) => c,
            None => {
                if !(1..=62).contains(&self.bits) {
                    return Err(Error::config(format!(
                        "bits must lie in 1..=62, got {}",
                        self.bits
                    )));
                }
                let half = 1i64 << (self.bits - 1);
                (-half, half - 1)
            }
        };
        let delta = match self.step {
            StepSize::Auto => {
                let reach = l.abs().min(u.abs()).max(1);
                bound / reach as f64
            }
            StepSize::Fixed(d) => d,
        };
        QuantizerConfig::uniform(delta, l, u, self.bits)
    }

    pub fn estimator_for(&self, cfg: &QuantizerConfig) -> Result<EstimatorSpec> {
        match self.estimator {
            EstimatorSpec::Mad { .. } => EstimatorSpec::mad_for(cfg),
            other => Ok(other),
        }
    }
}

pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// He-uniform weights from a ChaCha8 stream seeded with `seed`, zero biases.
/// Hidden layers use ReLU, the last layer is linear.
pub fn init_weights(shapes: &[usize], seed: u64, setup: &QuantSetup) -> Result<NetworkState> {
    if shapes.len() < 2 || shapes.contains(&0) {
        return Err(Error::Shape(format!(
            "need at least two positive layer widths, got {shapes:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(shapes.len() - 1);
    for (i, pair) in shapes.windows(2).enumerate() {
        let (inputs, outputs) = (pair[0], pair[1]);
        let bound = he_bound(inputs);
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let quantizer = setup.quantizer_for(inputs)?;
        let estimator = setup.estimator_for(&quantizer)?;
        estimator.validate()?;
        let activation = if i + 2 == shapes.len() {
            Activation::Identity
        } else {
            Activation::Relu
        };
        layers.push(DenseLayer {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
            activation,
            quantizer,
            estimator,
        });
    }
    Ok(NetworkState { layers })
}

struct Tape {
    /// Layer inputs; `inputs[0]` is the batch itself.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
    qweights: Vec<Vec<f64>>,
    logits: Vec<f64>,
    loss: f64,
}

impl NetworkState {
    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weights.len() != layer.inputs * layer.outputs
                || layer.bias.len() != layer.outputs
            {
                return Err(Error::Shape(format!(
                    "layer {i} buffers do not match its shape"
                )));
            }
            if let Some(next) = self.layers.get(i + 1) {
                if next.inputs != layer.outputs {
                    return Err(Error::Shape(format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        layer.outputs,
                        i + 1,
                        next.inputs
                    )));
                }
            }
        }
        Ok(())
    }

    /// Logits (row-major `batch × classes`) and mean softmax cross-entropy.
    pub fn forward(&self, batch: &Batch) -> Result<(Vec<f64>, f64)> {
        let tape = self.run(batch)?;
        Ok((tape.logits, tape.loss))
    }

    /// Loss and gradients for one batch.
    pub fn backward(&self, batch: &Batch) -> Result<(f64, GradientBundle)> {
        let tape = self.run(batch)?;
        let n = batch.len();
        let classes = self.output_width();
        // d loss / d logits = (softmax - onehot) / n.
        let mut delta = vec![0.0; n * classes];
        for r in 0..n {
            let row = &tape.logits[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|z| (z - max).exp()).sum();
            for c in 0..classes {
                let p = (row[c] - max).exp() / denom;
                let y = if batch.labels[r] == c { 1.0 } else { 0.0 };
                delta[r * classes + c] = (p - y) / n as f64;
            }
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let (ins, outs) = (layer.inputs, layer.outputs);
            if layer.activation == Activation::Relu {
                for (d, &z) in delta.iter_mut().zip(&tape.pre[li]) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let x = &tape.inputs[li];
            let mut gw = vec![0.0; outs * ins];
            let mut gb = vec![0.0; outs];
            for r in 0..n {
                let xr = &x[r * ins..(r + 1) * ins];
                let dr = &delta[r * outs..(r + 1) * outs];
                for o in 0..outs {
                    let d = dr[o];
                    gb[o] += d;
                    let row = &mut gw[o * ins..(o + 1) * ins];
                    for (g, &xi) in row.iter_mut().zip(xr) {
                        *g += d * xi;
                    }
                }
            }
            let factor = layer
                .weights
                .iter()
                .map(|&w| derivative(w, &layer.estimator, &layer.quantizer))
                .collect::<Result<Vec<_>>>()?;
            if li > 0 {
                let qw = &tape.qweights[li];
                let mut prev = vec![0.0; n * ins];
                for r in 0..n {
                    let dr = &delta[r * outs..(r + 1) * outs];
                    let pr = &mut prev[r * ins..(r + 1) * ins];
                    for o in 0..outs {
                        let d = dr[o];
                        for (p, &w) in pr.iter_mut().zip(&qw[o * ins..(o + 1) * ins]) {
                            *p += d * w;
                        }
                    }
                }
                delta = prev;
            }
            grads.push(LayerGradients {
                weight: gw,
                estimator_factor: factor,
                bias: gb,
            });
        }
        grads.reverse();
        Ok((tape.loss, GradientBundle { layers: grads }))
    }

    fn run(&self, batch: &Batch) -> Result<Tape> {
        self.validate()?;
        if batch.width != self.input_width() {
            return Err(Error::Shape(format!(
                "batch width {} does not match input width {}",
                batch.width,
                self.input_width()
            )));
        }
        if batch.is_empty() || batch.features.len() != batch.len() * batch.width {
            return Err(Error::Shape("batch is empty or ragged".into()));
        }
        let classes = self.output_width();
        if let Some(&bad) = batch.labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Shape(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let n = batch.len();
        let mut inputs = vec![batch.features.clone()];
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut qweights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let qw: Vec<f64> = layer
                .weights
                .iter()
                .map(|&w| layer.quantizer.quantize(w))
                .collect::<Result<_>>()
                .map_err(|e| Error::Diverged(e.to_string()))?;
            let x = inputs.last().expect("input");
            let (ins, outs) = (layer.inputs, layer.outputs);
            let mut z = vec![0.0; n * outs];
            for r in 0..n {
                let xr = &x[r * ins..(r + 1) * ins];
                for o in 0..outs {
                    let dot: f64 = qw[o * ins..(o + 1) * ins]
                        .iter()
                        .zip(xr)
                        .map(|(w, xi)| w * xi)
                        .sum();
                    z[r * outs + o] = dot + layer.bias[o];
                }
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged("non-finite activation".into()));
            }
            let a = match layer.activation {
                Activation::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
                Activation::Identity => z.clone(),
            };
            pre.push(z);
            qweights.push(qw);
            inputs.push(a);
        }
        let logits = inputs.pop().expect("output");
        let mut loss = 0.0;
        for r in 0..n {
            let row = &logits[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[batch.labels[r]];
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("loss is {loss}")));
        }
        Ok(Tape {
            inputs,
            pre,
            qweights,
            logits,
            loss,
        })
    }
}

impl Model for NetworkState {
    type Batch = Batch;

    /// Tensor order: `w0, b0, w1, b1, ...`.
    fn tensors(&self) -> Vec<TensorView<'_>> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    TensorView {
                        values: &l.weights[..],
                        quant: Some((&l.quantizer, &l.estimator)),
                    },
                    TensorView {
                        values: &l.bias[..],
                        quant: None,
                    },
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    TensorViewMut {
                        values: &mut l.weights[..],
                        estimator: Some(&mut l.estimator),
                    },
                    TensorViewMut {
                        values: &mut l.bias[..],
                        estimator: None,
                    },
                ]
            })
            .collect()
    }

    fn evaluate(&self, batch: &Batch) -> Result<Evaluation> {
        let (loss, bundle) = self.backward(batch)?;
        let grads = bundle
            .layers
            .into_iter()
            .flat_map(|g| [g.weight, g.bias])
            .collect();
        Ok(Evaluation { loss, grads })
    }
}

/// Quantizer fine enough to act as the identity on weights of moderate size
/// (rounding error below 3e-14 for |w| < 3e1).
pub fn near_identity_quantizer() -> QuantizerConfig {
    let delta = 2f64.powi(-45);
    QuantizerConfig::uniform(delta, -(1i64 << 50), 1i64 << 50, 52).expect("valid quantizer")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn identity_setup() -> QuantSetup {
        let q = near_identity_quantizer();
        QuantSetup {
            bits: q.bits,
            binary: false,
            step: StepSize::Fixed(q.delta),
            clip: Some((q.l, q.u)),
            estimator: EstimatorSpec::Ste,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, width: usize, classes: usize) -> Batch {
        Batch {
            features: (0..n * width)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            labels: (0..n).map(|_| rng.random_range(0..classes)).collect(),
            width,
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let setup = QuantSetup {
            bits: 2,
            binary: false,
            step: StepSize::Auto,
            clip: None,
            estimator: EstimatorSpec::Tanh { k: 2.0 },
        };
        let a = init_weights(&[6, 4, 3], 9, &setup).unwrap();
        let b = init_weights(&[6, 4, 3], 9, &setup).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_weights(&[6, 4, 3], 10, &setup).unwrap());
        assert_eq!(he_bound(6), 1.0);
        assert!(a.layers[0].weights.iter().all(|w| w.abs() <= 1.0));
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert_eq!(a.layers[0].activation, Activation::Relu);
        assert_eq!(a.layers[1].activation, Activation::Identity);
        // 2-bit auto step: Δ equals the init bound, clip codes [-2, 1].
        assert_eq!(a.layers[0].quantizer.delta, 1.0);
        assert_eq!((a.layers[0].quantizer.l, a.layers[0].quantizer.u), (-2, 1));
        assert!(init_weights(&[3], 0, &setup).is_err());
    }

    #[test]
    fn mad_is_bound_per_layer() {
        let setup = QuantSetup {
            bits: 2,
            binary: false,
            step: StepSize::Auto,
            clip: None,
            estimator: EstimatorSpec::Mad {
                range_lo: 0.0,
                range_hi: 0.0,
            },
        };
        let net = init_weights(&[6, 24, 2], 1, &setup).unwrap();
        for layer in &net.layers {
            assert_eq!(
                layer.estimator,
                EstimatorSpec::mad_for(&layer.quantizer).unwrap()
            );
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let q = near_identity_quantizer();
        let net = NetworkState {
            layers: vec![DenseLayer {
                inputs: 2,
                outputs: 2,
                weights: vec![1.0, 0.0, 0.0, 1.0],
                bias: vec![0.0, 0.0],
                activation: Activation::Identity,
                quantizer: q,
                estimator: EstimatorSpec::Ste,
            }],
        };
        let batch = Batch {
            features: vec![0.3, -1.2, 2.5, 0.0],
            labels: vec![0, 1],
            width: 2,
        };
        let (logits, _) = net.forward(&batch).unwrap();
        assert_eq!(logits, batch.features);
    }

    #[test]
    fn zero_weights_give_ln2() {
        let mut net = init_weights(&[3, 5, 2], 4, &identity_setup()).unwrap();
        for layer in &mut net.layers {
            layer.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = random_batch(&mut rng, 7, 3, 2);
        let (_, loss) = net.forward(&batch).unwrap();
        assert_abs_diff_eq!(loss, 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn quantized_single_layer_by_hand() {
        let q = QuantizerConfig::uniform(2.0 / 3.0, -2, 1, 2).unwrap();
        let net = NetworkState {
            layers: vec![DenseLayer {
                inputs: 2,
                outputs: 2,
                // Q: 0.5 -> 2/3, -0.9 -> -2/3, 0.1 -> 0, 3.0 -> 2/3.
                weights: vec![0.5, -0.9, 0.1, 3.0],
                bias: vec![0.25, -0.5],
                activation: Activation::Identity,
                quantizer: q,
                estimator: EstimatorSpec::Tanh { k: 2.0 },
            }],
        };
        let batch = Batch {
            features: vec![1.0, 2.0, -3.0, 0.5],
            labels: vec![1, 0],
            width: 2,
        };
        let (logits, loss) = net.forward(&batch).unwrap();
        let two3 = 2.0 / 3.0;
        let expect = [
            two3 * 1.0 - two3 * 2.0 + 0.25,
            0.0 + two3 * 2.0 - 0.5,
            two3 * -3.0 - two3 * 0.5 + 0.25,
            0.0 + two3 * 0.5 - 0.5,
        ];
        for (a, b) in logits.iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let ce = |z0: f64, z1: f64, y: usize| {
            let lse = (z0.exp() + z1.exp()).ln();
            lse - if y == 0 { z0 } else { z1 }
        };
        let hand = 0.5 * (ce(expect[0], expect[1], 1) + ce(expect[2], expect[3], 0));
        assert_abs_diff_eq!(loss, hand, epsilon = 1e-14);
    }

    #[test]
    fn saturated_batch_has_tiny_gradient() {
        let q = near_identity_quantizer();
        let net = NetworkState {
            layers: vec![DenseLayer {
                inputs: 1,
                outputs: 2,
                weights: vec![30.0, -30.0],
                bias: vec![0.0, 0.0],
                activation: Activation::Identity,
                quantizer: q,
                estimator: EstimatorSpec::Ste,
            }],
        };
        let batch = Batch {
            features: vec![1.0],
            labels: vec![0],
            width: 1,
        };
        let (loss, grads) = net.backward(&batch).unwrap();
        assert!(loss < 1e-20);
        assert!(grads.layers[0].weight.iter().all(|g| g.abs() < 1e-20));
    }

    #[test]
    fn ste_factors_are_one() {
        let setup = QuantSetup {
            bits: 2,
            binary: false,
            step: StepSize::Auto,
            clip: None,
            estimator: EstimatorSpec::Ste,
        };
        let net = init_weights(&[2, 4, 2], 3, &setup).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, g) = net.backward(&random_batch(&mut rng, 5, 2, 2)).unwrap();
        assert!(g
            .layers
            .iter()
            .all(|l| l.estimator_factor.iter().all(|&f| f == 1.0)));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-6;
        for trial in 0..10 {
            let net = init_weights(&[2, 8, 2], 100 + trial, &identity_setup()).unwrap();
            let batch = random_batch(&mut rng, 16, 2, 2);
            let (_, grads) = net.backward(&batch).unwrap();
            let mut worst: f64 = 0.0;
            for li in 0..net.layers.len() {
                for wi in 0..net.layers[li].weights.len() {
                    let mut plus = net.clone();
                    plus.layers[li].weights[wi] += h;
                    let mut minus = net.clone();
                    minus.layers[li].weights[wi] -= h;
                    let fd = (plus.forward(&batch).unwrap().1 - minus.forward(&batch).unwrap().1)
                        / (2.0 * h);
                    let an = grads.layers[li].weight[wi];
                    worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()).max(1e-3));
                }
                for bi in 0..net.layers[li].bias.len() {
                    let mut plus = net.clone();
                    plus.layers[li].bias[bi] += h;
                    let mut minus = net.clone();
                    minus.layers[li].bias[bi] -= h;
                    let fd = (plus.forward(&batch).unwrap().1 - minus.forward(&batch).unwrap().1)
                        / (2.0 * h);
                    let an = grads.layers[li].bias[bi];
                    worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()).max(1e-3));
                }
            }
            assert!(worst < 1e-5, "trial {trial}: relative error {worst}");
        }
    }

    #[test]
    fn gradients_depend_only_on_quantized_weights() {
        let setup = QuantSetup {
            bits: 2,
            binary: false,
            step: StepSize::Auto,
            clip: None,
            estimator: EstimatorSpec::Tanh { k: 2.0 },
        };
        let net = init_weights(&[2, 16, 16, 2], 5, &setup).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = random_batch(&mut rng, 32, 2, 2);
        let (loss, base) = net.backward(&batch).unwrap();
        let mut moved = net.clone();
        for layer in &mut moved.layers {
            let q = layer.quantizer;
            for w in &mut layer.weights {
                let c = q.code(*w).unwrap();
                let (lo, hi) = match q.bin_edges(c) {
                    Some(e) => e,
                    None if c == q.l => ((c as f64 - 3.0) * q.delta, (c as f64 - 0.5) * q.delta),
                    None => ((c as f64 + 0.5) * q.delta, (c as f64 + 3.0) * q.delta),
                };
                let t: f64 = rng.random_range(0.01..0.99);
                *w = lo + t * (hi - lo);
                assert_eq!(q.code(*w).unwrap(), c);
            }
        }
        let (loss2, other) = moved.backward(&batch).unwrap();
        assert_eq!(loss.to_bits(), loss2.to_bits());
        for (a, b) in base.layers.iter().zip(&other.layers) {
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.bias, b.bias);
        }
    }

    #[test]
    fn shape_errors() {
        let net = init_weights(&[2, 3, 2], 0, &identity_setup()).unwrap();
        let bad = Batch {
            features: vec![0.0; 3],
            labels: vec![0],
            width: 3,
        };
        assert!(matches!(net.forward(&bad), Err(Error::Shape(_))));
        let bad_label = Batch {
            features: vec![0.0; 2],
            labels: vec![5],
            width: 2,
        };
        assert!(matches!(net.forward(&bad_label), Err(Error::Shape(_))));
    }

    #[test]
    fn diverged_weights_are_reported() {
        let mut net = init_weights(&[2, 3, 2], 0, &identity_setup()).unwrap();
        net.layers[0].weights[0] = f64::NAN;
        let batch = Batch {
            features: vec![1.0, 1.0],
            labels: vec![0],
            width: 2,
        };
        assert!(matches!(net.forward(&batch), Err(Error::Diverged(_))));
    }
}
