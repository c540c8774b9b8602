//! Adapters that translate frozen image features into pseudo-token
//! embeddings and into the visual condition.
//!
//! Each adapter is a stack of blocks; a block is two fully connected layers
//! followed by layer normalization and a leaky ReLU:
//! `block(x) = LeakyReLU(LN(FC2(FC1(x))))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Module, Param, Tape, Var};
use crate::encoders::ImageFeatureStack;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
struct AdapterBlock {
    fc1_w: Param,
    fc1_b: Param,
    fc2_w: Param,
    fc2_b: Param,
    ln_gain: Param,
    ln_bias: Param,
}

impl AdapterBlock {
    fn new<R: Rng + ?Sized>(prefix: &str, input: usize, width: usize, rng: &mut R) -> Self {
        Self {
            fc1_w: Param::trainable(format!("{prefix}.fc1.w"), Matrix::randn(input, width, INIT_STD, rng)),
            fc1_b: Param::trainable(format!("{prefix}.fc1.b"), Matrix::zeros(1, width)),
            fc2_w: Param::trainable(format!("{prefix}.fc2.w"), Matrix::randn(width, width, INIT_STD, rng)),
            fc2_b: Param::trainable(format!("{prefix}.fc2.b"), Matrix::zeros(1, width)),
            ln_gain: Param::trainable(format!("{prefix}.ln.gain"), Matrix::filled(1, width, 1.0)),
            ln_bias: Param::trainable(format!("{prefix}.ln.bias"), Matrix::zeros(1, width)),
        }
    }

    fn params(&self) -> [&Param; 6] {
        [&self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b, &self.ln_gain, &self.ln_bias]
    }

    fn params_mut(&mut self) -> [&mut Param; 6] {
        [&mut self.fc1_w, &mut self.fc1_b, &mut self.fc2_w, &mut self.fc2_b, &mut self.ln_gain, &mut self.ln_bias]
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let [w1, b1, w2, b2, g, b] = self.params().map(|p| tape.param(p));
        let h = tape.linear(x, w1, Some(b1))?;
        let h = tape.linear(h, w2, Some(b2))?;
        let h = tape.normalize_rows(h);
        let h = tape.mul_row(h, g)?;
        let h = tape.add_row(h, b)?;
        Ok(tape.leaky_relu(h, LEAKY_SLOPE))
    }
}

/// A small MLP adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterNetwork {
    name: String,
    input_dim: usize,
    output_dim: usize,
    blocks: Vec<AdapterBlock>,
}

impl AdapterNetwork {
    /// `blocks` blocks, all of width `output_dim`.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input_dim: usize,
        output_dim: usize,
        blocks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || blocks == 0 {
            return Err(Error::invalid("adapter dimensions and block count must be positive"));
        }
        let blocks = (0..blocks)
            .map(|i| {
                let input = if i == 0 { input_dim } else { output_dim };
                AdapterBlock::new(&format!("{name}.blocks.{i}"), input, output_dim, rng)
            })
            .collect();
        Ok(Self { name: name.to_string(), input_dim, output_dim, blocks })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Set every weight, bias, and normalization parameter to zero.
    pub fn zero(&mut self) {
        self.visit_params_mut(&mut |p| p.value = Matrix::zeros(p.value.rows(), p.value.cols()));
    }

    /// Forward over the rows of `x` (`n x input_dim`).
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let width = tape.shape(x).1;
        if width != self.input_dim {
            return Err(Error::invalid(format!("adapter {} expects width {}, got {width}", self.name, self.input_dim)));
        }
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(tape, h)?;
        }
        Ok(h)
    }
}

impl Module for AdapterNetwork {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for b in &self.blocks {
            for p in b.params() {
                f(p);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.blocks {
            for p in b.params_mut() {
                f(p);
            }
        }
    }
}

pub fn adapter_forward(net: &AdapterNetwork, feature: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let x = tape.constant(feature.clone());
    let y = net.forward_on_tape(&mut tape, x)?;
    Ok(tape.value(y).clone())
}

/// The `m` pseudo-token embeddings, one row per tapped layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoTokenSet {
    pub tokens: Matrix,
    pub source_layer_indices: Vec<usize>,
}

impl PseudoTokenSet {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    /// Keep the `k` tokens from the deepest layers.
    pub fn keep_deepest(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.len() {
            return Err(Error::invalid(format!("cannot keep {k} of {} pseudo tokens", self.len())));
        }
        let start = self.len() - k;
        Ok(Self {
            tokens: self.tokens.slice_rows(start, k),
            source_layer_indices: self.source_layer_indices[start..].to_vec(),
        })
    }
}

/// The visual condition `f`, `tokens x visual_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualCondition {
    pub feature: Matrix,
}

/// One adapter per tapped layer, or a single adapter shared by all layers.
#[derive(Clone, Debug, PartialEq)]
pub struct TextAdapterBank {
    nets: Vec<AdapterNetwork>,
    shared: bool,
}

impl TextAdapterBank {
    pub fn new<R: Rng + ?Sized>(
        m: usize,
        input_dim: usize,
        output_dim: usize,
        blocks: usize,
        shared: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("text adapter bank needs at least one adapter"));
        }
        let count = if shared { 1 } else { m };
        let nets = (0..count)
            .map(|i| AdapterNetwork::new(&format!("text_adapters.{i}"), input_dim, output_dim, blocks, rng))
            .collect::<Result<_>>()?;
        Ok(Self { nets, shared })
    }

    pub fn from_networks(nets: Vec<AdapterNetwork>) -> Result<Self> {
        if nets.is_empty() {
            return Err(Error::invalid("text adapter bank needs at least one adapter"));
        }
        Ok(Self { nets, shared: false })
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    pub fn networks(&self) -> &[AdapterNetwork] {
        &self.nets
    }

    pub fn networks_mut(&mut self) -> &mut [AdapterNetwork] {
        &mut self.nets
    }

    fn check(&self, layers: usize) -> Result<()> {
        if !self.shared && self.nets.len() != layers {
            return Err(Error::invalid(format!(
                "adapter bank has {} adapters but the feature stack has {layers} layers",
                self.nets.len()
            )));
        }
        Ok(())
    }

    fn net_for(&self, layer: usize) -> &AdapterNetwork {
        if self.shared {
            &self.nets[0]
        } else {
            &self.nets[layer]
        }
    }

    /// Pseudo tokens on the tape, `m x output_dim`.
    pub fn forward_on_tape(&self, tape: &mut Tape, stack: &ImageFeatureStack) -> Result<Var> {
        self.check(stack.len())?;
        let rows = stack
            .layers
            .iter()
            .enumerate()
            .map(|(i, feature)| {
                let x = tape.constant(feature.clone());
                self.net_for(i).forward_on_tape(tape, x)
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat_rows(&rows)
    }
}

impl Module for TextAdapterBank {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for n in &self.nets {
            n.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for n in &mut self.nets {
            n.visit_params_mut(f);
        }
    }
}

pub fn text_adapters_forward(bank: &TextAdapterBank, stack: &ImageFeatureStack) -> Result<PseudoTokenSet> {
    let mut tape = Tape::new();
    let tokens = bank.forward_on_tape(&mut tape, stack)?;
    Ok(PseudoTokenSet { tokens: tape.value(tokens).clone(), source_layer_indices: stack.layer_indices.clone() })
}

/// Shape of the visual condition produced by the image adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualShape {
    pub tokens: usize,
    pub dim: usize,
}

/// Image adapter forward on the tape; returns `tokens x dim`.
pub fn image_adapter_on_tape(net: &AdapterNetwork, tape: &mut Tape, feature: Var, shape: VisualShape) -> Result<Var> {
    if net.output_dim() != shape.tokens * shape.dim {
        return Err(Error::invalid(format!(
            "image adapter width {} cannot be reshaped to {}x{}",
            net.output_dim(),
            shape.tokens,
            shape.dim
        )));
    }
    let y = net.forward_on_tape(tape, feature)?;
    tape.reshape(y, shape.tokens, shape.dim)
}

pub fn image_adapter_forward(net: &AdapterNetwork, feature: &Matrix, shape: VisualShape) -> Result<VisualCondition> {
    let mut tape = Tape::new();
    let x = tape.constant(feature.clone());
    let y = image_adapter_on_tape(net, &mut tape, x, shape)?;
    Ok(VisualCondition { feature: tape.value(y).clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn leaky(x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            LEAKY_SLOPE * x
        }
    }

    /// Scalar-by-scalar forward pass, written without the tape.
    fn scalar_forward(net: &AdapterNetwork, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for b in &net.blocks {
            let fc = |input: &[f64], w: &Matrix, bias: &Matrix| -> Vec<f64> {
                (0..w.cols())
                    .map(|j| bias[(0, j)] + (0..w.rows()).map(|i| input[i] * w[(i, j)]).sum::<f64>())
                    .collect()
            };
            let a = fc(&h, &b.fc1_w.value, &b.fc1_b.value);
            let a = fc(&a, &b.fc2_w.value, &b.fc2_b.value);
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = (var + crate::autograd::LAYER_NORM_EPS).sqrt();
            h = a
                .iter()
                .enumerate()
                .map(|(j, v)| leaky((v - mean) / std * b.ln_gain.value[(0, j)] + b.ln_bias.value[(0, j)]))
                .collect();
        }
        h
    }

    fn net(seed: u64, input: usize, width: usize) -> AdapterNetwork {
        let mut r = rng::stream(seed, "adapter-test");
        let mut n = AdapterNetwork::new("a", input, width, 2, &mut r).unwrap();
        // generic (non-default) normalization parameters
        n.visit_params_mut(&mut |p| {
            if p.name().contains(".ln.") {
                p.value = Matrix::randn(1, p.value.cols(), 0.5, &mut r).map(|v| v + 1.0);
            }
        });
        n
    }

    #[test]
    fn zero_adapter_gives_zero() {
        let mut n = net(1, 4, 4);
        n.zero();
        let out = adapter_forward(&n, &Matrix::row_vector(vec![3.0, -1.0, 2.0, 7.0])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_scalar_oracle() {
        let n = net(2, 4, 4);
        let x = vec![0.3, -1.2, 2.0, 0.5];
        let out = adapter_forward(&n, &Matrix::row_vector(x.clone())).unwrap();
        let expected = scalar_forward(&n, &x);
        for (a, b) in out.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let again = adapter_forward(&net(2, 4, 4), &Matrix::row_vector(x)).unwrap();
        assert!(out.bits_eq(&again));
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let n = net(3, 4, 4);
        assert!(adapter_forward(&n, &Matrix::row_vector(vec![1.0; 5])).is_err());
    }

    #[test]
    fn parameter_count() {
        let n = net(3, 4, 6);
        // block 0: 4*6+6 + 6*6+6 + 12; block 1: 6*6+6 + 6*6+6 + 12
        assert_eq!(n.param_count(), (24 + 6 + 36 + 6 + 12) + (36 + 6 + 36 + 6 + 12));
    }

    fn stack(m: usize) -> ImageFeatureStack {
        ImageFeatureStack {
            layers: (0..m).map(|i| Matrix::row_vector((0..4).map(|j| (i * 4 + j) as f64 * 0.3 - 1.0).collect())).collect(),
            layer_indices: (1..=m).collect(),
            feature_dim: 4,
        }
    }

    #[test]
    fn text_bank_examples() {
        let mut r = rng::stream(9, "bank");
        let one = TextAdapterBank::new(1, 4, 6, 2, false, &mut r).unwrap();
        assert_eq!(text_adapters_forward(&one, &stack(1)).unwrap().len(), 1);
        let five = TextAdapterBank::new(5, 4, 6, 2, false, &mut r).unwrap();
        let toks = text_adapters_forward(&five, &stack(5)).unwrap();
        assert_eq!(toks.tokens.shape(), (5, 6));
        for i in 0..5 {
            for j in i + 1..5 {
                assert!(!toks.tokens.slice_rows(i, 1).bits_eq(&toks.tokens.slice_rows(j, 1)));
            }
        }
        assert!(text_adapters_forward(&five, &stack(4)).is_err());
        let mut zero = five.clone();
        zero.visit_params_mut(&mut |p| p.value = Matrix::zeros(p.value.rows(), p.value.cols()));
        let z = text_adapters_forward(&zero, &stack(5)).unwrap();
        assert!(z.tokens.data().iter().all(|&v| v == 0.0));
        assert_eq!(crate::losses::reg_l1(&z.tokens).unwrap(), 0.0);
        let shared = TextAdapterBank::new(5, 4, 6, 2, true, &mut r).unwrap();
        assert_eq!(shared.networks().len(), 1);
        assert_eq!(text_adapters_forward(&shared, &stack(5)).unwrap().len(), 5);
    }

    #[test]
    fn keep_deepest_tokens() {
        let set = PseudoTokenSet {
            tokens: Matrix::from_vec(3, 2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap(),
            source_layer_indices: vec![2, 4, 6],
        };
        let one = set.keep_deepest(1).unwrap();
        assert_eq!(one.tokens.data(), &[3.0, 3.0]);
        assert_eq!(one.source_layer_indices, vec![6]);
        assert!(set.keep_deepest(4).is_err());
    }

    #[test]
    fn image_adapter_examples() {
        let shape = VisualShape { tokens: 2, dim: 3 };
        let n = net(4, 4, 6);
        let x = Matrix::row_vector(vec![0.1, 0.2, -0.3, 0.9]);
        let f = image_adapter_forward(&n, &x, shape).unwrap();
        assert_eq!(f.feature.shape(), (2, 3));
        let flat = scalar_forward(&n, x.data());
        assert!(f.feature.data().iter().zip(&flat).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(f.feature.bits_eq(&image_adapter_forward(&net(4, 4, 6), &x, shape).unwrap().feature));
        let mut z = n.clone();
        z.zero();
        assert!(image_adapter_forward(&z, &x, shape).unwrap().feature.data().iter().all(|&v| v == 0.0));
        assert!(image_adapter_forward(&n, &x, VisualShape { tokens: 4, dim: 2 }).is_err());
    }

    /// Central finite differences on a 4-dimensional instance.
    #[test]
    fn gradients_match_finite_differences() {
        let n = net(5, 4, 4);
        let x = Matrix::row_vector(vec![0.7, -0.4, 1.1, 0.2]);
        let target = Matrix::row_vector(vec![0.5, -0.2, 0.3, 1.0]);
        let loss = |net: &AdapterNetwork, tape: &mut Tape| -> Var {
            let xv = tape.constant(x.clone());
            let y = net.forward_on_tape(tape, xv).unwrap();
            let t = tape.constant(target.clone());
            let d = tape.sub(y, t).unwrap();
            let sq = tape.mul(d, d).unwrap();
            tape.mean(sq)
        };
        let mut tape = Tape::new();
        let out = loss(&n, &mut tape);
        let grads = tape.backward(out).unwrap();
        let h = 1e-6;
        for (name, g) in grads.iter() {
            let base = n.param(name).unwrap().value;
            for i in 0..base.len() {
                let eval = |delta: f64| {
                    let mut m = n.clone();
                    let mut v = base.clone();
                    v.data_mut()[i] += delta;
                    m.set_param_value(name, v).unwrap();
                    let mut t = Tape::new();
                    let o = loss(&m, &mut t);
                    t.value(o)[(0, 0)]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let analytic = g.data()[i];
                let scale = analytic.abs().max(numeric.abs());
                if scale > 1e-8 {
                    assert!((analytic - numeric).abs() / scale < 1e-4, "{name}[{i}]: {analytic} vs {numeric}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn finite_for_extreme_inputs(vals in proptest::collection::vec(-1e6f64..1e6, 4)) {
            let n = net(6, 4, 4);
            let out = adapter_forward(&n, &Matrix::row_vector(vals)).unwrap();
            prop_assert!(out.is_finite());
        }
    }
}
