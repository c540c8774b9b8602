//! A small reverse-mode autodiff tape over [`Matrix`] values.
//!
//! Every forward pass records onto a fresh [`Tape`]. Parameters enter the tape
//! through [`Tape::param`], which memoizes by name so a parameter used several
//! times in one pass (e.g. once per batch item) accumulates a single gradient.

use std::collections::BTreeMap;
use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// A named model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    name: String,
    pub value: Matrix,
    trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Matrix, trainable: bool) -> Self {
        Self { name: name.into(), value, trainable }
    }

    pub fn frozen(name: impl Into<String>, value: Matrix) -> Self {
        Self::new(name, value, false)
    }

    pub fn trainable(name: impl Into<String>, value: Matrix) -> Self {
        Self::new(name, value, true)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| {
            if p.is_trainable() {
                out.push(p.name().to_string());
            }
        });
        out
    }

    fn frozen_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| {
            if !p.is_trainable() {
                out.push(p.name().to_string());
            }
        });
        out
    }

    /// SHA-256 over the names and exact bit patterns of the selected parameters.
    fn param_hash(&self, trainable: bool) -> String {
        let mut hasher = Sha256::new();
        self.visit_params(&mut |p| {
            if p.is_trainable() == trainable {
                hasher.update(p.name().as_bytes());
                for x in p.value.data() {
                    hasher.update(x.to_bits().to_le_bytes());
                }
            }
        });
        hex::encode(hasher.finalize())
    }

    fn param(&self, name: &str) -> Option<Param> {
        let mut found = None;
        self.visit_params(&mut |p| {
            if p.name() == name {
                found = Some(p.clone());
            }
        });
        found
    }

    fn set_param_value(&mut self, name: &str, value: Matrix) -> Result<()> {
        let mut slot = Some(value);
        let mut err = None;
        self.visit_params_mut(&mut |p| {
            if p.name() == name {
                if let Some(v) = slot.take() {
                    if v.shape() != p.value.shape() {
                        err = Some(Error::invalid(format!(
                            "parameter {name}: shape {:?} does not match {:?}",
                            v.shape(),
                            p.value.shape()
                        )));
                    } else {
                        p.value = v;
                    }
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if slot.is_some() {
            return Err(Error::invalid(format!("no parameter named {name}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Transpose(Var),
    Softmax(Var),
    Normalize(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    AbsMean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
    /// Standard deviation cache for `Normalize`.
    aux: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients of a scalar with respect to the trainable parameters it touched.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.push_aux(value, op, needs_grad, Vec::new())
    }

    fn push_aux(&mut self, value: Matrix, op: Op, needs_grad: bool, aux: Vec<f64>) -> Var {
        self.nodes.push(Node { value, op, needs_grad, aux });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient without being a named parameter.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.params.get(p.name()) {
            return v;
        }
        let v = self.push(p.value.clone(), Op::Leaf, p.is_trainable());
        self.params.insert(p.name().to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Div(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// `a + b` with the `1 x cols` row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_row(self.value(a), self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::AddRow(a, b), ng))
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_row(self.value(a), self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MulRow(a, b), ng))
    }

    /// `a * s` where `s` is a `1 x 1` variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::invalid("mul_scalar expects a 1x1 scalar"));
        }
        let k = self.value(s)[(0, 0)];
        let value = self.value(a).scale(k);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(value, Op::MulScalar(a, s), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (c, e) in exps.into_iter().enumerate() {
                out[(r, c)] = e / total;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols() as f64;
        let mut out = x.clone();
        let mut stds = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = (var + LAYER_NORM_EPS).sqrt();
            for c in 0..x.cols() {
                out[(r, c)] = (row[c] - mean) / std;
            }
            stds.push(std);
        }
        let ng = self.ng(a);
        self.push_aux(out, Op::Normalize(a), ng, stds)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(value, Op::LeakyRelu(a, slope), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        let ng = self.ng(a);
        self.push(value, Op::Sqrt(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).mean());
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng)
    }

    /// Mean of absolute values.
    pub fn abs_mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Matrix::filled(1, 1, x.data().iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64);
        let ng = self.ng(a);
        self.push(value, Op::AbsMean(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.shape(p).1).ok_or_else(|| Error::invalid("concat of nothing"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::invalid("concat_rows width mismatch"));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Matrix::from_vec(rows, cols, data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).ok_or_else(|| Error::invalid("concat of nothing"))?;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::invalid("concat_cols height mismatch"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                for c in 0..v.cols() {
                    out[(r, offset + c)] = v[(r, c)];
                }
            }
            offset += v.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, _) = self.shape(a);
        if start + len > rows {
            return Err(Error::invalid("slice_rows out of range"));
        }
        let value = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start + len > cols {
            return Err(Error::invalid("slice_cols out of range"));
        }
        let x = self.value(a);
        let mut out = Matrix::zeros(rows, len);
        for r in 0..rows {
            for c in 0..len {
                out[(r, c)] = x[(r, start + c)];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).reshape(rows, cols)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// `x @ w + b`, with `b` a `1 x out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a `1 x 1` output. Returns gradients of every
    /// trainable named parameter reached.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let grads = self.backward_all(output)?;
        let mut by_name = BTreeMap::new();
        for (name, &v) in &self.params {
            if self.nodes[v.0].needs_grad {
                let g = grads[v.0].clone().unwrap_or_else(|| {
                    let (r, c) = self.shape(v);
                    Matrix::zeros(r, c)
                });
                by_name.insert(name.clone(), g);
            }
        }
        Ok(Gradients { by_name })
    }

    /// Gradient with respect to an arbitrary leaf created by [`Tape::variable`].
    pub fn grad_of(&self, output: Var, leaf: Var) -> Result<Matrix> {
        let grads = self.backward_all(output)?;
        Ok(grads[leaf.0].clone().unwrap_or_else(|| {
            let (r, c) = self.shape(leaf);
            Matrix::zeros(r, c)
        }))
    }

    fn backward_all(&self, output: Var) -> Result<Vec<Option<Matrix>>> {
        if self.shape(output) != (1, 1) {
            return Err(Error::invalid("backward expects a scalar output"));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.ng(a) {
                    let ga = g.matmul_unchecked(&self.value(b).transpose());
                    self.accumulate(grads, a, ga);
                }
                if self.ng(b) {
                    let gb = self.value(a).transpose().matmul_unchecked(g);
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.scale(-1.0));
            }
            &Op::Mul(a, b) => {
                self.accumulate(grads, a, g.zip_map(self.value(b), |x, y| x * y)?);
                self.accumulate(grads, b, g.zip_map(self.value(a), |x, y| x * y)?);
            }
            &Op::Div(a, b) => {
                let bv = self.value(b);
                self.accumulate(grads, a, g.zip_map(bv, |x, y| x / y)?);
                if self.ng(b) {
                    let num = g.zip_map(self.value(a), |x, y| x * y)?;
                    self.accumulate(grads, b, num.zip_map(bv, |x, y| -x / (y * y))?);
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.scale(s)),
            &Op::AddRow(a, b) => {
                self.accumulate(grads, a, g.clone());
                if self.ng(b) {
                    self.accumulate(grads, b, column_sums(g));
                }
            }
            &Op::MulRow(a, b) => {
                let bv = self.value(b);
                if self.ng(a) {
                    self.accumulate(grads, a, broadcast_row(g, bv, |x, y| x * y)?);
                }
                if self.ng(b) {
                    let prod = g.zip_map(self.value(a), |x, y| x * y)?;
                    self.accumulate(grads, b, column_sums(&prod));
                }
            }
            &Op::MulScalar(a, s) => {
                let k = self.value(s)[(0, 0)];
                self.accumulate(grads, a, g.scale(k));
                if self.ng(s) {
                    let dot: f64 = g.data().iter().zip(self.value(a).data()).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, s, Matrix::filled(1, 1, dot));
                }
            }
            &Op::Transpose(a) => self.accumulate(grads, a, g.transpose()),
            &Op::Softmax(a) => {
                let y = &node.value;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols() {
                        out[(r, c)] = y[(r, c)] * (g[(r, c)] - dot);
                    }
                }
                self.accumulate(grads, a, out);
            }
            &Op::Normalize(a) => {
                let y = &node.value;
                let n = y.cols() as f64;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    let std = node.aux[r];
                    for c in 0..y.cols() {
                        out[(r, c)] = (gr[c] - mean_g - yr[c] * mean_gy) / std;
                    }
                }
                self.accumulate(grads, a, out);
            }
            &Op::LeakyRelu(a, slope) => {
                let ga = g.zip_map(self.value(a), |gv, x| if x > 0.0 { gv } else { slope * gv })?;
                self.accumulate(grads, a, ga);
            }
            &Op::Tanh(a) => {
                let ga = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?;
                self.accumulate(grads, a, ga);
            }
            &Op::Sqrt(a) => {
                let ga = g.zip_map(&node.value, |gv, y| gv / (2.0 * y))?;
                self.accumulate(grads, a, ga);
            }
            &Op::Sum(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(grads, a, Matrix::filled(r, c, g[(0, 0)]));
            }
            &Op::Mean(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(grads, a, Matrix::filled(r, c, g[(0, 0)] / (r * c) as f64));
            }
            &Op::AbsMean(a) => {
                let x = self.value(a);
                let k = g[(0, 0)] / x.len() as f64;
                self.accumulate(grads, a, x.map(|v| k * sign(v)));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.ng(p) {
                        self.accumulate(grads, p, g.slice_rows(start, rows));
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.ng(p) {
                        let mut gp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                gp[(r, c)] = g[(r, start + c)];
                            }
                        }
                        self.accumulate(grads, p, gp);
                    }
                    start += cols;
                }
            }
            &Op::SliceRows(a, start) => {
                let (rows, cols) = self.shape(a);
                let mut ga = Matrix::zeros(rows, cols);
                let off = start * cols;
                ga.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, a, ga);
            }
            &Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(a);
                let mut ga = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..g.cols() {
                        ga[(r, start + c)] = g[(r, c)];
                    }
                }
                self.accumulate(grads, a, ga);
            }
            &Op::Reshape(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(grads, a, g.reshape(r, c)?);
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn broadcast_row(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
    if b.rows() != 1 || b.cols() != a.cols() {
        return Err(Error::invalid(format!(
            "row broadcast expects 1x{}, got {}x{}",
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut out = a.clone();
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            out[(r, c)] = f(a[(r, c)], b[(0, c)]);
        }
    }
    Ok(out)
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            out[(0, c)] += g[(r, c)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` at `x`, element by element.
    fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(build: impl Fn(&mut Tape, Var) -> Var, rows: usize, cols: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Matrix::randn(rows, cols, 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.variable(x.clone());
        let out = build(&mut tape, v);
        let analytic = tape.grad_of(out, v).unwrap();
        let numeric = numeric_grad(&x, |xx| {
            let mut t = Tape::new();
            let v = t.variable(xx.clone());
            let o = build(&mut t, v);
            t.value(o)[(0, 0)]
        });
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-6, "max abs err {err}: {analytic:?} vs {numeric:?}");
    }

    #[test]
    fn grad_softmax_weighted_sum() {
        check(
            |t, v| {
                let s = t.softmax_rows(v);
                let w = t.constant(Matrix::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.1, -1.0]).unwrap());
                let p = t.mul(s, w).unwrap();
                t.sum(p)
            },
            2,
            3,
        );
    }

    #[test]
    fn grad_normalize_tanh_leaky() {
        check(
            |t, v| {
                let n = t.normalize_rows(v);
                let w = t.constant(Matrix::from_vec(1, 4, vec![0.3, -1.0, 2.0, 0.7]).unwrap());
                let m = t.mul_row(n, w).unwrap();
                let l = t.leaky_relu(m, 0.01);
                let th = t.tanh(l);
                t.sum(th)
            },
            3,
            4,
        );
    }

    #[test]
    fn grad_matmul_transpose_slices() {
        check(
            |t, v| {
                let vt = t.transpose(v);
                let p = t.matmul(v, vt).unwrap();
                let a = t.slice_cols(p, 1, 2).unwrap();
                let b = t.slice_rows(a, 0, 2).unwrap();
                let c = t.concat_rows(&[b, b]).unwrap();
                let d = t.concat_cols(&[c, c]).unwrap();
                let r = t.reshape(d, 2, 8).unwrap();
                t.mean(r)
            },
            3,
            2,
        );
    }

    #[test]
    fn grad_sqrt_div_scalar() {
        check(
            |t, v| {
                let sq = t.mul(v, v).unwrap();
                let s = t.sum(sq);
                let n = t.sqrt(s);
                let m = t.mean(v);
                let q = t.div(m, n).unwrap();
                let k = t.mul_scalar(v, q).unwrap();
                let a = t.abs_mean(k);
                t.scale(a, 3.0)
            },
            2,
            2,
        );
    }

    #[test]
    fn param_memoized_and_frozen_excluded() {
        let w = Param::trainable("w", Matrix::filled(1, 1, 2.0));
        let f = Param::frozen("f", Matrix::filled(1, 1, 5.0));
        let mut t = Tape::new();
        let a = t.param(&w);
        let b = t.param(&w);
        assert_eq!(a, b);
        let c = t.param(&f);
        let p = t.mul(a, c).unwrap();
        let q = t.add(p, b).unwrap();
        let g = t.backward(q).unwrap();
        assert_eq!(g.get("w").unwrap()[(0, 0)], 6.0);
        assert!(g.get("f").is_none());
    }
}
