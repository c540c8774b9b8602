//! Face-recognition embedders used by the identity loss and the evaluation
//! harness.

use crate::autograd::{Module, Param, Tape, Var};
use crate::error::{Error, Result};
use crate::preprocess::{resize_image, Image, Resample};
use crate::rng;
use crate::tensor::Matrix;

/// Images whose pixel standard deviation falls below this hold no face.
pub const BLANK_STD: f64 = 1e-4;

pub trait FaceEmbedder: Module + Send + Sync {
    /// Stable identifier written into evaluation reports.
    fn id(&self) -> String;
    fn input_size(&self) -> usize;
    fn embedding_dim(&self) -> usize;
    /// Differentiable embedding of `input_size^2 x 3` pixels; returns `1 x dim`.
    fn embed_on_tape(&self, tape: &mut Tape, pixels: Var) -> Result<Var>;

    /// `None` when no face is found.
    fn embed(&self, image: &Image) -> Result<Option<Matrix>> {
        if image.channels() != 3 {
            return Err(Error::invalid("face embedder expects RGB images"));
        }
        let px = resize_image(image, self.input_size(), Resample::Bilinear)?.to_matrix();
        let mean = px.mean();
        let var = px.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / px.len() as f64;
        if var.sqrt() < BLANK_STD {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let x = tape.constant(px);
        let e = self.embed_on_tape(&mut tape, x)?;
        let e = tape.value(e).clone();
        Ok((e.norm() > 0.0).then_some(e))
    }
}

/// Average-pools the image onto a coarse grid, centres it and applies a fixed
/// random projection followed by `tanh`.
#[derive(Clone, Debug)]
pub struct ToyFaceEmbedder {
    input_size: usize,
    grid: usize,
    seed: u64,
    pool: Matrix,
    weight: Param,
}

impl ToyFaceEmbedder {
    pub fn new(input_size: usize, grid: usize, dim: usize, seed: u64) -> Result<Self> {
        let inputs = grid * grid * 3;
        let mut r = rng::stream(seed, "face-embedder");
        let w = Matrix::randn(inputs, dim, 2.0 / (inputs as f64).sqrt(), &mut r);
        Self::from_weights(input_size, grid, w, seed)
    }

    /// `weights` must be `(grid^2 * 3) x dim`.
    pub fn from_weights(input_size: usize, grid: usize, weights: Matrix, seed: u64) -> Result<Self> {
        if grid == 0 || !input_size.is_multiple_of(grid) {
            return Err(Error::invalid("face embedder input size must be a multiple of its grid"));
        }
        if weights.rows() != grid * grid * 3 || weights.cols() == 0 {
            return Err(Error::invalid("face embedder weights have the wrong shape"));
        }
        let cell = input_size / grid;
        let mut pool = Matrix::zeros(grid * grid, input_size * input_size);
        for y in 0..input_size {
            for x in 0..input_size {
                pool[((y / cell) * grid + x / cell, y * input_size + x)] = 1.0 / (cell * cell) as f64;
            }
        }
        Ok(Self { input_size, grid, seed, pool, weight: Param::frozen("face.weight", weights) })
    }
}

impl Module for ToyFaceEmbedder {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
    }
}

impl FaceEmbedder for ToyFaceEmbedder {
    fn id(&self) -> String {
        format!("toy-face-v1/{}x{}/grid{}/dim{}/seed{}", self.input_size, self.input_size, self.grid, self.embedding_dim(), self.seed)
    }

    fn input_size(&self) -> usize {
        self.input_size
    }

    fn embedding_dim(&self) -> usize {
        self.weight.value.cols()
    }

    fn embed_on_tape(&self, tape: &mut Tape, pixels: Var) -> Result<Var> {
        let s = self.input_size;
        if tape.shape(pixels) != (s * s, 3) {
            return Err(Error::invalid(format!("face embedder expects {s}x{s}x3 pixels, got {:?}", tape.shape(pixels))));
        }
        let pool = tape.constant(self.pool.clone());
        let pooled = tape.matmul(pool, pixels)?;
        let shift = tape.constant(Matrix::filled(1, 3, -0.5));
        let centred = tape.add_row(pooled, shift)?;
        let flat = tape.reshape(centred, 1, self.grid * self.grid * 3)?;
        let w = tape.param(&self.weight);
        let e = tape.matmul(flat, w)?;
        Ok(tape.tanh(e))
    }
}

/// Cosine similarity of two embeddings; errors on a zero-norm input.
pub fn cosine(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid("embeddings must be non-empty and of equal width"));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("zero-norm embedding"));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
