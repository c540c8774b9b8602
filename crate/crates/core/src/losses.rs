//! Training objectives: noise-prediction MSE, face identity, L1 regularizers
//! and their weighted sum, plus one-step clean-latent prediction.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_face: f64,
    pub lambda_rt: f64,
    pub lambda_rv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_face: 0.01, lambda_rt: 0.01, lambda_rv: 0.001 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_face", self.lambda_face), ("lambda_rt", self.lambda_rt), ("lambda_rv", self.lambda_rv)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// The unweighted loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub diffusion: f64,
    pub face: f64,
    pub reg_text: f64,
    pub reg_visual: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub diffusion: f64,
    pub face: f64,
    pub reg_text: f64,
    pub reg_visual: f64,
    pub total: f64,
}

fn weighted_sum(terms: &LossTerms, w: &LossWeights) -> f64 {
    terms.diffusion + w.lambda_face * terms.face + w.lambda_rt * terms.reg_text + w.lambda_rv * terms.reg_visual
}

pub fn total_loss(terms: LossTerms, weights: &LossWeights) -> Result<LossBundle> {
    for (name, v) in [
        ("diffusion", terms.diffusion),
        ("face", terms.face),
        ("reg_text", terms.reg_text),
        ("reg_visual", terms.reg_visual),
    ] {
        if v.is_nan() {
            return Err(Error::Divergence { step: 0, term: name });
        }
    }
    let total = weighted_sum(&terms, weights);
    if total.is_nan() {
        return Err(Error::Divergence { step: 0, term: "total" });
    }
    Ok(LossBundle { diffusion: terms.diffusion, face: terms.face, reg_text: terms.reg_text, reg_visual: terms.reg_visual, total })
}

/// Loss terms as tape scalars.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub diffusion: Var,
    pub face: Option<Var>,
    pub reg_text: Var,
    pub reg_visual: Option<Var>,
}

impl LossVars {
    pub fn terms(&self, tape: &Tape) -> LossTerms {
        let s = |v: Var| tape.value(v)[(0, 0)];
        LossTerms {
            diffusion: s(self.diffusion),
            face: self.face.map_or(0.0, s),
            reg_text: s(self.reg_text),
            reg_visual: self.reg_visual.map_or(0.0, s),
        }
    }
}

/// Weighted total on the tape, composed in the same order as [`total_loss`].
pub fn total_on_tape(tape: &mut Tape, vars: &LossVars, w: &LossWeights) -> Result<Var> {
    let mut total = vars.diffusion;
    for (term, lambda) in [(vars.face, w.lambda_face), (Some(vars.reg_text), w.lambda_rt), (vars.reg_visual, w.lambda_rv)] {
        let scaled = match term {
            Some(t) => tape.scale(t, lambda),
            None => tape.constant(Matrix::zeros(1, 1)),
        };
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

pub fn diffusion_loss(noise: &Matrix, predicted: &Matrix) -> Result<f64> {
    noise.check_same_shape(predicted)?;
    if noise.is_empty() {
        return Err(Error::invalid("diffusion loss of empty tensors"));
    }
    Ok(noise.zip_map(predicted, |a, b| (a - b) * (a - b))?.mean())
}

pub fn diffusion_loss_on_tape(tape: &mut Tape, noise: Var, predicted: Var) -> Result<Var> {
    if tape.shape(noise) != tape.shape(predicted) {
        return Err(Error::invalid("noise and prediction shapes differ"));
    }
    let d = tape.sub(noise, predicted)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Mean absolute value.
pub fn reg_l1(x: &Matrix) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::invalid("L1 regularizer of an empty tensor"));
    }
    Ok(x.data().iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64)
}

pub fn reg_text(pseudo_tokens: &Matrix) -> Result<f64> {
    reg_l1(pseudo_tokens)
}

/// `values` holds one visual value projection per instrumented layer.
pub fn reg_visual(values: &[Matrix]) -> Result<f64> {
    let n: usize = values.iter().map(Matrix::len).sum();
    if n == 0 {
        return Err(Error::invalid("L1 regularizer of an empty tensor"));
    }
    Ok(values.iter().flat_map(|m| m.data()).map(|v| v.abs()).sum::<f64>() / n as f64)
}

pub fn reg_l1_on_tape(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let x = match parts {
        [] => return Err(Error::invalid("L1 regularizer of an empty tensor")),
        [one] => *one,
        many => {
            let flat = many
                .iter()
                .map(|&p| {
                    let (r, c) = tape.shape(p);
                    tape.reshape(p, 1, r * c)
                })
                .collect::<Result<Vec<_>>>()?;
            tape.concat_cols(&flat)?
        }
    };
    if tape.value(x).is_empty() {
        return Err(Error::invalid("L1 regularizer of an empty tensor"));
    }
    Ok(tape.abs_mean(x))
}

/// `z0 = (z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn predict_x0(z_t: &Matrix, eps: &Matrix, t: usize, schedule: &NoiseSchedule) -> Result<Matrix> {
    let (a, b) = schedule.coefficients(t)?;
    z_t.zip_map(eps, |z, e| (z - b * e) / a)
}

pub fn predict_x0_on_tape(tape: &mut Tape, z_t: Var, eps: Var, t: usize, schedule: &NoiseSchedule) -> Result<Var> {
    let (a, b) = schedule.coefficients(t)?;
    let be = tape.scale(eps, b);
    let d = tape.sub(z_t, be)?;
    Ok(tape.scale(d, 1.0 / a))
}

/// `1 - cos(reference, generated)`, in `[0, 2]`.
pub fn face_identity_loss(reference: &Matrix, generated: &Matrix) -> Result<f64> {
    Ok(1.0 - crate::face::cosine(reference, generated)?)
}

pub fn face_identity_loss_on_tape(tape: &mut Tape, reference: Var, generated: Var) -> Result<Var> {
    if tape.shape(reference) != tape.shape(generated) {
        return Err(Error::invalid("face embeddings differ in width"));
    }
    if tape.value(reference).norm() == 0.0 || tape.value(generated).norm() == 0.0 {
        return Err(Error::invalid("zero-norm face embedding"));
    }
    let ab = tape.mul(reference, generated)?;
    let dot = tape.sum(ab);
    let aa = tape.mul(reference, reference)?;
    let aa = tape.sum(aa);
    let bb = tape.mul(generated, generated)?;
    let bb = tape.sum(bb);
    let nn = tape.mul(aa, bb)?;
    let nn = tape.sqrt(nn);
    let cos = tape.div(dot, nn)?;
    let one = tape.constant(Matrix::filled(1, 1, 1.0));
    tape.sub(one, cos)
}
