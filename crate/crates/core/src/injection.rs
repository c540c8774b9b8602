//! Dual-branch cross-attention.
//!
//! The textual branch keeps the frozen key/value projections of the base
//! layer and adds a low-rank delta `alpha * B A`. The visual branch projects
//! the visual condition with its own trainable key/value weights. The two
//! attention outputs are fused as `gamma * Attn_T + sigma * Attn_S`, with the
//! branch selection drawn once per training step.
//!
//! Projection weights use the `d_out x d_in` convention; token sequences are
//! rows, so a projection is `x W^T`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Module, Param, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Scaled dot-product attention `softmax(Q K^T / sqrt(d')) V` on the tape.
pub fn attention_on_tape(tape: &mut Tape, q: Var, k: Var, v: Var, d_prime: f64) -> Result<Var> {
    let (kn, kd) = tape.shape(k);
    let (vn, _) = tape.shape(v);
    if kn != vn {
        return Err(Error::invalid(format!("attention keys have {kn} tokens but values have {vn}")));
    }
    if tape.shape(q).1 != kd {
        return Err(Error::invalid("query and key widths differ"));
    }
    if d_prime <= 0.0 {
        return Err(Error::invalid("attention scale dimension must be positive"));
    }
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / d_prime.sqrt());
    let weights = tape.softmax_rows(logits);
    tape.matmul(weights, v)
}

pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, d_prime: f64) -> Result<Matrix> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = attention_on_tape(&mut tape, qv, kv, vv, d_prime)?;
    Ok(tape.value(out).clone())
}

/// Multi-head attention: columns are split into `heads` equal groups and
/// each head is scaled by its own width.
pub fn multihead_on_tape(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let width = tape.shape(q).1;
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::invalid(format!("width {width} is not divisible into {heads} heads")));
    }
    if heads == 1 {
        return attention_on_tape(tape, q, k, v, width as f64);
    }
    let hd = width / heads;
    let outs = (0..heads)
        .map(|h| {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            attention_on_tape(tape, qh, kh, vh, hd as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat_cols(&outs)
}

/// `x W^T` for a `d_out x d_in` weight.
pub fn project(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let (_, d_in) = tape.shape(w);
    if tape.shape(x).1 != d_in {
        return Err(Error::invalid(format!("projection expects width {d_in}, got {}", tape.shape(x).1)));
    }
    let wt = tape.transpose(w);
    tape.matmul(x, wt)
}

/// Low-rank delta `Delta W = B A` with `A: rank x d_in` and `B: d_out x rank`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoRALayer {
    pub a: Param,
    pub b: Param,
    rank: usize,
    pub alpha: f64,
}

impl LoRALayer {
    /// `A` from a small normal, `B` zero, so the initial delta is zero.
    pub fn new<R: Rng + ?Sized>(prefix: &str, d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::invalid(format!("LoRA rank {rank} must be in 1..={}", d_in.min(d_out))));
        }
        Ok(Self {
            a: Param::trainable(format!("{prefix}.a"), Matrix::randn(rank, d_in, 1.0 / (d_in as f64).sqrt(), rng)),
            b: Param::trainable(format!("{prefix}.b"), Matrix::zeros(d_out, rank)),
            rank,
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn delta(&self) -> Matrix {
        self.b.value.matmul_unchecked(&self.a.value)
    }
}

/// `x W^T + alpha * (x A^T) B^T` on the tape.
pub fn lora_project_on_tape(tape: &mut Tape, w: Var, lora: &LoRALayer, x: Var, alpha: f64) -> Result<Var> {
    let base = project(tape, x, w)?;
    let (a, b) = (tape.param(&lora.a), tape.param(&lora.b));
    if tape.shape(a).1 != tape.shape(w).1 || tape.shape(b).0 != tape.shape(w).0 {
        return Err(Error::invalid("LoRA factors do not match the base projection"));
    }
    let down = project(tape, x, a)?;
    let up = project(tape, down, b)?;
    let up = tape.scale(up, alpha);
    tape.add(base, up)
}

/// Value-level `W x + alpha B A x` for the rows of `x`.
pub fn lora_project(w: &Matrix, lora: &LoRALayer, x: &Matrix, alpha: f64) -> Result<Matrix> {
    let mut tape = Tape::new();
    let (wv, xv) = (tape.constant(w.clone()), tape.constant(x.clone()));
    let out = lora_project_on_tape(&mut tape, wv, lora, xv, alpha)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DrawMode {
    /// One draw per training step, shared by every layer and batch item.
    #[default]
    PerStep,
    /// A fresh draw for every batch item.
    PerCall,
}

/// Random branch fusion settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionPolicy {
    pub r1: f64,
    pub r2: f64,
    /// Text-branch scale when both branches are active.
    pub gamma: f64,
    /// Visual-branch scale when both branches are active.
    pub sigma: f64,
    pub text_only_gamma: f64,
    pub visual_only_sigma: f64,
    pub draw_mode: DrawMode,
}

impl Default for FusionPolicy {
    fn default() -> Self {
        Self {
            r1: 1.0 / 3.0,
            r2: 2.0 / 3.0,
            gamma: 1.0,
            sigma: 1.0,
            text_only_gamma: 2.0,
            visual_only_sigma: 2.0,
            draw_mode: DrawMode::PerStep,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchCase {
    TextOnly,
    VisualOnly,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionDraw {
    pub case: BranchCase,
    pub gamma: f64,
    pub sigma: f64,
}

impl FusionDraw {
    pub fn both(gamma: f64, sigma: f64) -> Self {
        Self { case: BranchCase::Both, gamma, sigma }
    }

    pub fn uses_text(&self) -> bool {
        self.case != BranchCase::VisualOnly
    }

    pub fn uses_visual(&self) -> bool {
        self.case != BranchCase::TextOnly
    }
}

impl FusionPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.r1) && (0.0..=1.0).contains(&self.r2) && self.r1 <= self.r2;
        if !ok {
            return Err(Error::invalid(format!("fusion thresholds need 0 <= r1 <= r2 <= 1, got {} and {}", self.r1, self.r2)));
        }
        let scales = [self.gamma, self.sigma, self.text_only_gamma, self.visual_only_sigma];
        if scales.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("fusion scales must be finite"));
        }
        Ok(())
    }

    /// The branch case for a uniform sample `seed`. Ties at either threshold
    /// fall into the both-branch case.
    pub fn case_for(&self, seed: f64) -> FusionDraw {
        if seed < self.r1 {
            FusionDraw { case: BranchCase::TextOnly, gamma: self.text_only_gamma, sigma: 0.0 }
        } else if seed > self.r2 {
            FusionDraw { case: BranchCase::VisualOnly, gamma: 0.0, sigma: self.visual_only_sigma }
        } else {
            FusionDraw { case: BranchCase::Both, gamma: self.gamma, sigma: self.sigma }
        }
    }

    /// The both-branch draw used at sampling time.
    pub fn inference_draw(&self) -> FusionDraw {
        FusionDraw::both(self.gamma, self.sigma)
    }
}

pub fn draw_fusion<R: Rng + ?Sized>(policy: &FusionPolicy, rng: &mut R) -> FusionDraw {
    policy.case_for(rng.random::<f64>())
}

/// Conditioning shared by every cross-attention layer during one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AttnContext {
    /// Text-encoder output `p`, `L x d_text`.
    pub text: Var,
    /// Visual condition `f`, `tokens x d_visual`.
    pub visual: Option<Var>,
    pub draw: FusionDraw,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnOutput {
    pub output: Var,
    /// Visual-branch values `V^S`, when computed.
    pub visual_values: Option<Var>,
}

pub trait CrossAttentionLayer: Module {
    fn forward(&self, tape: &mut Tape, hidden: Var, ctx: &AttnContext) -> Result<AttnOutput>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnDims {
    pub model: usize,
    pub text: usize,
    pub attn: usize,
    pub heads: usize,
}

/// The plain (base model) cross-attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    pub dims: AttnDims,
    pub w_q: Param,
    pub w_k: Param,
    pub w_v: Param,
    pub w_o: Param,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(prefix: &str, dims: AttnDims, rng: &mut R) -> Result<Self> {
        if dims.heads == 0 || !dims.attn.is_multiple_of(dims.heads) {
            return Err(Error::invalid("attention width must divide into heads"));
        }
        let s = |n: usize| 1.0 / (n as f64).sqrt();
        Ok(Self {
            dims,
            w_q: Param::frozen(format!("{prefix}.w_q"), Matrix::randn(dims.attn, dims.model, 2.0 * s(dims.model), rng)),
            w_k: Param::frozen(format!("{prefix}.w_k"), Matrix::randn(dims.attn, dims.text, 2.0 * s(dims.text), rng)),
            w_v: Param::frozen(format!("{prefix}.w_v"), Matrix::randn(dims.attn, dims.text, s(dims.text), rng)),
            w_o: Param::frozen(format!("{prefix}.w_o"), Matrix::randn(dims.model, dims.attn, s(dims.attn), rng)),
        })
    }

    pub fn prefix(&self) -> &str {
        self.w_q.name().trim_end_matches(".w_q")
    }
}

impl Module for CrossAttention {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for p in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            f(p);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for p in [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o] {
            f(p);
        }
    }
}

impl CrossAttentionLayer for CrossAttention {
    fn forward(&self, tape: &mut Tape, hidden: Var, ctx: &AttnContext) -> Result<AttnOutput> {
        let [wq, wk, wv, wo] = [&self.w_q, &self.w_k, &self.w_v, &self.w_o].map(|p| tape.param(p));
        let q = project(tape, hidden, wq)?;
        let k = project(tape, ctx.text, wk)?;
        let v = project(tape, ctx.text, wv)?;
        let o = multihead_on_tape(tape, q, k, v, self.dims.heads)?;
        Ok(AttnOutput { output: project(tape, o, wo)?, visual_values: None })
    }
}

/// A base cross-attention layer instrumented with LoRA on the textual
/// keys/values and a trainable visual key/value branch.
#[derive(Clone, Debug, PartialEq)]
pub struct DualBranchCrossAttention {
    pub base: CrossAttention,
    pub lora_k: LoRALayer,
    pub lora_v: LoRALayer,
    pub visual_k: Param,
    pub visual_v: Param,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 1.0 }
    }
}

impl DualBranchCrossAttention {
    /// Wrap `base`; LoRA `B` and both visual projections start at zero.
    pub fn new<R: Rng + ?Sized>(base: CrossAttention, lora: LoraConfig, visual_dim: usize, rng: &mut R) -> Result<Self> {
        let prefix = base.prefix().to_string();
        let d = base.dims;
        Ok(Self {
            lora_k: LoRALayer::new(&format!("{prefix}.lora_k"), d.text, d.attn, lora.rank, lora.alpha, rng)?,
            lora_v: LoRALayer::new(&format!("{prefix}.lora_v"), d.text, d.attn, lora.rank, lora.alpha, rng)?,
            visual_k: Param::trainable(format!("{prefix}.visual_k"), Matrix::zeros(d.attn, visual_dim)),
            visual_v: Param::trainable(format!("{prefix}.visual_v"), Matrix::zeros(d.attn, visual_dim)),
            alpha: lora.alpha,
            base,
        })
    }

    /// Textual and visual attention outputs before fusion and output projection.
    pub fn branches(&self, tape: &mut Tape, hidden: Var, ctx: &AttnContext) -> Result<Branches> {
        let heads = self.base.dims.heads;
        let wq = tape.param(&self.base.w_q);
        let q = project(tape, hidden, wq)?;
        let text = if ctx.draw.uses_text() {
            let (wk, wv) = (tape.param(&self.base.w_k), tape.param(&self.base.w_v));
            let k = lora_project_on_tape(tape, wk, &self.lora_k, ctx.text, self.alpha)?;
            let v = lora_project_on_tape(tape, wv, &self.lora_v, ctx.text, self.alpha)?;
            Some(multihead_on_tape(tape, q, k, v, heads)?)
        } else {
            None
        };
        let (visual, visual_values) = match ctx.visual {
            Some(f) => {
                let (wks, wvs) = (tape.param(&self.visual_k), tape.param(&self.visual_v));
                let vs = project(tape, f, wvs)?;
                let attn = if ctx.draw.uses_visual() {
                    let ks = project(tape, f, wks)?;
                    Some(multihead_on_tape(tape, q, ks, vs, heads)?)
                } else {
                    None
                };
                (attn, Some(vs))
            }
            None if ctx.draw.uses_visual() => {
                return Err(Error::InvalidState("fusion draw needs the visual branch but no visual condition was given".into()))
            }
            None => (None, None),
        };
        Ok(Branches { text, visual, visual_values })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Branches {
    pub text: Option<Var>,
    pub visual: Option<Var>,
    pub visual_values: Option<Var>,
}

impl Module for DualBranchCrossAttention {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.base.visit_params(f);
        for p in [&self.lora_k.a, &self.lora_k.b, &self.lora_v.a, &self.lora_v.b, &self.visual_k, &self.visual_v] {
            f(p);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.base.visit_params_mut(f);
        for p in [
            &mut self.lora_k.a,
            &mut self.lora_k.b,
            &mut self.lora_v.a,
            &mut self.lora_v.b,
            &mut self.visual_k,
            &mut self.visual_v,
        ] {
            f(p);
        }
    }
}

impl CrossAttentionLayer for DualBranchCrossAttention {
    fn forward(&self, tape: &mut Tape, hidden: Var, ctx: &AttnContext) -> Result<AttnOutput> {
        let br = self.branches(tape, hidden, ctx)?;
        let fused = match (br.text, br.visual) {
            (Some(t), Some(v)) => {
                let t = tape.scale(t, ctx.draw.gamma);
                let v = tape.scale(v, ctx.draw.sigma);
                tape.add(t, v)?
            }
            (Some(t), None) => tape.scale(t, ctx.draw.gamma),
            (None, Some(v)) => tape.scale(v, ctx.draw.sigma),
            (None, None) => unreachable!("every fusion case uses at least one branch"),
        };
        let wo = tape.param(&self.base.w_o);
        Ok(AttnOutput { output: project(tape, fused, wo)?, visual_values: br.visual_values })
    }
}

/// Value-level dual-branch forward for one layer.
pub fn dual_branch_forward(
    layer: &DualBranchCrossAttention,
    hidden: &Matrix,
    text_cond: &Matrix,
    visual_cond: Option<&Matrix>,
    draw: FusionDraw,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let h = tape.constant(hidden.clone());
    let text = tape.constant(text_cond.clone());
    let visual = visual_cond.map(|f| tape.constant(f.clone()));
    let out = layer.forward(&mut tape, h, &AttnContext { text, visual, draw })?;
    Ok(tape.value(out.output).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn single_token_attention_returns_value() {
        let v = m(1, 3, &[0.3, -2.0, 5.5]);
        let k = m(1, 2, &[1.0, 4.0]);
        let q = m(2, 2, &[9.0, -3.0, 0.1, 0.2]);
        let out = attention(&q, &k, &v, 2.0).unwrap();
        for r in 0..2 {
            assert_eq!(out.row(r), v.row(0));
        }
    }

    #[test]
    fn equal_logits_average_values() {
        let q = m(1, 2, &[1.0, 0.0]);
        let k = m(3, 2, &[0.0, 1.0, 0.0, -2.0, 0.0, 3.0]);
        let v = m(3, 2, &[1.0, 2.0, 4.0, 8.0, 7.0, -1.0]);
        let out = attention(&q, &k, &v, 2.0).unwrap();
        assert!((out[(0, 0)] - 4.0).abs() < 1e-12);
        assert!((out[(0, 1)] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_token_scalar_oracle() {
        let q = m(1, 2, &[1.0, 2.0]);
        let k = m(2, 2, &[0.5, -1.0, 2.0, 1.0]);
        let v = m(2, 1, &[10.0, -4.0]);
        let d = 2.0f64;
        let l0 = (1.0 * 0.5 + -2.0) / d.sqrt();
        let l1 = (1.0 * 2.0 + 2.0 * 1.0) / d.sqrt();
        let w0 = l0.exp() / (l0.exp() + l1.exp());
        let expected = w0 * 10.0 + (1.0 - w0) * -4.0;
        let out = attention(&q, &k, &v, d).unwrap();
        assert!((out[(0, 0)] - expected).abs() < 1e-12);
    }

    #[test]
    fn mismatched_tokens_rejected() {
        let q = m(1, 2, &[1.0, 0.0]);
        assert!(attention(&q, &Matrix::zeros(2, 2), &Matrix::zeros(3, 2), 2.0).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let q = tape.constant(Matrix::randn(5, 4, 3.0, &mut r));
        let k = tape.constant(Matrix::randn(7, 4, 3.0, &mut r));
        let kt = tape.transpose(k);
        let l = tape.matmul(q, kt).unwrap();
        let s = tape.softmax_rows(l);
        for row in 0..5 {
            assert!((tape.value(s).row(row).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    fn lora_fixture(b: &[f64]) -> LoRALayer {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut l = LoRALayer::new("l", 2, 2, 1, 1.0, &mut r).unwrap();
        l.a.value = m(1, 2, &[0.5, -1.0]);
        l.b.value = m(2, 1, b);
        l
    }

    #[test]
    fn lora_examples() {
        let w = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let x = m(1, 2, &[1.0, -2.0]);
        let wx = m(1, 2, &[1.0 - 4.0, 3.0 - 8.0]);
        assert!(lora_project(&w, &lora_fixture(&[0.0, 0.0]), &x, 1.0).unwrap().bits_eq(&wx));
        assert!(lora_project(&w, &lora_fixture(&[3.0, 1.0]), &x, 0.0).unwrap().bits_eq(&wx));
        // rank-1: A x = 0.5 + 2 = 2.5; B (A x) = (7.5, 2.5); alpha 2
        let out = lora_project(&w, &lora_fixture(&[3.0, 1.0]), &x, 2.0).unwrap();
        assert_eq!(out.data(), &[-3.0 + 15.0, -5.0 + 5.0]);
        assert!(lora_project(&w, &lora_fixture(&[0.0, 0.0]), &m(1, 3, &[1.0, 2.0, 3.0]), 1.0).is_err());
    }

    #[test]
    fn lora_rank_bounds() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!(LoRALayer::new("l", 4, 3, 0, 1.0, &mut r).is_err());
        assert!(LoRALayer::new("l", 4, 3, 4, 1.0, &mut r).is_err());
        let l = LoRALayer::new("l", 4, 3, 2, 1.0, &mut r).unwrap();
        assert!(l.delta().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fusion_case_table() {
        let p = FusionPolicy::default();
        assert_eq!(p.case_for(0.1), FusionDraw { case: BranchCase::TextOnly, gamma: 2.0, sigma: 0.0 });
        assert_eq!(p.case_for(0.9), FusionDraw { case: BranchCase::VisualOnly, gamma: 0.0, sigma: 2.0 });
        assert_eq!(p.case_for(0.5), FusionDraw { case: BranchCase::Both, gamma: 1.0, sigma: 1.0 });
        assert_eq!(p.case_for(p.r1).case, BranchCase::Both);
        assert_eq!(p.case_for(p.r2).case, BranchCase::Both);
        let bad = FusionPolicy { r1: 0.8, r2: 0.2, ..p };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fusion_frequencies() {
        let p = FusionPolicy::default();
        let mut r = rng::stream(0, "freq");
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[draw_fusion(&p, &mut r).case as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
    }

    fn layer(seed: u64, generic: bool) -> DualBranchCrossAttention {
        let mut r = rng::stream(seed, "layer");
        let dims = AttnDims { model: 4, text: 3, attn: 4, heads: 2 };
        let base = CrossAttention::new("blk", dims, &mut r).unwrap();
        let mut l = DualBranchCrossAttention::new(base, LoraConfig { rank: 2, alpha: 1.0 }, 2, &mut r).unwrap();
        if generic {
            l.lora_k.b.value = Matrix::randn(4, 2, 0.5, &mut r);
            l.lora_v.b.value = Matrix::randn(4, 2, 0.5, &mut r);
            l.visual_k.value = Matrix::randn(4, 2, 0.5, &mut r);
            l.visual_v.value = Matrix::randn(4, 2, 0.5, &mut r);
        }
        l
    }

    fn inputs(seed: u64) -> (Matrix, Matrix, Matrix) {
        let mut r = rng::stream(seed, "inputs");
        (Matrix::randn(5, 4, 1.0, &mut r), Matrix::randn(6, 3, 1.0, &mut r), Matrix::randn(3, 2, 1.0, &mut r))
    }

    fn base_forward(l: &DualBranchCrossAttention, h: &Matrix, p: &Matrix) -> Matrix {
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let text = tape.constant(p.clone());
        let out = l.base.forward(&mut tape, hv, &AttnContext { text, visual: None, draw: FusionDraw::both(1.0, 1.0) }).unwrap();
        tape.value(out.output).clone()
    }

    #[test]
    fn zero_visual_both_branch_equals_text_attention() {
        let l = layer(1, false);
        let (h, p, f) = inputs(2);
        let both = dual_branch_forward(&l, &h, &p, Some(&f), FusionDraw::both(1.0, 1.0)).unwrap();
        assert!(both.bits_eq(&base_forward(&l, &h, &p)));
    }

    #[test]
    fn text_only_ignores_visual() {
        let l = layer(3, true);
        let (h, p, f) = inputs(4);
        let draw = FusionPolicy::default().case_for(0.1);
        let a = dual_branch_forward(&l, &h, &p, Some(&f), draw).unwrap();
        let b = dual_branch_forward(&l, &h, &p, Some(&f.scale(-3.0)), draw).unwrap();
        let c = dual_branch_forward(&l, &h, &p, None, draw).unwrap();
        assert!(a.bits_eq(&b) && a.bits_eq(&c));
        let single = dual_branch_forward(&l, &h, &p, Some(&f), FusionDraw { case: BranchCase::TextOnly, gamma: 1.0, sigma: 0.0 }).unwrap();
        assert!(a.max_abs_diff(&single.scale(2.0)) < 1e-12);
    }

    #[test]
    fn missing_visual_is_invalid_state() {
        let l = layer(3, true);
        let (h, p, _) = inputs(4);
        let err = dual_branch_forward(&l, &h, &p, None, FusionDraw::both(1.0, 1.0)).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)));
    }

    /// Enumerate the three fusion cases with equal weights; the average must
    /// equal Attn_T + Attn_S.
    #[test]
    fn fusion_expectation_identity() {
        let l = layer(5, true);
        let (h, p, f) = inputs(6);
        let policy = FusionPolicy::default();
        let mut avg = Matrix::zeros(5, 4);
        for seed in [0.1, 0.5, 0.9] {
            let out = dual_branch_forward(&l, &h, &p, Some(&f), policy.case_for(seed)).unwrap();
            avg = avg.add(&out.scale(1.0 / 3.0)).unwrap();
        }
        let sum = dual_branch_forward(&l, &h, &p, Some(&f), FusionDraw::both(1.0, 1.0)).unwrap();
        assert!(avg.max_abs_diff(&sum) < 1e-12);
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let l = layer(7, true);
        let (h, p, f) = inputs(8);
        let loss = |l: &DualBranchCrossAttention| {
            let mut tape = Tape::new();
            let hv = tape.constant(h.clone());
            let text = tape.constant(p.clone());
            let visual = Some(tape.constant(f.clone()));
            let out = l.forward(&mut tape, hv, &AttnContext { text, visual, draw: FusionDraw::both(1.0, 1.0) }).unwrap();
            let sq = tape.mul(out.output, out.output).unwrap();
            let s = tape.mean(sq);
            (tape, s)
        };
        let (tape, out) = loss(&l);
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.len(), 6);
        for (name, g) in grads.iter() {
            let base = l.param(name).unwrap().value;
            for i in 0..base.len() {
                let eval = |d: f64| {
                    let mut c = l.clone();
                    let mut v = base.clone();
                    v.data_mut()[i] += d;
                    c.set_param_value(name, v).unwrap();
                    let (t, o) = loss(&c);
                    t.value(o)[(0, 0)]
                };
                let numeric = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                let analytic = g.data()[i];
                let scale = analytic.abs().max(numeric.abs());
                assert!(scale < 1e-9 || (analytic - numeric).abs() / scale < 1e-4, "{name}[{i}] {analytic} vs {numeric}");
            }
        }
    }
}
