//! The toy latent-diffusion backbone: noise schedule, autoencoder, and a
//! small cross-attention denoiser.
//!
//! The denoiser predicts a prior mean `mu` for the clean latent from its
//! residual stream and converts it to a noise prediction through the
//! Gaussian posterior: `eps = b (z_t - a mu) / (a^2 s^2 + b^2)` with
//! `a = sqrt(abar_t)`, `b = sqrt(1 - abar_t)` and a fixed prior variance
//! `s^2`. Only the cross-attention layers are ever instrumented.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Module, Param, Tape, Var};
use crate::error::{Error, Result};
use crate::injection::{
    AttnContext, AttnDims, CrossAttention, CrossAttentionLayer, DualBranchCrossAttention, LoraConfig,
};
use crate::rng;
use crate::tensor::Matrix;

/// Linear-beta DDPM schedule. `alpha_bar(0) = 1`; training timesteps are `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid("schedule needs steps > 0 and 0 < beta_start <= beta_end < 1"));
        }
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for i in 0..steps {
            let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            let beta = beta_start + (beta_end - beta_start) * frac;
            acc *= 1.0 - beta;
            alpha_bars.push(acc);
        }
        Ok(Self { alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bars.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside schedule 0..={}", self.steps())))
    }

    /// `(sqrt(abar_t), sqrt(1 - abar_t))`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// `z_t = a z0 + b eps`.
    pub fn add_noise(&self, z0: &Matrix, eps: &Matrix, t: usize) -> Result<Matrix> {
        let (a, b) = self.coefficients(t)?;
        z0.zip_map(eps, |z, e| a * z + b * e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub image_size: usize,
    pub downsample: usize,
    pub latent_channels: usize,
}

impl VaeConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.downsample
    }

    pub fn latent_shape(&self) -> (usize, usize) {
        (self.grid() * self.grid(), self.latent_channels)
    }
}

/// A linear autoencoder: average-pool, then a fixed channel map with
/// orthonormal rows; decoding is the transpose followed by nearest upsample.
#[derive(Clone, Debug)]
pub struct ToyVae {
    cfg: VaeConfig,
    encode_w: Param,
    pool: Matrix,
    upsample: Matrix,
}

impl ToyVae {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self> {
        if cfg.downsample == 0 || !cfg.image_size.is_multiple_of(cfg.downsample) {
            return Err(Error::invalid("image_size must be a multiple of the latent downsample factor"));
        }
        if cfg.latent_channels < 3 {
            return Err(Error::invalid("the toy autoencoder needs at least 3 latent channels"));
        }
        let mut r = rng::stream(seed, "vae");
        let basis = orthonormal_rows(3, cfg.latent_channels, &mut r);
        let (size, g, f) = (cfg.image_size, cfg.grid(), cfg.downsample);
        let mut pool = Matrix::zeros(g * g, size * size);
        let mut upsample = Matrix::zeros(size * size, g * g);
        for y in 0..size {
            for x in 0..size {
                let cell = (y / f) * g + x / f;
                pool[(cell, y * size + x)] = 1.0 / (f * f) as f64;
                upsample[(y * size + x, cell)] = 1.0;
            }
        }
        Ok(Self { cfg, encode_w: Param::frozen("vae.encode_w", basis), pool, upsample })
    }

    pub fn config(&self) -> VaeConfig {
        self.cfg
    }

    /// Pixels (`size^2 x 3`, values in `[0, 1]`) to latent (`grid^2 x channels`).
    pub fn encode(&self, pixels: &Matrix) -> Result<Matrix> {
        let s = self.cfg.image_size;
        if pixels.shape() != (s * s, 3) {
            return Err(Error::invalid(format!("autoencoder expects {s}x{s}x3 pixels")));
        }
        let centered = pixels.map(|v| 2.0 * v - 1.0);
        self.pool.matmul(&centered)?.matmul(&self.encode_w.value)
    }

    /// Latent to pixels, differentiable. Output is not clamped.
    pub fn decode_on_tape(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        if tape.shape(z) != self.cfg.latent_shape() {
            return Err(Error::invalid("latent has the wrong shape for this autoencoder"));
        }
        let w = tape.param(&self.encode_w);
        let wt = tape.transpose(w);
        let rgb = tape.matmul(z, wt)?;
        let up = tape.constant(self.upsample.clone());
        let px = tape.matmul(up, rgb)?;
        let px = tape.scale(px, 0.5);
        let half = tape.constant(Matrix::filled(1, 3, 0.5));
        tape.add_row(px, half)
    }

    pub fn decode(&self, z: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = self.decode_on_tape(&mut tape, zv)?;
        Ok(tape.value(out).clone())
    }
}

impl Module for ToyVae {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.encode_w);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.encode_w);
    }
}

/// `rows x cols` with orthonormal rows (Gram-Schmidt on Gaussian draws).
pub(crate) fn orthonormal_rows<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut v = Matrix::randn(1, cols, 1.0, rng).into_vec();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= d * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Matrix::from_rows(&out).expect("rows have equal width")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_tokens: usize,
    pub latent_channels: usize,
    pub width: usize,
    pub time_dim: usize,
    pub blocks: usize,
    /// The first `cross_attention_layers` blocks carry cross-attention.
    pub cross_attention_layers: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub mlp_scale: f64,
    pub prior_var: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetBlock<A> {
    pub attn: Option<A>,
    mlp_w1: Param,
    mlp_b1: Param,
    mlp_w2: Param,
}

/// The toy denoiser, generic over its cross-attention layer type.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet<A> {
    cfg: UNetConfig,
    in_proj: Param,
    pos: Param,
    time_proj: Param,
    out_proj: Param,
    blocks: Vec<UNetBlock<A>>,
}

pub struct UNetOutput {
    pub eps: Var,
    /// Visual-branch values from every instrumented layer that computed them.
    pub visual_values: Vec<Var>,
}

pub fn timestep_embedding(t: usize, dim: usize) -> Matrix {
    let half = dim / 2;
    let mut out = Matrix::zeros(1, dim);
    for k in 0..half {
        let freq = (-(k as f64) / half.max(1) as f64 * 1000f64.ln()).exp();
        let arg = t as f64 * freq * 0.05;
        out[(0, k)] = arg.sin();
        out[(0, half + k)] = arg.cos();
    }
    out
}

impl UNet<CrossAttention> {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        if cfg.cross_attention_layers > cfg.blocks {
            return Err(Error::invalid("more cross-attention layers than blocks"));
        }
        if cfg.prior_var.is_nan() || cfg.prior_var <= 0.0 {
            return Err(Error::invalid("prior variance must be positive"));
        }
        let mut r = rng::stream(seed, "unet");
        let dims = AttnDims { model: cfg.width, text: cfg.text_dim, attn: cfg.attn_dim, heads: cfg.heads };
        let s = |n: usize| 1.0 / (n as f64).sqrt();
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let attn = if i < cfg.cross_attention_layers {
                    Some(CrossAttention::new(&format!("unet.blocks.{i}.attn"), dims, &mut r)?)
                } else {
                    None
                };
                Ok(UNetBlock {
                    attn,
                    mlp_w1: Param::frozen(format!("unet.blocks.{i}.mlp.w1"), Matrix::randn(cfg.width, cfg.width, s(cfg.width), &mut r)),
                    mlp_b1: Param::frozen(format!("unet.blocks.{i}.mlp.b1"), Matrix::randn(1, cfg.width, 0.1, &mut r)),
                    mlp_w2: Param::frozen(format!("unet.blocks.{i}.mlp.w2"), Matrix::randn(cfg.width, cfg.width, s(cfg.width), &mut r)),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            in_proj: Param::frozen("unet.in_proj", Matrix::randn(cfg.latent_channels, cfg.width, s(cfg.latent_channels), &mut r)),
            pos: Param::frozen("unet.pos", Matrix::randn(cfg.latent_tokens, cfg.width, 1.0, &mut r)),
            time_proj: Param::frozen("unet.time_proj", Matrix::randn(cfg.time_dim, cfg.width, s(cfg.time_dim), &mut r)),
            out_proj: Param::frozen("unet.out_proj", Matrix::randn(cfg.width, cfg.latent_channels, s(cfg.width), &mut r)),
            blocks,
        })
    }
}

impl<A> UNet<A> {
    pub fn config(&self) -> UNetConfig {
        self.cfg
    }

    pub fn blocks(&self) -> &[UNetBlock<A>] {
        &self.blocks
    }

    pub fn cross_attention_layers(&self) -> impl Iterator<Item = &A> {
        self.blocks.iter().filter_map(|b| b.attn.as_ref())
    }

    pub fn cross_attention_layers_mut(&mut self) -> impl Iterator<Item = &mut A> {
        self.blocks.iter_mut().filter_map(|b| b.attn.as_mut())
    }

    pub fn cross_attention_count(&self) -> usize {
        self.cross_attention_layers().count()
    }

    fn map_attention<B>(self, mut f: impl FnMut(A) -> Result<B>) -> Result<UNet<B>> {
        let blocks = self
            .blocks
            .into_iter()
            .map(|b| {
                Ok(UNetBlock { attn: b.attn.map(&mut f).transpose()?, mlp_w1: b.mlp_w1, mlp_b1: b.mlp_b1, mlp_w2: b.mlp_w2 })
            })
            .collect::<Result<_>>()?;
        Ok(UNet {
            cfg: self.cfg,
            in_proj: self.in_proj,
            pos: self.pos,
            time_proj: self.time_proj,
            out_proj: self.out_proj,
            blocks,
        })
    }
}

impl<A: CrossAttentionLayer> UNet<A> {
    /// Noise prediction for `z_t` (`latent_tokens x latent_channels`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        z_t: Var,
        t: usize,
        schedule: &NoiseSchedule,
        ctx: &AttnContext,
    ) -> Result<UNetOutput> {
        if tape.shape(z_t) != (self.cfg.latent_tokens, self.cfg.latent_channels) {
            return Err(Error::invalid(format!(
                "denoiser expects a {}x{} latent, got {:?}",
                self.cfg.latent_tokens,
                self.cfg.latent_channels,
                tape.shape(z_t)
            )));
        }
        let (a, b) = schedule.coefficients(t)?;
        let (w_in, pos, w_t, w_out) =
            (tape.param(&self.in_proj), tape.param(&self.pos), tape.param(&self.time_proj), tape.param(&self.out_proj));
        let h = tape.matmul(z_t, w_in)?;
        let h = tape.add(h, pos)?;
        let temb = tape.constant(timestep_embedding(t, self.cfg.time_dim));
        let temb = tape.matmul(temb, w_t)?;
        let h0 = tape.add_row(h, temb)?;
        let mut h = h0;
        let mut visual_values = Vec::new();
        for block in &self.blocks {
            if let Some(attn) = &block.attn {
                let u = tape.normalize_rows(h);
                let out = attn.forward(tape, u, ctx)?;
                h = tape.add(h, out.output)?;
                visual_values.extend(out.visual_values);
            }
            let u = tape.normalize_rows(h);
            let (w1, b1, w2) = (tape.param(&block.mlp_w1), tape.param(&block.mlp_b1), tape.param(&block.mlp_w2));
            let m = tape.linear(u, w1, Some(b1))?;
            let m = tape.tanh(m);
            let m = tape.matmul(m, w2)?;
            let m = tape.scale(m, self.cfg.mlp_scale);
            h = tape.add(h, m)?;
        }
        let update = tape.sub(h, h0)?;
        let mu = tape.matmul(update, w_out)?;
        let denom = a * a * self.cfg.prior_var + b * b;
        let zs = tape.scale(z_t, b / denom);
        let ms = tape.scale(mu, a * b / denom);
        let eps = tape.sub(zs, ms)?;
        Ok(UNetOutput { eps, visual_values })
    }
}

impl<A: Module> Module for UNet<A> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.in_proj);
        f(&self.pos);
        f(&self.time_proj);
        f(&self.out_proj);
        for b in &self.blocks {
            if let Some(a) = &b.attn {
                a.visit_params(f);
            }
            f(&b.mlp_w1);
            f(&b.mlp_b1);
            f(&b.mlp_w2);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.in_proj);
        f(&mut self.pos);
        f(&mut self.time_proj);
        f(&mut self.out_proj);
        for b in &mut self.blocks {
            if let Some(a) = &mut b.attn {
                a.visit_params_mut(f);
            }
            f(&mut b.mlp_w1);
            f(&mut b.mlp_b1);
            f(&mut b.mlp_w2);
        }
    }
}

/// Replace every cross-attention layer by a dual-branch layer with zero-init
/// LoRA `B` and zero visual projections. Everything else is moved over
/// untouched.
pub fn inject_into_backbone(
    unet: UNet<CrossAttention>,
    lora: LoraConfig,
    visual_dim: usize,
    seed: u64,
) -> Result<UNet<DualBranchCrossAttention>> {
    if unet.cross_attention_count() == 0 {
        return Err(Error::invalid("backbone has no cross-attention layers to instrument"));
    }
    let mut r = rng::stream(seed, "injection");
    unet.map_attention(|base| DualBranchCrossAttention::new(base, lora, visual_dim, &mut r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::injection::{BranchCase, FusionDraw};

    fn cfg(layers: usize) -> UNetConfig {
        UNetConfig {
            latent_tokens: 4,
            latent_channels: 4,
            width: 8,
            time_dim: 4,
            blocks: 3,
            cross_attention_layers: layers,
            attn_dim: 8,
            heads: 2,
            text_dim: 6,
            mlp_scale: 0.5,
            prior_var: 0.05,
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!((s.alpha_bar(1).unwrap() - (1.0 - 1e-4)).abs() < 1e-15);
        assert!(s.alpha_bar(1000).unwrap() < 1e-4);
        assert!(s.alpha_bar(1001).is_err());
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn vae_round_trip_on_block_constant_images() {
        let vae = ToyVae::new(VaeConfig { image_size: 8, downsample: 2, latent_channels: 4 }, 1).unwrap();
        let px = Matrix::from_vec(64, 3, (0..192).map(|i| ((i / 3 % 8 / 2 + (i / 48) * 3 + i % 3) % 5) as f64 / 4.0).collect()).unwrap();
        // make every 2x2 cell constant
        let mut blocky = Matrix::zeros(64, 3);
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    blocky[(y * 8 + x, c)] = px[((y / 2 * 2) * 8 + x / 2 * 2, c)];
                }
            }
        }
        let z = vae.encode(&blocky).unwrap();
        assert_eq!(z.shape(), (16, 4));
        assert!(vae.decode(&z).unwrap().max_abs_diff(&blocky) < 1e-12);
    }

    #[test]
    fn injection_counts_and_errors() {
        let unet = UNet::new(cfg(2), 3).unwrap();
        assert_eq!(unet.cross_attention_count(), 2);
        let frozen_before: Vec<String> = unet.frozen_names();
        let inst = inject_into_backbone(unet, LoraConfig { rank: 2, alpha: 1.0 }, 3, 4).unwrap();
        assert_eq!(inst.cross_attention_count(), 2);
        assert_eq!(inst.frozen_names(), frozen_before);
        assert_eq!(inst.trainable_names().len(), 2 * 6);
        assert!(inject_into_backbone(UNet::new(cfg(0), 3).unwrap(), LoraConfig::default(), 3, 4).is_err());
    }

    #[test]
    fn zero_init_instrumented_matches_base() {
        let base = UNet::new(cfg(3), 5).unwrap();
        let inst = inject_into_backbone(base.clone(), LoraConfig { rank: 2, alpha: 1.0 }, 3, 6).unwrap();
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let mut r = rng::stream(1, "x");
        for t in [1, 17, 50] {
            let z = Matrix::randn(4, 4, 1.0, &mut r);
            let p = Matrix::randn(5, 6, 1.0, &mut r);
            let f = Matrix::randn(2, 3, 1.0, &mut r);
            let run = |tape: &mut Tape, visual: bool| {
                let zv = tape.constant(z.clone());
                let text = tape.constant(p.clone());
                let vis = visual.then(|| tape.constant(f.clone()));
                (zv, AttnContext { text, visual: vis, draw: FusionDraw { case: BranchCase::Both, gamma: 1.0, sigma: 1.0 } })
            };
            let mut t1 = Tape::new();
            let (zv, ctx) = run(&mut t1, false);
            let e1 = base.forward(&mut t1, zv, t, &sched, &ctx).unwrap().eps;
            let mut t2 = Tape::new();
            let (zv, ctx) = run(&mut t2, true);
            let out = inst.forward(&mut t2, zv, t, &sched, &ctx).unwrap();
            assert!(t1.value(e1).bits_eq(t2.value(out.eps)));
            assert_eq!(out.visual_values.len(), 3);
        }
    }
}
