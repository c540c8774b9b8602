//! Joint training of the adapters, LoRA factors and visual projections.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Gradients, Module, Tape, Var};
use crate::checkpoint::{collect_tensors, Checkpoint};
use crate::config::Config;
use crate::encoders::ImageFeatureStack;
use crate::error::{Error, Result};
use crate::face::FaceEmbedder;
use crate::fixture::read_sidecar;
use crate::injection::{draw_fusion, AttnContext, BranchCase, DrawMode, FusionDraw};
use crate::losses::{
    diffusion_loss_on_tape, face_identity_loss_on_tape, predict_x0_on_tape, reg_l1_on_tape, total_loss, total_on_tape,
    LossBundle, LossVars,
};
use crate::model::Model;
use crate::preprocess::{prepare_reference, prepare_target, EllipseMasker, FaceRegion, Image, PreprocessConfig};
use crate::rng;
use crate::tensor::{round_f32, Matrix};

/// One training example: the masked reference crop and the wide target crop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub reference: FaceRegion,
    pub target: FaceRegion,
    pub identity: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    samples: Vec<TrainSample>,
}

impl Dataset {
    pub fn new(samples: Vec<TrainSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        Ok(Self { samples })
    }

    pub fn from_image(image: &Image, bbox: crate::preprocess::BoundingBox, identity: &str, cfg: &PreprocessConfig) -> Result<TrainSample> {
        Ok(TrainSample {
            reference: prepare_reference(image, bbox, cfg, &EllipseMasker)?,
            target: prepare_target(image, bbox, cfg)?,
            identity: identity.to_string(),
        })
    }

    /// Reads a directory of images described by a `bboxes.jsonl` sidecar.
    pub fn load_dir(dir: &Path, cfg: &PreprocessConfig) -> Result<Self> {
        let samples = read_sidecar(dir)?
            .iter()
            .map(|r| {
                let img = Image::load(&dir.join(&r.image))?;
                Self::from_image(&img, r.bbox()?, &r.identity, cfg)
            })
            .collect::<Result<_>>()?;
        Self::new(samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[TrainSample] {
        &self.samples
    }

    /// Keep only the samples of one identity.
    pub fn filter_identity(&self, identity: &str) -> Result<Self> {
        Self::new(self.samples.iter().filter(|s| s.identity == identity).cloned().collect())
    }
}

/// Frozen-path quantities of a sample, computed once.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub stack: ImageFeatureStack,
    pub latent: Matrix,
    pub target_pixels: Matrix,
    pub target_face: Matrix,
}

pub fn prepare_sample(model: &Model, sample: &TrainSample) -> Result<PreparedSample> {
    let stack = model.encode_reference(&sample.reference)?;
    let target_pixels = sample.target.pixels.to_matrix();
    let latent = model.vae.encode(&target_pixels)?;
    let mut tape = Tape::new();
    let px = tape.constant(target_pixels.clone());
    let f = model.face.embed_on_tape(&mut tape, px)?;
    Ok(PreparedSample { stack, latent, target_pixels, target_face: tape.value(f).clone() })
}

/// Adaptive moment estimation without weight decay. Parameters and moments
/// are rounded to float32 after every update so that checkpoints are exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: BTreeMap::new() }
    }

    /// Updates every trainable parameter of `model`; unreached ones see a zero gradient.
    pub fn step(&mut self, model: &mut dyn ModuleMut, grads: &Gradients) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let moments = &mut self.moments;
        model.for_each_trainable(&mut |name, value| {
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (Matrix::zeros(value.rows(), value.cols()), Matrix::zeros(value.rows(), value.cols())));
            let g = grads.get(name);
            for i in 0..value.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = round_f32(b1 * m.data()[i] + (1.0 - b1) * gi);
                let vi = round_f32(b2 * v.data()[i] + (1.0 - b2) * gi * gi);
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                value.data_mut()[i] = round_f32(value.data()[i] - update);
            }
        });
    }
}

/// Object-safe access to the trainable tensors of a module.
pub trait ModuleMut {
    fn for_each_trainable(&mut self, f: &mut dyn FnMut(&str, &mut Matrix));
}

impl<M: Module> ModuleMut for M {
    fn for_each_trainable(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.visit_params_mut(&mut |p| {
            if p.is_trainable() {
                let name = p.name().to_string();
                f(&name, &mut p.value);
            }
        });
    }
}

/// The random quantities of one step, drawn from the step's own stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraws {
    pub timesteps: Vec<usize>,
    pub noise: Vec<Matrix>,
    pub fusion: Vec<FusionDraw>,
}

pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    rng::stream(seed, &format!("step-{step}"))
}

pub fn draw_step(cfg: &Config, model: &Model, step: u64, batch: usize) -> StepDraws {
    let mut r = step_rng(cfg.seed, step);
    let shared = draw_fusion(&cfg.fusion, &mut r);
    let (rows, cols) = model.vae.config().latent_shape();
    let mut d = StepDraws { timesteps: Vec::new(), noise: Vec::new(), fusion: Vec::new() };
    for _ in 0..batch {
        d.timesteps.push(r.random_range(1..=model.schedule.steps()));
        d.noise.push(Matrix::randn(rows, cols, 1.0, &mut r));
        d.fusion.push(match cfg.fusion.draw_mode {
            DrawMode::PerStep => shared,
            DrawMode::PerCall => draw_fusion(&cfg.fusion, &mut r),
        });
    }
    d
}

/// A built loss graph for one batch.
pub struct LossGraph {
    pub tape: Tape,
    pub total: Var,
    pub bundle: LossBundle,
    pub cases: Vec<BranchCase>,
}

/// Forward pass and loss for `batch` with the given random draws.
pub fn build_loss(model: &Model, batch: &[&PreparedSample], draws: &StepDraws, cfg: &Config, step: u64) -> Result<LossGraph> {
    if batch.is_empty() || draws.timesteps.len() != batch.len() {
        return Err(Error::invalid("batch and draws must be non-empty and of equal length"));
    }
    let mut tape = Tape::new();
    let inv_b = 1.0 / batch.len() as f64;
    let mut diffusion = Vec::new();
    let mut face = Vec::new();
    let mut pseudo_all = Vec::new();
    let mut visual_values = Vec::new();
    for (j, item) in batch.iter().enumerate() {
        let t = draws.timesteps[j];
        let cond = model.conditions_on_tape(&mut tape, &item.stack)?;
        pseudo_all.push(cond.pseudo);
        let text = model.prompt_on_tape(&mut tape, &cfg.sampler.prompt, cond.pseudo)?;
        let z_t = model.schedule.add_noise(&item.latent, &draws.noise[j], t)?;
        let z_t = tape.constant(z_t);
        let ctx = AttnContext { text, visual: Some(cond.visual), draw: draws.fusion[j] };
        let out = model.unet.forward(&mut tape, z_t, t, &model.schedule, &ctx)?;
        visual_values.extend(out.visual_values);
        let eps = tape.constant(draws.noise[j].clone());
        diffusion.push(diffusion_loss_on_tape(&mut tape, eps, out.eps)?);
        if cfg.train.face_loss {
            let z0 = predict_x0_on_tape(&mut tape, z_t, out.eps, t, &model.schedule)?;
            let x = model.vae.decode_on_tape(&mut tape, z0)?;
            let gen = model.face.embed_on_tape(&mut tape, x)?;
            let reference = tape.constant(item.target_face.clone());
            face.push(face_identity_loss_on_tape(&mut tape, reference, gen)?);
        }
    }
    let mean = |tape: &mut Tape, parts: &[Var]| -> Result<Var> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = tape.add(acc, p)?;
        }
        Ok(tape.scale(acc, inv_b))
    };
    let diffusion = mean(&mut tape, &diffusion)?;
    let face = if face.is_empty() { None } else { Some(mean(&mut tape, &face)?) };
    let reg_text = reg_l1_on_tape(&mut tape, &pseudo_all)?;
    let reg_visual = if visual_values.is_empty() { None } else { Some(reg_l1_on_tape(&mut tape, &visual_values)?) };
    let vars = LossVars { diffusion, face, reg_text, reg_visual };
    let bundle = total_loss(vars.terms(&tape), &cfg.loss).map_err(|e| match e {
        Error::Divergence { term, .. } => Error::Divergence { step, term },
        other => other,
    })?;
    let total = total_on_tape(&mut tape, &vars, &cfg.loss)?;
    if !tape.value(total)[(0, 0)].is_finite() {
        return Err(Error::Divergence { step, term: "total" });
    }
    Ok(LossGraph { tape, total, bundle, cases: draws.fusion.iter().map(|d| d.case).collect() })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub diffusion: f64,
    pub face: f64,
    pub reg_text: f64,
    pub reg_visual: f64,
    pub total: f64,
    pub cases: Vec<&'static str>,
}

fn case_name(c: BranchCase) -> &'static str {
    match c {
        BranchCase::TextOnly => "text",
        BranchCase::VisualOnly => "visual",
        BranchCase::Both => "both",
    }
}

/// Owns the model, optimizer and prepared data for a training run.
pub struct Trainer {
    pub config: Config,
    pub model: Model,
    pub optimizer: Adam,
    pub step: u64,
    prepared: Vec<PreparedSample>,
}

impl Trainer {
    pub fn new(config: Config, data: &Dataset) -> Result<Self> {
        let model = Model::build(&config)?;
        Self::with_model(config, model, data)
    }

    pub fn with_model(config: Config, model: Model, data: &Dataset) -> Result<Self> {
        let prepared = data.samples().iter().map(|s| prepare_sample(&model, s)).collect::<Result<_>>()?;
        Ok(Self { optimizer: Adam::new(config.train.learning_rate), config, model, step: 0, prepared })
    }

    /// Continue from a checkpoint; the checkpoint's config snapshot wins over `config`
    /// except for `train.max_steps` and `train.checkpoint_every`.
    pub fn resume(config: Config, checkpoint: &Checkpoint, data: &Dataset) -> Result<Self> {
        let mut snapshot = checkpoint.config()?;
        snapshot.train.max_steps = config.train.max_steps;
        snapshot.train.checkpoint_every = config.train.checkpoint_every;
        let mut t = Self::new(snapshot, data)?;
        checkpoint.apply(&mut t.model)?;
        t.step = checkpoint.step();
        t.optimizer.t = checkpoint.step();
        t.optimizer.moments = checkpoint.moments();
        Ok(t)
    }

    pub fn prepared(&self) -> &[PreparedSample] {
        &self.prepared
    }

    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let b = self.config.train.batch_size as u64;
        let n = self.prepared.len() as u64;
        (0..b).map(|j| ((step * b + j) % n) as usize).collect()
    }

    /// Loss graph of the batch for `step` without updating anything.
    pub fn loss_at(&self, step: u64) -> Result<LossGraph> {
        let batch: Vec<&PreparedSample> = self.batch_indices(step).into_iter().map(|i| &self.prepared[i]).collect();
        let draws = draw_step(&self.config, &self.model, step, batch.len());
        build_loss(&self.model, &batch, &draws, &self.config, step)
    }

    /// One optimizer step.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let graph = self.loss_at(self.step)?;
        let grads = graph.tape.backward(graph.total)?;
        self.optimizer.step(&mut self.model, &grads);
        let b = graph.bundle;
        let rec = StepRecord {
            step: self.step,
            diffusion: b.diffusion,
            face: b.face,
            reg_text: b.reg_text,
            reg_visual: b.reg_visual,
            total: b.total,
            cases: graph.cases.into_iter().map(case_name).collect(),
        };
        self.step += 1;
        Ok(rec)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(collect_tensors(&self.model, Some(&self.optimizer.moments)), self.step, &self.config)
    }

    /// Runs until `train.max_steps`, writing JSON step records to `log` and
    /// checkpoints to `out` every `train.checkpoint_every` steps and at the end.
    pub fn run(&mut self, out: Option<&Path>, mut log: Option<&mut dyn Write>) -> Result<Vec<StepRecord>> {
        let mut history = Vec::new();
        let every = self.config.train.checkpoint_every;
        while self.step < self.config.train.max_steps {
            let rec = self.train_step()?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            }
            history.push(rec);
            if let Some(dir) = out {
                if every > 0 && self.step.is_multiple_of(every) && self.step < self.config.train.max_steps {
                    self.checkpoint()?.save(dir)?;
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint()?.save(dir)?;
        }
        Ok(history)
    }
}

/// Exponential moving average used to judge loss trends.
pub fn smoothed(values: &[f64], weight: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let next = match acc {
            None => v,
            Some(a) => weight * a + (1.0 - weight) * v,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::UNet;
    use crate::fixture::{identity_spec, render_face};
    use crate::injection::CrossAttention;
    use crate::model::base_unet;

    fn small_config() -> Config {
        let mut c = Config::toy();
        c.train.batch_size = 2;
        c.train.max_steps = 4;
        c
    }

    fn dataset(cfg: &Config, n: usize) -> Dataset {
        let spec = identity_spec(5);
        let samples = (0..n)
            .map(|k| {
                let (img, bbox) = render_face(&spec, k as u64, 96);
                Dataset::from_image(&img, bbox, "five", &cfg.preprocess).unwrap()
            })
            .collect();
        Dataset::new(samples).unwrap()
    }

    #[test]
    fn identical_seeds_give_identical_bundles() {
        let cfg = small_config();
        let data = dataset(&cfg, 3);
        let mut a = Trainer::new(cfg.clone(), &data).unwrap();
        let mut b = Trainer::new(cfg, &data).unwrap();
        for _ in 0..3 {
            assert_eq!(a.train_step().unwrap(), b.train_step().unwrap());
        }
        assert_eq!(a.model.param_hash(true), b.model.param_hash(true));
    }

    #[test]
    fn step_zero_diffusion_matches_base_model() {
        let mut cfg = small_config();
        cfg.fusion.r1 = 0.0;
        cfg.fusion.r2 = 1.0;
        let data = dataset(&cfg, 2);
        let t = Trainer::new(cfg.clone(), &data).unwrap();
        let graph = t.loss_at(0).unwrap();
        let base: UNet<CrossAttention> = base_unet(&cfg).unwrap();
        let draws = draw_step(&cfg, &t.model, 0, 2);
        let mut total = 0.0;
        let mut tape = Tape::new();
        for (j, idx) in t.batch_indices(0).into_iter().enumerate() {
            let item = &t.prepared()[idx];
            let cond = t.model.conditions_on_tape(&mut tape, &item.stack).unwrap();
            let text = t.model.prompt_on_tape(&mut tape, &cfg.sampler.prompt, cond.pseudo).unwrap();
            let z_t = tape.constant(t.model.schedule.add_noise(&item.latent, &draws.noise[j], draws.timesteps[j]).unwrap());
            let ctx = AttnContext { text, visual: None, draw: draws.fusion[j] };
            let out = base.forward(&mut tape, z_t, draws.timesteps[j], &t.model.schedule, &ctx).unwrap();
            total += crate::losses::diffusion_loss(&draws.noise[j], tape.value(out.eps)).unwrap();
        }
        assert!((graph.bundle.diffusion - total / 2.0).abs() < 1e-12);
    }

    #[test]
    fn batches_cycle_through_the_dataset() {
        let cfg = small_config();
        let t = Trainer::new(cfg, &dataset(&small_config(), 3)).unwrap();
        assert_eq!(t.batch_indices(0), vec![0, 1]);
        assert_eq!(t.batch_indices(1), vec![2, 0]);
    }

    #[test]
    fn zero_steps_checkpoint_matches_initialization() {
        let mut cfg = small_config();
        cfg.train.max_steps = 0;
        let data = dataset(&cfg, 1);
        let mut t = Trainer::new(cfg.clone(), &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.run(Some(dir.path().join("ck").as_path()), None).unwrap();
        let ck = Checkpoint::load(&dir.path().join("ck")).unwrap();
        let fresh = Model::build(&cfg).unwrap();
        assert_eq!(ck.step(), 0);
        for (n, m) in ck.parameters() {
            assert!(fresh.param(n).unwrap().value.bits_eq(m));
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = small_config();
        let data = dataset(&cfg, 3);
        let mut full = Trainer::new(cfg.clone(), &data).unwrap();
        full.run(None, None).unwrap();
        let mut short_cfg = cfg.clone();
        short_cfg.train.max_steps = 2;
        let mut first = Trainer::new(short_cfg, &data).unwrap();
        first.run(None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        first.checkpoint().unwrap().save(&path).unwrap();
        let mut resumed = Trainer::resume(cfg, &Checkpoint::load(&path).unwrap(), &data).unwrap();
        resumed.run(None, None).unwrap();
        assert_eq!(resumed.step, full.step);
        assert_eq!(resumed.model.param_hash(true), full.model.param_hash(true));
        assert_eq!(resumed.checkpoint().unwrap().tensors, full.checkpoint().unwrap().tensors);
    }

    #[test]
    fn nan_loss_is_a_divergence() {
        let mut cfg = small_config();
        cfg.train.face_loss = false;
        let data = dataset(&cfg, 1);
        let mut t = Trainer::new(cfg, &data).unwrap();
        let name = t.model.trainable_names()[0].clone();
        let p = t.model.param(&name).unwrap();
        t.model.set_param_value(&name, Matrix::filled(p.value.rows(), p.value.cols(), f64::NAN)).unwrap();
        assert!(matches!(t.train_step(), Err(Error::Divergence { step: 0, .. })));
    }

    #[test]
    fn smoothing() {
        assert_eq!(smoothed(&[1.0, 3.0], 0.5), vec![1.0, 2.0]);
    }
}
