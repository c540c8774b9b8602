//! Tuning-free personalization from one photo, and prompt-driven sampling.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{image_adapter_forward, text_adapters_forward, PseudoTokenSet, VisualCondition};
use crate::autograd::Tape;
use crate::backbone::NoiseSchedule;
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::injection::{AttnContext, BranchCase, FusionDraw};
use crate::losses::predict_x0;
use crate::model::Model;
use crate::preprocess::{prepare_reference, prepare_target, BoundingBox, EllipseMasker, Image};
use crate::rng;
use crate::tensor::Matrix;

/// Where a concept came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSource {
    pub checkpoint_id: String,
    pub checkpoint_path: Option<String>,
    pub m_eval: usize,
    pub alpha: f64,
}

/// The per-identity conditions produced by one forward pass. Values are
/// rounded to float32 so the on-disk form is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptCondition {
    pub pseudo_tokens: PseudoTokenSet,
    pub visual: VisualCondition,
    /// Latent of the reference photo's wide crop, for image-to-image starts.
    pub reference_latent: Option<Matrix>,
    pub source: ConceptSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub m_eval: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub img2img_t: Option<usize>,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn from_config(cfg: &Config) -> Self {
        let s = &cfg.sampler;
        Self {
            steps: s.steps,
            guidance_scale: s.guidance_scale,
            m_eval: s.m_eval,
            alpha: s.alpha,
            gamma: s.gamma,
            sigma: s.sigma,
            img2img_t: s.img2img_t,
            seed: cfg.seed,
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.steps() {
            return Err(Error::invalid(format!("sampler steps must lie in 1..={}", schedule.steps())));
        }
        if let Some(t) = self.img2img_t {
            if t == 0 || t > schedule.steps() {
                return Err(Error::invalid(format!("img2img start {t} outside 1..={}", schedule.steps())));
            }
        }
        if self.m_eval == 0 {
            return Err(Error::invalid("m_eval must be positive"));
        }
        Ok(())
    }
}

/// Builds the model described by a checkpoint and loads its trained tensors.
pub fn load_model(checkpoint: &Checkpoint) -> Result<(Config, Model)> {
    let cfg = checkpoint.config()?;
    let mut model = Model::build(&cfg)?;
    checkpoint.apply(&mut model)?;
    Ok((cfg, model))
}

fn to_f32(m: Matrix) -> Matrix {
    let mut m = m;
    m.round_to_f32();
    m
}

/// One reference photo to a concept condition. No gradients, no parameter writes.
pub fn personalize(
    model: &Model,
    cfg: &Config,
    image: &Image,
    bbox: Option<BoundingBox>,
    m_eval: usize,
    source: (&str, Option<&str>),
) -> Result<ConceptCondition> {
    let bbox = bbox.ok_or_else(|| Error::invalid("personalization needs a face bounding box"))?;
    let reference = prepare_reference(image, bbox, &cfg.preprocess, &EllipseMasker)?;
    let stack = model.encode_reference(&reference)?;
    let mut tokens = text_adapters_forward(&model.text_adapters, &stack)?.keep_deepest(m_eval)?;
    tokens.tokens = to_f32(tokens.tokens);
    let mut visual = image_adapter_forward(&model.image_adapter, stack.deepest(), model.visual_shape)?;
    visual.feature = to_f32(visual.feature);
    let target = prepare_target(image, bbox, &cfg.preprocess)?;
    let latent = to_f32(model.vae.encode(&target.pixels.to_matrix())?);
    let alpha = model.unet.cross_attention_layers().next().map_or(cfg.lora.alpha, |l| l.alpha);
    Ok(ConceptCondition {
        pseudo_tokens: tokens,
        visual,
        reference_latent: Some(latent),
        source: ConceptSource {
            checkpoint_id: source.0.to_string(),
            checkpoint_path: source.1.map(str::to_string),
            m_eval,
            alpha,
        },
    })
}

/// `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps` with fresh noise.
pub fn img2img_init<R: Rng + ?Sized>(z0: &Matrix, t: usize, schedule: &NoiseSchedule, rng: &mut R) -> Result<Matrix> {
    let eps = Matrix::randn(z0.rows(), z0.cols(), 1.0, rng);
    schedule.add_noise(z0, &eps, t)
}

/// Descending timesteps from `start`, `steps` of them (fewer if `start` is smaller).
pub fn ddim_timesteps(start: usize, steps: usize) -> Vec<usize> {
    let n = steps.min(start).max(1);
    let mut ts: Vec<usize> = (0..n).map(|i| (start * (n - i)).div_ceil(n)).collect();
    ts.dedup();
    ts
}

fn noise_prediction(model: &Model, z: &Matrix, t: usize, text: &Matrix, visual: Option<&Matrix>, draw: FusionDraw) -> Result<Matrix> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let text = tape.constant(text.clone());
    let visual = visual.map(|v| tape.constant(v.clone()));
    let out = model.unet.forward(&mut tape, zv, t, &model.schedule, &AttnContext { text, visual, draw })?;
    Ok(tape.value(out.eps).clone())
}

/// Encoded text for `prompt` with the concept's pseudo tokens substituted.
pub fn concept_text(model: &Model, concept: &ConceptCondition, prompt: &str) -> Result<Matrix> {
    if !prompt.split_whitespace().any(|w| w == crate::encoders::PLACEHOLDER) {
        return Err(Error::invalid(format!("prompt must contain the {} placeholder", crate::encoders::PLACEHOLDER)));
    }
    let mut tape = Tape::new();
    let pseudo = tape.constant(concept.pseudo_tokens.tokens.clone());
    let text = model.prompt_on_tape(&mut tape, prompt, pseudo)?;
    Ok(tape.value(text).clone())
}

/// Runs the deterministic sampler on prepared conditioning and returns latents.
pub fn sample_latent(
    model: &Model,
    text: &Matrix,
    visual: Option<&Matrix>,
    uncond_text: Option<&Matrix>,
    sampler: &SamplerConfig,
    reference_latent: Option<&Matrix>,
    index: u64,
) -> Result<Matrix> {
    let schedule = &model.schedule;
    sampler.validate(schedule)?;
    let mut r = rng::stream(sampler.seed.wrapping_add(index), "generate");
    let (rows, cols) = model.vae.config().latent_shape();
    let (mut z, start) = match sampler.img2img_t {
        Some(t) => {
            let z0 = reference_latent.ok_or_else(|| Error::invalid("image-to-image start needs a reference latent"))?;
            (img2img_init(z0, t, schedule, &mut r)?, t)
        }
        None => (Matrix::randn(rows, cols, 1.0, &mut r), schedule.steps()),
    };
    let draw = FusionDraw::both(sampler.gamma, sampler.sigma);
    let uncond_draw = FusionDraw { case: BranchCase::TextOnly, gamma: sampler.gamma, sigma: 0.0 };
    let ts = ddim_timesteps(start, sampler.steps);
    for (i, &t) in ts.iter().enumerate() {
        let mut eps = noise_prediction(model, &z, t, text, visual, draw)?;
        if let (Some(u), true) = (uncond_text, sampler.guidance_scale != 1.0) {
            let eu = noise_prediction(model, &z, t, u, None, uncond_draw)?;
            eps = eu.zip_map(&eps, |a, c| a + sampler.guidance_scale * (c - a))?;
        }
        let z0 = predict_x0(&z, &eps, t, schedule)?;
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        let (a, b) = schedule.coefficients(prev)?;
        z = z0.zip_map(&eps, |x, e| a * x + b * e)?;
    }
    Ok(z)
}

/// `n` images for `prompt`, image `i` using seed offset `i`.
pub fn generate(model: &Model, concept: &ConceptCondition, prompt: &str, sampler: &SamplerConfig, n: usize) -> Result<Vec<Image>> {
    let model = with_alpha(model, sampler.alpha);
    let text = concept_text(&model, concept, prompt)?;
    let uncond = if sampler.guidance_scale != 1.0 {
        let mut tape = Tape::new();
        let u = model.plain_prompt_on_tape(&mut tape, "")?;
        Some(tape.value(u).clone())
    } else {
        None
    };
    let size = model.vae.config().image_size;
    (0..n as u64)
        .map(|i| {
            let z = sample_latent(
                &model,
                &text,
                Some(&concept.visual.feature),
                uncond.as_ref(),
                sampler,
                concept.reference_latent.as_ref(),
                i,
            )?;
            Image::from_matrix(size, size, &model.vae.decode(&z)?)
        })
        .collect()
}

fn with_alpha(model: &Model, alpha: f64) -> std::borrow::Cow<'_, Model> {
    if model.unet.cross_attention_layers().all(|l| l.alpha == alpha) {
        std::borrow::Cow::Borrowed(model)
    } else {
        let mut m = model.clone();
        m.set_lora_alpha(alpha);
        std::borrow::Cow::Owned(m)
    }
}

const CONCEPT_MAGIC: &[u8; 4] = b"DCCN";
const CONCEPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ConceptHeader {
    source: ConceptSource,
    pseudo_shape: [usize; 2],
    source_layer_indices: Vec<usize>,
    visual_shape: [usize; 2],
    latent_shape: Option<[usize; 2]>,
}

impl ConceptCondition {
    /// `magic | version u32 | header length u32 | JSON header | f32 LE data`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ConceptHeader {
            source: self.source.clone(),
            pseudo_shape: [self.pseudo_tokens.tokens.rows(), self.pseudo_tokens.tokens.cols()],
            source_layer_indices: self.pseudo_tokens.source_layer_indices.clone(),
            visual_shape: [self.visual.feature.rows(), self.visual.feature.cols()],
            latent_shape: self.reference_latent.as_ref().map(|m| [m.rows(), m.cols()]),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CONCEPT_MAGIC);
        out.extend_from_slice(&CONCEPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let parts = [Some(&self.pseudo_tokens.tokens), Some(&self.visual.feature), self.reference_latent.as_ref()];
        for m in parts.into_iter().flatten() {
            for &v in m.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::invalid(format!("bad concept file: {m}"));
        if bytes.len() < 12 || &bytes[..4] != CONCEPT_MAGIC {
            return Err(bad("missing magic"));
        }
        let u32_at = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        if u32_at(4) != CONCEPT_VERSION {
            return Err(bad("unsupported version"));
        }
        let hlen = u32_at(8) as usize;
        let header: ConceptHeader =
            serde_json::from_slice(bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?)?;
        let mut pos = 12 + hlen;
        let mut take = |shape: [usize; 2]| -> Result<Matrix> {
            let n = shape[0] * shape[1];
            let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated data"))?;
            pos += 4 * n;
            let data = raw.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))).collect();
            Matrix::from_vec(shape[0], shape[1], data)
        };
        let tokens = take(header.pseudo_shape)?;
        let feature = take(header.visual_shape)?;
        let reference_latent = header.latent_shape.map(&mut take).transpose()?;
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        if header.source_layer_indices.len() != tokens.rows() {
            return Err(bad("layer index count does not match token count"));
        }
        Ok(Self {
            pseudo_tokens: PseudoTokenSet { tokens, source_layer_indices: header.source_layer_indices },
            visual: VisualCondition { feature },
            reference_latent,
            source: header.source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Module;
    use crate::fixture::{identity_spec, render_face};
    use crate::model::base_unet;

    fn setup() -> (Config, Model, Image, BoundingBox) {
        let cfg = Config::toy();
        let model = Model::build(&cfg).unwrap();
        let (img, bbox) = render_face(&identity_spec(2), 0, 96);
        (cfg, model, img, bbox)
    }

    #[test]
    fn personalize_is_deterministic_and_pure() {
        let (cfg, model, img, bbox) = setup();
        let before = (model.param_hash(true), model.param_hash(false));
        let a = personalize(&model, &cfg, &img, Some(bbox), 1, ("id", None)).unwrap();
        let b = personalize(&model, &cfg, &img, Some(bbox), 1, ("id", None)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pseudo_tokens.len(), 1);
        assert_eq!(a.pseudo_tokens.source_layer_indices, vec![cfg.encoder.depth]);
        assert_eq!(before, (model.param_hash(true), model.param_hash(false)));
        assert!(personalize(&model, &cfg, &img, None, 1, ("id", None)).is_err());
    }

    #[test]
    fn zero_weight_checkpoint_gives_zero_conditions() {
        let (cfg, mut model, img, bbox) = setup();
        model.text_adapters.networks_mut().iter_mut().for_each(|n| n.zero());
        model.image_adapter.zero();
        let c = personalize(&model, &cfg, &img, Some(bbox), 1, ("id", None)).unwrap();
        assert!(c.pseudo_tokens.tokens.data().iter().all(|&v| v == 0.0));
        assert!(c.visual.feature.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generation_is_reproducible_and_counts() {
        let (cfg, model, img, bbox) = setup();
        let c = personalize(&model, &cfg, &img, Some(bbox), 1, ("id", None)).unwrap();
        let mut s = SamplerConfig::from_config(&cfg);
        s.steps = 10;
        let a = generate(&model, &c, "a photo of S*", &s, 5).unwrap();
        let b = generate(&model, &c, "a photo of S*", &s, 5).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        assert!(generate(&model, &c, "a photo", &s, 1).is_err());
        s.guidance_scale = 3.0;
        s.img2img_t = Some(300);
        assert_eq!(generate(&model, &c, "a photo of S*", &s, 2).unwrap(), generate(&model, &c, "a photo of S*", &s, 2).unwrap());
    }

    #[test]
    fn zero_weight_model_matches_base_sampling() {
        let (cfg, mut model, img, bbox) = setup();
        model.text_adapters.networks_mut().iter_mut().for_each(|n| n.zero());
        model.image_adapter.zero();
        let c = personalize(&model, &cfg, &img, Some(bbox), 1, ("id", None)).unwrap();
        let mut s = SamplerConfig::from_config(&cfg);
        s.steps = 8;
        s.sigma = 3.7;
        let text = concept_text(&model, &c, "a photo of S*").unwrap();
        let ours = sample_latent(&model, &text, Some(&c.visual.feature), None, &s, None, 0).unwrap();
        // base model, raw prompt with an all-zero token in the placeholder slot
        let base = base_unet(&cfg).unwrap();
        let mut r = rng::stream(s.seed, "generate");
        let (rows, cols) = model.vae.config().latent_shape();
        let mut z = Matrix::randn(rows, cols, 1.0, &mut r);
        let ts = ddim_timesteps(model.schedule.steps(), s.steps);
        for (i, &t) in ts.iter().enumerate() {
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            let tv = tape.constant(text.clone());
            let ctx = AttnContext { text: tv, visual: None, draw: FusionDraw::both(1.0, 1.0) };
            let out = base.forward(&mut tape, zv, t, &model.schedule, &ctx).unwrap();
            let eps = tape.value(out.eps).clone();
            let z0 = predict_x0(&z, &eps, t, &model.schedule).unwrap();
            let (a, b) = model.schedule.coefficients(ts.get(i + 1).copied().unwrap_or(0)).unwrap();
            z = z0.zip_map(&eps, |x, e| a * x + b * e).unwrap();
        }
        assert!(ours.bits_eq(&z));
    }

    #[test]
    fn img2img_formula_and_limits() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let z0 = Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let mut r1 = rng::stream(4, "i2i");
        let mut r2 = rng::stream(4, "i2i");
        let zt = img2img_init(&z0, 250, &s, &mut r1).unwrap();
        let eps = Matrix::randn(1, 3, 1.0, &mut r2);
        let ab = s.alpha_bar(250).unwrap();
        for i in 0..3 {
            assert_eq!(zt.data()[i], ab.sqrt() * z0.data()[i] + (1.0 - ab).sqrt() * eps.data()[i]);
        }
        let near = img2img_init(&z0, 1, &s, &mut r1).unwrap();
        assert!(near.max_abs_diff(&z0) < 1e-2 * 6.0);
        assert!(img2img_init(&z0, 1001, &s, &mut r1).is_err());
        // t = T is close to a standard normal
        let big = Matrix::filled(1, 1000, 3.0);
        let x = img2img_init(&big, 1000, &s, &mut r1).unwrap();
        let mean = x.mean();
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.1 && (var - 1.0).abs() < 0.15, "{mean} {var}");
    }

    #[test]
    fn timesteps_descend_to_one() {
        assert_eq!(ddim_timesteps(1000, 4), vec![1000, 750, 500, 250]);
        assert_eq!(ddim_timesteps(3, 50), vec![3, 2, 1]);
        let t = ddim_timesteps(1000, 50);
        assert_eq!((t.len(), t[0], *t.last().unwrap()), (50, 1000, 20));
    }

    #[test]
    fn concept_bytes_round_trip() {
        let (cfg, model, img, bbox) = setup();
        let c = personalize(&model, &cfg, &img, Some(bbox), 3, ("abc", Some("/tmp/ck"))).unwrap();
        let back = ConceptCondition::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        let mut bytes = c.to_bytes().unwrap();
        bytes.push(0);
        assert!(ConceptCondition::from_bytes(&bytes).is_err());
        assert!(ConceptCondition::from_bytes(b"nope").is_err());
    }
}
