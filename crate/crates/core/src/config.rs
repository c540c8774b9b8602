//! Run configuration and its flat `key = value` file format.
//!
//! Grammar: one `key = value` pair per line, keys are dotted identifiers,
//! blank lines and lines starting with `#` are ignored, and the value is the
//! rest of the line with surrounding whitespace removed. A `profile` line
//! (`toy` or `full`) selects the defaults the other keys are applied on top
//! of, wherever it appears. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::encoders::Pooling;
use crate::error::{Error, Result};
use crate::injection::{DrawMode, FusionPolicy, LoraConfig};
use crate::losses::LossWeights;
use crate::preprocess::{PreprocessConfig, Resample, Scale};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Profile {
    #[default]
    Toy,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EncoderBackend {
    #[default]
    Toy,
    Pretrained,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSettings {
    pub backend: EncoderBackend,
    pub seed: u64,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub pooling: Pooling,
    pub text_width: usize,
    pub vocab_size: usize,
    pub context_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub seed: u64,
    pub image_size: usize,
    pub latent_downsample: usize,
    pub latent_channels: usize,
    pub width: usize,
    pub time_dim: usize,
    pub blocks: usize,
    pub cross_attention_layers: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub mlp_scale: f64,
    pub prior_var: f64,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub adapter_blocks: usize,
    pub shared_text_adapters: bool,
    pub visual_tokens: usize,
    pub visual_dim: usize,
    pub face_grid: usize,
    pub face_dim: usize,
    pub face_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub m: usize,
    pub face_loss: bool,
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerSettings {
    pub steps: usize,
    pub guidance_scale: f64,
    pub m_eval: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub img2img_t: Option<usize>,
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub profile: Profile,
    pub seed: u64,
    pub encoder: EncoderSettings,
    pub model: ModelSettings,
    pub preprocess: PreprocessConfig,
    pub fusion: FusionPolicy,
    pub lora: LoraConfig,
    pub loss: LossWeights,
    pub train: TrainSettings,
    pub sampler: SamplerSettings,
}

impl Default for Config {
    fn default() -> Self {
        Self::toy()
    }
}

impl Config {
    pub fn toy() -> Self {
        Self {
            profile: Profile::Toy,
            seed: 0,
            encoder: EncoderSettings {
                backend: EncoderBackend::Toy,
                seed: 11,
                patch_size: 4,
                width: 16,
                depth: 5,
                pooling: Pooling::Mean,
                text_width: 16,
                vocab_size: 256,
                context_len: 16,
            },
            model: ModelSettings {
                seed: 13,
                image_size: 16,
                latent_downsample: 4,
                latent_channels: 4,
                width: 32,
                time_dim: 8,
                blocks: 3,
                cross_attention_layers: 3,
                attn_dim: 16,
                heads: 2,
                mlp_scale: 0.5,
                prior_var: 0.05,
                schedule_steps: 1000,
                beta_start: 1e-4,
                beta_end: 0.02,
                adapter_blocks: 2,
                shared_text_adapters: false,
                visual_tokens: 16,
                visual_dim: 8,
                face_grid: 4,
                face_dim: 32,
                face_seed: 17,
            },
            preprocess: PreprocessConfig { output_size: 16, ..PreprocessConfig::default() },
            fusion: FusionPolicy::default(),
            lora: LoraConfig::default(),
            loss: LossWeights::default(),
            train: TrainSettings {
                learning_rate: 1e-2,
                batch_size: 4,
                max_steps: 500,
                m: 5,
                face_loss: true,
                checkpoint_every: 100,
            },
            sampler: SamplerSettings {
                steps: 50,
                guidance_scale: 1.0,
                m_eval: 1,
                alpha: 1.0,
                gamma: 1.0,
                sigma: 1.0,
                img2img_t: None,
                prompt: "a photo of S*".into(),
            },
        }
    }

    /// Published hyperparameters on a larger toy backbone. Not exercised by
    /// the test suite.
    pub fn full() -> Self {
        let mut c = Self::toy();
        c.profile = Profile::Full;
        c.encoder.width = 64;
        c.encoder.depth = 12;
        c.encoder.text_width = 1024;
        c.encoder.context_len = 77;
        c.encoder.vocab_size = 49408;
        c.model.image_size = 64;
        c.model.latent_downsample = 8;
        c.model.width = 128;
        c.model.attn_dim = 64;
        c.model.heads = 4;
        c.model.visual_tokens = 16;
        c.model.visual_dim = 64;
        c.preprocess.output_size = 64;
        c.train.learning_rate = 1e-4;
        c.train.batch_size = 64;
        c.train.max_steps = 60_000;
        c.train.checkpoint_every = 5_000;
        c
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Toy => Self::toy(),
            Profile::Full => Self::full(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    /// Builds a config from key/value pairs; a `profile` entry picks the base.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let profile = match pairs.iter().rev().find(|(k, _)| k == "profile") {
            Some((_, v)) => Profile::parse_value(v)?,
            None => Profile::Toy,
        };
        let mut cfg = Self::for_profile(profile);
        for (k, v) in pairs {
            if k != "profile" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its current value, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![("profile".to_string(), Scalar::render(&self.profile))];
        self.visit(&mut |k, v| out.push((k.to_string(), v.render())));
        out
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.to_pairs().into_iter().collect()
    }

    /// Canonical file text; parses back to an equal config.
    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// sha256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn keys() -> Vec<String> {
        Self::toy().to_pairs().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut found = None;
        self.visit_mut(&mut |k, slot| {
            if k == key {
                found = Some(slot.parse_into(value));
            }
        });
        match found {
            Some(r) => r.map_err(|e| Error::Config(format!("{key}: {e}"))),
            None if key == "profile" => Err(Error::Config("profile can only be set in a config file".into())),
            None => Err(Error::Config(format!("unknown config key {key:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let positive = [
            ("encoder.patch_size", self.encoder.patch_size),
            ("encoder.width", self.encoder.width),
            ("encoder.depth", self.encoder.depth),
            ("text.width", self.encoder.text_width),
            ("text.vocab_size", self.encoder.vocab_size),
            ("text.context_len", self.encoder.context_len),
            ("model.image_size", self.model.image_size),
            ("model.latent_downsample", self.model.latent_downsample),
            ("model.width", self.model.width),
            ("model.time_dim", self.model.time_dim),
            ("model.attn_dim", self.model.attn_dim),
            ("model.heads", self.model.heads),
            ("schedule.steps", self.model.schedule_steps),
            ("adapter.blocks", self.model.adapter_blocks),
            ("visual.tokens", self.model.visual_tokens),
            ("visual.dim", self.model.visual_dim),
            ("face.grid", self.model.face_grid),
            ("face.dim", self.model.face_dim),
            ("lora.rank", self.lora.rank),
            ("train.batch_size", self.train.batch_size),
            ("train.m", self.train.m),
            ("sampler.steps", self.sampler.steps),
            ("sampler.m_eval", self.sampler.m_eval),
        ];
        for (k, v) in positive {
            if v == 0 {
                return err(format!("{k} must be positive"));
            }
        }
        if self.preprocess.output_size != self.model.image_size {
            return err("preprocess output size must equal model.image_size".into());
        }
        if self.train.m > self.encoder.depth {
            return err(format!("train.m = {} exceeds encoder.depth = {}", self.train.m, self.encoder.depth));
        }
        if self.sampler.m_eval > self.train.m {
            return err(format!("sampler.m_eval = {} exceeds train.m = {}", self.sampler.m_eval, self.train.m));
        }
        if self.model.cross_attention_layers > self.model.blocks {
            return err("model.cross_attention_layers exceeds model.blocks".into());
        }
        if self.sampler.steps > self.model.schedule_steps {
            return err("sampler.steps exceeds schedule.steps".into());
        }
        if let Some(t) = self.sampler.img2img_t {
            if t == 0 || t > self.model.schedule_steps {
                return err(format!("sampler.img2img_t = {t} outside 1..={}", self.model.schedule_steps));
            }
        }
        if !(self.train.learning_rate > 0.0 && self.train.learning_rate.is_finite()) {
            return err("train.learning_rate must be positive".into());
        }
        if self.model.prior_var.is_nan() || self.model.prior_var <= 0.0 {
            return err("model.prior_var must be positive".into());
        }
        if !self.sampler.prompt.contains(crate::encoders::PLACEHOLDER) {
            return err("sampler.prompt must contain the S* placeholder".into());
        }
        self.fusion.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.loss.validate()
    }

    fn visit(&self, f: &mut dyn FnMut(&'static str, &dyn Value)) {
        let mut c = self.clone();
        c.visit_mut(&mut |k, v| f(k, v));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&'static str, &mut dyn Value)) {
        f("seed", &mut self.seed);
        let e = &mut self.encoder;
        f("encoder.backend", &mut e.backend);
        f("encoder.seed", &mut e.seed);
        f("encoder.patch_size", &mut e.patch_size);
        f("encoder.width", &mut e.width);
        f("encoder.depth", &mut e.depth);
        f("encoder.pooling", &mut e.pooling);
        f("text.width", &mut e.text_width);
        f("text.vocab_size", &mut e.vocab_size);
        f("text.context_len", &mut e.context_len);
        let m = &mut self.model;
        f("model.seed", &mut m.seed);
        f("model.image_size", &mut m.image_size);
        f("model.latent_downsample", &mut m.latent_downsample);
        f("model.latent_channels", &mut m.latent_channels);
        f("model.width", &mut m.width);
        f("model.time_dim", &mut m.time_dim);
        f("model.blocks", &mut m.blocks);
        f("model.cross_attention_layers", &mut m.cross_attention_layers);
        f("model.attn_dim", &mut m.attn_dim);
        f("model.heads", &mut m.heads);
        f("model.mlp_scale", &mut m.mlp_scale);
        f("model.prior_var", &mut m.prior_var);
        f("schedule.steps", &mut m.schedule_steps);
        f("schedule.beta_start", &mut m.beta_start);
        f("schedule.beta_end", &mut m.beta_end);
        f("adapter.blocks", &mut m.adapter_blocks);
        f("adapter.shared_text", &mut m.shared_text_adapters);
        f("visual.tokens", &mut m.visual_tokens);
        f("visual.dim", &mut m.visual_dim);
        f("face.grid", &mut m.face_grid);
        f("face.dim", &mut m.face_dim);
        f("face.seed", &mut m.face_seed);
        let p = &mut self.preprocess;
        f("preprocess.output_size", &mut p.output_size);
        f("preprocess.reference_scale", &mut p.reference_scale);
        f("preprocess.target_scale", &mut p.target_scale);
        f("preprocess.mask_reference", &mut p.apply_mask_to_reference);
        f("preprocess.resample", &mut p.resample);
        let fu = &mut self.fusion;
        f("fusion.r1", &mut fu.r1);
        f("fusion.r2", &mut fu.r2);
        f("fusion.gamma", &mut fu.gamma);
        f("fusion.sigma", &mut fu.sigma);
        f("fusion.text_only_gamma", &mut fu.text_only_gamma);
        f("fusion.visual_only_sigma", &mut fu.visual_only_sigma);
        f("fusion.draw_mode", &mut fu.draw_mode);
        f("lora.rank", &mut self.lora.rank);
        f("lora.alpha", &mut self.lora.alpha);
        f("loss.lambda_face", &mut self.loss.lambda_face);
        f("loss.lambda_rt", &mut self.loss.lambda_rt);
        f("loss.lambda_rv", &mut self.loss.lambda_rv);
        let t = &mut self.train;
        f("loss.face_enabled", &mut t.face_loss);
        f("train.learning_rate", &mut t.learning_rate);
        f("train.batch_size", &mut t.batch_size);
        f("train.max_steps", &mut t.max_steps);
        f("train.m", &mut t.m);
        f("train.checkpoint_every", &mut t.checkpoint_every);
        let s = &mut self.sampler;
        f("sampler.steps", &mut s.steps);
        f("sampler.guidance_scale", &mut s.guidance_scale);
        f("sampler.m_eval", &mut s.m_eval);
        f("sampler.alpha", &mut s.alpha);
        f("sampler.gamma", &mut s.gamma);
        f("sampler.sigma", &mut s.sigma);
        f("sampler.img2img_t", &mut s.img2img_t);
        f("sampler.prompt", &mut s.prompt);
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Splits config text into ordered key/value pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        let valid = !k.is_empty()
            && k.split('.').all(|part| !part.is_empty() && part.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_'));
        if !valid {
            return Err(Error::Config(format!("line {}: bad key {k:?}", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

trait Value {
    fn parse_into(&mut self, s: &str) -> Result<()>;
    fn render(&self) -> String;
}

trait Scalar: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

impl<T: Scalar> Value for T {
    fn parse_into(&mut self, s: &str) -> Result<()> {
        *self = T::parse_value(s)?;
        Ok(())
    }

    fn render(&self) -> String {
        Scalar::render(self)
    }
}

fn via_from_str<T: FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Config(format!("expected {what}, got {s:?}")))
}

impl Scalar for u64 {
    fn parse_value(s: &str) -> Result<Self> {
        via_from_str(s, "a non-negative integer")
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Scalar for usize {
    fn parse_value(s: &str) -> Result<Self> {
        via_from_str(s, "a non-negative integer")
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Scalar for f64 {
    fn parse_value(s: &str) -> Result<Self> {
        let v: f64 = via_from_str(s, "a number")?;
        if !v.is_finite() {
            return Err(Error::Config(format!("expected a finite number, got {s:?}")));
        }
        Ok(v)
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl Scalar for bool {
    fn parse_value(s: &str) -> Result<Self> {
        via_from_str(s, "true or false")
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Scalar for String {
    fn parse_value(s: &str) -> Result<Self> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl Scalar for Option<usize> {
    fn parse_value(s: &str) -> Result<Self> {
        if s == "none" {
            Ok(None)
        } else {
            Ok(Some(via_from_str(s, "an integer or `none`")?))
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "none".into(), |v| v.to_string())
    }
}

impl Scalar for Scale {
    fn parse_value(s: &str) -> Result<Self> {
        s.parse().map_err(|e: Error| Error::Config(e.to_string()))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

macro_rules! enum_scalar {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl Scalar for $ty {
            fn parse_value(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(Error::Config(format!(
                        "expected one of [{}], got {s:?}",
                        [$($name),+].join(", ")
                    ))),
                }
            }
            fn render(&self) -> String {
                $(if *self == $variant { return $name.to_string(); })+
                unreachable!()
            }
        }
    };
}

enum_scalar!(Profile { "toy" => Profile::Toy, "full" => Profile::Full });
enum_scalar!(EncoderBackend { "toy" => EncoderBackend::Toy, "pretrained" => EncoderBackend::Pretrained });
enum_scalar!(Pooling { "mean" => Pooling::Mean, "cls" => Pooling::ClassToken });
enum_scalar!(Resample { "bilinear" => Resample::Bilinear, "nearest" => Resample::Nearest });
enum_scalar!(DrawMode { "per_step" => DrawMode::PerStep, "per_call" => DrawMode::PerCall });

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for c in [Config::toy(), Config::full()] {
            assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
        }
    }

    #[test]
    fn profile_applies_before_overrides() {
        let c = Config::parse("train.max_steps = 7\n# comment\n\nprofile = full\n").unwrap();
        assert_eq!(c.profile, Profile::Full);
        assert_eq!(c.train.max_steps, 7);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.train.learning_rate, 1e-4);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Config::parse("nonsense.key = 1").is_err());
        assert!(Config::parse("train.m").is_err());
        assert!(Config::parse("train.m = five").is_err());
        assert!(Config::parse("fusion.r1 = 0.9\nfusion.r2 = 0.1").is_err());
        assert!(Config::parse("train.m = 9").is_err());
        assert!(Config::parse("sampler.prompt = a photo").is_err());
        assert!(Config::parse("fusion.draw_mode = sometimes").is_err());
    }

    #[test]
    fn values_with_spaces_and_options() {
        let c = Config::parse("sampler.prompt =  S* in a garden \nsampler.img2img_t = 400").unwrap();
        assert_eq!(c.sampler.prompt, "S* in a garden");
        assert_eq!(c.sampler.img2img_t, Some(400));
        assert_eq!(Config::parse("sampler.img2img_t = none").unwrap().sampler.img2img_t, None);
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::toy();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.set("train.learning_rate", "0.5").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(Config::keys().len(), a.to_map().len());
    }

    #[test]
    fn full_scale_defaults() {
        let c = Config::full();
        assert_eq!((c.train.learning_rate, c.train.batch_size, c.train.max_steps, c.train.m), (1e-4, 64, 60_000, 5));
        assert_eq!((c.loss.lambda_face, c.loss.lambda_rt, c.loss.lambda_rv), (0.01, 0.01, 0.001));
        assert_eq!((c.sampler.m_eval, c.sampler.alpha, c.lora.alpha), (1, 1.0, 1.0));
        c.validate().unwrap();
    }
}
