//! Assembly of the full personalization model from a [`Config`].

use crate::adapters::{image_adapter_on_tape, AdapterNetwork, TextAdapterBank, VisualShape};
use crate::autograd::{Module, Param, Tape, Var};
use crate::backbone::{inject_into_backbone, NoiseSchedule, ToyVae, UNet, UNetConfig, VaeConfig};
use crate::config::{Config, EncoderBackend};
use crate::encoders::{
    encode_text_on_tape, select_layer_indices, ImageEncoder, ImageFeatureStack, TextEncoder, Token, ToyImageEncoder,
    ToyImageEncoderConfig, ToyTextEncoder, ToyTextEncoderConfig,
};
use crate::error::{Error, Result};
use crate::face::ToyFaceEmbedder;
use crate::injection::{CrossAttention, DualBranchCrossAttention};
use crate::preprocess::FaceRegion;
use crate::rng;
use crate::tensor::Matrix;

/// Frozen encoders, autoencoder, face embedder and instrumented denoiser,
/// together with the trainable adapters.
#[derive(Clone, Debug)]
pub struct Model {
    pub image_encoder: ToyImageEncoder,
    pub text_encoder: ToyTextEncoder,
    pub vae: ToyVae,
    pub unet: UNet<DualBranchCrossAttention>,
    pub text_adapters: TextAdapterBank,
    pub image_adapter: AdapterNetwork,
    pub face: ToyFaceEmbedder,
    pub schedule: NoiseSchedule,
    pub layer_indices: Vec<usize>,
    pub visual_shape: VisualShape,
}

/// Conditions extracted from one reference crop, as tape values.
#[derive(Clone, Copy, Debug)]
pub struct TapeConditions {
    /// `m x text_width`.
    pub pseudo: Var,
    /// `visual_tokens x visual_dim`.
    pub visual: Var,
}

pub fn unet_config(cfg: &Config) -> UNetConfig {
    let m = &cfg.model;
    let grid = m.image_size / m.latent_downsample;
    UNetConfig {
        latent_tokens: grid * grid,
        latent_channels: m.latent_channels,
        width: m.width,
        time_dim: m.time_dim,
        blocks: m.blocks,
        cross_attention_layers: m.cross_attention_layers,
        attn_dim: m.attn_dim,
        heads: m.heads,
        text_dim: cfg.encoder.text_width,
        mlp_scale: m.mlp_scale,
        prior_var: m.prior_var,
    }
}

/// The un-instrumented denoiser, built from the same seed as [`Model::build`].
pub fn base_unet(cfg: &Config) -> Result<UNet<CrossAttention>> {
    UNet::new(unet_config(cfg), cfg.model.seed)
}

impl Model {
    pub fn build(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        if cfg.encoder.backend == EncoderBackend::Pretrained {
            return Err(Error::Unsupported(
                "pretrained encoder weights are not bundled; use encoder.backend = toy".into(),
            ));
        }
        let e = &cfg.encoder;
        let m = &cfg.model;
        let image_encoder = ToyImageEncoder::new(
            ToyImageEncoderConfig {
                image_size: m.image_size,
                patch_size: e.patch_size,
                width: e.width,
                depth: e.depth,
                pooling: e.pooling,
            },
            e.seed,
        )?;
        let text_encoder = ToyTextEncoder::new(
            ToyTextEncoderConfig { width: e.text_width, vocab_size: e.vocab_size, context_len: e.context_len },
            e.seed,
        )?;
        let vae = ToyVae::new(
            VaeConfig { image_size: m.image_size, downsample: m.latent_downsample, latent_channels: m.latent_channels },
            m.seed,
        )?;
        let schedule = NoiseSchedule::linear(m.schedule_steps, m.beta_start, m.beta_end)?;
        let unet = inject_into_backbone(base_unet(cfg)?, cfg.lora, m.visual_dim, cfg.seed)?;
        let mut init = rng::stream(cfg.seed, "adapters");
        let text_adapters = TextAdapterBank::new(
            cfg.train.m,
            e.width,
            e.text_width,
            m.adapter_blocks,
            m.shared_text_adapters,
            &mut init,
        )?;
        let visual_shape = VisualShape { tokens: m.visual_tokens, dim: m.visual_dim };
        let image_adapter =
            AdapterNetwork::new("image_adapter", e.width, visual_shape.tokens * visual_shape.dim, m.adapter_blocks, &mut init)?;
        let face = ToyFaceEmbedder::new(m.image_size, m.face_grid, m.face_dim, m.face_seed)?;
        Ok(Self {
            layer_indices: select_layer_indices(e.depth, cfg.train.m)?,
            image_encoder,
            text_encoder,
            vae,
            unet,
            text_adapters,
            image_adapter,
            face,
            schedule,
            visual_shape,
        })
    }

    pub fn encode_reference(&self, reference: &FaceRegion) -> Result<ImageFeatureStack> {
        self.image_encoder.encode_layers(reference, &self.layer_indices)
    }

    /// Pseudo tokens from every tapped layer and the visual condition from the
    /// deepest one.
    pub fn conditions_on_tape(&self, tape: &mut Tape, stack: &ImageFeatureStack) -> Result<TapeConditions> {
        let pseudo = self.text_adapters.forward_on_tape(tape, stack)?;
        let deepest = tape.constant(stack.deepest().clone());
        let visual = image_adapter_on_tape(&self.image_adapter, tape, deepest, self.visual_shape)?;
        Ok(TapeConditions { pseudo, visual })
    }

    /// Text-encoder output for `prompt` with the placeholder replaced by `pseudo`.
    pub fn prompt_on_tape(&self, tape: &mut Tape, prompt: &str, pseudo: Var) -> Result<Var> {
        let tokens = self.text_encoder.tokenize(prompt);
        Ok(encode_text_on_tape(&self.text_encoder, tape, &tokens, pseudo)?.0)
    }

    /// Text-encoder output for a prompt without placeholder (e.g. the empty
    /// prompt used for unconditional guidance).
    pub fn plain_prompt_on_tape(&self, tape: &mut Tape, prompt: &str) -> Result<Var> {
        let mut tokens = vec![Token::Bos];
        tokens.extend(self.text_encoder.tokenize(prompt));
        if tokens.contains(&Token::Placeholder) {
            return Err(Error::invalid("plain prompt must not contain the placeholder"));
        }
        let ctx = self.text_encoder.context_len();
        if tokens.len() > ctx {
            return Err(Error::invalid("prompt exceeds the text context"));
        }
        tokens.resize(ctx, Token::Eos);
        let rows = tokens
            .iter()
            .map(|&t| self.text_encoder.token_embedding(t).map(Matrix::into_vec))
            .collect::<Result<Vec<_>>>()?;
        let emb = tape.constant(Matrix::from_rows(&rows)?);
        self.text_encoder.encode_on_tape(tape, emb)
    }

    /// Trainable tensors only, by name.
    pub fn trainable_parameter_set(&self) -> Vec<String> {
        self.trainable_names()
    }

    /// Overwrite the LoRA scale of every instrumented layer.
    pub fn set_lora_alpha(&mut self, alpha: f64) {
        for layer in self.unet.cross_attention_layers_mut() {
            layer.alpha = alpha;
        }
    }
}

impl Module for Model {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.image_encoder.visit_params(f);
        self.text_encoder.visit_params(f);
        self.vae.visit_params(f);
        self.face.visit_params(f);
        self.unet.visit_params(f);
        self.text_adapters.visit_params(f);
        self.image_adapter.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.image_encoder.visit_params_mut(f);
        self.text_encoder.visit_params_mut(f);
        self.vae.visit_params_mut(f);
        self.face.visit_params_mut(f);
        self.unet.visit_params_mut(f);
        self.text_adapters.visit_params_mut(f);
        self.image_adapter.visit_params_mut(f);
    }
}
