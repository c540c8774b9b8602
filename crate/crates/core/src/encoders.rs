//! Frozen image and text encoders.
//!
//! Both are defined as traits. The shipped binding is a pair of small
//! fixed-seed networks that stand in for a pretrained vision-language encoder
//! pair, so everything runs without downloaded weights.

use serde::{Deserialize, Serialize};

use crate::adapters::PseudoTokenSet;
use crate::autograd::{Module, Param, Tape, Var};
use crate::error::{Error, Result};
use crate::preprocess::FaceRegion;
use crate::rng;
use crate::tensor::Matrix;

/// The literal placeholder for the subject concept in prompts.
pub const PLACEHOLDER: &str = "S*";

/// Pooled image features tapped at several encoder depths.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatureStack {
    /// One `1 x feature_dim` vector per tapped layer, shallow to deep.
    pub layers: Vec<Matrix>,
    pub layer_indices: Vec<usize>,
    pub feature_dim: usize,
}

impl ImageFeatureStack {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// The feature from the deepest tapped layer.
    pub fn deepest(&self) -> &Matrix {
        self.layers.last().expect("feature stack is never empty")
    }
}

/// `m` evenly spaced 1-based layer indices ending at the final layer.
///
/// The spacing is `floor(depth / m)`, so `depth = 12, m = 5` gives
/// `[4, 6, 8, 10, 12]`.
pub fn select_layer_indices(encoder_depth: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > encoder_depth {
        return Err(Error::invalid(format!("cannot tap {m} layers from an encoder of depth {encoder_depth}")));
    }
    let step = encoder_depth / m;
    Ok((0..m).map(|i| encoder_depth - (m - 1 - i) * step).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Pooling {
    #[default]
    Mean,
    ClassToken,
}

pub trait ImageEncoder: Module + Send + Sync {
    fn depth(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// Square input resolution in pixels.
    fn input_size(&self) -> usize;
    fn encode_layers(&self, region: &FaceRegion, indices: &[usize]) -> Result<ImageFeatureStack>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Bos,
    Eos,
    Word(usize),
    Placeholder,
}

/// Text conditioning after pseudo-token substitution.
#[derive(Clone, Debug, PartialEq)]
pub struct TextConditionSequence {
    /// Token embeddings fed to the encoder, `context_len x width`.
    pub input_embeddings: Matrix,
    /// Encoder output `p`, same shape.
    pub hidden: Matrix,
    /// Positions holding pseudo-token embeddings.
    pub pseudo_slots: Vec<usize>,
}

pub trait TextEncoder: Module + Send + Sync {
    fn width(&self) -> usize;
    fn context_len(&self) -> usize;
    fn tokenize(&self, prompt: &str) -> Vec<Token>;
    /// Embedding row for a non-placeholder token.
    fn token_embedding(&self, token: Token) -> Result<Matrix>;
    /// Runs the encoder on `context_len x width` input embeddings (positional
    /// embeddings are added inside).
    fn encode_on_tape(&self, tape: &mut Tape, embeddings: Var) -> Result<Var>;
}

/// Build the padded input embedding sequence with the placeholder replaced by
/// the rows of `pseudo` (an `m x width` tape value). Returns the sequence and
/// the pseudo-token positions.
pub fn substitute_pseudo(
    encoder: &dyn TextEncoder,
    tape: &mut Tape,
    tokens: &[Token],
    pseudo: Var,
) -> Result<(Var, Vec<usize>)> {
    let placeholders = tokens.iter().filter(|t| **t == Token::Placeholder).count();
    if placeholders != 1 {
        return Err(Error::invalid(format!(
            "prompt must contain exactly one {PLACEHOLDER} placeholder, found {placeholders}"
        )));
    }
    let (m, width) = tape.shape(pseudo);
    if width != encoder.width() {
        return Err(Error::invalid(format!("pseudo tokens have width {width}, encoder expects {}", encoder.width())));
    }
    let len = tokens.len() + 2 + m - 1;
    if len > encoder.context_len() {
        return Err(Error::invalid(format!(
            "prompt needs {len} positions but the context holds {}",
            encoder.context_len()
        )));
    }
    let mut parts = Vec::new();
    let mut slots = Vec::new();
    let mut pos = 0;
    let fixed_rows = |tape: &mut Tape, toks: &[Token]| -> Result<Option<Var>> {
        if toks.is_empty() {
            return Ok(None);
        }
        let rows: Vec<Vec<f64>> =
            toks.iter().map(|&t| encoder.token_embedding(t).map(Matrix::into_vec)).collect::<Result<_>>()?;
        Ok(Some(tape.constant(Matrix::from_rows(&rows)?)))
    };
    let mut before = vec![Token::Bos];
    let split = tokens.iter().position(|t| *t == Token::Placeholder).expect("counted above");
    before.extend_from_slice(&tokens[..split]);
    pos += before.len();
    if let Some(v) = fixed_rows(tape, &before)? {
        parts.push(v);
    }
    parts.push(pseudo);
    slots.extend(pos..pos + m);
    pos += m;
    let mut after: Vec<Token> = tokens[split + 1..].to_vec();
    after.resize(encoder.context_len() - pos, Token::Eos);
    if let Some(v) = fixed_rows(tape, &after)? {
        parts.push(v);
    }
    Ok((tape.concat_rows(&parts)?, slots))
}

/// Substitute the pseudo tokens and run the frozen text encoder on the tape.
pub fn encode_text_on_tape(
    encoder: &dyn TextEncoder,
    tape: &mut Tape,
    tokens: &[Token],
    pseudo: Var,
) -> Result<(Var, Vec<usize>)> {
    let (embeddings, slots) = substitute_pseudo(encoder, tape, tokens, pseudo)?;
    Ok((encoder.encode_on_tape(tape, embeddings)?, slots))
}

pub fn encode_text_with_pseudo(
    encoder: &dyn TextEncoder,
    prompt_tokens: &[Token],
    pseudo: &PseudoTokenSet,
) -> Result<TextConditionSequence> {
    let mut tape = Tape::new();
    let p = tape.constant(pseudo.tokens.clone());
    let (embeddings, slots) = substitute_pseudo(encoder, &mut tape, prompt_tokens, p)?;
    let hidden = encoder.encode_on_tape(&mut tape, embeddings)?;
    Ok(TextConditionSequence {
        input_embeddings: tape.value(embeddings).clone(),
        hidden: tape.value(hidden).clone(),
        pseudo_slots: slots,
    })
}

/// Residual mixing block shared by the toy encoders: a parameter-light
/// self-attention followed by a tanh MLP.
#[derive(Clone, Debug)]
struct MixBlock {
    attn_out: Param,
    fc1: Param,
    fc1_bias: Param,
    fc2: Param,
}

impl MixBlock {
    fn new(prefix: &str, width: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        Self {
            attn_out: Param::frozen(format!("{prefix}.attn_out"), Matrix::randn(width, width, std, rng)),
            fc1: Param::frozen(format!("{prefix}.fc1"), Matrix::randn(width, width, std, rng)),
            fc1_bias: Param::frozen(format!("{prefix}.fc1_bias"), Matrix::randn(1, width, 0.1, rng)),
            fc2: Param::frozen(format!("{prefix}.fc2"), Matrix::randn(width, width, std, rng)),
        }
    }

    fn forward(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let width = tape.shape(h).1;
        let u = tape.normalize_rows(h);
        let ut = tape.transpose(u);
        let scores = tape.matmul(u, ut)?;
        let scores = tape.scale(scores, 1.0 / (width as f64).sqrt());
        let weights = tape.softmax_rows(scores);
        let mixed = tape.matmul(weights, u)?;
        let w = tape.param(&self.attn_out);
        let mixed = tape.matmul(mixed, w)?;
        let h = tape.add(h, mixed)?;
        let u = tape.normalize_rows(h);
        let (w1, b1, w2) = (tape.param(&self.fc1), tape.param(&self.fc1_bias), tape.param(&self.fc2));
        let a = tape.linear(u, w1, Some(b1))?;
        let a = tape.tanh(a);
        let a = tape.matmul(a, w2)?;
        tape.add(h, a)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for p in [&self.attn_out, &self.fc1, &self.fc1_bias, &self.fc2] {
            f(p);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for p in [&mut self.attn_out, &mut self.fc1, &mut self.fc1_bias, &mut self.fc2] {
            f(p);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyImageEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub pooling: Pooling,
}

/// A small patch-based vision encoder with fixed seeded weights.
#[derive(Clone, Debug)]
pub struct ToyImageEncoder {
    cfg: ToyImageEncoderConfig,
    patch_embed: Param,
    pos: Param,
    cls: Param,
    blocks: Vec<MixBlock>,
}

impl ToyImageEncoder {
    pub fn new(cfg: ToyImageEncoderConfig, seed: u64) -> Result<Self> {
        if cfg.patch_size == 0 || !cfg.image_size.is_multiple_of(cfg.patch_size) {
            return Err(Error::invalid("image_size must be a multiple of patch_size"));
        }
        if cfg.depth == 0 || cfg.width == 0 {
            return Err(Error::invalid("encoder depth and width must be positive"));
        }
        let mut rng = rng::stream(seed, "image_encoder");
        let patches = (cfg.image_size / cfg.patch_size).pow(2);
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        Ok(Self {
            cfg,
            patch_embed: Param::frozen(
                "image_encoder.patch_embed",
                Matrix::randn(patch_dim, cfg.width, 2.0 / (patch_dim as f64).sqrt(), &mut rng),
            ),
            pos: Param::frozen("image_encoder.pos", Matrix::randn(patches, cfg.width, 0.5, &mut rng)),
            cls: Param::frozen("image_encoder.cls", Matrix::randn(1, cfg.width, 0.5, &mut rng)),
            blocks: (0..cfg.depth)
                .map(|i| MixBlock::new(&format!("image_encoder.blocks.{i}"), cfg.width, &mut rng))
                .collect(),
        })
    }

    fn patchify(&self, region: &FaceRegion) -> Result<Matrix> {
        let px = &region.pixels;
        let (size, p) = (self.cfg.image_size, self.cfg.patch_size);
        if px.width() != size || px.height() != size || px.channels() != 3 {
            return Err(Error::invalid(format!(
                "image encoder expects {size}x{size}x3 input, got {}x{}x{}",
                px.width(),
                px.height(),
                px.channels()
            )));
        }
        let per_side = size / p;
        let mut out = Matrix::zeros(per_side * per_side, p * p * 3);
        for py in 0..per_side {
            for pxi in 0..per_side {
                let row = py * per_side + pxi;
                let mut col = 0;
                for y in 0..p {
                    for x in 0..p {
                        for c in 0..3 {
                            out[(row, col)] = f64::from(px.get(pxi * p + x, py * p + y, c)) - 0.5;
                            col += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

impl Module for ToyImageEncoder {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.patch_embed);
        f(&self.pos);
        f(&self.cls);
        for b in &self.blocks {
            b.visit(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.patch_embed);
        f(&mut self.pos);
        f(&mut self.cls);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
    }
}

impl ImageEncoder for ToyImageEncoder {
    fn depth(&self) -> usize {
        self.cfg.depth
    }

    fn feature_dim(&self) -> usize {
        self.cfg.width
    }

    fn input_size(&self) -> usize {
        self.cfg.image_size
    }

    fn encode_layers(&self, region: &FaceRegion, indices: &[usize]) -> Result<ImageFeatureStack> {
        if indices.is_empty() || indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("layer indices must be non-empty and strictly increasing"));
        }
        if indices[0] == 0 || *indices.last().unwrap() > self.cfg.depth {
            return Err(Error::invalid(format!("layer indices must lie in 1..={}", self.cfg.depth)));
        }
        let patches = self.patchify(region)?;
        let mut tape = Tape::new();
        let x = tape.constant(patches);
        let (we, pos) = (tape.param(&self.patch_embed), tape.param(&self.pos));
        let h = tape.matmul(x, we)?;
        let mut h = tape.add(h, pos)?;
        if self.cfg.pooling == Pooling::ClassToken {
            let cls = tape.param(&self.cls);
            h = tape.concat_rows(&[cls, h])?;
        }
        let mut layers = Vec::with_capacity(indices.len());
        let mut next = indices.iter().peekable();
        for (depth, block) in self.blocks.iter().enumerate() {
            if next.peek().is_none() {
                break;
            }
            h = block.forward(&mut tape, h)?;
            if next.peek() == Some(&&(depth + 1)) {
                next.next();
                let value = tape.value(h);
                let pooled = match self.cfg.pooling {
                    Pooling::Mean => {
                        let mut acc = Matrix::zeros(1, value.cols());
                        for r in 0..value.rows() {
                            for c in 0..value.cols() {
                                acc[(0, c)] += value[(r, c)];
                            }
                        }
                        acc.scale(1.0 / value.rows() as f64)
                    }
                    Pooling::ClassToken => value.slice_rows(0, 1),
                };
                layers.push(pooled);
            }
        }
        Ok(ImageFeatureStack { layers, layer_indices: indices.to_vec(), feature_dim: self.cfg.width })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTextEncoderConfig {
    pub width: usize,
    pub vocab_size: usize,
    pub context_len: usize,
}

/// A one-block text transformer over a hashed vocabulary.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    cfg: ToyTextEncoderConfig,
    embeddings: Param,
    pos: Param,
    block: MixBlock,
}

impl ToyTextEncoder {
    pub fn new(cfg: ToyTextEncoderConfig, seed: u64) -> Result<Self> {
        if cfg.vocab_size < 3 || cfg.width == 0 || cfg.context_len < 3 {
            return Err(Error::invalid("text encoder needs vocab >= 3, width > 0, context >= 3"));
        }
        let mut rng = rng::stream(seed, "text_encoder");
        Ok(Self {
            cfg,
            embeddings: Param::frozen("text_encoder.embeddings", Matrix::randn(cfg.vocab_size, cfg.width, 1.0, &mut rng)),
            pos: Param::frozen("text_encoder.pos", Matrix::randn(cfg.context_len, cfg.width, 0.3, &mut rng)),
            block: MixBlock::new("text_encoder.block", cfg.width, &mut rng),
        })
    }

    fn word_id(&self, word: &str) -> usize {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        2 + (h % (self.cfg.vocab_size as u64 - 2)) as usize
    }
}

impl Module for ToyTextEncoder {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.embeddings);
        f(&self.pos);
        self.block.visit(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.embeddings);
        f(&mut self.pos);
        self.block.visit_mut(f);
    }
}

impl TextEncoder for ToyTextEncoder {
    fn width(&self) -> usize {
        self.cfg.width
    }

    fn context_len(&self) -> usize {
        self.cfg.context_len
    }

    fn tokenize(&self, prompt: &str) -> Vec<Token> {
        prompt
            .split_whitespace()
            .filter_map(|w| {
                if w == PLACEHOLDER {
                    return Some(Token::Placeholder);
                }
                let word: String = w.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect();
                (!word.is_empty()).then(|| Token::Word(self.word_id(&word)))
            })
            .collect()
    }

    fn token_embedding(&self, token: Token) -> Result<Matrix> {
        let id = match token {
            Token::Bos => 0,
            Token::Eos => 1,
            Token::Word(id) if id < self.cfg.vocab_size => id,
            Token::Word(id) => return Err(Error::invalid(format!("token id {id} outside vocabulary"))),
            Token::Placeholder => return Err(Error::invalid("placeholder has no fixed embedding")),
        };
        Ok(self.embeddings.value.slice_rows(id, 1))
    }

    fn encode_on_tape(&self, tape: &mut Tape, embeddings: Var) -> Result<Var> {
        if tape.shape(embeddings) != (self.cfg.context_len, self.cfg.width) {
            return Err(Error::invalid(format!(
                "text encoder expects {}x{} embeddings, got {:?}",
                self.cfg.context_len,
                self.cfg.width,
                tape.shape(embeddings)
            )));
        }
        let pos = tape.param(&self.pos);
        let h = tape.add(embeddings, pos)?;
        let h = self.block.forward(tape, h)?;
        Ok(tape.normalize_rows(h))
    }
}
