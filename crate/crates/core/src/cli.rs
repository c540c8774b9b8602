//! Command-line front end. Exit status: 0 on success, 1 on a runtime failure
//! (with a JSON error record on stderr), 2 on a usage error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{evaluate_set, read_pairs, score_pairs, EvalReport, ReportMetadata};
use crate::face::{FaceEmbedder, ToyFaceEmbedder};
use crate::fixture::read_sidecar;
use crate::inference::{generate, load_model, personalize, ConceptCondition, SamplerConfig};
use crate::preprocess::{expand_bbox, prepare_reference, prepare_target, BoundingBox, EllipseMasker, Image};
use crate::training::{Dataset, Trainer};

#[derive(Debug, Parser)]
#[command(name = "dualcond", version, about = "Tuning-free face personalization for a toy latent-diffusion model")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override a config key, e.g. `--set train.max_steps=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Crop, resize and mask a face photo.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        bbox: BoundingBox,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train adapters, LoRA factors and visual projections.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// JSON-lines step log (default: `<out>.log.jsonl`).
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Extract a concept from one reference photo.
    Personalize {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Face box; looked up in a `bboxes.jsonl` next to the image when omitted.
        #[arg(long)]
        bbox: Option<BoundingBox>,
        #[arg(long)]
        m_eval: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Sample images of a concept.
    Generate {
        #[arg(long)]
        concept: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to use instead of the one recorded in the concept.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long = "img2img-t")]
        img2img_t: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Score reference/generated pairs and write a grouped report.
    Evaluate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Preprocess { common, .. }
            | Command::Train { common, .. }
            | Command::Personalize { common, .. }
            | Command::Generate { common, .. }
            | Command::Evaluate { common, .. } => common,
        }
    }
}

/// File config, then `--set` overrides, then `--seed`.
fn resolve_config(common: &Common) -> Result<Config> {
    let mut pairs = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            crate::config::parse_pairs(&text)?
        }
        None => Vec::new(),
    };
    pairs.extend(overrides(common)?);
    if let Some(s) = common.seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    Config::from_pairs(&pairs)
}

fn overrides(common: &Common) -> Result<Vec<(String, String)>> {
    common
        .overrides
        .iter()
        .map(|o| {
            o.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))
        })
        .collect()
}

/// For commands driven by a checkpoint: the snapshot, with `sampler.*` and
/// `seed` taken from the config file, `--set` and `--seed`.
fn sampling_config(snapshot: Config, common: &Common) -> Result<Config> {
    let mut cfg = snapshot;
    let mut pairs = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            crate::config::parse_pairs(&text)?
        }
        None => Vec::new(),
    };
    pairs.extend(overrides(common)?);
    for (k, v) in pairs {
        if k == "seed" || k.starts_with("sampler.") {
            cfg.set(&k, &v)?;
        }
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn bbox_from_sidecar(image: &Path) -> Result<Option<BoundingBox>> {
    let Some(dir) = image.parent() else { return Ok(None) };
    if !dir.join(crate::fixture::SIDECAR).exists() {
        return Ok(None);
    }
    let name = image.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    read_sidecar(dir)?.into_iter().find(|r| r.image == name).map(|r| r.bbox()).transpose()
}

fn embedder_for(cfg: &Config) -> Result<ToyFaceEmbedder> {
    let m = &cfg.model;
    ToyFaceEmbedder::new(m.image_size, m.face_grid, m.face_dim, m.face_seed)
}

fn unix_now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Runs one command and returns its JSON summary.
pub fn execute(command: &Command) -> Result<serde_json::Value> {
    let common = command.common();
    match command {
        Command::Preprocess { input, bbox, out, .. } => {
            let cfg = resolve_config(common)?;
            let image = Image::load(input)?;
            let reference = prepare_reference(&image, *bbox, &cfg.preprocess, &EllipseMasker)?;
            let target = prepare_target(&image, *bbox, &cfg.preprocess)?;
            fs::create_dir_all(out)?;
            reference.pixels.save_png(&out.join("reference.png"))?;
            target.pixels.save_png(&out.join("target.png"))?;
            let dims = (image.width(), image.height());
            let region = json!({
                "input": input.display().to_string(),
                "bbox": bbox.to_string(),
                "reference_box": expand_bbox(*bbox, cfg.preprocess.reference_scale, dims)?.to_string(),
                "reference_scale": cfg.preprocess.reference_scale.to_string(),
                "target_box": expand_bbox(*bbox, cfg.preprocess.target_scale, dims)?.to_string(),
                "target_scale": cfg.preprocess.target_scale.to_string(),
                "size": cfg.preprocess.output_size,
                "masked": reference.masked,
            });
            fs::write(out.join("region.json"), serde_json::to_string_pretty(&region)? + "\n")?;
            Ok(json!({ "command": "preprocess", "out": out.display().to_string(), "region": region }))
        }
        Command::Train { data, out, resume, log, .. } => {
            let cfg = resolve_config(common)?;
            let dataset = Dataset::load_dir(data, &cfg.preprocess)?;
            let mut trainer = match resume {
                Some(dir) => Trainer::resume(cfg, &Checkpoint::load(dir)?, &dataset)?,
                None => Trainer::new(cfg, &dataset)?,
            };
            fs::create_dir_all(out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")))?;
            let log_path = log.clone().unwrap_or_else(|| out.with_extension("log.jsonl"));
            let mut log_file = std::io::BufWriter::new(fs::File::create(&log_path)?);
            let history = trainer.run(Some(out), Some(&mut log_file))?;
            log_file.flush()?;
            let ck = Checkpoint::load(out)?;
            Ok(json!({
                "command": "train",
                "checkpoint": out.display().to_string(),
                "checkpoint_id": ck.id(),
                "step": ck.step(),
                "samples": dataset.len(),
                "log": log_path.display().to_string(),
                "final_loss": history.last().map(|r| r.total),
            }))
        }
        Command::Personalize { image, ckpt, out, bbox, m_eval, .. } => {
            let checkpoint = Checkpoint::load(ckpt)?;
            let (snapshot, model) = load_model(&checkpoint)?;
            let cfg = sampling_config(snapshot, common)?;
            let img = Image::load(image)?;
            let bbox = match bbox {
                Some(b) => Some(*b),
                None => bbox_from_sidecar(image)?,
            };
            let m_eval = m_eval.unwrap_or(cfg.sampler.m_eval);
            let path = fs::canonicalize(ckpt)?.display().to_string();
            let concept = personalize(&model, &cfg, &img, bbox, m_eval, (checkpoint.id(), Some(&path)))?;
            concept.save(out)?;
            Ok(json!({
                "command": "personalize",
                "concept": out.display().to_string(),
                "checkpoint_id": checkpoint.id(),
                "m_eval": m_eval,
                "pseudo_tokens": concept.pseudo_tokens.len(),
            }))
        }
        Command::Generate { concept, prompt, n, out, ckpt, img2img_t, guidance, steps, .. } => {
            let concept = ConceptCondition::load(concept)?;
            let ckpt_dir = match (ckpt, &concept.source.checkpoint_path) {
                (Some(p), _) => p.clone(),
                (None, Some(p)) => PathBuf::from(p),
                (None, None) => return Err(Error::invalid("concept records no checkpoint; pass --ckpt")),
            };
            let checkpoint = Checkpoint::load(&ckpt_dir)?;
            if checkpoint.id() != concept.source.checkpoint_id {
                return Err(Error::InvalidState(format!(
                    "concept was made with checkpoint {} but {} holds {}",
                    concept.source.checkpoint_id,
                    ckpt_dir.display(),
                    checkpoint.id()
                )));
            }
            let (snapshot, model) = load_model(&checkpoint)?;
            let mut cfg = sampling_config(snapshot, common)?;
            if let Some(t) = img2img_t {
                cfg.sampler.img2img_t = Some(*t);
            }
            if let Some(g) = guidance {
                cfg.sampler.guidance_scale = *g;
            }
            if let Some(s) = steps {
                cfg.sampler.steps = *s;
            }
            cfg.validate()?;
            let sampler = SamplerConfig::from_config(&cfg);
            let images = generate(&model, &concept, prompt, &sampler, *n)?;
            fs::create_dir_all(out)?;
            let files = images
                .iter()
                .enumerate()
                .map(|(i, img)| {
                    let p = out.join(format!("{i:03}.png"));
                    img.save_png(&p)?;
                    Ok(p.display().to_string())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(json!({ "command": "generate", "images": files, "seed": sampler.seed }))
        }
        Command::Evaluate { pairs, out, .. } => {
            let cfg = resolve_config(common)?;
            let embedder = embedder_for(&cfg)?;
            let specs = read_pairs(pairs)?;
            let base = pairs.parent().unwrap_or(Path::new("."));
            let record = evaluate_set(&score_pairs(&specs, base, &embedder)?)?;
            let report = EvalReport {
                record,
                metadata: ReportMetadata { embedder: embedder.id(), timestamp: unix_now(), config_hash: cfg.hash() },
            };
            fs::write(out, report.to_json()?)?;
            Ok(json!({
                "command": "evaluate",
                "report": out.display().to_string(),
                "all": report.record.all.mean,
                "missing": report.record.all.missing,
            }))
        }
    }
}

/// Parses `args` (including the program name) and runs; returns the exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 { write!(stdout, "{}", e.render()) } else { write!(stderr, "{}", e.render()) };
            return if code == 0 { 0 } else { 2 };
        }
    };
    match execute(&cli.command) {
        Ok(summary) => {
            let _ = writeln!(stdout, "{summary}");
            0
        }
        Err(e) => {
            let record = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            let _ = writeln!(stderr, "{record}");
            1
        }
    }
}
