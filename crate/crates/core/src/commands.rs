//! The command-line operations as library calls. Each returns the JSON
//! document the binary prints on stdout.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{CliConfig, RESOLVED_CONFIG};
use crate::dataio::{gen_shifted_shapes, load_dataset, save_dataset, Checkpoint, Dataset, ReadAudit, ShiftParams};
use crate::error::{ensure, Error, Result};
use crate::model::{attn_weights, patch_partition, self_branch_states, ModelConfig, ModelParams, LN_EPS};
use crate::tensor::{kernels, Graph, Tensor};
use crate::train::{
    accuracy, distill_student, infer_dtf, infer_full, per_class_accuracy, train_bcat, Teacher, TrainConfig,
};

pub const MODEL_FILE: &str = "model.bckp";
pub const STUDENT_FILE: &str = "student.bckp";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const DISTILL_METRICS_FILE: &str = "distill_metrics.jsonl";

/// Where generation parameters come from.
#[derive(Debug, Clone)]
pub enum ShiftSource {
    Preset(String),
    Json(String),
}

impl ShiftSource {
    pub fn resolve(&self) -> Result<ShiftParams> {
        match self {
            Self::Preset(name) => ShiftParams::preset(name)
                .ok_or_else(|| Error::Config(format!("unknown preset `{name}` (expected source or target)"))),
            Self::Json(text) => {
                serde_json::from_str(text).map_err(|e| Error::Config(format!("shift parameters: {e}")))
            }
        }
    }
}

pub fn gen_data(shift: &ShiftSource, n: usize, seed: u64, out: &Path) -> Result<Value> {
    let shift = shift.resolve()?;
    let d = gen_shifted_shapes(n, &shift, seed)?;
    save_dataset(&d, out)?;
    Ok(json!({
        "path": out,
        "n": d.len(),
        "class_histogram": d.class_histogram(crate::dataio::N_CLASSES),
    }))
}

fn read_dataset(path: &Path, audit: &mut ReadAudit) -> Result<Dataset> {
    audit.files.push(path.to_path_buf());
    load_dataset(path)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} dataset configured (set `{what}`)")))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn train(cfg: &CliConfig) -> Result<Value> {
    let mut audit = ReadAudit::default();
    let source = read_dataset(required(&cfg.source, "source")?, &mut audit)?;
    let target = read_dataset(required(&cfg.target, "target")?, &mut audit)?;
    create_dir(&cfg.out_dir)?;
    cfg.write_resolved(&cfg.out_dir)?;
    let out = train_bcat(&source, &target, &cfg.train)?;
    let ckpt = Checkpoint {
        params: out.params,
        reference_source: Some(out.reference_source),
        bank: Some(out.bank),
    };
    let model_path = cfg.out_dir.join(MODEL_FILE);
    ckpt.save(&model_path)?;
    write_jsonl(&cfg.out_dir.join(METRICS_FILE), &out.metrics)?;
    Ok(json!({
        "checkpoint": model_path,
        "epochs": out.metrics.len(),
        "final": out.metrics.last(),
    }))
}

/// Configuration for a checkpoint: `explicit` if given, otherwise the
/// resolved config saved beside the checkpoint.
pub fn config_for_checkpoint(checkpoint: &Path, explicit: Option<&Path>, overrides: &[String]) -> Result<CliConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = checkpoint.parent().unwrap_or(Path::new("."));
            let p = dir.join(RESOLVED_CONFIG);
            if !p.exists() {
                return Err(Error::Config(format!(
                    "no --config given and {} does not exist",
                    p.display()
                )));
            }
            p
        }
    };
    CliConfig::resolve(Some(&path), overrides)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Full,
    Dtf,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Dtf => "dtf",
        }
    }
}

/// Evaluates a checkpoint; `dtf` never materializes the reference batch.
pub fn eval(checkpoint: &Path, dataset: &Path, mode: EvalMode, model: &ModelConfig, audit: &mut ReadAudit) -> Result<Value> {
    let data = read_dataset(dataset, audit)?;
    let labels = data
        .labels
        .clone()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no labels; evaluation needs them", dataset.display())))?;
    let ckpt = Checkpoint::load(checkpoint, model, mode == EvalMode::Full, audit)?;
    let pred = match mode {
        EvalMode::Full => {
            let reference = ckpt.reference_source.as_ref().ok_or_else(|| {
                Error::MissingTensor(format!(
                    "{} (full inference needs the stored source batch)",
                    crate::dataio::REF_SOURCE
                ))
            })?;
            infer_full(&ckpt.params, model, &data.images, reference)?
        }
        EvalMode::Dtf => infer_dtf(&ckpt.params, model, &data.images)?,
    };
    Ok(json!({
        "mode": mode.name(),
        "n": labels.len(),
        "accuracy": accuracy(&pred, &labels),
        "per_class_accuracy": per_class_accuracy(&pred, &labels, model.n_classes),
    }))
}

pub fn distill(teacher: &Path, target: &Path, cfg: &TrainConfig, out_dir: &Path, audit: &mut ReadAudit) -> Result<Value> {
    let data = read_dataset(target, audit)?;
    let ckpt = Checkpoint::load(teacher, &cfg.model, true, audit)?;
    let reference = ckpt
        .reference_source
        .as_ref()
        .ok_or_else(|| Error::MissingTensor(crate::dataio::REF_SOURCE.into()))?;
    let bank = ckpt
        .bank
        .as_ref()
        .ok_or_else(|| Error::MissingTensor(crate::dataio::BANK_PROBS.into()))?;
    let out = distill_student(
        Teacher {
            params: &ckpt.params,
            reference_source: reference,
            bank,
        },
        &data,
        cfg,
    )?;
    create_dir(out_dir)?;
    let path = out_dir.join(STUDENT_FILE);
    Checkpoint::params_only(out.params).save(&path)?;
    write_jsonl(&out_dir.join(DISTILL_METRICS_FILE), &out.metrics)?;
    Ok(json!({
        "checkpoint": path,
        "epochs": out.metrics.len(),
        "final": out.metrics.last(),
    }))
}

/// Which heads an attention map averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelect {
    Head(usize),
    Mean,
}

/// Attention a block's target self-attention branch pays to each patch of
/// one image, averaged over queries (and heads for [`HeadSelect::Mean`]).
/// Returns the per-patch weights in grid order; they sum to 1.
pub fn patch_attention(
    params: &ModelParams,
    cfg: &ModelConfig,
    image: &Tensor,
    block: usize,
    head: HeadSelect,
) -> Result<Vec<f64>> {
    ensure!(block < cfg.n_blocks, "block {block} out of range for {} blocks", cfg.n_blocks);
    if let HeadSelect::Head(h) = head {
        ensure!(h < cfg.n_heads, "head {h} out of range for {} heads", cfg.n_heads);
    }
    let mut g = Graph::new();
    let p = params.register(&mut g, false);
    let patches = g.constant(patch_partition(image, cfg.patch_size)?);
    let states = self_branch_states(&mut g, patches, &p, cfg)?;
    let bp = &params.blocks[block];
    let ln = kernels::layer_norm(g.value(states[block]), &bp.ln1_g, &bp.ln1_b, LN_EPS)?;
    let w = attn_weights(&ln, &ln, bp, cfg.n_heads)?;
    let (heads, n) = (cfg.n_heads, cfg.n_tokens());
    let chosen: Vec<usize> = match head {
        HeadSelect::Head(h) => vec![h],
        HeadSelect::Mean => (0..heads).collect(),
    };
    let mut out = vec![0.0; n];
    for &h in &chosen {
        for q in 0..n {
            let row = &w.data()[(h * n + q) * n..(h * n + q + 1) * n];
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    let denom = (chosen.len() * n) as f64;
    out.iter_mut().for_each(|v| *v /= denom);
    Ok(out)
}

/// Renders per-patch weights as an 8-bit grayscale image at full resolution:
/// nearest-neighbour upscaling, then min-max scaling to 0..=255. A constant
/// map renders as mid gray (128).
pub fn attention_pixels(weights: &[f64], cfg: &ModelConfig) -> Vec<u8> {
    let grid_w = cfg.image_w / cfg.patch_size;
    let (lo, hi) = weights
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let level = |v: f64| -> u8 {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        }
    };
    let mut px = Vec::with_capacity(cfg.image_h * cfg.image_w);
    for r in 0..cfg.image_h {
        for c in 0..cfg.image_w {
            px.push(level(weights[(r / cfg.patch_size) * grid_w + c / cfg.patch_size]));
        }
    }
    px
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[allow(clippy::too_many_arguments)]
pub fn attn_map(
    checkpoint: &Path,
    dataset: &Path,
    index: usize,
    block: usize,
    head: HeadSelect,
    model: &ModelConfig,
    out: &Path,
    audit: &mut ReadAudit,
) -> Result<Value> {
    let data = read_dataset(dataset, audit)?;
    ensure!(index < data.len(), "sample {index} out of range for {} samples", data.len());
    let ckpt = Checkpoint::load(checkpoint, model, false, audit)?;
    let image = data.batch(&[index])?;
    let weights = patch_attention(&ckpt.params, model, &image, block, head)?;
    let pixels = attention_pixels(&weights, model);
    write_pgm(out, model.image_w, model.image_h, &pixels)?;
    Ok(json!({
        "path": out,
        "width": model.image_w,
        "height": model.image_h,
        "patch_weights": weights,
    }))
}
