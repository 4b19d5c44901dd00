//! Model checkpoints on top of the core archive format.

use std::path::Path;

use mamlab_core::checkpoint::Archive;
use mamlab_core::model::{FinetuneModel, ModelConfig, PretrainModel};
use mamlab_core::objectives::Mode;
use mamlab_core::tensor::{AdamState, AdamW, AdamWConfig, ParamStore, Tensor};

use crate::data::NormStats;
use crate::error::{TrainError, TrainResult};

pub const KIND_PRETRAIN: &str = "pretrain";
pub const KIND_FINETUNE: &str = "finetune";

/// Header fields shared by both checkpoint kinds.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub kind: String,
    pub mode: Option<Mode>,
    pub step: usize,
    pub seed: u64,
    pub norm: NormStats,
    pub target_frames: usize,
    pub multi_label: bool,
    pub config: ModelConfig,
}

fn write_meta(a: &mut Archive, m: &CheckpointMeta) {
    a.set("kind", &m.kind);
    if let Some(mode) = m.mode {
        a.set("mode", mode);
    }
    a.set("step", m.step);
    a.set("seed", m.seed);
    a.set("norm.mean", m.norm.mean);
    a.set("norm.std", m.norm.std);
    a.set("target_frames", m.target_frames);
    a.set("multi_label", m.multi_label);
    for (k, v) in m.config.to_kv() {
        a.set(k, v);
    }
}

fn read_meta(a: &Archive) -> TrainResult<CheckpointMeta> {
    let mode = match a.header.get("mode") {
        Some(m) => Some(m.parse::<Mode>()?),
        None => None,
    };
    Ok(CheckpointMeta {
        kind: a.header_value("kind")?.to_string(),
        mode,
        step: a.header_parse("step")?,
        seed: a.header_parse("seed")?,
        norm: NormStats { mean: a.header_parse("norm.mean")?, std: a.header_parse("norm.std")? },
        target_frames: a.header_parse("target_frames")?,
        multi_label: a.header_parse("multi_label")?,
        config: ModelConfig::from_kv(&a.header)?,
    })
}

fn push_optimizer(a: &mut Archive, store: &ParamStore, opt: &AdamW) {
    let c = opt.config;
    a.set("adam.beta1", c.beta1);
    a.set("adam.beta2", c.beta2);
    a.set("adam.eps", c.eps);
    a.set("adam.weight_decay", c.weight_decay);
    let mut steps = Vec::with_capacity(opt.states.len());
    for ((_, p), s) in store.iter().zip(&opt.states) {
        a.push(format!("adam.m.{}", p.name), Tensor::vector(s.m.clone()));
        a.push(format!("adam.v.{}", p.name), Tensor::vector(s.v.clone()));
        steps.push(s.step as f64);
    }
    a.push("adam.steps", Tensor::vector(steps));
}

fn read_optimizer(a: &Archive, store: &ParamStore) -> TrainResult<AdamW> {
    let config = AdamWConfig {
        beta1: a.header_parse("adam.beta1")?,
        beta2: a.header_parse("adam.beta2")?,
        eps: a.header_parse("adam.eps")?,
        weight_decay: a.header_parse("adam.weight_decay")?,
    };
    let steps = a.require("adam.steps")?;
    if steps.numel() != store.len() {
        return Err(TrainError::Io(format!("optimizer state covers {} parameters, model has {}", steps.numel(), store.len())));
    }
    let mut states = Vec::with_capacity(store.len());
    for ((_, p), &step) in store.iter().zip(steps.data()) {
        let m = a.require(&format!("adam.m.{}", p.name))?.data().to_vec();
        let v = a.require(&format!("adam.v.{}", p.name))?.data().to_vec();
        if m.len() != p.value.numel() || v.len() != p.value.numel() {
            return Err(TrainError::Io(format!("optimizer moments for {} have the wrong length", p.name)));
        }
        states.push(AdamState { m, v, step: step as u64 });
    }
    Ok(AdamW { config, states })
}

pub fn save_pretrain(path: &Path, meta: &CheckpointMeta, model: &PretrainModel, opt: &AdamW) -> TrainResult<()> {
    let mut a = Archive::new();
    write_meta(&mut a, meta);
    a.push_store("param.", &model.store);
    push_optimizer(&mut a, &model.store, opt);
    a.save(path)?;
    Ok(())
}

pub fn save_finetune(path: &Path, meta: &CheckpointMeta, model: &FinetuneModel, opt: &AdamW) -> TrainResult<()> {
    let mut a = Archive::new();
    write_meta(&mut a, meta);
    a.push_store("param.", &model.store);
    push_optimizer(&mut a, &model.store, opt);
    a.save(path)?;
    Ok(())
}

fn expect_kind(meta: &CheckpointMeta, kind: &str, path: &Path) -> TrainResult<()> {
    if meta.kind != kind {
        return Err(TrainError::Config(format!("{} is a {} checkpoint, expected {kind}", path.display(), meta.kind)));
    }
    Ok(())
}

pub fn load_pretrain(path: &Path) -> TrainResult<(CheckpointMeta, PretrainModel, AdamW)> {
    let a = Archive::load(path)?;
    let meta = read_meta(&a)?;
    expect_kind(&meta, KIND_PRETRAIN, path)?;
    let mut model = PretrainModel::new(meta.config.clone(), 0)?;
    a.fill_store("param.", &mut model.store)?;
    let opt = read_optimizer(&a, &model.store)?;
    Ok((meta, model, opt))
}

pub fn load_finetune(path: &Path) -> TrainResult<(CheckpointMeta, FinetuneModel, AdamW)> {
    let a = Archive::load(path)?;
    let meta = read_meta(&a)?;
    expect_kind(&meta, KIND_FINETUNE, path)?;
    let mut model = FinetuneModel::new(meta.config.clone(), 0)?;
    a.fill_store("param.", &mut model.store)?;
    let opt = read_optimizer(&a, &model.store)?;
    Ok((meta, model, opt))
}

/// Reads only the header of any checkpoint.
pub fn read_checkpoint_meta(path: &Path) -> TrainResult<CheckpointMeta> {
    read_meta(&Archive::load(path)?)
}
