//! Fine-tuning with structured masking, and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use mamlab_core::checkpoint::Archive;
use mamlab_core::model::{forward_finetune, FinetuneModel, ModelConfig, PretrainModel, Session};
use mamlab_core::objectives::{classification_loss, Label, LossBreakdown};
use mamlab_core::patching::{sample_structured_mask, MaskPlan};
use mamlab_core::tensor::{AdamW, AdamWConfig, CosineSchedule, Tape, Tensor};

use crate::checkpoint::{load_finetune, read_checkpoint_meta, save_finetune, CheckpointMeta, KIND_FINETUNE, KIND_PRETRAIN};
use crate::config::RunConfig;
use crate::data::{load_dataset, thread_pool, Clip, Dataset};
use crate::error::{TrainError, TrainResult};
use crate::metrics::{accuracy, mean_average_precision, EvalMetrics, MetricsReport, MetricsRow};
use crate::pretrain::{write_summary, BatchOrder};
use crate::seeds::{derive_seed, STREAM_FINETUNE_MASK, STREAM_FINETUNE_MODEL, STREAM_FINETUNE_ORDER};

pub const FINETUNE_CHECKPOINT: &str = "finetune.ckpt";
pub const FINETUNE_METRICS: &str = "finetune_metrics.csv";

/// Where the encoder of a fine-tuning run comes from.
#[derive(Clone, Copy)]
pub enum EncoderInit<'a> {
    Scratch,
    Checkpoint(&'a Path),
    Model(&'a PretrainModel),
}

pub struct FinetuneOutcome {
    pub model: FinetuneModel,
    pub report: MetricsReport,
    pub checkpoint: PathBuf,
}

/// Class probabilities (softmax) or per-class probabilities (sigmoid) for every clip.
pub fn predict(model: &FinetuneModel, clips: &[Clip], multi_label: bool) -> TrainResult<Tensor> {
    let pool = thread_pool()?;
    let rows: Vec<Vec<f64>> = pool.install(|| {
        clips
            .par_iter()
            .map(|clip| -> TrainResult<Vec<f64>> {
                let tape = Tape::inference();
                let s = Session::new(&tape, &model.store, false);
                let logits = forward_finetune(model, &s, &clip.seq, None)?;
                let probs = if multi_label { logits.scale(-1.0).softplus().scale(-1.0) } else { logits.log_softmax()? };
                Ok(probs.value().data().iter().map(|v| v.exp()).collect())
            })
            .collect::<TrainResult<_>>()
    })?;
    let cols = model.config.num_classes;
    Ok(Tensor::matrix(rows.len(), cols, rows.concat())?)
}

/// Eval-mode metrics over `clips`.
pub fn evaluate_model(model: &FinetuneModel, clips: &[Clip], multi_label: bool) -> TrainResult<EvalMetrics> {
    if clips.is_empty() {
        return Err(TrainError::Other("input error: nothing to evaluate".into()));
    }
    let scores = predict(model, clips, multi_label)?;
    let cols = scores.cols();
    let mut onehot = vec![0.0; clips.len() * cols];
    for (r, c) in clips.iter().enumerate() {
        for &l in &c.labels {
            if l >= cols {
                return Err(TrainError::Config(format!("label {l} exceeds the model's {cols} classes")));
            }
            onehot[r * cols + l] = 1.0;
        }
    }
    let labels = Tensor::matrix(clips.len(), cols, onehot)?;
    let acc = if multi_label {
        None
    } else {
        Some(accuracy(&scores, &clips.iter().map(|c| c.labels[0]).collect::<Vec<_>>())?)
    };
    Ok(EvalMetrics { accuracy: acc, map: mean_average_precision(&scores, &labels)?, samples: clips.len() })
}

fn build_model(cfg: &RunConfig, ds: &Dataset, init: EncoderInit) -> TrainResult<FinetuneModel> {
    let config = cfg.model_config();
    if ds.num_classes > config.num_classes {
        return Err(TrainError::Config(format!(
            "dataset has {} classes but model.num_classes is {}",
            ds.num_classes, config.num_classes
        )));
    }
    let mut model = FinetuneModel::new(config, derive_seed(cfg.seed, STREAM_FINETUNE_MODEL, 0, 0))?;
    match init {
        EncoderInit::Scratch => {}
        EncoderInit::Model(pre) => model.load_encoder(&pre.config, &pre.store)?,
        EncoderInit::Checkpoint(path) => {
            let a = Archive::load(path)?;
            let kind = a.header_value("kind")?;
            if kind != KIND_PRETRAIN && kind != KIND_FINETUNE {
                return Err(TrainError::Config(format!("{} is not a model checkpoint", path.display())));
            }
            let src_config = ModelConfig::from_kv(&a.header)?;
            let mut src = FinetuneModel::new(src_config.clone(), 0)?;
            let names: Vec<String> =
                src.store.iter().filter(|(_, p)| p.name.starts_with("encoder.")).map(|(_, p)| p.name.clone()).collect();
            for name in names {
                src.store.set(&name, a.require(&format!("param.{name}"))?.clone())?;
            }
            model.load_encoder(&src_config, &src.store)?;
        }
    }
    Ok(model)
}

/// Loads the configured manifest (with the checkpoint's normalization, if any) and fine-tunes.
pub fn finetune(cfg: &RunConfig, checkpoint: Option<&Path>) -> TrainResult<FinetuneOutcome> {
    cfg.validate()?;
    let norm = match checkpoint {
        Some(p) => Some(read_checkpoint_meta(p)?.norm),
        None => None,
    };
    let ds = load_dataset(&cfg.data.manifest, cfg.data.target_frames, norm)?;
    let init = checkpoint.map_or(EncoderInit::Scratch, EncoderInit::Checkpoint);
    finetune_on(cfg, &ds, init)
}

pub fn finetune_on(cfg: &RunConfig, ds: &Dataset, init: EncoderInit) -> TrainResult<FinetuneOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(TrainError::Other("input error: training split is empty".into()));
    }
    let ft = &cfg.finetune;
    let mut model = build_model(cfg, ds, init)?;
    let mut opt = AdamW::new(
        AdamWConfig { beta1: cfg.optim.beta1, beta2: cfg.optim.beta2, weight_decay: cfg.optim.weight_decay, ..Default::default() },
        &model.store,
    );
    let active = model.store.trainable_with_prefix(&["encoder.", "task_head."]);
    let schedule = CosineSchedule::new(ft.lr, ft.steps, ft.warmup_fraction);
    let mut order = BatchOrder::new(cfg.seed, STREAM_FINETUNE_ORDER, ds.train.len());
    let grid = ds.train[0].seq.grid;
    let classes = model.config.num_classes;
    let labels: Vec<Label> = ds
        .train
        .iter()
        .map(|c| c.label(classes, ds.multi_label))
        .collect();
    let mut report = MetricsReport::default();
    let (mut masked_total, mut patch_total) = (0usize, 0usize);
    fs::create_dir_all(&cfg.out_dir)?;

    for step in 0..ft.steps {
        let mut seqs = Vec::with_capacity(ft.batch_size);
        let mut plans: Vec<MaskPlan> = Vec::with_capacity(ft.batch_size);
        let mut batch_labels = Vec::with_capacity(ft.batch_size);
        for j in 0..ft.batch_size {
            let clip = order.index(step * ft.batch_size + j);
            let seed = derive_seed(cfg.seed, STREAM_FINETUNE_MASK, step as u64, j as u64);
            let plan = sample_structured_mask(grid, ft.time_mask_ratio, ft.freq_mask_ratio, seed)?;
            masked_total += plan.masked.len();
            patch_total += grid.len();
            seqs.push(&ds.train[clip].seq);
            plans.push(plan);
            batch_labels.push(labels[clip].clone());
        }
        let tape = Tape::new();
        let s = Session::new(&tape, &model.store, true);
        let logits = model.forward(&s, &seqs, Some(&plans))?;
        let loss = classification_loss(logits, ft.tau, &batch_labels)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(TrainError::Numeric(format!("non-finite fine-tuning loss at step {step}")));
        }
        let mut g = loss.backward()?;
        let grads = s.params.grads(&mut g);
        let updates = s.take_updates();
        drop(s);
        opt.step(&mut model.store, &grads, &active, schedule.lr_at(step))?;
        for (id, t) in updates {
            *model.store.value_mut(id) = t;
        }
        let breakdown = LossBreakdown { cls_term: Some(value), total: value, ..LossBreakdown::default() };
        let gamma = masked_total as f64 / patch_total as f64;
        let mut row = MetricsRow::from_breakdown(step, "finetune", &breakdown, Some(gamma));
        let last = step + 1 == ft.steps;
        if !ds.eval.is_empty() && (last || (ft.eval_every > 0 && (step + 1) % ft.eval_every == 0)) {
            let m = evaluate_model(&model, &ds.eval, ds.multi_label)?;
            row.acc = m.accuracy;
            row.map = Some(m.map);
            log::info!("finetune step {} eval acc {:?} mAP {:.4}", step + 1, m.accuracy, m.map);
            if last {
                report.eval = Some(m);
            }
        }
        if cfg.log_wall_clock {
            row.seconds = Some(started.elapsed().as_secs_f64());
        }
        report.rows.push(row);
        report.breakdowns.push(breakdown);
    }
    if !ds.multi_label {
        report.train_accuracy = evaluate_model(&model, &ds.train, false)?.accuracy;
    }
    report.realized_gamma = (patch_total > 0).then(|| masked_total as f64 / patch_total as f64);
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    let checkpoint = cfg.out_dir.join(FINETUNE_CHECKPOINT);
    let meta = CheckpointMeta {
        kind: KIND_FINETUNE.into(),
        mode: None,
        step: ft.steps,
        seed: cfg.seed,
        norm: ds.norm,
        target_frames: cfg.data.target_frames,
        multi_label: ds.multi_label,
        config: model.config.clone(),
    };
    save_finetune(&checkpoint, &meta, &model, &opt)?;
    report.write_csv(&cfg.out_dir.join(FINETUNE_METRICS))?;
    write_summary(&cfg.out_dir.join("finetune_summary.txt"), &report)?;
    Ok(FinetuneOutcome { model, report, checkpoint })
}

/// Evaluates a fine-tuned checkpoint on the held-out split of `manifest`.
pub fn evaluate(checkpoint: &Path, manifest: &Path) -> TrainResult<EvalMetrics> {
    let (meta, model, _) = load_finetune(checkpoint)?;
    let ds = load_dataset(manifest, meta.target_frames, Some(meta.norm))?;
    let clips = if ds.eval.is_empty() { &ds.train } else { &ds.eval };
    evaluate_model(&model, clips, ds.multi_label || meta.multi_label)
}
