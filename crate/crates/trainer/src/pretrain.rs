//! Pretraining loop for the four modes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use mamlab_core::model::{PretrainModel, Session};
use mamlab_core::objectives::{Label, LossBreakdown, LossWeights, Mode};
use mamlab_core::patching::{sample_unstructured_mask, MaskPlan};
use mamlab_core::pipeline::{pretrain_objective, PretrainItem};
use mamlab_core::teacher::Teacher;
use mamlab_core::tensor::{AdamW, AdamWConfig, CosineSchedule, ParamId, Tape, Tensor};

use crate::checkpoint::{load_pretrain, save_pretrain, CheckpointMeta, KIND_PRETRAIN};
use crate::config::RunConfig;
use crate::data::{load_dataset, thread_pool, Clip, Dataset};
use crate::error::{TrainError, TrainResult};
use crate::metrics::{MetricsReport, MetricsRow};
use crate::seeds::{derive_seed, STREAM_MASK, STREAM_MODEL, STREAM_ORDER, STREAM_PROBE};

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const PRETRAIN_METRICS: &str = "pretrain_metrics.csv";

/// Optional controls beyond the config.
#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Continue from this checkpoint's step, parameters and optimizer state.
    pub resume: Option<PathBuf>,
    /// Stop (and save) after reaching this step instead of `optim.steps`.
    pub stop_at: Option<usize>,
}

pub struct PretrainOutcome {
    pub model: PretrainModel,
    pub report: MetricsReport,
    pub checkpoint: PathBuf,
    pub step: usize,
    /// The teacher that produced the targets, for modes that use one.
    pub teacher: Option<Teacher>,
}

/// Dataset position `p` of the concatenated per-epoch permutations.
#[derive(Clone, Debug)]
pub struct BatchOrder {
    seed: u64,
    stream: u64,
    n: usize,
    epoch: Option<(usize, Vec<usize>)>,
}

impl BatchOrder {
    pub fn new(seed: u64, stream: u64, n: usize) -> Self {
        Self { seed, stream, n, epoch: None }
    }

    pub fn index(&mut self, position: usize) -> usize {
        let epoch = position / self.n;
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, self.stream, epoch as u64, 0)));
            self.epoch = Some((epoch, perm));
        }
        self.epoch.as_ref().unwrap().1[position % self.n]
    }
}

/// Trainable parameters the mode's objective reaches.
pub fn active_params(model: &PretrainModel, w: &LossWeights) -> Vec<ParamId> {
    let mut prefixes = vec!["encoder."];
    if w.objectives.primary {
        prefixes.push("decoder.");
    }
    if w.needs_target() {
        prefixes.push("head.");
    }
    if w.needs_recon() {
        prefixes.push("recon_head.");
    }
    if w.needs_cls() {
        prefixes.push("cls_head.");
    }
    model.store.trainable_with_prefix(&prefixes)
}

/// Teacher targets for `clips`, computed in parallel and in clip order.
pub fn teacher_targets(teacher: &Teacher, clips: &[Clip]) -> TrainResult<Vec<Tensor>> {
    let pool = thread_pool()?;
    pool.install(|| clips.par_iter().map(|c| teacher.targets(&c.stem, &c.spec).map_err(TrainError::from)).collect())
}

struct Prepared<'a> {
    ds: &'a Dataset,
    mode: Mode,
    weights: LossWeights,
    gamma: f64,
    teacher: Option<Teacher>,
    targets: Option<Vec<Tensor>>,
    labels: Vec<Label>,
    probe: Vec<(usize, MaskPlan)>,
}

impl<'a> Prepared<'a> {
    fn new(cfg: &'a RunConfig, ds: &'a Dataset) -> TrainResult<Self> {
        cfg.validate()?;
        let mode = cfg.mode()?;
        let weights = cfg.loss_weights()?;
        let gamma = cfg.mask_ratio()?;
        if ds.train.is_empty() {
            return Err(TrainError::Other("input error: training split is empty".into()));
        }
        if weights.needs_cls() && ds.num_classes > cfg.model.num_classes {
            return Err(TrainError::Config(format!(
                "dataset has {} classes but model.num_classes is {}",
                ds.num_classes, cfg.model.num_classes
            )));
        }
        let (teacher, targets) = if weights.needs_target() {
            let spec = cfg.teacher_spec()?.ok_or_else(|| TrainError::Config(format!("mode {mode} needs a teacher")))?;
            let teacher = Teacher::from_spec(&spec)?;
            let targets = teacher_targets(&teacher, &ds.train)?;
            (Some(teacher), Some(targets))
        } else {
            (None, None)
        };
        let labels = (0..ds.train.len())
            .map(|i| match ds.train_label(i) {
                Label::Multi(mut v) => {
                    v.resize(cfg.model.num_classes, 0.0);
                    Label::Multi(v)
                }
                l => l,
            })
            .collect();
        let n = ds.train[0].seq.grid.len();
        let probe = (0..cfg.optim.batch_size.min(ds.train.len()))
            .map(|i| Ok((i, sample_unstructured_mask(n, gamma, derive_seed(cfg.seed, STREAM_PROBE, i as u64, 0))?)))
            .collect::<TrainResult<_>>()?;
        Ok(Self { ds, mode, weights, gamma, teacher, targets, labels, probe })
    }

    fn item<'b>(&'b self, clip: usize, plan: &'b MaskPlan) -> PretrainItem<'b> {
        PretrainItem {
            seq: &self.ds.train[clip].seq,
            plan,
            targets: self.targets.as_ref().map(|t| &t[clip]),
            label: Some(&self.labels[clip]),
        }
    }

    /// Objective on the fixed probe batch, without touching parameters.
    fn probe_loss(&self, model: &PretrainModel) -> TrainResult<f64> {
        let tape = Tape::inference();
        let s = Session::new(&tape, &model.store, true);
        let items: Vec<PretrainItem> = self.probe.iter().map(|(c, p)| self.item(*c, p)).collect();
        let (_, b) = pretrain_objective(model, &s, &items, &self.weights)?;
        Ok(b.total)
    }
}

fn check_finite(b: &LossBreakdown, step: usize) -> TrainResult<()> {
    if b.total.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Numeric(format!("non-finite loss at step {step}: {b:?}")))
    }
}

/// Loads the configured manifest and pretrains.
pub fn pretrain(cfg: &RunConfig, opts: &PretrainOptions) -> TrainResult<PretrainOutcome> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.data.manifest, cfg.data.target_frames, None)?;
    pretrain_on(cfg, &ds, opts)
}

pub fn pretrain_on(cfg: &RunConfig, ds: &Dataset, opts: &PretrainOptions) -> TrainResult<PretrainOutcome> {
    let started = Instant::now();
    let prep = Prepared::new(cfg, ds)?;
    let adam = AdamWConfig {
        beta1: cfg.optim.beta1,
        beta2: cfg.optim.beta2,
        weight_decay: cfg.optim.weight_decay,
        ..AdamWConfig::default()
    };
    let (mut model, mut opt, start) = match &opts.resume {
        Some(path) => {
            let (meta, model, opt) = load_pretrain(path)?;
            let mismatches = meta.config.encoder_mismatches(&cfg.model_config());
            if meta.config != cfg.model_config() {
                return Err(TrainError::Config(format!(
                    "resume checkpoint has a different model config ({})",
                    mismatches.join(", ")
                )));
            }
            if meta.mode != Some(prep.mode) || meta.seed != cfg.seed {
                return Err(TrainError::Config("resume checkpoint was written by a different mode or seed".into()));
            }
            (model, opt, meta.step)
        }
        None => {
            let model = PretrainModel::new(cfg.model_config(), derive_seed(cfg.seed, STREAM_MODEL, 0, 0))?;
            let opt = AdamW::new(adam, &model.store);
            (model, opt, 0)
        }
    };
    let end = opts.stop_at.unwrap_or(cfg.optim.steps).min(cfg.optim.steps);
    let active = active_params(&model, &prep.weights);
    let schedule = CosineSchedule::new(cfg.optim.lr, cfg.optim.steps, cfg.optim.warmup_fraction);
    let mut order = BatchOrder::new(cfg.seed, STREAM_ORDER, ds.train.len());
    let n = ds.train[0].seq.grid.len();
    let batch = cfg.optim.batch_size;
    let mut report = MetricsReport { probe_initial: Some(prep.probe_loss(&model)?), ..MetricsReport::default() };
    let (mut masked_total, mut patch_total) = (0usize, 0usize);
    fs::create_dir_all(&cfg.out_dir)?;
    log::info!(
        "pretraining {} for steps {start}..{end}, gamma {}, {} active tensors",
        prep.mode,
        prep.gamma,
        active.len()
    );

    for step in start..end {
        let mut chosen = Vec::with_capacity(batch);
        for j in 0..batch {
            let clip = order.index(step * batch + j);
            let plan = sample_unstructured_mask(n, prep.gamma, derive_seed(cfg.seed, STREAM_MASK, step as u64, j as u64))?;
            masked_total += plan.masked.len();
            patch_total += n;
            chosen.push((clip, plan));
        }
        let items: Vec<PretrainItem> = chosen.iter().map(|(c, p)| prep.item(*c, p)).collect();
        let tape = Tape::new();
        let s = Session::new(&tape, &model.store, true);
        let (loss, breakdown) = pretrain_objective(&model, &s, &items, &prep.weights)?;
        check_finite(&breakdown, step)?;
        let mut g = loss.backward()?;
        let grads = s.params.grads(&mut g);
        let updates = s.take_updates();
        drop(s);
        opt.step(&mut model.store, &grads, &active, schedule.lr_at(step))?;
        for (id, t) in updates {
            *model.store.value_mut(id) = t;
        }
        let gamma = masked_total as f64 / patch_total as f64;
        let mut row = MetricsRow::from_breakdown(step, prep.mode.name(), &breakdown, Some(gamma));
        if cfg.log_wall_clock {
            row.seconds = Some(started.elapsed().as_secs_f64());
        }
        log::debug!("step {step} {breakdown:?}");
        report.rows.push(row);
        report.breakdowns.push(breakdown);
        if cfg.optim.checkpoint_every > 0 && (step + 1) % cfg.optim.checkpoint_every == 0 && step + 1 < end {
            let path = cfg.out_dir.join(format!("pretrain_step{:06}.ckpt", step + 1));
            save_pretrain(&path, &meta(cfg, ds, prep.mode, step + 1), &model, &opt)?;
        }
    }
    report.probe_final = Some(prep.probe_loss(&model)?);
    report.realized_gamma = (patch_total > 0).then(|| masked_total as f64 / patch_total as f64);
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    let checkpoint = cfg.out_dir.join(PRETRAIN_CHECKPOINT);
    save_pretrain(&checkpoint, &meta(cfg, ds, prep.mode, end), &model, &opt)?;
    report.write_csv(&cfg.out_dir.join(PRETRAIN_METRICS))?;
    write_summary(&cfg.out_dir.join("pretrain_summary.txt"), &report)?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;
    log::info!(
        "pretraining done in {:.1}s: probe objective {:.6} -> {:.6}",
        report.wall_clock_secs,
        report.probe_initial.unwrap_or(f64::NAN),
        report.probe_final.unwrap_or(f64::NAN)
    );
    Ok(PretrainOutcome { model, report, checkpoint, step: end, teacher: prep.teacher })
}

fn meta(cfg: &RunConfig, ds: &Dataset, mode: Mode, step: usize) -> CheckpointMeta {
    CheckpointMeta {
        kind: KIND_PRETRAIN.into(),
        mode: Some(mode),
        step,
        seed: cfg.seed,
        norm: ds.norm,
        target_frames: cfg.data.target_frames,
        multi_label: ds.multi_label,
        config: cfg.model_config(),
    }
}

pub(crate) fn write_summary(path: &Path, r: &MetricsReport) -> TrainResult<()> {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut text = String::new();
    text.push_str(&format!("probe_initial={}\n", opt(r.probe_initial)));
    text.push_str(&format!("probe_final={}\n", opt(r.probe_final)));
    text.push_str(&format!("realized_gamma={}\n", opt(r.realized_gamma)));
    if let Some(e) = &r.eval {
        text.push_str(&format!("eval_accuracy={}\neval_map={}\n", opt(e.accuracy), e.map));
    }
    text.push_str(&format!("train_accuracy={}\n", opt(r.train_accuracy)));
    fs::write(path, text)?;
    Ok(())
}
