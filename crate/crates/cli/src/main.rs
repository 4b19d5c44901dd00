use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mamlab_core::model::{check_model_gradients, ModelConfig, PretrainModel};
use mamlab_core::objectives::{Label, LossWeights, Mode};
use mamlab_core::patching::{sample_unstructured_mask, PatchGrid, PatchSequence, PATCH_DIM};
use mamlab_core::pipeline::{pretrain_objective, PretrainItem};
use mamlab_core::teacher::normalize_rows;
use mamlab_core::tensor::Tensor;
use mamlab_trainer::data::load_dataset;
use mamlab_trainer::finetune::{evaluate, finetune};
use mamlab_trainer::pretrain::{pretrain, PretrainOptions};
use mamlab_trainer::sweep::{run_ablation_sweep, SweepAxis};
use mamlab_trainer::synth::generate_synth_dataset;
use mamlab_trainer::{RunConfig, TrainError, TrainResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "mamlab", version, about = "Masked audio modeling experiments at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic clip corpus and its manifest.
    Synth(Common),
    /// Pretrain in one of mam, mam-clap, supmam, supmam-clap.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from an intermediate pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a classifier, optionally from a pretraining checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a fine-tuned checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// One run per value of an ablation axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// mask_ratio, decoder_layers, lambda_cls or objectives.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Skip fine-tuning after each pretraining run.
        #[arg(long)]
        no_finetune: bool,
    },
    /// Finite-difference check of the full pretraining objective.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    lambda_cls: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// frozen-random, file:<dir> or none.
    #[arg(long)]
    teacher: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Clip manifest; overrides the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Pretraining steps; overrides the config.
    #[arg(long)]
    steps: Option<usize>,
}

impl Common {
    fn resolve(&self) -> TrainResult<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(m) = &self.mode {
            c.mode = m.clone();
        }
        if self.mask_ratio.is_some() {
            c.mask_ratio = self.mask_ratio;
        }
        if self.lambda_cls.is_some() {
            c.loss.lambda_cls = self.lambda_cls;
        }
        if let Some(t) = self.tau {
            c.loss.tau = t;
        }
        if let Some(t) = &self.teacher {
            c.teacher = t.clone();
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        if let Some(m) = &self.manifest {
            c.data.manifest = m.clone();
        }
        if let Some(s) = self.steps {
            c.optim.steps = s;
        }
        c.validate()?;
        Ok(c)
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.6}"))
}

fn gradcheck(seed: u64) -> TrainResult<()> {
    let config = ModelConfig {
        embed_dim: 8,
        encoder_layers: 2,
        encoder_heads: 2,
        decoder_dim: 8,
        decoder_layers: 1,
        decoder_heads: 2,
        attention_window: 8,
        attention_shift: 4,
        head_out_dim: 8,
        num_classes: 3,
        mlp_hidden: 8,
        mlp_ratio: 4,
    };
    let model = PretrainModel::new(config, seed)?;
    let grid = PatchGrid::new(4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seqs = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..3 {
        let data = (0..grid.len() * PATCH_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        seqs.push(PatchSequence { grid, features: Tensor::matrix(grid.len(), PATCH_DIM, data)?, coords: grid.coords() });
        targets.push(normalize_rows(Tensor::matrix(grid.len(), 8, (0..grid.len() * 8).map(|_| rng.gen()).collect())?));
    }
    let plans = (0..3).map(|i| sample_unstructured_mask(grid.len(), 0.4, seed + i)).collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<Label> = (0..3).map(Label::Single).collect();
    let items: Vec<PretrainItem> = (0..3)
        .map(|i| PretrainItem { seq: &seqs[i], plan: &plans[i], targets: Some(&targets[i]), label: Some(&labels[i]) })
        .collect();
    let w = LossWeights::new(Mode::SupMamClap, 0.5, 10.0)?;
    let report = check_model_gradients(&model.store, true, 1e-6, |s| pretrain_objective(&model, s, &items, &w).map(|(l, _)| l))?;
    println!(
        "max relative error {:.3e} over {} coordinates (worst: {})",
        report.max_rel_error, report.checked, report.worst_param
    );
    if report.max_rel_error < 1e-3 {
        Ok(())
    } else {
        Err(TrainError::Numeric(format!("gradient check failed: {:.3e}", report.max_rel_error)))
    }
}

fn run(cli: Cli) -> TrainResult<()> {
    match cli.command {
        Command::Synth(common) => {
            let mut cfg = match &common.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = common.seed {
                cfg.synth.seed = s;
            }
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            let manifest = generate_synth_dataset(&cfg.synth.to_spec(), &out)?;
            println!("{}", manifest.display());
        }
        Command::Pretrain { common, resume } => {
            let cfg = common.resolve()?;
            let out = pretrain(&cfg, &PretrainOptions { resume, stop_at: None })?;
            let last = out.report.breakdowns.last().copied().unwrap_or_default();
            println!(
                "mode {} steps {} target {} cls {} recon {} total {:.6}",
                cfg.mode,
                out.step,
                fmt(last.target_term),
                fmt(last.cls_term),
                fmt(last.recon_term),
                last.total
            );
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Finetune { common, checkpoint } => {
            let cfg = common.resolve()?;
            let out = finetune(&cfg, checkpoint.as_deref())?;
            if let Some(e) = &out.report.eval {
                println!("eval accuracy {} mAP {:.6}", fmt(e.accuracy), e.map);
            }
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Eval { common, checkpoint } => {
            let manifest = match (&common.manifest, &common.config) {
                (Some(m), _) => m.clone(),
                (None, Some(_)) => common.resolve()?.data.manifest,
                (None, None) => return Err(TrainError::Config("eval needs --manifest or --config".into())),
            };
            let m = evaluate(&checkpoint, &manifest)?;
            println!("samples {} accuracy {} mAP {:.6}", m.samples, fmt(m.accuracy), m.map);
        }
        Command::Sweep { common, axis, values, no_finetune } => {
            let cfg = common.resolve()?;
            let axis: SweepAxis = axis.parse()?;
            let ds = load_dataset(&cfg.data.manifest, cfg.data.target_frames, None)?;
            let rows = run_ablation_sweep(&cfg, axis, &values, &ds, !no_finetune)?;
            for r in rows {
                println!(
                    "{}={} total {} probe {} -> {} acc {} mAP {}",
                    r.axis,
                    r.value,
                    fmt(r.final_total),
                    fmt(r.probe_initial),
                    fmt(r.probe_final),
                    fmt(r.eval_acc),
                    fmt(r.eval_map)
                );
            }
        }
        Command::Gradcheck { common } => gradcheck(common.seed.unwrap_or(0))?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
