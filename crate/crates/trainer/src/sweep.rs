//! One pretraining (and optional fine-tuning) run per value of a single axis.

use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{TrainError, TrainResult};
use crate::finetune::{finetune_on, EncoderInit};
use crate::pretrain::{pretrain_on, PretrainOptions};

pub const SWEEP_TABLE: &str = "sweep.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    MaskRatio,
    DecoderLayers,
    LambdaCls,
    Objectives,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::MaskRatio => "mask_ratio",
            SweepAxis::DecoderLayers => "decoder_layers",
            SweepAxis::LambdaCls => "lambda_cls",
            SweepAxis::Objectives => "objectives",
        }
    }

    /// Copy of `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> TrainResult<RunConfig> {
        let bad = |what: &str| TrainError::Config(format!("{} value {value:?} is not {what}", self.name()));
        let mut c = base.clone();
        let mode = c.mode()?;
        match self {
            SweepAxis::MaskRatio => c.mask_ratio = Some(value.parse().map_err(|_| bad("a number"))?),
            SweepAxis::DecoderLayers => c.model.decoder_layers = value.parse().map_err(|_| bad("a count"))?,
            SweepAxis::LambdaCls => {
                if !mode.supervised() {
                    return Err(TrainError::Config(format!("lambda_cls has no effect in mode {mode}")));
                }
                c.loss.lambda_cls = Some(value.parse().map_err(|_| bad("a number"))?);
            }
            SweepAxis::Objectives => c.loss.objectives = Some(value.to_string()),
        }
        c.out_dir = base.out_dir.join(format!("{}={value}", self.name()));
        c.validate()?;
        Ok(c)
    }
}

impl FromStr for SweepAxis {
    type Err = TrainError;

    fn from_str(s: &str) -> TrainResult<Self> {
        Ok(match s {
            "mask_ratio" | "mask-ratio" => SweepAxis::MaskRatio,
            "decoder_layers" | "decoder-layers" => SweepAxis::DecoderLayers,
            "lambda_cls" | "lambda-cls" => SweepAxis::LambdaCls,
            "objectives" => SweepAxis::Objectives,
            _ => return Err(TrainError::Config(format!(
                "unknown sweep axis {s:?}; expected mask_ratio, decoder_layers, lambda_cls or objectives"
            ))),
        })
    }
}

/// One line of the sweep table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub mode: String,
    pub final_total: Option<f64>,
    pub probe_initial: Option<f64>,
    pub probe_final: Option<f64>,
    pub realized_gamma: Option<f64>,
    pub eval_acc: Option<f64>,
    pub eval_map: Option<f64>,
}

/// Runs every value with the base seed. All values are validated before
/// the first run starts.
pub fn run_ablation_sweep(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    ds: &Dataset,
    with_finetune: bool,
) -> TrainResult<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(TrainError::Config("sweep needs at least one value".into()));
    }
    let configs = values.iter().map(|v| axis.apply(base, v)).collect::<TrainResult<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(&configs) {
        log::info!("sweep {}={value}", axis.name());
        let pre = pretrain_on(cfg, ds, &PretrainOptions::default())?;
        let (eval_acc, eval_map) = if with_finetune {
            let ft = finetune_on(cfg, ds, EncoderInit::Model(&pre.model))?;
            ft.report.eval.map_or((None, None), |e| (e.accuracy, Some(e.map)))
        } else {
            (None, None)
        };
        rows.push(SweepRow {
            axis: axis.name().into(),
            value: value.clone(),
            mode: cfg.mode.clone(),
            final_total: pre.report.rows.last().and_then(|r| r.total),
            probe_initial: pre.report.probe_initial,
            probe_final: pre.report.probe_final,
            realized_gamma: pre.report.realized_gamma,
            eval_acc,
            eval_map,
        });
    }
    write_sweep(&base.out_dir.join(SWEEP_TABLE), &rows)?;
    Ok(rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> TrainResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
