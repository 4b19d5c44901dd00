//! Run configuration, read from TOML and overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mamlab_core::model::ModelConfig;
use mamlab_core::objectives::{LossWeights, Mode, ObjectiveSet, DEFAULT_TAU};
use mamlab_core::teacher::TeacherSpec;

use crate::error::{TrainError, TrainResult};
use crate::synth::{LabelMode, SynthDatasetSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub attention_window: usize,
    pub attention_shift: usize,
    pub head_out_dim: usize,
    pub num_classes: usize,
    pub mlp_hidden: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self::from(&ModelConfig::default())
    }
}

impl From<&ModelConfig> for ModelSection {
    fn from(c: &ModelConfig) -> Self {
        Self {
            embed_dim: c.embed_dim,
            encoder_layers: c.encoder_layers,
            encoder_heads: c.encoder_heads,
            decoder_dim: c.decoder_dim,
            decoder_layers: c.decoder_layers,
            decoder_heads: c.decoder_heads,
            attention_window: c.attention_window,
            attention_shift: c.attention_shift,
            head_out_dim: c.head_out_dim,
            num_classes: c.num_classes,
            mlp_hidden: c.mlp_hidden,
            mlp_ratio: c.mlp_ratio,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            encoder_layers: self.encoder_layers,
            encoder_heads: self.encoder_heads,
            decoder_dim: self.decoder_dim,
            decoder_layers: self.decoder_layers,
            decoder_heads: self.decoder_heads,
            attention_window: self.attention_window,
            attention_shift: self.attention_shift,
            head_out_dim: self.head_out_dim,
            num_classes: self.num_classes,
            mlp_hidden: self.mlp_hidden,
            mlp_ratio: self.mlp_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Manifest of `path<TAB>labels` lines; relative paths resolve against its directory.
    pub manifest: PathBuf,
    /// Spectrogram length after padding or truncation; a multiple of 16.
    pub target_frames: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { manifest: PathBuf::from("data/manifest.tsv"), target_frames: 208 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    /// Defaults to the mode's value when absent.
    pub lambda_cls: Option<f64>,
    pub tau: f64,
    /// `rec`, `cls` or `rec+cls`; defaults to every term of the mode.
    pub objectives: Option<String>,
}

impl Default for LossSection {
    fn default() -> Self {
        Self { lambda_cls: None, tau: DEFAULT_TAU, objectives: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Save an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            batch_size: 8,
            steps: 1000,
            warmup_fraction: 0.05,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_fraction: f64,
    pub time_mask_ratio: f64,
    pub freq_mask_ratio: f64,
    pub tau: f64,
    /// Evaluate on the held-out split every this many steps (and at the end).
    pub eval_every: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            steps: 500,
            warmup_fraction: 0.05,
            time_mask_ratio: 0.2,
            freq_mask_ratio: 0.2,
            tau: 1.0,
            eval_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub clip_seconds: f64,
    pub label_mode: LabelMode,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthDatasetSpec::default();
        Self {
            num_classes: s.num_classes,
            clips_per_class: s.clips_per_class,
            clip_seconds: s.clip_seconds,
            label_mode: s.label_mode,
            seed: s.seed,
        }
    }
}

impl SynthSection {
    pub fn to_spec(&self) -> SynthDatasetSpec {
        SynthDatasetSpec {
            num_classes: self.num_classes,
            clips_per_class: self.clips_per_class,
            clip_seconds: self.clip_seconds,
            label_mode: self.label_mode,
            seed: self.seed,
        }
    }
}

/// Everything a pretraining, fine-tuning or sweep run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Unstructured pretraining mask ratio; defaults to the mode's value.
    pub mask_ratio: Option<f64>,
    /// `frozen-random`, `file:<dir>` or `none`.
    pub teacher: String,
    pub teacher_seed: u64,
    pub teacher_normalize: bool,
    /// Write elapsed seconds into the metrics CSV. Off by default so that
    /// reruns produce identical files.
    pub log_wall_clock: bool,
    pub model: ModelSection,
    pub data: DataSection,
    pub loss: LossSection,
    pub optim: OptimSection,
    pub finetune: FinetuneSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: "supmam-clap".into(),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            mask_ratio: None,
            teacher: "frozen-random".into(),
            teacher_seed: 1234,
            teacher_normalize: true,
            log_wall_clock: false,
            model: ModelSection::default(),
            data: DataSection::default(),
            loss: LossSection::default(),
            optim: OptimSection::default(),
            finetune: FinetuneSection::default(),
            synth: SynthSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> TrainResult<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> TrainResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        let mut c = Self::from_toml(&text)?;
        if c.data.manifest.is_relative() {
            if let Some(dir) = path.parent() {
                c.data.manifest = dir.join(&c.data.manifest);
            }
        }
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn mode(&self) -> TrainResult<Mode> {
        self.mode.parse().map_err(TrainError::from)
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.to_model_config()
    }

    pub fn mask_ratio(&self) -> TrainResult<f64> {
        Ok(self.mask_ratio.unwrap_or(self.mode()?.default_mask_ratio()))
    }

    pub fn loss_weights(&self) -> TrainResult<LossWeights> {
        let mode = self.mode()?;
        let mut w = LossWeights::new(mode, self.loss.lambda_cls.unwrap_or(mode.default_lambda()), self.loss.tau)?;
        if let Some(set) = &self.loss.objectives {
            w.objectives = set.parse::<ObjectiveSet>()?;
            w.validate()?;
        }
        Ok(w)
    }

    /// Teacher source, or `None` when the run has no teacher.
    pub fn teacher_spec(&self) -> TrainResult<Option<TeacherSpec>> {
        if self.teacher == "none" {
            return Ok(None);
        }
        let mut spec = TeacherSpec::parse(&self.teacher, self.model.head_out_dim, self.teacher_seed)?;
        spec.normalize = self.teacher_normalize;
        Ok(Some(spec))
    }

    pub fn validate(&self) -> TrainResult<()> {
        let mode = self.mode()?;
        self.model_config().validate()?;
        let w = self.loss_weights()?;
        let gamma = self.mask_ratio()?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(TrainError::Config(format!("mask_ratio must lie in [0, 1), got {gamma}")));
        }
        if w.needs_recon() && gamma == 0.0 {
            return Err(TrainError::Config(format!("mode {mode} reconstructs masked patches and needs mask_ratio > 0")));
        }
        match self.teacher_spec()? {
            None if w.needs_target() => {
                return Err(TrainError::Config(format!("mode {mode} needs a teacher; set teacher = \"frozen-random\" or \"file:<dir>\"")))
            }
            Some(t) => t.check_against(&self.model_config())?,
            None => {}
        }
        let o = &self.optim;
        if o.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(o.lr > 0.0) || !(self.finetune.lr > 0.0) {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.warmup_fraction) || !(0.0..1.0).contains(&self.finetune.warmup_fraction) {
            return Err(TrainError::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        for (name, r) in [("time_mask_ratio", self.finetune.time_mask_ratio), ("freq_mask_ratio", self.finetune.freq_mask_ratio)] {
            if !(0.0..1.0).contains(&r) {
                return Err(TrainError::Config(format!("{name} must lie in [0, 1), got {r}")));
            }
        }
        if !(self.finetune.tau > 0.0) {
            return Err(TrainError::Config("finetune.tau must be positive".into()));
        }
        if self.data.target_frames == 0 || self.data.target_frames % 16 != 0 {
            return Err(TrainError::Config(format!(
                "data.target_frames must be a positive multiple of 16, got {}",
                self.data.target_frames
            )));
        }
        Ok(())
    }
}
