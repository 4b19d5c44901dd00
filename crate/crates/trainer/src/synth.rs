//! Synthetic classification corpus: four families of sound events whose
//! spectral signatures differ by construction.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mamlab_core::dsp::{write_wav_pcm16, Waveform, SAMPLE_RATE};

use crate::data::MANIFEST_NAME;
use crate::error::{TrainError, TrainResult};
use crate::seeds::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Single,
    Multi,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDatasetSpec {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub clip_seconds: f64,
    pub label_mode: LabelMode,
    pub seed: u64,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        Self { num_classes: 4, clips_per_class: 50, clip_seconds: 2.0, label_mode: LabelMode::Single, seed: 0 }
    }
}

/// Event family of class `k`; classes beyond four reuse a family with shifted parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    ToneBand,
    Chirp,
    NoiseBurst,
    AmTone,
}

impl EventKind {
    pub fn of_class(k: usize) -> Self {
        [EventKind::ToneBand, EventKind::Chirp, EventKind::NoiseBurst, EventKind::AmTone][k % 4]
    }
}

impl SynthDatasetSpec {
    pub fn validate(&self) -> TrainResult<()> {
        if self.num_classes == 0 || self.clips_per_class == 0 {
            return Err(TrainError::Config("synthetic set needs at least one class and one clip per class".into()));
        }
        if !(self.clip_seconds >= 0.05 && self.clip_seconds <= 60.0) {
            return Err(TrainError::Config(format!("clip_seconds {} outside [0.05, 60]", self.clip_seconds)));
        }
        if self.label_mode == LabelMode::Multi && self.num_classes < 2 {
            return Err(TrainError::Config("multi-label sets need at least two classes".into()));
        }
        Ok(())
    }

    pub fn total_clips(&self) -> usize {
        self.num_classes * self.clips_per_class
    }

    /// Samples and active classes of clip `index`. Single-label clip `i`
    /// belongs to class `i % num_classes`.
    pub fn clip(&self, index: usize) -> (Vec<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0x5e7, index as u64, 0));
        let len = (self.clip_seconds * SAMPLE_RATE as f64).round() as usize;
        let classes = match self.label_mode {
            LabelMode::Single => vec![index % self.num_classes],
            LabelMode::Multi => {
                let mut c: Vec<usize> = (0..self.num_classes).filter(|_| rng.gen_bool(0.5)).collect();
                if c.is_empty() {
                    c.push(index % self.num_classes);
                }
                c
            }
        };
        let mut samples: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.01..0.01)).collect();
        let gain = 1.0 / classes.len() as f64;
        for &k in &classes {
            let amp = rng.gen_range(0.3..0.6) * gain;
            add_event(&mut samples, k, amp, &mut rng);
        }
        (samples, classes)
    }
}

fn add_event(out: &mut [f64], class: usize, amp: f64, rng: &mut ChaCha8Rng) {
    let sr = SAMPLE_RATE as f64;
    let variant = (class / 4) as f64;
    let n = out.len();
    match EventKind::of_class(class) {
        EventKind::ToneBand => {
            let f = rng.gen_range(400.0..700.0) * (1.0 + variant);
            let phase = rng.gen_range(0.0..2.0 * PI);
            for (i, s) in out.iter_mut().enumerate() {
                *s += amp * (2.0 * PI * f * i as f64 / sr + phase).sin();
            }
        }
        EventKind::Chirp => {
            let f0 = rng.gen_range(1800.0..2200.0) + 500.0 * variant;
            let f1 = rng.gen_range(4500.0..5500.0) + 500.0 * variant;
            let dur = n as f64 / sr;
            for (i, s) in out.iter_mut().enumerate() {
                let t = i as f64 / sr;
                *s += amp * (2.0 * PI * (f0 * t + 0.5 * (f1 - f0) / dur * t * t)).sin();
            }
        }
        EventKind::NoiseBurst => {
            let burst = (rng.gen_range(0.08..0.15) * sr) as usize;
            let period = (rng.gen_range(0.25..0.35) / (1.0 + variant) * sr) as usize;
            let offset = rng.gen_range(0..period.max(1));
            for (i, s) in out.iter_mut().enumerate() {
                if (i + offset) % period < burst {
                    *s += amp * rng.gen_range(-1.0..1.0);
                }
            }
        }
        EventKind::AmTone => {
            let carrier = rng.gen_range(1100.0..1300.0) * (1.0 + 0.5 * variant);
            let rate = rng.gen_range(4.0..8.0);
            for (i, s) in out.iter_mut().enumerate() {
                let t = i as f64 / sr;
                let env = 0.5 * (1.0 + (2.0 * PI * rate * t).sin());
                *s += amp * env * (2.0 * PI * carrier * t).sin();
            }
        }
    }
}

/// Writes `clip_NNNN.wav` files and the manifest into `dir`; returns the manifest path.
pub fn generate_synth_dataset(spec: &SynthDatasetSpec, dir: &Path) -> TrainResult<std::path::PathBuf> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| TrainError::Io(format!("{}: {e}", dir.display())))?;
    let mut manifest = String::new();
    for i in 0..spec.total_clips() {
        let (samples, classes) = spec.clip(i);
        let name = format!("clip_{i:04}.wav");
        let wave = Waveform::new(samples, SAMPLE_RATE)?;
        write_wav_pcm16(dir.join(&name), &wave)?;
        let labels: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
        manifest.push_str(&format!("{name}\t{}\n", labels.join(",")));
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
    log::info!("wrote {} clips to {}", spec.total_clips(), dir.display());
    Ok(path)
}
