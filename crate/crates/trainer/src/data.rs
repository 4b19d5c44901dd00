//! Manifest parsing, feature extraction and the train/eval split.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use mamlab_core::dsp::{pad_to_grid, read_wav, LogMelExtractor, MelSpectrogram};
use mamlab_core::objectives::Label;
use mamlab_core::patching::{patchify, PatchSequence};

use crate::error::{TrainError, TrainResult};

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const THREADS_ENV: &str = "MAMLAB_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub labels: Vec<usize>,
}

impl ManifestEntry {
    pub fn stem(&self) -> String {
        self.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

/// Lines `path<TAB>l1,l2,...`; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str, base: &Path) -> TrainResult<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (path, labels) = line
            .split_once('\t')
            .ok_or_else(|| TrainError::Config(format!("manifest line {}: expected path<TAB>labels", n + 1)))?;
        let labels = labels
            .split(',')
            .map(|l| l.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| TrainError::Config(format!("manifest line {}: labels must be class indices", n + 1)))?;
        if labels.is_empty() {
            return Err(TrainError::Config(format!("manifest line {}: no labels", n + 1)));
        }
        let path = PathBuf::from(path);
        out.push(ManifestEntry { path: if path.is_relative() { base.join(path) } else { path }, labels });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> TrainResult<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Every fifth manifest line (index 4, 9, ...) is held out for evaluation.
pub fn is_eval_index(i: usize) -> bool {
    i % 5 == 4
}

/// Global spectrogram statistics of the training split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn of(specs: &[&MelSpectrogram]) -> TrainResult<Self> {
        let count: usize = specs.iter().map(|s| s.values.len()).sum();
        if count == 0 {
            return Err(TrainError::Other("input error: cannot compute statistics of an empty split".into()));
        }
        let mean = specs.iter().flat_map(|s| s.values.iter()).sum::<f64>() / count as f64;
        let var = specs.iter().flat_map(|s| s.values.iter()).map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
        Ok(Self { mean, std: var.sqrt().max(1e-8) })
    }
}

#[derive(Clone, Debug)]
pub struct Clip {
    pub stem: String,
    /// Normalized, grid-padded spectrogram.
    pub spec: MelSpectrogram,
    pub seq: PatchSequence,
    pub labels: Vec<usize>,
}

impl Clip {
    pub fn label(&self, num_classes: usize, multi: bool) -> Label {
        if multi {
            let mut v = vec![0.0; num_classes];
            for &l in &self.labels {
                v[l] = 1.0;
            }
            Label::Multi(v)
        } else {
            Label::Single(self.labels[0])
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Clip>,
    pub eval: Vec<Clip>,
    pub num_classes: usize,
    pub multi_label: bool,
    pub norm: NormStats,
}

impl Dataset {
    pub fn train_label(&self, i: usize) -> Label {
        self.train[i].label(self.num_classes, self.multi_label)
    }
}

/// Rayon pool sized by `MAMLAB_THREADS` (default: all cores).
pub fn thread_pool() -> TrainResult<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| TrainError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| TrainError::Other(e.to_string()))
}

/// Log-mel features of every manifest entry, padded to `target_frames`.
pub fn extract_features(entries: &[ManifestEntry], target_frames: usize) -> TrainResult<Vec<MelSpectrogram>> {
    let extractor = LogMelExtractor::new();
    let pool = thread_pool()?;
    pool.install(|| {
        entries
            .par_iter()
            .map(|e| -> TrainResult<MelSpectrogram> {
                let wave = read_wav(&e.path).map_err(|err| TrainError::Io(format!("{}: {err}", e.path.display())))?;
                let spec = extractor.compute(&wave.to_16k())?;
                Ok(pad_to_grid(&spec, target_frames)?)
            })
            .collect()
    })
}

/// Loads, splits and normalizes a manifest. Statistics come from the
/// training split unless `norm` is given (e.g. from a checkpoint).
pub fn load_dataset(manifest: &Path, target_frames: usize, norm: Option<NormStats>) -> TrainResult<Dataset> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(TrainError::Other(format!("input error: manifest {} lists no clips", manifest.display())));
    }
    let specs = extract_features(&entries, target_frames)?;
    let norm = match norm {
        Some(n) => n,
        None => {
            let train: Vec<&MelSpectrogram> =
                specs.iter().enumerate().filter(|(i, _)| !is_eval_index(*i)).map(|(_, s)| s).collect();
            NormStats::of(&train)?
        }
    };
    let num_classes = entries.iter().flat_map(|e| e.labels.iter()).max().map_or(0, |m| m + 1);
    let multi_label = entries.iter().any(|e| e.labels.len() != 1);
    let mut ds = Dataset { train: Vec::new(), eval: Vec::new(), num_classes, multi_label, norm };
    for (i, (entry, spec)) in entries.iter().zip(specs).enumerate() {
        let spec = spec.normalized(norm.mean, norm.std);
        let seq = patchify(&spec)?;
        let clip = Clip { stem: entry.stem(), spec, seq, labels: entry.labels.clone() };
        if is_eval_index(i) {
            ds.eval.push(clip);
        } else {
            ds.train.push(clip);
        }
    }
    log::info!(
        "loaded {} train / {} eval clips, {} classes{}",
        ds.train.len(),
        ds.eval.len(),
        num_classes,
        if multi_label { " (multi-label)" } else { "" }
    );
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parsing() {
        let text = "# clips\na.wav\t1\n\n/abs/b.wav\t0,2\n";
        let m = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(m[0], ManifestEntry { path: "/data/a.wav".into(), labels: vec![1] });
        assert_eq!(m[1].labels, vec![0, 2]);
        assert_eq!(m[1].stem(), "b");
        assert!(parse_manifest("a.wav 1\n", Path::new(".")).is_err());
        assert!(parse_manifest("a.wav\tx\n", Path::new(".")).is_err());
    }

    #[test]
    fn split_holds_out_every_fifth() {
        let eval: Vec<usize> = (0..15).filter(|&i| is_eval_index(i)).collect();
        assert_eq!(eval, vec![4, 9, 14]);
    }

    #[test]
    fn stats_are_population_moments() {
        let a = MelSpectrogram::new(1, 2, vec![1.0, 3.0]).unwrap();
        let b = MelSpectrogram::new(1, 2, vec![5.0, 7.0]).unwrap();
        let s = NormStats::of(&[&a, &b]).unwrap();
        assert_eq!(s.mean, 4.0);
        assert!((s.std - 5f64.sqrt()).abs() < 1e-15);
    }
}
