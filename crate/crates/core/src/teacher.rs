//! Patch-aligned target features: a frozen, randomly initialized transformer
//! or per-patch features loaded from disk.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Archive;
use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::model::{sincos_2d, Block, Linear, ModelConfig, Session};
use crate::patching::{patchify, PATCH_DIM};
use crate::tensor::{ParamStore, Tape, Tensor};

const TEACHER_DIM: usize = 64;
const TEACHER_HEADS: usize = 4;
const TEACHER_BLOCKS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum TeacherKind {
    FrozenRandom,
    /// Directory holding one target file per clip, named after the clip stem.
    Precomputed(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSpec {
    pub kind: TeacherKind,
    pub feature_dim: usize,
    pub seed: u64,
    pub normalize: bool,
}

impl TeacherSpec {
    pub fn frozen_random(feature_dim: usize, seed: u64) -> Self {
        Self { kind: TeacherKind::FrozenRandom, feature_dim, seed, normalize: true }
    }

    /// Parses `frozen-random` or `file:<dir>`.
    pub fn parse(text: &str, feature_dim: usize, seed: u64) -> Result<Self> {
        let kind = match text {
            "frozen-random" | "frozen_random" => TeacherKind::FrozenRandom,
            _ => match text.strip_prefix("file:") {
                Some(p) if !p.is_empty() => TeacherKind::Precomputed(PathBuf::from(p)),
                _ => return Err(Error::Config(format!("unknown teacher {text:?}; use frozen-random or file:<dir>"))),
            },
        };
        Ok(Self { kind, feature_dim, seed, normalize: true })
    }

    pub fn check_against(&self, model: &ModelConfig) -> Result<()> {
        if self.feature_dim != model.head_out_dim {
            return Err(Error::Config(format!(
                "teacher feature dim {} differs from model head_out_dim {}",
                self.feature_dim, model.head_out_dim
            )));
        }
        Ok(())
    }
}

/// Frozen transformer over the full patch sequence. Its parameters live in a
/// private store that is never handed to an optimizer.
#[derive(Clone, Debug)]
pub struct FrozenTeacher {
    spec: TeacherSpec,
    store: ParamStore,
    embed: Linear,
    blocks: Vec<Block>,
    proj: Linear,
}

impl FrozenTeacher {
    pub fn new(spec: TeacherSpec) -> Result<Self> {
        if spec.feature_dim == 0 {
            return Err(Error::Config("teacher feature dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let std_in = 1.0 / (PATCH_DIM as f64).sqrt();
        let std_hidden = 1.0 / (TEACHER_DIM as f64).sqrt();
        let embed = Linear::new(&mut store, "teacher.embed", PATCH_DIM, TEACHER_DIM, std_in, &mut rng);
        let blocks = (0..TEACHER_BLOCKS)
            .map(|i| Block::new(&mut store, &format!("teacher.blocks.{i}"), TEACHER_DIM, TEACHER_HEADS, 4, std_hidden, &mut rng))
            .collect();
        let proj = Linear::new(&mut store, "teacher.proj", TEACHER_DIM, spec.feature_dim, std_hidden, &mut rng);
        Ok(Self { spec, store, embed, blocks, proj })
    }

    pub fn spec(&self) -> &TeacherSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// `N × d` targets for a grid-aligned spectrogram.
    pub fn targets(&self, spec: &MelSpectrogram) -> Result<Tensor> {
        let seq = patchify(spec)?;
        let tape = Tape::inference();
        let s = Session::new(&tape, &self.store, false);
        let pos = s.constant(sincos_2d(TEACHER_DIM, &seq.coords));
        let mut x = self.embed.forward(&s, s.constant(seq.features))?.add(&pos)?;
        for b in &self.blocks {
            x = b.forward(&s, x, None)?;
        }
        let t = self.proj.forward(&s, x)?.value();
        Ok(if self.spec.normalize { normalize_rows(t) } else { t })
    }
}

/// Scales every row to unit Euclidean norm; all-zero rows are left at zero.
pub fn normalize_rows(mut t: Tensor) -> Tensor {
    let cols = t.cols();
    for row in t.data_mut().chunks_mut(cols.max(1)) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    t
}

/// Writes an `N × d` target map in the archive format with a single block `T`.
pub fn save_targets(path: &Path, targets: &Tensor) -> Result<()> {
    if targets.shape().len() != 2 {
        return Err(Error::Contract(format!("targets must be a matrix, got shape {:?}", targets.shape())));
    }
    let mut a = Archive::new();
    a.set("kind", "targets");
    a.set("patches", targets.rows());
    a.set("dim", targets.cols());
    a.push("T", targets.clone());
    a.save(path)
}

pub fn load_precomputed_targets(path: &Path, expected_n: usize, d: usize) -> Result<Tensor> {
    let a = Archive::load(path)?;
    let kind = a.header_value("kind")?;
    if kind != "targets" {
        return Err(Error::Format(format!("{}: expected kind targets, found {kind}", path.display())));
    }
    let t = a.require("T")?;
    if t.shape() != [expected_n, d] {
        return Err(Error::Format(format!(
            "{}: expected targets {expected_n}x{d}, found {:?}",
            path.display(),
            t.shape()
        )));
    }
    if !t.all_finite() {
        return Err(Error::Format(format!("{}: non-finite target values", path.display())));
    }
    Ok(t.clone())
}

/// Either teacher source behind one call.
#[derive(Clone, Debug)]
pub enum Teacher {
    Frozen(FrozenTeacher),
    Files { dir: PathBuf, feature_dim: usize, normalize: bool },
}

impl Teacher {
    pub fn from_spec(spec: &TeacherSpec) -> Result<Self> {
        Ok(match &spec.kind {
            TeacherKind::FrozenRandom => Teacher::Frozen(FrozenTeacher::new(spec.clone())?),
            TeacherKind::Precomputed(dir) => {
                Teacher::Files { dir: dir.clone(), feature_dim: spec.feature_dim, normalize: spec.normalize }
            }
        })
    }

    /// Targets for the clip identified by `stem`, whose padded spectrogram is `spec`.
    pub fn targets(&self, stem: &str, spec: &MelSpectrogram) -> Result<Tensor> {
        match self {
            Teacher::Frozen(t) => t.targets(spec),
            Teacher::Files { dir, feature_dim, normalize } => {
                let n = (spec.frames / crate::patching::PATCH) * (spec.mels / crate::patching::PATCH);
                let t = load_precomputed_targets(&dir.join(format!("{stem}.targets")), n, *feature_dim)?;
                Ok(if *normalize { normalize_rows(t) } else { t })
            }
        }
    }
}
