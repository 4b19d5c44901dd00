//! Training losses and their per-mode combination.
//!
//! Every loss has a tape version (returning a scalar [`Var`]) used for
//! training. [`combine`] holds the single coefficient table shared by
//! [`total_loss`] and [`total_loss_var`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Floor on the per-patch variance used to standardize reconstruction targets.
pub const PATCH_VAR_FLOOR: f64 = 1e-6;
pub const DEFAULT_TAU: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Mam,
    MamClap,
    SupMam,
    SupMamClap,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Mam, Mode::MamClap, Mode::SupMam, Mode::SupMamClap];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Mam => "mam",
            Mode::MamClap => "mam-clap",
            Mode::SupMam => "supmam",
            Mode::SupMamClap => "supmam-clap",
        }
    }

    /// Distillation against teacher targets instead of patch reconstruction.
    pub fn uses_teacher(self) -> bool {
        matches!(self, Mode::MamClap | Mode::SupMamClap)
    }

    pub fn supervised(self) -> bool {
        matches!(self, Mode::SupMam | Mode::SupMamClap)
    }

    pub fn default_lambda(self) -> f64 {
        match self {
            Mode::Mam | Mode::MamClap => 0.0,
            Mode::SupMam => 0.01,
            Mode::SupMamClap => 1e-4,
        }
    }

    pub fn default_mask_ratio(self) -> f64 {
        match self {
            Mode::MamClap => 0.2,
            Mode::Mam | Mode::SupMam | Mode::SupMamClap => 0.4,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.to_ascii_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        Ok(match key.as_str() {
            "mam" => Mode::Mam,
            "mamclap" => Mode::MamClap,
            "supmam" => Mode::SupMam,
            "supmamclap" => Mode::SupMamClap,
            _ => return Err(Error::Config(format!("unknown mode {s:?}; expected mam, mam-clap, supmam or supmam-clap"))),
        })
    }
}

/// Which of a mode's terms enter the total. The default for every mode is
/// all of them; dropping one is only meaningful for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectiveSet {
    /// Reconstruction (MAM, SupMAM) or target distillation (the CLAP modes).
    pub primary: bool,
    pub cls: bool,
}

impl ObjectiveSet {
    pub fn for_mode(mode: Mode) -> Self {
        Self { primary: true, cls: mode.supervised() }
    }
}

impl FromStr for ObjectiveSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rec" | "target" => Self { primary: true, cls: false },
            "cls" => Self { primary: false, cls: true },
            "rec+cls" | "target+cls" => Self { primary: true, cls: true },
            _ => return Err(Error::Config(format!("unknown objective set {s:?}; expected rec, cls or rec+cls"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub tau: f64,
    pub mode: Mode,
    pub objectives: ObjectiveSet,
}

impl LossWeights {
    pub fn new(mode: Mode, lambda_cls: f64, tau: f64) -> Result<Self> {
        let w = Self { lambda_cls, tau, mode, objectives: ObjectiveSet::for_mode(mode) };
        w.validate()?;
        Ok(w)
    }

    pub fn for_mode(mode: Mode) -> Self {
        Self::new(mode, mode.default_lambda(), DEFAULT_TAU).expect("mode defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda_cls >= 0.0 && self.lambda_cls.is_finite()) {
            return Err(Error::Config(format!("lambda_cls must be nonnegative, got {}", self.lambda_cls)));
        }
        if !self.mode.supervised() && self.objectives.cls {
            return Err(Error::Config(format!("mode {} has no classification branch", self.mode)));
        }
        if !self.objectives.primary && !self.objectives.cls {
            return Err(Error::Config("objective set is empty".into()));
        }
        Ok(())
    }

    /// Whether the classification branch is evaluated at all.
    pub fn needs_cls(&self) -> bool {
        self.mode.supervised() && self.objectives.cls
    }

    pub fn needs_target(&self) -> bool {
        self.mode.uses_teacher() && self.objectives.primary
    }

    pub fn needs_recon(&self) -> bool {
        !self.mode.uses_teacher() && self.objectives.primary
    }
}

/// Per-batch scalar loss values. Terms a mode does not use are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub target_term: Option<f64>,
    pub cls_term: Option<f64>,
    pub recon_term: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the total from the stored terms.
    pub fn recombined(&self, w: &LossWeights) -> Result<f64> {
        total_loss(Components { target: self.target_term, cls: self.cls_term, recon: self.recon_term }, w)
            .map(|b| b.total)
    }
}

/// Loss terms produced by a forward pass; generic over scalars and tape handles.
#[derive(Clone, Copy, Debug, Default)]
pub struct Components<T> {
    pub target: Option<T>,
    pub cls: Option<T>,
    pub recon: Option<T>,
}

/// Coefficients `(target, recon, cls)` after checking that every needed term is present.
fn combine<T>(c: &Components<T>, w: &LossWeights) -> Result<(f64, f64, f64)> {
    w.validate()?;
    let need = |present: bool, name: &str| {
        if present {
            Ok(())
        } else {
            Err(Error::Config(format!("mode {} needs the {name} term", w.mode)))
        }
    };
    let (mut wt, mut wr, mut wc) = (0.0, 0.0, 0.0);
    if w.needs_target() {
        need(c.target.is_some(), "target")?;
        wt = 1.0;
    }
    if w.needs_recon() {
        need(c.recon.is_some(), "reconstruction")?;
        wr = 1.0;
    }
    if w.needs_cls() {
        need(c.cls.is_some(), "classification")?;
        wc = w.lambda_cls;
    }
    Ok((wt, wr, wc))
}

pub fn total_loss(c: Components<f64>, w: &LossWeights) -> Result<LossBreakdown> {
    let (wt, wr, wc) = combine(&c, w)?;
    let keep = |v: Option<f64>, on: bool| if on { v } else { None };
    let target_term = keep(c.target, w.needs_target());
    let recon_term = keep(c.recon, w.needs_recon());
    let cls_term = keep(c.cls, w.needs_cls());
    let total = wt * target_term.unwrap_or(0.0) + wr * recon_term.unwrap_or(0.0) + wc * cls_term.unwrap_or(0.0);
    Ok(LossBreakdown { target_term, cls_term, recon_term, total })
}

/// Tape version of [`total_loss`]; the returned breakdown holds the term values.
pub fn total_loss_var<'t>(c: Components<Var<'t>>, w: &LossWeights) -> Result<(Var<'t>, LossBreakdown)> {
    let (wt, wr, wc) = combine(&c, w)?;
    let mut terms: Vec<Var<'t>> = Vec::new();
    let mut add = |v: Option<Var<'t>>, weight: f64, on: bool| -> Option<f64> {
        let v = v.filter(|_| on)?;
        terms.push(if weight == 1.0 { v } else { v.scale(weight) });
        Some(v.item())
    };
    let target_term = add(c.target, wt, w.needs_target());
    let recon_term = add(c.recon, wr, w.needs_recon());
    let cls_term = add(c.cls, wc, w.needs_cls());
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(t)?;
    }
    let values = total_loss(Components { target: target_term, cls: cls_term, recon: recon_term }, w)?;
    Ok((total, values))
}

fn squared_error_sum<'t>(y: Var<'t>, t: &Tensor) -> Result<Var<'t>> {
    if y.shape() != t.shape() {
        return Err(Error::Contract(format!("prediction {:?} vs target {:?}", y.shape(), t.shape())));
    }
    let d = y.sub(&y_const(y, t))?;
    Ok(d.mul(&d)?.sum())
}

fn y_const<'t>(y: Var<'t>, t: &Tensor) -> Var<'t> {
    y.tape().constant(t.clone())
}

/// `(1/l_v)·Σ‖Y_v − T_v‖² + (1/l_m)·Σ‖Y_m − T_m‖²`, the masked term dropped when `l_m = 0`.
pub fn target_loss<'t>(y_v: Var<'t>, t_v: &Tensor, y_m: Var<'t>, t_m: &Tensor) -> Result<Var<'t>> {
    let l_v = y_v.shape().first().copied().unwrap_or(0);
    let l_m = y_m.shape().first().copied().unwrap_or(0);
    if l_v == 0 {
        return Err(Error::Contract("target loss needs at least one visible row".into()));
    }
    let visible = squared_error_sum(y_v, t_v)?.scale(1.0 / l_v as f64);
    if l_m == 0 {
        if t_m.rows() != 0 {
            return Err(Error::Contract(format!("0 masked predictions but {} masked targets", t_m.rows())));
        }
        return Ok(visible);
    }
    visible.add(&squared_error_sum(y_m, t_m)?.scale(1.0 / l_m as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Single(usize),
    /// One 0/1 target per class.
    Multi(Vec<f64>),
}

/// Mean over the batch of softmax cross-entropy of `logits/τ`, or mean
/// binary cross-entropy of `sigmoid(logits/τ)` for multi-label targets.
pub fn classification_loss<'t>(logits: Var<'t>, tau: f64, labels: &[Label]) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::Contract(format!("logits {:?} for {} labels", shape, labels.len())));
    }
    let (batch, classes) = (shape[0], shape[1]);
    let z = logits.scale(1.0 / tau);
    let tape = logits.tape();
    match &labels[0] {
        Label::Single(_) => {
            let mut onehot = vec![0.0; batch * classes];
            for (b, l) in labels.iter().enumerate() {
                match l {
                    Label::Single(y) if *y < classes => onehot[b * classes + y] = 1.0,
                    Label::Single(y) => {
                        return Err(Error::Input(format!("label {y} out of range for {classes} classes")))
                    }
                    Label::Multi(_) => return Err(Error::Input("mixed single- and multi-label targets".into())),
                }
            }
            let y = tape.constant(Tensor::matrix(batch, classes, onehot)?);
            Ok(z.log_softmax()?.mul(&y)?.sum().scale(-1.0 / batch as f64))
        }
        Label::Multi(_) => {
            let mut targets = Vec::with_capacity(batch * classes);
            for l in labels {
                match l {
                    Label::Multi(v) if v.len() == classes && v.iter().all(|&x| x == 0.0 || x == 1.0) => {
                        targets.extend_from_slice(v)
                    }
                    Label::Multi(v) => {
                        return Err(Error::Input(format!("multi-label target {v:?} is not a 0/1 vector of {classes}")))
                    }
                    Label::Single(_) => return Err(Error::Input("mixed single- and multi-label targets".into())),
                }
            }
            let y = tape.constant(Tensor::matrix(batch, classes, targets)?);
            // BCE(sigmoid(z), y) = softplus(z) − y·z
            z.softplus().sub(&z.mul(&y)?)?.mean()
        }
    }
}

/// Standardizes each row to zero mean and unit variance, flooring the variance.
pub fn normalize_patches(patches: &Tensor) -> Tensor {
    let cols = patches.cols();
    let mut out = patches.clone();
    for row in out.data_mut().chunks_mut(cols.max(1)) {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let std = var.max(PATCH_VAR_FLOOR).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
    out
}

/// Mean squared error between predictions and per-patch standardized targets.
pub fn reconstruction_loss<'t>(pred_m: Var<'t>, patches_m: &Tensor) -> Result<Var<'t>> {
    if patches_m.rows() == 0 {
        return Err(Error::Contract("reconstruction loss needs at least one masked patch (gamma > 0)".into()));
    }
    if pred_m.shape() != patches_m.shape() {
        return Err(Error::Contract(format!("prediction {:?} vs patches {:?}", pred_m.shape(), patches_m.shape())));
    }
    let target = normalize_patches(patches_m);
    let d = pred_m.sub(&y_const(pred_m, &target))?;
    d.mul(&d)?.mean()
}
