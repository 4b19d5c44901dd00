//! Batch-level pretraining objective: forward every sample, form the mode's
//! loss terms and combine them.

use crate::error::{Error, Result};
use crate::model::{HeadSelection, PretrainModel, Session};
use crate::objectives::{
    classification_loss, reconstruction_loss, target_loss, total_loss_var, Components, Label, LossBreakdown, LossWeights,
};
use crate::patching::{split_targets, MaskPlan, PatchSequence};
use crate::tensor::{Tensor, Var};

/// One clip prepared for a pretraining step.
#[derive(Clone, Copy, Debug)]
pub struct PretrainItem<'a> {
    pub seq: &'a PatchSequence,
    pub plan: &'a MaskPlan,
    /// Teacher targets `N × d`; required by the distillation modes.
    pub targets: Option<&'a Tensor>,
    /// Required by the supervised modes.
    pub label: Option<&'a Label>,
}

/// Target and reconstruction terms are averaged over the batch; the
/// classification term is the batch-mean cross-entropy.
pub fn pretrain_objective<'t>(
    model: &PretrainModel,
    s: &Session<'t>,
    items: &[PretrainItem<'_>],
    weights: &LossWeights,
) -> Result<(Var<'t>, LossBreakdown)> {
    if items.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let heads = HeadSelection { target: weights.needs_target(), recon: weights.needs_recon() };
    let scale = 1.0 / items.len() as f64;
    let mut target_terms = Vec::new();
    let mut recon_terms = Vec::new();
    let mut latents = Vec::new();
    let mut labels = Vec::new();
    for item in items {
        let out = model.forward_sample(s, item.seq, item.plan, heads)?;
        if let Some(y) = out.y {
            let t = item.targets.ok_or_else(|| Error::Config(format!("mode {} needs teacher targets", weights.mode)))?;
            let (t_v, t_m) = split_targets(t, item.plan)?;
            let y_v = y.gather_rows(&item.plan.visible)?;
            let y_m = y.gather_rows(&item.plan.masked)?;
            target_terms.push(target_loss(y_v, &t_v, y_m, &t_m)?);
        }
        if let Some(r) = out.recon {
            let pred_m = r.gather_rows(&item.plan.masked)?;
            let patches_m = item.seq.features.gather_rows(&item.plan.masked)?;
            recon_terms.push(reconstruction_loss(pred_m, &patches_m)?);
        }
        if weights.needs_cls() {
            latents.push(out.z_v);
            labels.push(item.label.cloned().ok_or_else(|| Error::Config(format!("mode {} needs labels", weights.mode)))?);
        }
    }
    let batch_mean = |terms: Vec<Var<'t>>| -> Result<Option<Var<'t>>> {
        let mut it = terms.into_iter();
        let Some(mut acc) = it.next() else { return Ok(None) };
        for t in it {
            acc = acc.add(&t)?;
        }
        Ok(Some(acc.scale(scale)))
    };
    let cls = if weights.needs_cls() {
        let logits = model.cls_head.classify(s, &latents)?;
        Some(classification_loss(logits, weights.tau, &labels)?)
    } else {
        None
    };
    let components = Components { target: batch_mean(target_terms)?, cls, recon: batch_mean(recon_terms)? };
    total_loss_var(components, weights)
}
