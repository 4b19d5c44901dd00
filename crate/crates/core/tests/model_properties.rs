//! End-to-end gradient check of the pretraining objective and model-level
//! properties that need more than one module.

use mamlab_core::model::{check_model_gradients, HeadSelection, ModelConfig, PretrainModel, Session};
use mamlab_core::objectives::{Label, LossWeights, Mode};
use mamlab_core::patching::{sample_unstructured_mask, MaskPlan, PatchGrid, PatchSequence, PATCH_DIM};
use mamlab_core::pipeline::{pretrain_objective, PretrainItem};
use mamlab_core::teacher::normalize_rows;
use mamlab_core::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grad_config() -> ModelConfig {
    ModelConfig {
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
    }
}

fn random_seq(grid: PatchGrid, rng: &mut ChaCha8Rng) -> PatchSequence {
    let data = (0..grid.len() * PATCH_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    PatchSequence { grid, features: Tensor::matrix(grid.len(), PATCH_DIM, data).unwrap(), coords: grid.coords() }
}

struct Batch {
    seqs: Vec<PatchSequence>,
    plans: Vec<MaskPlan>,
    targets: Vec<Tensor>,
    labels: Vec<Label>,
}

fn batch(size: usize, grid: PatchGrid, gamma: f64, d: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs = (0..size).map(|_| random_seq(grid, &mut rng)).collect();
    let plans = (0..size).map(|i| sample_unstructured_mask(grid.len(), gamma, seed * 100 + i as u64).unwrap()).collect();
    let targets = (0..size)
        .map(|_| normalize_rows(Tensor::matrix(grid.len(), d, (0..grid.len() * d).map(|_| rng.gen()).collect()).unwrap()))
        .collect();
    let labels = (0..size).map(|i| Label::Single(i % 3)).collect();
    Batch { seqs, plans, targets, labels }
}

fn items(b: &Batch) -> Vec<PretrainItem<'_>> {
    (0..b.seqs.len())
        .map(|i| PretrainItem { seq: &b.seqs[i], plan: &b.plans[i], targets: Some(&b.targets[i]), label: Some(&b.labels[i]) })
        .collect()
}

#[test]
fn full_supmam_clap_objective_matches_finite_differences() {
    let model = PretrainModel::new(grad_config(), 3).unwrap();
    let b = batch(3, PatchGrid::new(4, 8), 0.4, 8, 1);
    // A large weight keeps the classification path visible to the check.
    let w = LossWeights::new(Mode::SupMamClap, 0.5, 10.0).unwrap();
    let report = check_model_gradients(&model.store, true, 1e-6, |s| {
        pretrain_objective(&model, s, &items(&b), &w).map(|(l, _)| l)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
    assert!(report.checked > 5000);
}

#[test]
fn every_mode_reaches_the_mask_token() {
    for mode in Mode::ALL {
        let model = PretrainModel::new(grad_config(), 4).unwrap();
        let b = batch(2, PatchGrid::new(4, 8), 0.4, 8, 2);
        let tape = Tape::new();
        let s = Session::new(&tape, &model.store, true);
        let (loss, breakdown) = pretrain_objective(&model, &s, &items(&b), &LossWeights::for_mode(mode)).unwrap();
        let mut g = loss.backward().unwrap();
        let grads = s.params.grads(&mut g);
        let token = grads[model.decoder.mask_token.0].as_ref().expect("mask token gradient");
        assert!(token.iter().any(|v| *v != 0.0), "{mode}");
        assert_eq!(breakdown.recon_term.is_some(), !mode.uses_teacher(), "{mode}");
        assert_eq!(breakdown.target_term.is_some(), mode.uses_teacher(), "{mode}");
        assert_eq!(breakdown.cls_term.is_some(), mode.supervised(), "{mode}");
    }
}

#[test]
fn projection_head_gradient_matches_finite_differences() {
    let model = PretrainModel::new(grad_config(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = Tensor::matrix(5, 8, (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let w = Tensor::matrix(5, 8, (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let err = mamlab_core::tensor::check_gradient(
        |tape, v| {
            let s = Session::new(tape, &model.store, false);
            Ok(model.head.forward(&s, v)?.mul(&tape.constant(w.clone()))?.sum())
        },
        &z,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn duplicating_visible_rows_leaves_eval_logits_unchanged() {
    let model = PretrainModel::new(grad_config(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = Tensor::matrix(4, 8, (0..32).map(|_| rng.gen()).collect()).unwrap();
    let doubled = z.gather_rows(&[0, 1, 2, 3, 0, 1, 2, 3]).unwrap();
    let tape = Tape::inference();
    let s = Session::new(&tape, &model.store, false);
    let a = model.cls_head.classify(&s, &[s.constant(z)]).unwrap().value();
    let b = model.cls_head.classify(&s, &[s.constant(doubled)]).unwrap().value();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12));

    let same = Tensor::matrix(3, 8, [0.5; 8].repeat(3)).unwrap();
    let pooled = s.constant(same).mean_rows().unwrap().value();
    assert!(pooled.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
}

#[test]
fn row_counts_follow_the_plan_for_every_gamma() {
    let model = PretrainModel::new(grad_config(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let grid = PatchGrid::new(4, 8);
    let seq = random_seq(grid, &mut rng);
    for gamma in [0.0, 0.2, 0.4, 0.8, 0.97] {
        let plan = sample_unstructured_mask(32, gamma, 3).unwrap();
        let tape = Tape::inference();
        let s = Session::new(&tape, &model.store, false);
        let out = model.forward_sample(&s, &seq, &plan, HeadSelection { target: true, recon: true }).unwrap();
        assert_eq!(out.z_v.shape(), vec![plan.visible.len(), 8]);
        assert_eq!(out.y.unwrap().shape(), vec![32, 8]);
        assert_eq!(plan.visible.len() + plan.masked.len(), 32);
    }
}

#[test]
fn gamma_zero_inserts_no_mask_tokens() {
    let model = PretrainModel::new(grad_config(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let grid = PatchGrid::new(4, 8);
    let seq = random_seq(grid, &mut rng);
    let plan = MaskPlan::none(32);
    let tape = Tape::new();
    let s = Session::new(&tape, &model.store, true);
    let out = model.forward_sample(&s, &seq, &plan, HeadSelection { target: true, recon: false }).unwrap();
    let mut g = out.y.unwrap().sum().backward().unwrap();
    let grads = s.params.grads(&mut g);
    assert!(grads[model.decoder.mask_token.0].is_none());
}
