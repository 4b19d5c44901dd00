//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any failed.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mamlab_core::dsp::{floor_value, log_mel_spectrogram, pad_to_grid, Waveform};
use mamlab_core::model::{check_model_gradients_sampled, ModelConfig, PretrainModel};
use mamlab_core::objectives::{
    classification_loss, reconstruction_loss, target_loss, Label, LossBreakdown, LossWeights, Mode,
};
use mamlab_core::patching::{
    patchify, sample_structured_mask, sample_unstructured_mask, scatter_back, split_targets, PatchGrid, PatchSequence,
    PATCH_DIM,
};
use mamlab_core::pipeline::{pretrain_objective, PretrainItem};
use mamlab_core::teacher::{normalize_rows, Teacher};
use mamlab_core::tensor::{check_gradient, check_gradients, Tape, Tensor, Var};
use mamlab_trainer::checkpoint::load_finetune;
use mamlab_trainer::data::{load_dataset, Dataset};
use mamlab_trainer::finetune::{evaluate, evaluate_model, finetune_on, predict, EncoderInit};
use mamlab_trainer::metrics::mean_average_precision;
use mamlab_trainer::pretrain::{pretrain_on, PretrainOptions, PretrainOutcome, PRETRAIN_METRICS};
use mamlab_trainer::synth::{generate_synth_dataset, SynthDatasetSpec};
use mamlab_trainer::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const DESCENT_STEPS: usize = 300;
const DESCENT_BATCH: usize = 4;
const FINETUNE_STEPS: usize = 60;
const FINETUNE_BATCH: usize = 4;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    manifest: PathBuf,
    ds: Dataset,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().to_path_buf();
        let manifest = generate_synth_dataset(&SynthDatasetSpec::default(), &root.join("data")).expect("synth");
        let ds = load_dataset(&manifest, RunConfig::default().data.target_frames, None).expect("dataset");
        Fixture { _dir: dir, root, manifest, ds }
    })
}

fn base_config(mode: Mode, seed: u64, out: &Path) -> RunConfig {
    let mut c = RunConfig { mode: mode.name().to_string(), seed, out_dir: out.to_path_buf(), ..RunConfig::default() };
    c.data.manifest = fixture().manifest.clone();
    c.optim.steps = DESCENT_STEPS;
    c.optim.batch_size = DESCENT_BATCH;
    c.finetune.steps = FINETUNE_STEPS;
    c.finetune.batch_size = FINETUNE_BATCH;
    c.finetune.eval_every = 0;
    c
}

struct ModeRuns {
    runs: HashMap<(Mode, u64), (RunConfig, PretrainOutcome)>,
    elapsed: Duration,
}

fn mode_runs() -> &'static ModeRuns {
    static R: OnceLock<ModeRuns> = OnceLock::new();
    R.get_or_init(|| {
        let f = fixture();
        let started = Instant::now();
        let mut runs = HashMap::new();
        for mode in Mode::ALL {
            for seed in SEEDS {
                let cfg = base_config(mode, seed, &f.root.join(format!("descent/{}_{seed}", mode.name())));
                let out = pretrain_on(&cfg, &f.ds, &PretrainOptions::default()).expect("pretraining run");
                runs.insert((mode, seed), (cfg, out));
            }
        }
        ModeRuns { runs, elapsed: started.elapsed() }
    })
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn scaled(mut t: Tensor, k: f64) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v *= k);
    t
}

fn project<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> mamlab_core::Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&y.shape(), &mut rng);
    y.mul(&tape.constant(w)).map(|v| v.sum())
}

type Primitive = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> mamlab_core::Result<Var<'t>>>;

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, Primitive)> {
    fn p(f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> mamlab_core::Result<Var<'t>> + 'static) -> Primitive {
        Box::new(f)
    }
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], p(|_, v| v[0].add(&v[1]))),
        ("sub", vec![vec![3, 4], vec![3, 4]], p(|_, v| v[0].sub(&v[1]))),
        ("mul", vec![vec![3, 4], vec![3, 4]], p(|_, v| v[0].mul(&v[1]))),
        ("add_row", vec![vec![3, 4], vec![4]], p(|_, v| v[0].add_row(&v[1]))),
        ("matmul", vec![vec![2, 5], vec![5, 3]], p(|_, v| v[0].matmul(&v[1]))),
        ("transpose", vec![vec![3, 5]], p(|_, v| v[0].transpose())),
        ("reshape", vec![vec![3, 4]], p(|_, v| v[0].reshape(&[2, 6]))),
        ("scale", vec![vec![3, 4]], p(|_, v| Ok(v[0].scale(-2.5)))),
        ("slice_cols", vec![vec![3, 6]], p(|_, v| v[0].slice_cols(2, 3))),
        ("gather_rows", vec![vec![4, 3]], p(|_, v| v[0].gather_rows(&[3, 0, 3, 1]))),
        ("concat", vec![vec![2, 3], vec![1, 3]], p(|_, v| Var::concat(v, 0))),
        ("sum", vec![vec![3, 4]], p(|_, v| Ok(v[0].sum()))),
        ("mean", vec![vec![3, 4]], p(|_, v| v[0].mean())),
        ("mean_rows", vec![vec![5, 3]], p(|_, v| v[0].mean_rows())),
        ("relu", vec![vec![4, 5]], p(|_, v| Ok(v[0].relu()))),
        ("gelu", vec![vec![4, 5]], p(|_, v| Ok(v[0].gelu()))),
        ("softplus", vec![vec![4, 5]], p(|_, v| Ok(v[0].softplus()))),
        ("softmax", vec![vec![3, 5]], p(|_, v| v[0].softmax())),
        ("log_softmax", vec![vec![3, 5]], p(|_, v| v[0].log_softmax())),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], p(|_, v| v[0].layer_norm(&v[1], &v[2], 1e-5))),
        (
            "batch_norm",
            vec![vec![5, 4], vec![4], vec![4]],
            p(|_, v| Ok(v[0].batch_norm(&v[1], &v[2], &[0.0; 4], &[1.0; 4], 1e-5, 0.1, true)?.0)),
        ),
    ]
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = (0.0f64, "none".to_string());
    let mut note = |name: &str, e: f64| {
        if e > worst.0 {
            worst = (e, name.to_string());
        }
    };
    for (name, shapes, f) in primitives() {
        for _ in 0..3 {
            let pts: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            note(name, check_gradients(|t, v| project(t, f(t, v)?, 5), &pts, 1e-6).map_err(err)?);
        }
    }

    let (tv, tm) = (random(&[4, 3], &mut rng), random(&[2, 3], &mut rng));
    let pts = [random(&[4, 3], &mut rng), random(&[2, 3], &mut rng)];
    note("target loss", check_gradients(|_, v| target_loss(v[0], &tv, v[1], &tm), &pts, 1e-6).map_err(err)?);
    let logits = random(&[3, 5], &mut rng);
    let single = [Label::Single(1), Label::Single(4), Label::Single(0)];
    let multi: Vec<Label> = (0..3).map(|b| Label::Multi((0..5).map(|c| ((b + c) % 2) as f64).collect())).collect();
    for tau in [1.0, 10.0] {
        note("classification loss", check_gradient(|_, v| classification_loss(v, tau, &single), &logits, 1e-6).map_err(err)?);
        note("multi-label loss", check_gradient(|_, v| classification_loss(v, tau, &multi), &logits, 1e-6).map_err(err)?);
    }
    let patches = random(&[2, PATCH_DIM], &mut rng);
    let pred = random(&[2, PATCH_DIM], &mut rng);
    note("reconstruction loss", check_gradient(|_, v| reconstruction_loss(v, &patches), &pred, 1e-6).map_err(err)?);
    let primitive_ok = worst.0 < 1e-4;

    let config = ModelConfig { num_classes: 4, ..ModelConfig::default() };
    let model = PretrainModel::new(config.clone(), 21).map_err(err)?;
    let grid = PatchGrid::new(4, 8);
    let seqs: Vec<PatchSequence> = (0..2)
        .map(|_| PatchSequence {
            grid,
            features: scaled(random(&[grid.len(), PATCH_DIM], &mut rng), 0.5),
            coords: grid.coords(),
        })
        .collect();
    let targets: Vec<Tensor> =
        (0..2).map(|_| normalize_rows(random(&[grid.len(), config.head_out_dim], &mut rng))).collect();
    let plans: Vec<_> = (0..2).map(|i| sample_unstructured_mask(grid.len(), 0.4, 70 + i).unwrap()).collect();
    let labels = [Label::Single(0), Label::Single(3)];
    let items: Vec<PretrainItem> = (0..2)
        .map(|i| PretrainItem { seq: &seqs[i], plan: &plans[i], targets: Some(&targets[i]), label: Some(&labels[i]) })
        .collect();
    // A large weight keeps the classification path visible to the check.
    let w = LossWeights::new(Mode::SupMamClap, 0.5, 10.0).map_err(err)?;
    let report = check_model_gradients_sampled(&model.store, true, 1e-6, Some(6), |s| {
        pretrain_objective(&model, s, &items, &w).map(|(l, _)| l)
    })
    .map_err(err)?;
    let elapsed = started.elapsed();
    check(
        primitive_ok && report.max_rel_error < 1e-3 && elapsed < Duration::from_secs(120),
        format!(
            "primitives+losses max rel err {:.2e} ({}); full objective {:.2e} over {} coords ({}); {:.1}s",
            worst.0,
            worst.1,
            report.max_rel_error,
            report.checked,
            report.worst_param,
            elapsed.as_secs_f64()
        ),
    )
}

fn mask_algebra() -> Outcome {
    let n = 512;
    for gamma in [0.0, 0.2, 0.4, 0.8] {
        let want = (gamma * n as f64).floor() as usize;
        for seed in 0..1000 {
            let plan = sample_unstructured_mask(n, gamma, seed).map_err(err)?;
            let mut seen = vec![0u8; n];
            for &i in plan.visible.iter().chain(&plan.masked) {
                seen[i] += 1;
            }
            if plan.masked.len() != want || plan.visible.len() + plan.masked.len() != n || seen.iter().any(|&c| c != 1) {
                return Err(format!("gamma {gamma} seed {seed}: |v|={} |m|={}", plan.visible.len(), plan.masked.len()));
            }
        }
    }
    let grid = PatchGrid::new(64, 8);
    for seed in 0..1000 {
        let plan = sample_structured_mask(grid, 0.2, 0.2, seed).map_err(err)?;
        if plan.masked.len() != 148 {
            return Err(format!("structured seed {seed}: |m|={}", plan.masked.len()));
        }
    }
    Ok("4000 unstructured plans partition 512 patches with |m|=floor(gamma*512); 1000 structured plans mask 148".into())
}

fn dsp_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<f64> = (0..160_000).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let spec = log_mel_spectrogram(&Waveform::new(samples.clone(), 16_000).map_err(err)?).map_err(err)?;
    let padded = pad_to_grid(&spec, 1024).map_err(err)?;
    let seq = patchify(&padded).map_err(err)?;
    let shape_ok = (spec.frames, padded.frames, padded.mels) == (998, 1024, 128) && seq.grid == PatchGrid::new(64, 8);
    let silence = log_mel_spectrogram(&Waveform::new(vec![0.0; 16_000], 16_000).map_err(err)?).map_err(err)?;
    let floor = floor_value();
    let silence_ok = silence.values.iter().all(|&v| v == floor);
    let short = &samples[..32_000];
    let base = log_mel_spectrogram(&Waveform::new(short.to_vec(), 16_000).map_err(err)?).map_err(err)?;
    let mut worst = 0.0f64;
    for c in [0.05, 0.5, 3.0, 17.0] {
        let scaled = log_mel_spectrogram(&Waveform::new(short.iter().map(|s| s * c).collect(), 16_000).map_err(err)?)
            .map_err(err)?;
        for (x, y) in base.values.iter().zip(&scaled.values) {
            if *x > floor && *y > floor {
                worst = worst.max((y - x - 2.0 * f64::ln(c)).abs());
            }
        }
    }
    check(
        shape_ok && silence_ok && worst < 1e-9,
        format!(
            "{} native frames -> {}x{}; silence at floor: {silence_ok}; max scaling deviation {worst:.1e}",
            spec.frames, padded.frames, padded.mels
        ),
    )
}

fn recombine_row(fields: &csv::StringRecord, w: &LossWeights) -> Result<(f64, f64), String> {
    let get = |i: usize| -> Result<Option<f64>, String> {
        let s = fields.get(i).ok_or("short row")?;
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<f64>().map(Some).map_err(err)
        }
    };
    let b = LossBreakdown { target_term: get(2)?, cls_term: get(3)?, recon_term: get(4)?, total: get(5)?.ok_or("no total")? };
    Ok((b.total, b.recombined(w).map_err(err)?))
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tape = Tape::new();
    let (tv, tm) = (random(&[6, 4], &mut rng), random(&[3, 4], &mut rng));
    let zero = target_loss(tape.constant(tv.clone()), &tv, tape.constant(tm.clone()), &tm).map_err(err)?.item();
    let mut off = tm.clone();
    off.data_mut()[5] += 1e-3;
    let nonzero = target_loss(tape.constant(tv.clone()), &tv, tape.constant(off), &tm).map_err(err)?.item();
    let identity_ok = zero == 0.0 && nonzero > 0.0;

    let mut argmax_ok = true;
    for _ in 0..100 {
        let z = random(&[1, 7], &mut rng);
        let argmax = |t: &Tensor| t.data().iter().enumerate().fold(0, |b, (i, v)| if *v > t.data()[b] { i } else { b });
        let raw = argmax(&z);
        for tau in [0.1, 1.0, 10.0] {
            let tape = Tape::inference();
            let p = tape.constant(scaled(z.clone(), 1.0 / tau)).softmax().map_err(err)?.value();
            argmax_ok &= argmax(&p) == raw;
        }
    }

    let runs = mode_runs();
    let mut worst = 0.0f64;
    let mut rows = 0usize;
    for (cfg, out) in runs.runs.values() {
        let w = cfg.loss_weights().map_err(err)?;
        let mut reader = csv::Reader::from_path(cfg.out_dir.join(PRETRAIN_METRICS)).map_err(err)?;
        for rec in reader.records() {
            let (total, again) = recombine_row(&rec.map_err(err)?, &w)?;
            worst = worst.max((total - again).abs());
            rows += 1;
        }
        for b in &out.report.breakdowns {
            worst = worst.max((b.recombined(&w).map_err(err)? - b.total).abs());
        }
    }
    check(
        identity_ok && argmax_ok && worst <= 1e-12 && rows > 0,
        format!(
            "zero iff equal: {identity_ok}; argmax tau-invariant over 100 vectors: {argmax_ok}; {rows} logged rows recombine within {worst:.1e}"
        ),
    )
}

/// Average precision by direct enumeration: for each positive, count the
/// items scored at least as high and the positives among them.
fn brute_force_map(scores: &[[f64; 2]], labels: &[[bool; 2]]) -> Option<f64> {
    let mut aps = Vec::new();
    for c in 0..2 {
        let pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i][c]).collect();
        if pos.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for &i in &pos {
            let above = (0..scores.len()).filter(|&j| scores[j][c] >= scores[i][c]).count();
            let hits = pos.iter().filter(|&&j| scores[j][c] >= scores[i][c]).count();
            sum += hits as f64 / above as f64;
        }
        aps.push(sum / pos.len() as f64);
    }
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

fn map_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for pattern in 0u32..64 {
        for _ in 0..20 {
            let scores: Vec<[f64; 2]> = (0..6).map(|_| [rng.gen(), rng.gen()]).collect();
            let labels: Vec<[bool; 2]> =
                (0..6).map(|i| [pattern >> i & 1 == 1, (pattern.reverse_bits() >> 26) >> i & 1 == 0]).collect();
            let s = Tensor::matrix(6, 2, scores.iter().flatten().copied().collect()).unwrap();
            let l = Tensor::matrix(6, 2, labels.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
            match (mean_average_precision(&s, &l), brute_force_map(&scores, &labels)) {
                (Ok(got), Some(want)) => worst = worst.max((got - want).abs()),
                (Err(_), None) => {}
                (got, want) => return Err(format!("pattern {pattern}: {got:?} vs oracle {want:?}")),
            }
            cases += 1;
        }
    }
    check(worst <= 1e-12, format!("{cases} cases, max deviation {worst:.1e}"))
}

fn mode_descent() -> Outcome {
    let runs = mode_runs();
    let mut lines = Vec::new();
    let mut ok = true;
    for mode in Mode::ALL {
        let mut parts = Vec::new();
        for seed in SEEDS {
            let r = &runs.runs[&(mode, seed)].1.report;
            let (a, b) = (r.probe_initial.unwrap_or(f64::NAN), r.probe_final.unwrap_or(f64::NAN));
            ok &= b < a;
            parts.push(format!("{a:.4}->{b:.4}"));
        }
        lines.push(format!("{} [{}]", mode.name(), parts.join(" ")));
    }
    let secs = runs.elapsed.as_secs_f64();
    check(ok && secs < 300.0, format!("{}; {secs:.0}s for 12 runs", lines.join("; ")))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn pretraining_benefit() -> Outcome {
    let f = fixture();
    let runs = mode_runs();
    let (mut scratch, mut full, mut rec_only) = (Vec::new(), Vec::new(), Vec::new());
    let acc = |cfg: &RunConfig, init: EncoderInit| -> Result<f64, String> {
        let out = finetune_on(cfg, &f.ds, init).map_err(err)?;
        out.report.eval.and_then(|e| e.accuracy).ok_or_else(|| "no eval accuracy".to_string())
    };
    for seed in SEEDS {
        let (cfg, pre) = &runs.runs[&(Mode::SupMam, seed)];
        let mut ft = cfg.clone();
        ft.out_dir = f.root.join(format!("benefit/scratch_{seed}"));
        scratch.push(acc(&ft, EncoderInit::Scratch)?);
        ft.out_dir = f.root.join(format!("benefit/full_{seed}"));
        full.push(acc(&ft, EncoderInit::Model(&pre.model))?);

        let mut rec = cfg.clone();
        rec.loss.objectives = Some("rec".into());
        rec.out_dir = f.root.join(format!("benefit/rec_pre_{seed}"));
        let rec_pre = pretrain_on(&rec, &f.ds, &PretrainOptions::default()).map_err(err)?;
        ft.out_dir = f.root.join(format!("benefit/rec_{seed}"));
        rec_only.push(acc(&ft, EncoderInit::Model(&rec_pre.model))?);
    }
    let detail = format!(
        "eval acc per seed {SEEDS:?}: scratch {scratch:?}, rec+cls {full:?}, rec-only {rec_only:?}; medians {:.3} / {:.3} / {:.3}",
        median(scratch.clone()),
        median(full.clone()),
        median(rec_only.clone())
    );
    let (s, p, r) = (median(scratch), median(full), median(rec_only));
    check(p >= s && p >= r, detail)
}

fn determinism() -> Outcome {
    let f = fixture();
    let run = |tag: &str| -> Result<(Vec<u8>, Vec<u8>, PathBuf, Tensor), String> {
        let mut cfg = base_config(Mode::SupMamClap, 9, &f.root.join(format!("det/{tag}")));
        cfg.optim.steps = 20;
        cfg.finetune.steps = 10;
        cfg.finetune.eval_every = 5;
        let pre = pretrain_on(&cfg, &f.ds, &PretrainOptions::default()).map_err(err)?;
        let ft = finetune_on(&cfg, &f.ds, EncoderInit::Model(&pre.model)).map_err(err)?;
        let probs = predict(&ft.model, &f.ds.eval, false).map_err(err)?;
        let a = std::fs::read(cfg.out_dir.join(PRETRAIN_METRICS)).map_err(err)?;
        let b = std::fs::read(cfg.out_dir.join("finetune_metrics.csv")).map_err(err)?;
        Ok((a, b, ft.checkpoint, probs))
    };
    let (pa, fa, ckpt, probs) = run("a")?;
    let (pb, fb, _, _) = run("b")?;
    let csv_ok = pa == pb && fa == fb;

    let (_, loaded, _) = load_finetune(&ckpt).map_err(err)?;
    let again = predict(&loaded, &f.ds.eval, false).map_err(err)?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let before = evaluate_model(&loaded, &f.ds.eval, false).map_err(err)?;
    let after = evaluate(&ckpt, &f.manifest).map_err(err)?;
    let ckpt_ok = bits(&probs) == bits(&again)
        && before.accuracy.map(f64::to_bits) == after.accuracy.map(f64::to_bits)
        && before.map.to_bits() == after.map.to_bits();
    check(
        csv_ok && ckpt_ok,
        format!("rerun CSVs identical: {csv_ok}; reloaded checkpoint scores and metrics bit-identical: {ckpt_ok}"),
    )
}

fn teacher_contract() -> Outcome {
    let f = fixture();
    let (cfg, out) = &mode_runs().runs[&(Mode::MamClap, SEEDS[0])];
    let spec = cfg.teacher_spec().map_err(err)?.ok_or("no teacher")?;
    let fresh = Teacher::from_spec(&spec).map_err(err)?;
    let clip = &f.ds.train[0];
    let reference = fresh.targets(&clip.stem, &clip.spec).map_err(err)?;
    let n = clip.seq.grid.len();
    let mut same = true;
    for seed in 0..20 {
        let plan = sample_unstructured_mask(n, [0.2, 0.4, 0.8][seed as usize % 3], seed).map_err(err)?;
        let t = fresh.targets(&clip.stem, &clip.spec).map_err(err)?;
        let (tv, tm) = split_targets(&t, &plan).map_err(err)?;
        same &= scatter_back(&tv, &tm, &plan).map_err(err)? == reference;
    }
    let params_same = match (&fresh, out.teacher.as_ref()) {
        (Teacher::Frozen(a), Some(Teacher::Frozen(b))) => a.params().iter().zip(b.params().iter()).all(|((_, x), (_, y))| {
            x.name == y.name && x.value.data().iter().zip(y.value.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        }),
        _ => false,
    };
    check(
        same && params_same,
        format!("targets identical across 20 plans: {same}; teacher parameters unchanged by 300 steps: {params_same}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("mask algebra", mask_algebra),
        ("DSP contract", dsp_contract),
        ("loss identities", loss_identities),
        ("mAP oracle equivalence", map_oracle),
        ("mode descent", mode_descent),
        ("pretraining benefit trend", pretraining_benefit),
        ("determinism and persistence", determinism),
        ("teacher contract", teacher_contract),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let (tag, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{}] {name}: {detail} ({:.1}s)", i + 1, started.elapsed().as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
