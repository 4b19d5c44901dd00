//! Exit codes and the synth -> pretrain -> finetune -> eval path.

use std::path::Path;
use std::process::Command;

const CONFIG: &str = r#"
mode = "supmam"
out_dir = "runs"

[data]
manifest = "data/manifest.tsv"

[model]
embed_dim = 16
encoder_layers = 1
encoder_heads = 2
decoder_dim = 16
decoder_heads = 2
head_out_dim = 16
mlp_hidden = 16

[optim]
steps = 2
batch_size = 2

[finetune]
steps = 2
batch_size = 2

[synth]
clips_per_class = 5
clip_seconds = 0.5
"#;

fn mamlab(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_mamlab"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn end_to_end_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), CONFIG).unwrap();

    assert_eq!(mamlab(d, &["synth", "--config", "run.toml", "--out", "data"]).0, 0);
    assert_eq!(std::fs::read_to_string(d.join("data/manifest.tsv")).unwrap().lines().count(), 20);

    let (code, stdout) = mamlab(d, &["pretrain", "--config", "run.toml", "--out", "runs/pre"]);
    assert_eq!(code, 0, "{stdout}");
    assert!(stdout.contains("mode supmam steps 2"), "{stdout}");
    assert!(d.join("runs/pre/pretrain.ckpt").exists());

    let (code, _) = mamlab(d, &["finetune", "--config", "run.toml", "--out", "runs/ft", "--checkpoint", "runs/pre/pretrain.ckpt"]);
    assert_eq!(code, 0);
    let (code, stdout) = mamlab(d, &["eval", "--checkpoint", "runs/ft/finetune.ckpt", "--manifest", "data/manifest.tsv"]);
    assert_eq!(code, 0);
    assert!(stdout.starts_with("samples 4 "), "{stdout}");

    assert_eq!(mamlab(d, &["pretrain", "--config", "run.toml", "--mode", "mim"]).0, 2);
    assert_eq!(mamlab(d, &["pretrain", "--config", "run.toml", "--mode", "mam-clap", "--teacher", "none"]).0, 2);
    assert_eq!(mamlab(d, &["eval", "--checkpoint", "runs/pre/pretrain.ckpt", "--manifest", "data/manifest.tsv"]).0, 2);
    assert_eq!(mamlab(d, &["pretrain", "--config", "run.toml", "--manifest", "missing.tsv"]).0, 3);
    assert_eq!(mamlab(d, &["eval", "--checkpoint", "nowhere.ckpt", "--manifest", "data/manifest.tsv"]).0, 3);
}
