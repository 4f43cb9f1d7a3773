//! End-to-end tests of the command-line surface: exit codes, determinism,
//! and the predict/eval round trip. Everything runs on tiny phantoms so the
//! whole file stays fast.

use std::path::Path;
use std::process::{Command, Output};

fn bionet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bionet"))
}

fn run(args: &[&str]) -> Output {
    bionet().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tiny_phantom_args<'a>(dir: &'a str, train: &'a str, test: &'a str) -> Vec<&'a str> {
    vec![
        "phantom",
        "--out",
        dir,
        "--train",
        train,
        "--test",
        test,
        "--height",
        "32",
        "--width",
        "32",
        "--num-layers",
        "4",
        "--choroid-class",
        "2",
        "--min-band",
        "2",
        "--choroid-min",
        "6",
        "--choroid-max",
        "12",
        "--seed",
        "7",
    ]
}

fn hash_dir(dir: &Path) -> Vec<(String, u64)> {
    let mut entries = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(current) = stack.pop() {
        for entry in std::fs::read_dir(&current).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                let mut hash = 1469598103934665603u64;
                for b in bytes {
                    hash ^= b as u64;
                    hash = hash.wrapping_mul(1099511628211);
                }
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                entries.push((rel, hash));
            }
        }
    }
    entries.sort();
    entries
}

#[test]
fn phantom_writes_split_counts_and_is_deterministic() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = dir_a.path().to_str().unwrap();
    let b = dir_b.path().to_str().unwrap();
    assert_ok(&run(&tiny_phantom_args(a, "4", "2")));
    assert_ok(&run(&tiny_phantom_args(b, "4", "2")));

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir_a.path().join("manifest.json")).unwrap())
            .unwrap();
    let samples = manifest["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 6);
    let train_count = samples
        .iter()
        .filter(|s| s["split"] == "train")
        .count();
    assert_eq!(train_count, 4);

    assert_eq!(hash_dir(dir_a.path()), hash_dir(dir_b.path()));
}

#[test]
fn phantom_rejects_too_small_height() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "phantom",
        "--out",
        dir.path().to_str().unwrap(),
        "--train",
        "1",
        "--test",
        "1",
        "--height",
        "15",
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("height >= 16"), "stderr: {stderr}");
}

#[test]
fn train_bionet_without_bio_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_ok(&run(&tiny_phantom_args(data.to_str().unwrap(), "2", "1")));
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--mode",
        "bionet",
        "--out",
        dir.path().join("model").to_str().unwrap(),
        "--epochs",
        "1",
        "--base-width",
        "4",
        "--depth",
        "2",
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--bio"), "stderr: {stderr}");
}

#[test]
fn train_rejects_an_unfrozen_bio_checkpoint() {
    use bionet_core::nn::{build_bio_net, checkpoint::save_bio, NetworkConfig};
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_ok(&run(&tiny_phantom_args(data.to_str().unwrap(), "2", "1")));

    // A checkpoint that was never frozen.
    let net = build_bio_net(
        &NetworkConfig {
            in_channels: 1,
            out_channels: 1,
            base_width: 4,
            depth: 2,
            bio_head_width: 8,
        },
        0,
    )
    .unwrap();
    let ckpt = dir.path().join("unfrozen.ckpt");
    save_bio(&ckpt, &net, "stage1-bio").unwrap();

    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--bio",
        ckpt.to_str().unwrap(),
        "--mode",
        "bionet",
        "--out",
        dir.path().join("model").to_str().unwrap(),
        "--epochs",
        "1",
        "--base-width",
        "4",
        "--depth",
        "2",
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("frozen"), "stderr: {stderr}");
}

#[test]
fn unet_mode_trains_without_bio_and_round_trips_through_predict_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    let preds = dir.path().join("preds");
    assert_ok(&run(&tiny_phantom_args(data.to_str().unwrap(), "4", "2")));

    assert_ok(&run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--mode",
        "unet",
        "--out",
        model.to_str().unwrap(),
        "--epochs",
        "2",
        "--base-width",
        "4",
        "--depth",
        "2",
        "--seed",
        "3",
    ]));
    assert!(model.join("bundle.json").exists());
    assert!(model.join("trainlog.csv").exists());

    let eval_model = run(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
    ]);
    assert_ok(&eval_model);
    let direct = String::from_utf8_lossy(&eval_model.stdout).into_owned();

    assert_ok(&run(&[
        "predict",
        "--data",
        data.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
    ]));
    let eval_pred = run(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--pred",
        preds.to_str().unwrap(),
    ]);
    assert_ok(&eval_pred);
    let via_masks = String::from_utf8_lossy(&eval_pred.stdout).into_owned();
    assert_eq!(direct, via_masks, "metrics differ between model and written masks");
}

#[test]
fn eval_of_the_ground_truth_masks_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_ok(&run(&tiny_phantom_args(data.to_str().unwrap(), "1", "2")));
    // The dataset's own mask files are a perfect "prediction".
    let out = run(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--pred",
        data.join("masks").to_str().unwrap(),
    ]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let row = stdout.lines().nth(1).unwrap();
    assert_eq!(row, "100.00,0.00,100.00,100.00,100.00");
}

#[test]
fn eval_requires_exactly_one_source() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_ok(&run(&tiny_phantom_args(data.to_str().unwrap(), "1", "1")));
    let out = run(&["eval", "--data", data.to_str().unwrap()]);
    assert!(!out.status.success());
}
