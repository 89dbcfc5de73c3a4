use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asymgan"))
        .args(args)
        .env_remove("ASYMGAN_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert_eq!(
        code(&out),
        0,
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn tiny_data(root: &Path) -> PathBuf {
    let dir = root.join("data");
    ok(&["gen-data", "--size", "16", "--train", "4", "--val", "2", "--seed", "3", "--out", s(&dir)]);
    dir
}

const TINY: [&str; 10] = [
    "--image-size",
    "16",
    "--base-channels",
    "4",
    "--n-res-blocks",
    "2",
    "--batch-size",
    "2",
    "--pool-size",
    "4",
];

fn train_tiny(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend(TINY);
    args.extend(extra);
    run(&args)
}

fn last_checkpoint(run_dir: &Path) -> PathBuf {
    let mut list: Vec<PathBuf> = fs::read_dir(run_dir.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    list.sort();
    list.pop().unwrap()
}

#[test]
fn gen_data_writes_manifest_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tiny_data(tmp.path());
    assert!(dir.join("manifest.json").exists());
    let run_manifest = json(&dir.join("run_manifest.json"));
    assert_eq!(run_manifest["command"], "gen-data");
    assert_eq!(run_manifest["dataset_manifest_sha256"].as_str().unwrap().len(), 64);

    let before = fs::read(dir.join("manifest.json")).unwrap();
    let photo = fs::read(dir.join("train_x/00000.png")).unwrap();
    let again = run(&["gen-data", "--size", "16", "--train", "4", "--val", "2", "--seed", "3", "--out", s(&dir)]);
    assert_eq!(code(&again), 1);
    ok(&["gen-data", "--size", "16", "--train", "4", "--val", "2", "--seed", "3", "--out", s(&dir), "--force"]);
    assert_eq!(fs::read(dir.join("manifest.json")).unwrap(), before);
    assert_eq!(fs::read(dir.join("train_x/00000.png")).unwrap(), photo);
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(code(&run(&["gen-data", "--size", "4", "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["gen-data", "--bogus"])), 2);
    assert_eq!(code(&run(&["train", "--data", s(&out)])), 2);
    let bad_set = run(&["train", "--data", s(&out), "--out", s(&out), "--set", "lambda12=1"]);
    assert_eq!(code(&bad_set), 2);
    let bad_lambda = run(&["train", "--data", s(&out), "--out", s(&out), "--lambda", "1,2,3"]);
    assert_eq!(code(&bad_lambda), 2);
    let threads = Command::new(env!("CARGO_BIN_EXE_asymgan"))
        .args(["gen-data", "--out", s(&out)])
        .env("ASYMGAN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&threads), 2);
}

#[test]
fn train_resolves_defaults_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let run_dir = tmp.path().join("ext");
    let out = train_tiny(&data, &run_dir, &["--mode", "asym-ext", "--max-steps", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = json(&run_dir.join("run_manifest.json"));
    let resolved = &m["config"]["resolved"];
    let lambdas: Vec<f64> = (1..=9)
        .map(|i| resolved[format!("lambda{i}")].as_str().unwrap().parse().unwrap())
        .collect();
    assert_eq!(lambdas, [1.0, 10.0, 10.0, 10.0, 1.0, 1.0, 0.2, 0.1, 10.0]);
    assert_eq!(resolved["lr_g"], "0.0002");
    assert_eq!(m["checkpoints"].as_array().unwrap().len(), 1);
    assert!(run_dir.join("losses.csv").exists());

    // A second run into the same directory needs --force.
    assert_eq!(code(&train_tiny(&data, &run_dir, &["--max-steps", "1"])), 1);

    let asym = tmp.path().join("asym");
    let out = train_tiny(&data, &asym, &["--mode", "asym", "--set", "lambda4=0", "--max-steps", "1"]);
    assert_eq!(code(&out), 0);
    let resolved = &json(&asym.join("run_manifest.json"))["config"]["resolved"];
    assert_eq!(resolved["mode"], "asym_no_ext");
    assert_eq!(resolved["lambda4"], "0");
    assert_eq!(resolved["lambda2"], "10");
    assert_eq!(resolved["lambda9"], "0");
}

#[test]
fn config_file_sits_below_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let file = tmp.path().join("run.cfg");
    fs::write(&file, "# smoke settings\nmode=asym\nseed=5\nlambda3 = 2\n").unwrap();
    let run_dir = tmp.path().join("r");
    let out = train_tiny(
        &data,
        &run_dir,
        &["--config-file", s(&file), "--seed", "9", "--max-steps", "1"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = &json(&run_dir.join("run_manifest.json"))["config"]["resolved"];
    assert_eq!(resolved["mode"], "asym_no_ext");
    assert_eq!(resolved["seed"], "9");
    assert_eq!(resolved["lambda3"], "2");
}

#[test]
fn resume_continues_the_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let full = tmp.path().join("full");
    let args = ["--seed", "4", "--max-steps", "4", "--checkpoint-every", "2"];
    assert_eq!(code(&train_tiny(&data, &full, &args)), 0);
    let mid = full.join("checkpoints/step_00000002.ckpt");
    let resumed = tmp.path().join("resumed");
    ok(&["train", "--data", s(&data), "--out", s(&resumed), "--resume", s(&mid)]);
    assert_eq!(
        fs::read(last_checkpoint(&full)).unwrap(),
        fs::read(last_checkpoint(&resumed)).unwrap()
    );
    let rows = |dir: &Path| -> Vec<String> {
        fs::read_to_string(dir.join("losses.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .filter(|l| !l.starts_with("0,") && !l.starts_with("1,"))
            .map(String::from)
            .collect()
    };
    assert_eq!(rows(&full), rows(&resumed));

    let changed = run(&["train", "--data", s(&data), "--out", s(&resumed), "--resume", s(&mid), "--seed", "1"]);
    assert_eq!(code(&changed), 2);
}

#[test]
fn nonfinite_training_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let run_dir = tmp.path().join("boom");
    let out = train_tiny(&data, &run_dir, &["--lr-g", "1e30", "--lr-d", "1e30", "--max-steps", "6"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("diagnostic.ckpt").exists());
}

#[test]
fn infer_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let run_dir = tmp.path().join("ext");
    assert_eq!(code(&train_tiny(&data, &run_dir, &["--max-steps", "1"])), 0);
    let ckpt = last_checkpoint(&run_dir);
    let label = data.join("val/00000_label.png");
    let photo = data.join("train_x/00000.png");

    let sample = |out: &Path| {
        ok(&[
            "infer", "--checkpoint", s(&ckpt), "--config", "sample", "--input", s(&label), "--seed", "3", "--out",
            s(out),
        ]);
        let mut files: Vec<PathBuf> = fs::read_dir(out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        files.sort();
        files.iter().map(|f| fs::read(f).unwrap()).collect::<Vec<_>>()
    };
    let a = sample(&tmp.path().join("s1"));
    assert!(!a.is_empty());
    assert_eq!(a, sample(&tmp.path().join("s2")));

    let out = tmp.path().join("enc");
    let missing_ref = run(&["infer", "--checkpoint", s(&ckpt), "--config", "encode", "--input", s(&label), "--out", s(&out)]);
    assert_eq!(code(&missing_ref), 2);
    ok(&[
        "infer", "--checkpoint", s(&ckpt), "--config", "encode", "--input", s(&label), "--ref-image", s(&photo),
        "--out", s(&out),
    ]);

    let out = tmp.path().join("interp");
    ok(&[
        "infer", "--checkpoint", s(&ckpt), "--config", "interpolate", "--input", s(&label), "--steps", "5", "--out",
        s(&out),
    ]);
    let frames = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().contains("_frame_"))
        .count();
    assert_eq!(frames, 5);

    let out = tmp.path().join("fwd");
    ok(&["infer", "--checkpoint", s(&ckpt), "--config", "forward", "--input", s(&photo), "--out", s(&out)]);
    assert!(out.join("run_manifest.json").exists());

    let missing = run(&[
        "infer", "--checkpoint", s(&tmp.path().join("nope.ckpt")), "--config", "forward", "--input", s(&photo),
        "--out", s(&out),
    ]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn probe_eval_and_ablate_emit_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let base = tmp.path().join("base");
    let ext = tmp.path().join("ext");
    assert_eq!(code(&train_tiny(&data, &base, &["--mode", "baseline", "--max-steps", "1"])), 0);
    assert_eq!(code(&train_tiny(&data, &ext, &["--max-steps", "1"])), 0);
    let (base_ckpt, ext_ckpt) = (last_checkpoint(&base), last_checkpoint(&ext));

    let out = tmp.path().join("probe");
    ok(&[
        "probe", "--baseline", s(&base_ckpt), "--asym", s(&ext_ckpt), "--data", s(&data), "--kind", "disturb",
        "--epsilon", "0.01", "--out", s(&out),
    ]);
    let p = json(&out.join("probe.json"));
    assert_eq!(p["spec"]["kind"], "disturb");
    assert!(p["forward_degradation"]["asym"].is_number());
    assert_eq!(p["baseline"]["forward"].as_array().unwrap().len(), 2);
    let bad_crop = run(&[
        "probe", "--baseline", s(&base_ckpt), "--asym", s(&ext_ckpt), "--data", s(&data), "--kind", "crop",
        "--crop-size", "40", "--out", s(&out),
    ]);
    assert_eq!(code(&bad_crop), 2);

    let out = tmp.path().join("eval");
    ok(&[
        "eval", "--checkpoint", s(&ext_ckpt), "--data", s(&data), "--proxy-epochs", "1", "--samples", "2", "--out",
        s(&out),
    ]);
    let m = json(&out.join("metrics.json"));
    for key in ["photo_to_label", "label_to_photo", "proxy_ceiling"] {
        for metric in ["per_pixel_acc", "per_class_acc", "class_iou"] {
            assert!(m[key][metric].is_number(), "{key}.{metric}");
        }
    }
    assert!(m["diversity"]["mean_pixel_l1"].is_number());

    let out = tmp.path().join("ablate");
    let mut args = vec!["ablate", "--data", s(&data), "--out", s(&out), "--max-steps", "1"];
    args.extend(TINY);
    ok(&args);
    let report = json(&out.join("ablation.json"));
    let labels: Vec<&str> = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["label"].as_str().unwrap())
        .collect();
    assert_eq!(labels, ["w/o-all", "w/o-adv", "w/o-perception", "w/o-TV", "+all"]);
    assert!(out.join("run_manifest.json").exists());
}
