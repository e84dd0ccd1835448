use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mcdiff::data::Manifest;
use mcdiff::evaluation::EvalReport;
use mcdiff::training::{read_log, CHECKPOINT_FILE, LOG_FILE};

fn mcdiff() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mcdiff"));
    c.env_remove("DISCDIFF_DATA_DIR");
    c
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn mcdiff");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(cmd: &mut Command) -> serde_json::Value {
    let out = run(cmd);
    assert_eq!(out.status.code(), Some(0));
    serde_json::from_slice(&out.stdout).expect("json summary")
}

const TINY: &str = r#"{
  "iterations": 6,
  "horizon": 3,
  "batch_size": 2,
  "learning_rate": 0.001,
  "model": {
    "base_channels": 8,
    "num_res_blocks": 1,
    "attention_resolutions": [4],
    "channel_multipliers": [1, 2, 2],
    "in_resolution": 16
  },
  "schedule": {"steps": 20},
  "sampling_steps": 5,
  "checkpoint_every": 0
}"#;

fn tiny_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(mcdiff().args(["prepare-data", "--phantoms", "10", "--resolution", "16", "--slices-per-volume", "2", "--out"]).arg(&data));
    data
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p
}

fn tiny_run(dir: &Path, data: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    ok(mcdiff()
        .arg("train")
        .arg("--data")
        .arg(data)
        .arg("--config")
        .arg(tiny_config(dir))
        .args(extra)
        .arg("--out")
        .arg(&out));
    out
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn prepare_data_follows_the_split_rule_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let s = ok(mcdiff().args(["prepare-data", "--phantoms", "10", "--scale", "4", "--out"]).arg(&a));
    assert_eq!((s["train"].as_u64(), s["val"].as_u64(), s["test"].as_u64()), (Some(56), Some(8), Some(16)));
    let m = Manifest::load(&a.join("manifest.json")).unwrap();
    assert_eq!(m.records.len(), 80);
    for r in &m.records {
        for p in [&r.paths.hr_t2, &r.paths.lr_t2, &r.paths.hr_t1] {
            assert!(a.join(p).is_file(), "{p}");
        }
    }
    // The data directory variable supplies the default output.
    let b = dir.path().join("b");
    ok(mcdiff().env("DISCDIFF_DATA_DIR", &b).args(["prepare-data", "--phantoms", "10", "--scale", "4"]));
    assert_eq!(files(&a), files(&b));
}

#[test]
fn usage_and_runtime_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let code = |cmd: &mut Command| run(cmd).status.code();

    assert_eq!(code(mcdiff().arg("frobnicate")), Some(1));
    assert_eq!(code(mcdiff().args(["prepare-data", "--phantoms", "2", "--scale", "3", "--out", "x"])), Some(1));
    assert_eq!(code(mcdiff().args(["train", "--out", "x"])), Some(1));
    let unknown = run(mcdiff().arg("train").arg("--data").arg(&data).args(["--set", "bogus=1", "--out"]).arg(dir.path().join("r")));
    assert_eq!(unknown.status.code(), Some(1));
    let diag: serde_json::Value = serde_json::from_slice(&unknown.stderr).unwrap();
    assert_eq!(diag["error"]["kind"], "config");
    assert!(diag["error"]["message"].as_str().unwrap().contains("bogus"));

    let missing = dir.path().join("missing.safetensors");
    assert_eq!(
        code(mcdiff().arg("evaluate").arg("--data").arg(&data).arg("--checkpoint").arg(&missing).arg("--out").arg(dir.path().join("e"))),
        Some(1)
    );
    let corrupt = dir.path().join("corrupt.safetensors");
    fs::write(&corrupt, b"garbage").unwrap();
    let out = run(mcdiff().arg("evaluate").arg("--data").arg(&data).arg("--checkpoint").arg(&corrupt).arg("--out").arg(dir.path().join("e")));
    assert_eq!(out.status.code(), Some(2));
    let diag: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(diag["error"]["kind"], "format");
    assert_eq!(code(mcdiff().arg("--help")), Some(0));
}

#[test]
fn no_curriculum_override_samples_uniformly_from_the_start() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let base = read_log(&tiny_run(dir.path(), &data, "base", &[]).join(LOG_FILE)).unwrap();
    assert_eq!(base[0].sampling, "curriculum");
    let run = tiny_run(dir.path(), &data, "uniform", &["--set", "ablations.no_curriculum=true"]);
    let log = read_log(&run.join(LOG_FILE)).unwrap();
    assert_eq!(log.len(), 6);
    assert!(log.iter().all(|r| r.sampling == "uniform" && r.mu_entropy.is_none()));
}

#[test]
fn train_resume_sample_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let full = tiny_run(dir.path(), &data, "full", &["--seed", "3"]);
    let part = tiny_run(dir.path(), &data, "part", &["--seed", "3", "--set", "iterations=4"]);
    let ck = part.join(CHECKPOINT_FILE);
    ok(mcdiff()
        .arg("train")
        .arg("--data")
        .arg(&data)
        .arg("--config")
        .arg(tiny_config(dir.path()))
        .arg("--resume")
        .arg(&ck)
        .arg("--out")
        .arg(&part));
    assert_eq!(fs::read(full.join(LOG_FILE)).unwrap(), fs::read(part.join(LOG_FILE)).unwrap());
    assert_eq!(fs::read(full.join(CHECKPOINT_FILE)).unwrap(), fs::read(part.join(CHECKPOINT_FILE)).unwrap());

    let ck = full.join(CHECKPOINT_FILE);
    let manifest = Manifest::load(&data.join("manifest.json")).unwrap();
    let slice = manifest.records_in(mcdiff::Split::Test).next().unwrap().slice_id.clone();
    let sample = |out: &Path| {
        ok(mcdiff()
            .arg("sample")
            .arg("--data")
            .arg(&data)
            .arg("--checkpoint")
            .arg(&ck)
            .args(["--input", &slice, "--k", "4", "--out"])
            .arg(out))
    };
    let s = sample(&dir.path().join("s1"));
    sample(&dir.path().join("s2"));
    assert_eq!(s["samples"].as_array().unwrap().len(), 4);
    for name in ["mean", "std"] {
        assert!(dir.path().join("s1").join(s[name]["image"].as_str().unwrap()).is_file());
        assert!(dir.path().join("s1").join(s[name]["raw"].as_str().unwrap()).is_file());
    }
    assert_eq!(files(&dir.path().join("s1")), files(&dir.path().join("s2")));

    let evaluate = |out: &Path, k: &str| {
        ok(mcdiff()
            .arg("evaluate")
            .arg("--data")
            .arg(&data)
            .arg("--checkpoint")
            .arg(&ck)
            .args(["--k", k, "--limit", "2", "--out"])
            .arg(out));
        let text = fs::read_to_string(out.join("eval_report.json")).unwrap();
        (text.clone(), EvalReport::from_json(&text).unwrap())
    };
    let (text, report) = evaluate(&dir.path().join("e1"), "1");
    assert_eq!(report.k, 1);
    assert_eq!(report.slices.len(), 2);
    for s in &report.slices {
        let images = s.images.as_ref().unwrap();
        assert!(images.std.is_none());
        assert!(s.psnr.is_finite() && s.lr_psnr.is_finite());
    }
    assert_eq!(evaluate(&dir.path().join("e2"), "1").0, text);
    let (_, two) = evaluate(&dir.path().join("e3"), "2");
    assert!(two.slices.iter().all(|s| s.images.as_ref().unwrap().std.is_some()));
}
