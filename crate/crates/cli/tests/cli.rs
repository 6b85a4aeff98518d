//! End-to-end runs of the `med2t` binary.

use med2t::volume::{threshold_mask, Volume};
use serde_json::{json, Value};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn med2t(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_med2t")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantom_spec(bone_w: f64) -> Value {
    json!({
        "extents": [16, 16, 16],
        "seed": 3,
        "components": [
            { "center": [7.5, 7.5, 7.5], "radii": [6.0, 6.0, 6.0], "tissue": "soft" },
            { "center": [7.5, 7.0, 7.5], "radii": [2.5, 3.0, bone_w], "tissue": "bone" },
            { "center": [7.5, 11.0, 7.5], "radii": [1.5, 1.0, 1.5], "tissue": "fluid" }
        ]
    })
}

/// Writes a phantom spec and runs `gen-phantom` into `dir/name`.
fn gen(dir: &Path, name: &str, spec: &Value) -> PathBuf {
    let spec_path = dir.join(format!("{name}.json"));
    fs::write(&spec_path, spec.to_string()).unwrap();
    let out = dir.join(name);
    let o = med2t(&["gen-phantom", "--config", s(&spec_path), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn train_config(dir: &Path, phantom: &Path, epochs: usize) -> PathBuf {
    let stage = |c: usize| json!({ "channels": c, "heads": 2, "window": [2, 2, 2], "dilations": [1, 2], "blocks": 2 });
    let cfg = json!({
        "data": [{ "mri": phantom.join("mri.rvol"), "ct": phantom.join("ct.rvol"), "mask": phantom.join("body_mask.rvol") }],
        "model": {
            "generator": {
                "in_channels": 1, "out_channels": 1, "stem_channels": 4,
                "stages": [stage(4), stage(8)],
                "bottleneck": { "heads": 2, "window": [2, 2, 2], "dilations": [1, 2] }
            },
            "train": { "epochs": epochs, "steps_per_epoch": 2, "patch": [8, 8, 8], "seed": 11 }
        }
    });
    let path = dir.join(format!("train_{epochs}.json"));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn gen_phantom_is_deterministic_and_writes_manifest() {
    let t = tempfile::tempdir().unwrap();
    let a = gen(t.path(), "a", &phantom_spec(2.0));
    let b = gen(t.path(), "b", &phantom_spec(2.0));
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
    let manifest: Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["spec"]["seed"], 3);
    assert_eq!(manifest["files"].as_object().unwrap().len(), 3);

    let spec_path = t.path().join("a.json");
    let reseeded = t.path().join("c");
    assert_eq!(code(&med2t(&["gen-phantom", "--config", s(&spec_path), "--out", s(&reseeded), "--seed", "4"])), 0);
    assert_eq!(fs::read(a.join("ct.rvol")).unwrap(), fs::read(reseeded.join("ct.rvol")).unwrap());
    assert_ne!(fs::read(a.join("mri.rvol")).unwrap(), fs::read(reseeded.join("mri.rvol")).unwrap());
}

#[test]
fn malformed_spec_names_the_key() {
    let t = tempfile::tempdir().unwrap();
    let mut spec = phantom_spec(2.0);
    spec["components"][1]["radius"] = json!(2.0);
    let path = t.path().join("bad.json");
    fs::write(&path, spec.to_string()).unwrap();
    let o = med2t(&["gen-phantom", "--config", s(&path), "--out", s(&t.path().join("x"))]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("components[1].radius"), "{err}");

    fs::write(&path, r#"{"extents": [16, 16, "x"], "components": []}"#).unwrap();
    let o = med2t(&["gen-phantom", "--config", s(&path), "--out", s(&t.path().join("x"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("extents[2]"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&med2t(&["no-such-command"])), 1);
    assert_eq!(code(&med2t(&["infer", "--checkpoint", "a"])), 1);
    assert_eq!(code(&med2t(&["infer", "--checkpoint", "a", "--input", "b", "--out", "c", "--stride", "8,8"])), 1);
    assert_eq!(code(&med2t(&["--threads", "4", "eval", "--pred", "a", "--ref", "b"])), 1);
    assert_eq!(code(&med2t(&["--help"])), 0);
}

#[test]
fn eval_matches_golden_report() {
    let t = tempfile::tempdir().unwrap();
    let pred = gen(t.path(), "pred", &phantom_spec(2.0));
    let refd = gen(t.path(), "ref", &phantom_spec(3.0));
    let structures = t.path().join("structures");
    fs::create_dir(&structures).unwrap();
    for (dir, kind) in [(&pred, "pred"), (&refd, "ref")] {
        let ct = Volume::read_rvol(dir.join("ct.rvol")).unwrap();
        threshold_mask(&ct, 400.0).unwrap().write_rvol(structures.join(format!("bone.{kind}.rvol"))).unwrap();
    }
    let report = t.path().join("report.json");
    let o = med2t(&[
        "eval",
        "--pred", s(&pred.join("ct.rvol")),
        "--ref", s(&refd.join("ct.rvol")),
        "--mask", s(&refd.join("body_mask.rvol")),
        "--structures", s(&structures),
        "--out", s(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let got = fs::read_to_string(&report).unwrap();
    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/eval_golden.json");
    if std::env::var_os("MED2T_BLESS").is_some() {
        fs::write(&golden_path, &got).unwrap();
    }
    assert_eq!(got, fs::read_to_string(golden_path).unwrap());

    // the narrower bone lies inside the wider one and differs from soft tissue by 1160 HU
    let count = |p: PathBuf| Volume::read_rvol(p).unwrap().data.iter().filter(|&&x| x > 0.5).count() as f64;
    let (bp, br) = (count(structures.join("bone.pred.rvol")), count(structures.join("bone.ref.rvol")));
    let body = count(refd.join("body_mask.rvol"));
    let v: Value = serde_json::from_str(&got).unwrap();
    assert_eq!(v["dice"]["bone"].as_f64().unwrap(), 2.0 * bp / (bp + br));
    assert!((v["mae_hu"].as_f64().unwrap() - (br - bp) * 1160.0 / body).abs() < 1e-9);
}

#[test]
fn eval_of_identical_volumes_is_perfect() {
    let t = tempfile::tempdir().unwrap();
    let p = gen(t.path(), "p", &phantom_spec(2.0));
    let ct = p.join("ct.rvol");
    let o = med2t(&["eval", "--pred", s(&ct), "--ref", s(&ct)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["mae_hu"], 0.0);
    assert_eq!(v["ssim"], 1.0);
    assert_eq!(v["psnr_db"], v["config"]["psnr_cap_db"]);
    assert_eq!(v["mask"], "derived from reference");
}

#[test]
fn eval_rejects_mismatched_extents() {
    let t = tempfile::tempdir().unwrap();
    let a = gen(t.path(), "a", &phantom_spec(2.0));
    let mut other = phantom_spec(2.0);
    other["extents"] = json!([16, 16, 18]);
    let b = gen(t.path(), "b", &other);
    let o = med2t(&["eval", "--pred", s(&a.join("ct.rvol")), "--ref", s(&b.join("ct.rvol"))]);
    assert_eq!(code(&o), 2);
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn train_with_missing_data_fails_before_work() {
    let t = tempfile::tempdir().unwrap();
    let cfg = train_config(t.path(), &t.path().join("absent"), 2);
    let out = t.path().join("run");
    let o = med2t(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("data[0].mri"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn train_infer_smoke_and_determinism() {
    let t = tempfile::tempdir().unwrap();
    let ph = gen(t.path(), "ph", &phantom_spec(2.0));
    let cfg = train_config(t.path(), &ph, 2);
    let mut dirs = Vec::new();
    for run in ["r1", "r2"] {
        let out = t.path().join(run);
        let o = med2t(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "7"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let last: Value = serde_json::from_slice(o.stdout.trim_ascii_end().rsplit(|&b| b == b'\n').next().unwrap()).unwrap();
        assert_eq!(last["kind"], "epoch");
        for k in ["d_loss", "g_gan", "g_l1", "g_perc", "g_total"] {
            assert!(last[k].as_f64().unwrap().is_finite(), "{k}");
        }
        let o = med2t(&[
            "infer",
            "--checkpoint", s(&out.join("final.ckpt")),
            "--input", s(&ph.join("mri.rvol")),
            "--out", s(&out.join("sct.rvol")),
            "--stride", "4,4,4",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        dirs.push(read_dir_bytes(&out));
    }
    assert_eq!(dirs[0], dirs[1]);
    let sct = Volume::read_rvol(t.path().join("r1/sct.rvol")).unwrap();
    assert_eq!(sct.extents, [16, 16, 16]);
    assert!(sct.comment.contains("ckpt_sha256="));
}

#[test]
fn resumed_training_reproduces_the_uninterrupted_run() {
    let t = tempfile::tempdir().unwrap();
    let ph = gen(t.path(), "ph", &phantom_spec(2.0));
    let whole = t.path().join("whole");
    let split = t.path().join("split");
    let full_cfg = train_config(t.path(), &ph, 4);
    assert_eq!(code(&med2t(&["train", "--config", s(&full_cfg), "--out", s(&whole)])), 0);
    let half_cfg = train_config(t.path(), &ph, 2);
    assert_eq!(code(&med2t(&["train", "--config", s(&half_cfg), "--out", s(&split)])), 0);
    let o = med2t(&["train", "--config", s(&full_cfg), "--out", s(&split), "--resume", s(&split.join("final.ckpt"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(whole.join("train_log.jsonl")).unwrap(), fs::read(split.join("train_log.jsonl")).unwrap());
    assert_eq!(fs::read(whole.join("final.ckpt")).unwrap(), fs::read(split.join("final.ckpt")).unwrap());

    let o = med2t(&["train", "--config", s(&full_cfg), "--out", s(&split), "--resume", s(&split.join("final.ckpt")), "--seed", "99"]);
    assert_eq!(code(&o), 1, "a different seed is a different configuration");
}

#[test]
fn infer_rejects_bad_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let ph = gen(t.path(), "ph", &phantom_spec(2.0));
    let bad = t.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let o = med2t(&["infer", "--checkpoint", s(&bad), "--input", s(&ph.join("mri.rvol")), "--out", s(&t.path().join("o.rvol"))]);
    assert_eq!(code(&o), 2);
    assert_eq!(stderr(&o).lines().count(), 1);
    let o = med2t(&["infer", "--checkpoint", s(&t.path().join("none")), "--input", s(&ph.join("mri.rvol")), "--out", s(&t.path().join("o.rvol"))]);
    assert_eq!(code(&o), 2);
}
