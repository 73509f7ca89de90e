use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mrf_core::tensorfile::TensorFile;
use serde_json::{json, Value};

fn mrf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrf")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mrf(args);
    assert!(out.status.success(), "mrf {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], code: &str) {
    let out = mrf(args);
    assert!(!out.status.success(), "mrf {args:?} unexpectedly succeeded");
    let err = String::from_utf8_lossy(&out.stderr);
    let last = err.lines().last().unwrap_or("");
    assert!(last.starts_with(&format!("error[{code}]")), "expected {code}, got: {err}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn tiny_dictionary_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.mrft");
    let b = dir.path().join("b.mrft");
    let out = ok(&["simulate-dict", "--grid", "100:100:200x20:20:40", "--out", s(&a)]);
    assert!(out.starts_with("atoms 4 frames 200"));
    ok(&["simulate-dict", "--grid", "100:100:200x20:20:40", "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let tf = TensorFile::read(&a).unwrap();
    assert_eq!(tf.dims, vec![4, 200]);
    assert_eq!(tf.header_str("kind"), Some("dictionary"));
}

#[test]
fn error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.mrft");
    fails_with(&["simulate-dict", "--grid", "100:10", "--out", s(&out)], "E_PARAM");
    fails_with(&["simulate-dict", "--grid", "100:-10:50x20:2:40", "--out", s(&out)], "E_PARAM");
    fails_with(&["build-subspace", "--dict", s(&dir.path().join("missing")), "--out", s(&out)], "E_IO");
    ok(&["make-masks", "--n", "16", "--l", "200", "--out", s(&out)]);
    // a mask file is not a dictionary
    fails_with(&["build-subspace", "--dict", s(&out), "--out", s(&dir.path().join("y"))], "E_FORMAT");
    std::fs::write(dir.path().join("junk"), b"not a tensor").unwrap();
    fails_with(&["build-subspace", "--dict", s(&dir.path().join("junk")), "--out", s(&out)], "E_FORMAT");
    fails_with(&["--threads", "0", "make-masks", "--out", s(&out)], "E_PARAM");
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn p(&self, name: &str) -> String {
        s(&self.path(name)).to_string()
    }

    /// Dictionary holding every nominal tissue, s = 10 subspace, fully
    /// sampled 16 × 16 masks and a noiseless, jitter-free dataset.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let f = Fixture { _dir: dir, root };
        ok(&["simulate-dict", "--grid", "300:100:3500x40:10:500", "--out", &f.p("dict.mrft")]);
        ok(&["build-subspace", "--dict", &f.p("dict.mrft"), "--s", "10", "--out", &f.p("sub.mrft")]);
        ok(&["make-masks", "--n", "16", "--l", "200", "--full", "--out", &f.p("full.mrft")]);
        ok(&["make-masks", "--n", "16", "--l", "200", "--out", &f.p("spiral.mrft")]);
        for (name, masks) in [("full", "full.mrft"), ("spiral", "spiral.mrft")] {
            let cfg = json!({
                "version": 1,
                "subspace": "sub.mrft",
                "masks": masks,
                "dataset": {"grid_n": 16, "train_subjects": 1, "test_subjects": 1, "slices_per_subject": 2,
                            "augment_copies": 0, "snr_db": null, "jitter": 0.0}
            });
            std::fs::write(f.path(&format!("{name}_data.json")), cfg.to_string()).unwrap();
            ok(&["gen-data", "--config", &f.p(&format!("{name}_data.json")), "--out", &f.p(&format!("{name}_data"))]);
        }
        f
    }

    fn recon(&self, algo: &str, data: &str, masks: &str, extra: &[&str], out: &str) {
        let input = self.p(&format!("{data}/test_0000_kspace.mrft"));
        let mut args = vec!["recon", "--algo", algo, "--input", &input, "--masks", masks, "--subspace", "sub.mrft", "--out", out];
        args.extend_from_slice(extra);
        let owned: Vec<String> = args.iter().map(|a| if a.ends_with(".mrft") && !a.contains('/') { self.p(a) } else { a.to_string() }).collect();
        let refs: Vec<&str> = owned.iter().map(String::as_str).collect();
        ok(&refs);
    }

    fn evaluate(&self, est: &str, gt: &str) -> Value {
        let report = self.p(&format!("{est}.report.json"));
        ok(&["evaluate", "--est", &self.p(est), "--gt", &self.p(gt), "--report", &report]);
        serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap()
    }
}

#[test]
fn pipeline_matching_and_training() {
    let f = Fixture::new();
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(f.path("full_data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["train"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["test"].as_array().unwrap().len(), 2);

    let gt = "full_data/test_0000_maps.mrft";
    let same = f.evaluate(gt, gt);
    for m in ["t1", "t2", "pd"] {
        assert_eq!(same["maps"][m]["nrmse"].as_f64(), Some(0.0));
        assert!((same["maps"][m]["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    }

    f.recon("dm", "full_data", "full.mrft", &["--dict", "dict.mrft"], &f.p("dm.mrft"));
    let dm = f.evaluate("dm.mrft", gt);
    assert!(dm["maps"]["t1"]["nrmse"].as_f64().unwrap() < 1e-9, "{dm}");
    assert!(dm["maps"]["pd"]["nrmse"].as_f64().unwrap() < 1e-5, "{dm}");
    let header = TensorFile::read(&f.path("dm.mrft")).unwrap().header;
    assert_eq!(header["algo"], "dm");
    assert!(header["runtime_s"].as_f64().is_some() && header["memory_bytes"].as_u64().unwrap() > 0);

    f.recon("fgm", "full_data", "full.mrft", &["--dict", "dict.mrft", "--keep", "1.0"], &f.p("fgm.mrft"));
    let a = TensorFile::read(&f.path("dm.mrft")).unwrap();
    let b = TensorFile::read(&f.path("fgm.mrft")).unwrap();
    assert_eq!(a.payload, b.payload);

    f.recon("blip", "spiral_data", "spiral.mrft", &["--dict", "dict.mrft"], &f.p("blip.mrft"));
    let trace: Value = serde_json::from_str(&std::fs::read_to_string(f.path("blip.mrft.trace.json")).unwrap()).unwrap();
    let n = trace.as_array().unwrap().len();
    assert!((1..=20).contains(&n));

    // a k-space file simulated for one mask must not be reconstructed with another
    let input = f.p("spiral_data/test_0000_kspace.mrft");
    let args = ["recon", "--algo", "dm", "--input", &input, "--masks", &f.p("full.mrft"), "--subspace", &f.p("sub.mrft"), "--dict", &f.p("dict.mrft"), "--out", &f.p("bad.mrft")];
    fails_with(&args, "E_HASH");
    let args = ["recon", "--algo", "pgdnet", "--input", &input, "--masks", &f.p("spiral.mrft"), "--subspace", &f.p("sub.mrft"), "--out", &f.p("bad.mrft")];
    fails_with(&args, "E_USAGE");

    let train = json!({
        "version": 1,
        "dict": "dict.mrft",
        "subspace": "sub.mrft",
        "masks": "spiral.mrft",
        "data": "spiral_data/manifest.json",
        "decimate": 2,
        "decoder": {"epochs": 2, "batch": 64},
        "pretrain": {"epochs": 1, "batch": 2},
        "pgdnet": {"epochs": 1, "batch": 2},
        "depth": 2,
        "bloch_checkpoint": "bloch.mrft",
        "encoder_checkpoint": "encoder.mrft",
        "pgdnet_checkpoint": "pgdnet.mrft"
    });
    std::fs::write(f.path("train.json"), train.to_string()).unwrap();
    // PGD-Net training needs an encoder checkpoint first
    fails_with(&["train", "--stage", "pgdnet", "--config", &f.p("train.json")], "E_IO");
    for stage in ["bloch", "encoder", "pgdnet"] {
        ok(&["train", "--stage", stage, "--config", &f.p("train.json")]);
    }
    let before = mrf_core::proxnet::Checkpoint::load(&f.path("bloch.mrft")).unwrap();
    let after = mrf_core::proxnet::Checkpoint::load(&f.path("pgdnet.mrft")).unwrap();
    assert_eq!(after.stage, "pgdnet");
    assert_eq!(after.alphas.len(), 2);
    assert_eq!(before.network("decoder").unwrap().flat_params(), after.network("decoder").unwrap().flat_params());

    f.recon("pgdnet", "spiral_data", "spiral.mrft", &["--ckpt", "pgdnet.mrft"], &f.p("pgd.mrft"));
    f.recon("encoder", "spiral_data", "spiral.mrft", &["--ckpt", "encoder.mrft"], &f.p("enc.mrft"));
    let r = f.evaluate("pgd.mrft", "spiral_data/test_0000_maps.mrft");
    assert!(r["maps"]["t1"]["nrmse"].as_f64().unwrap().is_finite());
    // the dm recon is tied to a different mask than this checkpoint
    let args = ["recon", "--algo", "pgdnet", "--input", &f.p("full_data/test_0000_kspace.mrft"), "--masks", &f.p("full.mrft"), "--subspace", &f.p("sub.mrft"), "--ckpt", &f.p("pgdnet.mrft"), "--out", &f.p("bad.mrft")];
    fails_with(&args, "E_HASH");
}
