use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tapd::scenegen::{read_dataset_file, AGENT_CHANNELS};

const TINY: &str = r#"
[data]
val_fraction = 0.25

[model]
d = 8

[stage1]
epochs = 2
batch_size = 4

[stage2]
epochs = 2
batch_size = 4

[stage3]
epochs = 1
batch_size = 4
"#;

fn tapd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tapd")).args(args).env_remove("TAPD_SEED").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tapd(args);
    assert!(
        out.status.success(),
        "tapd {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.toml");
        fs::write(&config, TINY).unwrap();
        Self { _dir: dir, root, config }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn gen(&self, out: &str, scenes: &str, seed: &str) -> PathBuf {
        let dir = self.p(out);
        ok(&["gen-data", "--config", s(&self.config), "--scenes", scenes, "--seed", seed, "--out", s(&dir)]);
        dir
    }

    fn train(&self, stage: &str, data: &Path, out: &Path, extra: &[&str]) -> Output {
        let mut args = vec!["train", "--config", s(&self.config), "--stage", stage, "--data", s(data), "--out", s(out)];
        args.extend_from_slice(extra);
        tapd(&args)
    }
}

#[test]
fn gen_data_is_reproducible_and_summarized() {
    let r = Run::new();
    let a = r.gen("a", "20", "7");
    let b = r.gen("b", "20", "7");
    for f in ["train.tapd", "val.tapd", "summary.json", "manifest.gen-data.toml"] {
        let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        if f.starts_with("manifest") {
            continue;
        }
        assert_eq!(x, y, "{f} differs between identical runs");
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(a.join("summary.json")).unwrap()).unwrap();
    let train = read_dataset_file(a.join("train.tapd")).unwrap();
    let val = read_dataset_file(a.join("val.tapd")).unwrap();
    assert_eq!(summary["train_scenes"], train.scenes.len());
    assert_eq!(summary["val_scenes"], val.scenes.len());
    assert_eq!(train.scenes.len() + val.scenes.len(), 20);
    let manifest = fs::read_to_string(a.join("manifest.gen-data.toml")).unwrap();
    assert!(manifest.contains("seed = 7") && manifest.contains("scenes = 20"));
}

#[test]
fn zero_scenes_is_a_config_error() {
    let r = Run::new();
    let out = tapd(&["gen-data", "--scenes", "0", "--out", s(&r.p("x"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected() {
    let r = Run::new();
    let cfg = r.p("bad.toml");
    fs::write(&cfg, "[stage1]\nepoch = 3\n").unwrap();
    let out = tapd(&["gen-data", "--config", s(&cfg), "--scenes", "4", "--out", s(&r.p("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}

#[test]
fn seed_falls_back_to_environment() {
    let r = Run::new();
    let run = |env: Option<&str>, out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_tapd"));
        c.args(["gen-data", "--config", s(&r.config), "--scenes", "6", "--out", s(&r.p(out))]).env_remove("TAPD_SEED");
        if let Some(v) = env {
            c.env("TAPD_SEED", v);
        }
        assert!(c.output().unwrap().status.success());
        fs::read(r.p(out).join("train.tapd")).unwrap()
    };
    let env7 = run(Some("7"), "e7");
    let flag7 = r.gen("f7", "6", "7");
    assert_eq!(env7, fs::read(flag7.join("train.tapd")).unwrap());
    assert_ne!(env7, run(None, "none"));
}

#[test]
fn stage3_needs_its_prerequisites() {
    let r = Run::new();
    let data = r.gen("data", "8", "1");
    let out = r.train("3", &data.join("train.tapd"), &r.p("ck"), &[]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn missing_and_corrupt_inputs() {
    let r = Run::new();
    let out = r.train("1", &r.p("nope.tapd"), &r.p("ck"), &[]);
    assert_eq!(out.status.code(), Some(3));
    let bad = r.p("bad.tapd");
    fs::write(&bad, b"not a dataset").unwrap();
    assert_eq!(r.train("1", &bad, &r.p("ck"), &[]).status.code(), Some(4));
    assert_eq!(tapd(&["train", "--stage", "4", "--data", "x", "--out", "y"]).status.code(), Some(2));
}

#[test]
fn single_length_disables_distillation_with_warning() {
    let r = Run::new();
    let data = r.gen("data", "8", "1");
    let out = r.train("1", &data.join("train.tapd"), &r.p("ck"), &["--lengths", "4", "--epochs", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning: distillation disabled"));
    assert!(r.p("ck/oaf.ckpt").is_file());
}

#[test]
fn full_pipeline_is_deterministic() {
    let r = Run::new();
    let data = r.gen("data", "16", "3");
    let train = data.join("train.tapd");
    let val = data.join("val.tapd");
    let pipeline = |ck: &str| {
        let ck = r.p(ck);
        for (stage, extra) in [("1", vec![]), ("1", vec!["--preset", "ori"]), ("1", vec!["--preset", "it"]), ("2", vec![]), ("3", vec![])] {
            let out = r.train(stage, &train, &ck, &extra);
            assert!(out.status.success(), "stage {stage} {extra:?}: {}", String::from_utf8_lossy(&out.stderr));
        }
        let rep = ck.join("report");
        ok(&["eval", "--config", s(&r.config), "--data", s(&val), "--ckpt-dir", s(&ck), "--bundles", "ori,it,oaf,tapd", "--format", "svg", "--out", s(&rep)]);
        ck
    };
    let files = [
        "oaf.ckpt",
        "ori.ckpt",
        "it-1.ckpt",
        "it-4.ckpt",
        "tbm.ckpt",
        "tapd.ckpt",
        "tapd.log.jsonl",
        "manifest.train.tapd.toml",
        "report/report.csv",
        "report/report.md",
        "report/min_fde.svg",
    ];
    let a = pipeline("a");
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(a.join(f)).unwrap()).collect();
    pipeline("a");
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&fs::read(a.join(f)).unwrap(), bytes, "{f} differs between identical runs");
    }
    for m in ["min_ade.svg", "min_fde.svg", "mr.svg"] {
        assert!(a.join("report").join(m).is_file());
    }
    let csv = fs::read_to_string(a.join("report/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 4 * 2);

    let only = r.p("only");
    ok(&["eval", "--config", s(&r.config), "--data", s(&val), "--ckpt-dir", s(&a), "--bundles", "tapd", "--taus", "1,2,3,4", "--ks", "6", "--out", s(&only)]);
    assert_eq!(fs::read_to_string(only.join("report.csv")).unwrap().lines().count(), 1 + 4);
    assert!(!only.join("min_fde.svg").exists());

    let md = r.p("md");
    ok(&["report", "--csv", s(&a.join("report/report.csv")), "--format", "markdown,svg", "--out", s(&md)]);
    assert_eq!(fs::read(md.join("report.md")).unwrap(), fs::read(a.join("report/report.md")).unwrap());

    // Backfilling keeps the observed segment and the record count.
    let filled = r.p("filled.tapd");
    let out = ok(&["backfill", "--config", s(&r.config), "--tbm", s(&a.join("tbm.ckpt")), "--data", s(&val), "--tau", "2", "--out", s(&filled)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean prefix error"));
    let src = read_dataset_file(&val).unwrap();
    let dst = read_dataset_file(&filled).unwrap();
    assert_eq!(dst.header.reconstructed_from, Some(2));
    assert_eq!(src.scenes.len(), dst.scenes.len());
    let tl = src.header.timeline;
    let keep = (tl.observed() - 2 * tl.delta_t) * AGENT_CHANNELS;
    for (x, y) in src.scenes.iter().zip(&dst.scenes) {
        for (ax, ay) in x.agents.iter().zip(&y.agents) {
            let (sx, sy) = (&ax.states[keep..], &ay.states[keep..]);
            assert!(sx.iter().zip(sy).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
    let h = tapd(&["backfill", "--tbm", s(&a.join("tbm.ckpt")), "--data", s(&val), "--tau", "4", "--out", s(&r.p("z.tapd"))]);
    assert_eq!(h.status.code(), Some(2));
    let missing = tapd(&["eval", "--data", s(&val), "--ckpt-dir", s(&r.p("none")), "--bundles", "ori", "--out", s(&r.p("e"))]);
    assert_eq!(missing.status.code(), Some(3));
}
