use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
d = 8
patches_min = 3
patches_max = 5
nuclei_min = 4
nuclei_max = 10
epochs = 2
lr = 1e-3
"#;

fn geomil(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geomil"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn run(&self, args: &[&str]) -> Output {
        geomil(self.path(), args)
    }

    fn synth(&self, out: &str, extra: &[&str]) -> Output {
        let mut args = vec!["synth", "--config", "small.toml", "--out", out];
        args.extend_from_slice(extra);
        self.run(&args)
    }

    fn trained(&self) -> PathBuf {
        let out = self.synth("c.argc", &["--classes", "3", "--slides-per-class", "4", "--seed", "7"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let out = self.run(&["train", "--config", "small.toml", "--cohort", "c.argc", "--out-dir", "run"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        self.path().join("run")
    }
}

#[test]
fn synth_writes_the_requested_cohort_deterministically() {
    let ws = Workspace::new();
    let a = ws.synth("a.argc", &["--classes", "3", "--slides-per-class", "20", "--seed", "7"]);
    assert_eq!(code(&a), 0);
    assert!(stdout(&a).starts_with("wrote 60 slides (20/20/20)"));
    let b = ws.synth("b.argc", &["--classes", "3", "--slides-per-class", "20", "--seed", "7"]);
    assert_eq!(code(&b), 0);
    assert_eq!(fs::read(ws.path().join("a.argc")).unwrap(), fs::read(ws.path().join("b.argc")).unwrap());

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path().join("a.argc.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["class_counts"], serde_json::json!([20, 20, 20]));
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["spec_hash"].as_str().unwrap().len() == 64);
    assert!(manifest["git_describe"].is_string());

    let c = ws.synth("c.argc", &["--classes", "3", "--slides-per-class", "20", "--seed", "8"]);
    assert_eq!(code(&c), 0);
    assert_ne!(fs::read(ws.path().join("a.argc")).unwrap(), fs::read(ws.path().join("c.argc")).unwrap());
}

#[test]
fn invalid_settings_exit_with_usage_code_and_write_nothing() {
    let ws = Workspace::new();
    let out = ws.synth("z.argc", &["--slides-per-class", "0"]);
    assert_eq!(code(&out), 2);
    assert!(!ws.path().join("z.argc").exists());

    fs::write(ws.path().join("bad.toml"), "colour = 3\n").unwrap();
    assert_eq!(code(&ws.run(&["synth", "--config", "bad.toml", "--out", "z.argc"])), 2);
    assert_eq!(code(&ws.run(&["synth", "--no-such-flag"])), 2);
    assert!(!ws.path().join("z.argc").exists());
}

#[test]
fn missing_config_or_cohort_is_an_io_error() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run(&["synth", "--config", "absent.toml"])), 3);
    assert_eq!(code(&ws.run(&["train", "--cohort", "absent.argc", "--out-dir", "run"])), 3);
    assert!(!ws.path().join("run").exists());
}

#[test]
fn train_writes_checkpoints_report_and_manifest() {
    let ws = Workspace::new();
    let run = ws.trained();
    for i in 0..5 {
        assert!(run.join(format!("fold{i}.argw")).exists());
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 5);
    assert_eq!(report["model"], "F");
    for key in ["auc", "acc", "f1", "precision"] {
        let v = report["mean"][key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["beta2"], 0.999);
    assert!(manifest["spec_hash"].is_string());
    assert!(manifest["git_describe"].is_string());
}

#[test]
fn train_is_reproducible() {
    let ws = Workspace::new();
    let run = ws.trained();
    let again = ws.run(&["train", "--config", "small.toml", "--cohort", "c.argc", "--out-dir", "again"]);
    assert_eq!(code(&again), 0);
    for name in ["report.json", "fold0.argw", "fold4.argw"] {
        assert_eq!(fs::read(run.join(name)).unwrap(), fs::read(ws.path().join("again").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn train_rejects_gpgf_without_geometry_and_corrupt_cohorts() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.synth("c.argc", &["--slides-per-class", "4"])), 0);
    let out = ws.run(&["train", "--cohort", "c.argc", "--ablation", "use_gpgf_without_geometry"]);
    assert_eq!(code(&out), 2);
    assert_eq!(code(&ws.run(&["train", "--cohort", "c.argc", "--ablation", "gpgf"])), 2);

    let mut bytes = fs::read(ws.path().join("c.argc")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(ws.path().join("bad.argc"), &bytes).unwrap();
    assert_eq!(code(&ws.run(&["train", "--config", "small.toml", "--cohort", "bad.argc", "--out-dir", "run"])), 4);
    fs::write(ws.path().join("short.argc"), &bytes[..10]).unwrap();
    assert_eq!(code(&ws.run(&["train", "--config", "small.toml", "--cohort", "short.argc", "--out-dir", "run"])), 4);
    assert!(!ws.path().join("run").exists());
}

#[test]
fn heatmap_exports_files_and_top_decile() {
    let ws = Workspace::new();
    let run = ws.trained();
    let ckpt = run.join("fold0.argw");
    let ckpt = ckpt.to_str().unwrap();
    let out = ws.run(&["heatmap", "--config", "small.toml", "--cohort", "c.argc", "--checkpoint", ckpt, "--slide", "5", "--out-dir", "maps"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let maps = ws.path().join("maps");
    let pgm = fs::read(maps.join("slide5.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));

    let csv = fs::read_to_string(maps.join("slide5.csv")).unwrap();
    let mut rows: Vec<(f64, u32)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[3].parse().unwrap(), f[0].parse().unwrap())
        })
        .collect();
    let n = rows.len();
    rows.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let want: Vec<String> = rows.iter().take((n as f64 * 0.1).ceil() as usize).map(|r| r.1.to_string()).collect();
    let line = stdout(&out).lines().find(|l| l.starts_with("top decile")).unwrap().to_string();
    let got: Vec<String> = line.split(": ").nth(1).unwrap().split_whitespace().map(str::to_string).collect();
    assert_eq!(got, want);
    assert_eq!(got.len(), (n as f64 / 10.0).ceil() as usize);
}

#[test]
fn heatmap_rejects_unknown_slides_and_mismatched_checkpoints() {
    let ws = Workspace::new();
    let run = ws.trained();
    let ckpt = run.join("fold1.argw");
    let ckpt = ckpt.to_str().unwrap();
    let missing = ws.run(&["heatmap", "--config", "small.toml", "--cohort", "c.argc", "--checkpoint", ckpt, "--slide", "999"]);
    assert_eq!(code(&missing), 2);
    let other = ws.run(&["heatmap", "--config", "small.toml", "--cohort", "c.argc", "--checkpoint", ckpt, "--slide", "0", "--ablation", "B"]);
    assert_eq!(code(&other), 5);
    fs::write(ws.path().join("k6.toml"), format!("{SMALL}k = 6\n")).unwrap();
    let eval = ws.run(&["eval", "--config", "k6.toml", "--cohort", "c.argc", "--checkpoint", ckpt]);
    assert_eq!(code(&eval), 5);
    let garbled = ws.path().join("garbled.argw");
    let mut bytes = fs::read(ckpt).unwrap();
    bytes[20] ^= 1;
    fs::write(&garbled, bytes).unwrap();
    let eval = ws.run(&["eval", "--config", "small.toml", "--cohort", "c.argc", "--checkpoint", garbled.to_str().unwrap()]);
    assert_eq!(code(&eval), 4);
}

#[test]
fn eval_scores_every_slide() {
    let ws = Workspace::new();
    let run = ws.trained();
    let ckpt = run.join("fold2.argw");
    let out = ws.run(&["eval", "--config", "small.toml", "--cohort", "c.argc", "--checkpoint", ckpt.to_str().unwrap(), "--out", "eval.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(v["predictions"].as_array().unwrap().len(), 12);
}

#[test]
fn gradcheck_prints_a_passing_table() {
    let out = geomil(Path::new("."), &["gradcheck"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("pipeline_full"));
    assert!(!text.contains("FAIL"));
}
