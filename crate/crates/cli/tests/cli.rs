use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use oodguard::config::ExperimentConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_nirs-oodguard"));
    c.env_remove("NIRS_OODGUARD_SEED");
    c
}

fn small_config(dir: &Path) -> (ExperimentConfig, PathBuf) {
    let mut cfg = ExperimentConfig::toy();
    if let Some(s) = cfg.dataset.synthetic.as_mut() {
        s.n_subjects = 1;
        s.n_trials = 5;
    }
    cfg.training.stage1_epochs = 2;
    cfg.training.stage2_epochs = 2;
    cfg.output_dir = dir.join("out");
    let path = dir.join("cfg.json");
    fs::write(&path, cfg.to_json_pretty()).unwrap();
    (cfg, path)
}

fn text(o: &Output) -> (String, String) {
    (String::from_utf8_lossy(&o.stdout).into_owned(), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    out
}

#[test]
fn shipped_toy_config_matches_the_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json");
    assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::toy());
}

#[test]
fn synth_writes_a_reproducible_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, cfg) = small_config(tmp.path());
    let out = tmp.path().join("data");
    let o = bin().args(["synth", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert!(o.status.success(), "{:?}", text(&o));
    assert!(text(&o).0.contains("10 trials (1 subjects, 2 classes, 8 channels)"));
    assert!(out.join("manifest.json").exists());
    let first = snapshot(&out);
    assert_eq!(first.len(), 11);

    let again = bin().args(["synth", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(again.status.code(), Some(2));
    assert!(text(&again).1.contains("--force"));
    let forced = bin().args(["synth", "--force", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert!(forced.status.success());
    assert_eq!(snapshot(&out), first);

    let bare = tmp.path().join("bare.json");
    fs::write(&bare, r#"{"dataset": {"path": "x"}}"#).unwrap();
    let o = bin().args(["synth", "--config"]).arg(&bare).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).1.contains("dataset.synthetic"));
}

#[test]
fn run_writes_every_artifact_and_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    let (mut cfg, cfg_path) = small_config(tmp.path());

    let data = tmp.path().join("data");
    assert!(bin().args(["synth", "--config"]).arg(&cfg_path).arg("--out").arg(&data).output().unwrap().status.success());
    let before = snapshot(&data);
    cfg.dataset.synthetic = None;
    cfg.dataset.path = Some(data.clone());
    fs::write(&cfg_path, cfg.to_json_pretty()).unwrap();

    let o = bin().args(["run", "--jobs", "1", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(o.status.success(), "{:?}", text(&o));
    let out = &cfg.output_dir;
    for f in ["report.csv", "report.txt", "config.resolved.json", "audit.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(!out.join("INCOMPLETE").exists());
    for k in 0..5 {
        assert!(out.join(format!("checkpoints/s01_fold{k}.ckpt")).exists());
        assert!(out.join(format!("logs/s01_fold{k}_stage2.csv")).exists());
        assert!(out.join(format!("projections/s01_fold{k}_detector.csv")).exists());
    }
    let log = fs::read_to_string(out.join("logs/s01_fold0_stage1.csv")).unwrap();
    assert!(log.starts_with("epoch,ce,metric,combined\n"));
    let records = oodguard::eval::read_report_csv(&out.join("report.csv")).unwrap();
    assert_eq!(records.len(), 5);
    for r in &records {
        assert!(r.metrics.iter().all(|(_, v)| (0.0..=1.0).contains(v)));
        assert!(r.get("exclusion_gauss").is_some());
    }
    assert_eq!(snapshot(&data), before);

    let rerun = tmp.path().join("rerun");
    let o = bin()
        .args(["run", "--jobs", "1", "--config"])
        .arg(out.join("config.resolved.json"))
        .arg("--out")
        .arg(&rerun)
        .output()
        .unwrap();
    assert!(o.status.success(), "{:?}", text(&o));
    let again = oodguard::eval::read_report_csv(&rerun.join("report.csv")).unwrap();
    for (a, b) in records.iter().zip(&again) {
        for ((k, x), (_, y)) in a.metrics.iter().zip(&b.metrics) {
            assert!((x - y).abs() <= 1e-6, "{k}");
        }
    }

    let proj = tmp.path().join("proj");
    let o = bin()
        .args(["project", "--config"])
        .arg(&cfg_path)
        .arg("--checkpoint")
        .arg(out.join("checkpoints/s01_fold2.ckpt"))
        .arg("--out")
        .arg(&proj)
        .output()
        .unwrap();
    assert!(o.status.success(), "{:?}", text(&o));
    assert_eq!(
        fs::read(proj.join("s01_fold2_detector.csv")).unwrap(),
        fs::read(out.join("projections/s01_fold2_detector.csv")).unwrap()
    );

    let o = bin().arg("report").arg(out.join("report.csv")).output().unwrap();
    assert!(o.status.success());
    assert_eq!(text(&o).0.lines().count(), 2);
}

#[test]
fn stage1_only_omits_detector_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, path) = small_config(tmp.path());
    let o = bin().args(["run", "--stage1-only", "--config"]).arg(&path).output().unwrap();
    assert!(o.status.success(), "{:?}", text(&o));
    let header = fs::read_to_string(cfg.output_dir.join("report.csv")).unwrap();
    let header = header.lines().next().unwrap();
    assert!(header.contains("confidence_gauss"));
    assert!(!header.contains("acceptance") && !header.contains("exclusion") && !header.contains("stage1_"));
    assert!(!cfg.output_dir.join("logs/s01_fold0_stage2.csv").exists());
}

#[test]
fn seed_comes_from_flag_then_environment_then_file() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, path) = small_config(tmp.path());
    let seed_of = |dir: &Path| {
        let cfg = ExperimentConfig::load(&dir.join("config.resolved.json")).unwrap();
        cfg.seed
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = bin()
        .env("NIRS_OODGUARD_SEED", "41")
        .args(["run", "--stage1-only", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&a)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(seed_of(&a), 41);
    let o = bin()
        .env("NIRS_OODGUARD_SEED", "41")
        .args(["run", "--stage1-only", "--seed", "7", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&b)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(seed_of(&b), 7);
}

#[test]
fn invalid_band_fails_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let (mut cfg, path) = small_config(tmp.path());
    cfg.preprocess.bandpass.high_hz = 6.25;
    fs::write(&path, cfg.to_json_pretty()).unwrap();
    let o = bin().args(["run", "--config"]).arg(&path).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).1.contains("Nyquist"));
    assert!(!cfg.output_dir.exists());

    fs::write(&path, r#"{"dataset": {"path": "x"}, "trainig": {}}"#).unwrap();
    let o = bin().args(["run", "--config"]).arg(&path).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).1.contains("unknown field"));
}

#[test]
fn missing_dataset_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("cfg.json");
    fs::write(&path, format!(r#"{{"dataset": {{"path": "{}"}}}}"#, tmp.path().join("nope").display())).unwrap();
    let o = bin().args(["run", "--config"]).arg(&path).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(text(&o).1.contains("manifest.json"));
}

#[test]
fn report_formats_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("r.csv");
    fs::write(&p, "subject_id,fold,accuracy,confidence_in\ns1,0,0.647,0.5\n").unwrap();
    let o = bin().arg("report").arg(&p).output().unwrap();
    assert!(o.status.success());
    let (out, _) = text(&o);
    assert_eq!(out.lines().count(), 2);
    assert!(out.contains("0.65 ± 0.00"));

    fs::write(&p, "subject_id,fold,accuracy,confidence_in\ns1,0,0.509,0.5\ns2,0,0.785,0.5\n").unwrap();
    let (out, _) = text(&bin().arg("report").arg(&p).output().unwrap());
    assert!(out.contains("0.65 ± 0.14"), "{out}");

    fs::write(&p, "subject_id,fold,confidence_in\ns1,0,0.5\n").unwrap();
    let o = bin().arg("report").arg(&p).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).1.contains("missing column accuracy"));

    fs::write(&p, "subject_id,fold,accuracy,confidence_in\ns1,0,abc,0.5\n").unwrap();
    let o = bin().arg("report").arg(&p).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).1.contains("row 2, column 3"));
}
