use std::fs;
use std::path::Path;
use std::process::{Command, Stdio};

use reidpatch::attack::AttackMode;
use reidpatch::imagecore::Image;
use reidpatch_cli::*;

fn write_png(path: &Path, shade: u8) {
    Image::filled(16, 8, [shade as f64 / 255.0, 0.4, 0.8]).unwrap().save_png(path).unwrap();
}

fn binary() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_reidpatch"));
    c.env("RUST_LOG", "error").stdout(Stdio::null()).stderr(Stdio::null());
    c
}

/// Small enough to run the whole pipeline in a few seconds.
fn small_config(out: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
output_dir = {out:?}
[dataset]
source = "toy"
identity_count = 4
camera_count = 2
images_per_identity_per_camera = 6
height = 16
width = 8
[model.train]
epochs = 2
[model.train.architecture]
input_height = 16
input_width = 8
channels = [4, 6]
embedding_dim = 8
[attack]
pattern_height = 6
pattern_width = 6
max_iterations = 5
[attack.augment]
per_original = 1
[evaluation]
queries = 5
adversary_gallery_size = 2
"#
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}

#[test]
fn ingest_two_camera_folder() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..10u32 {
        let camera = 1 + i % 2;
        write_png(&dir.path().join(format!("{:04}_c{camera}_{:04}.png", 1 + i / 4, i)), i as u8 * 20);
    }
    fs::write(dir.path().join("junk.txt"), "not an image").unwrap();
    let images = ingest_folder(dir.path(), 32, 16).unwrap();
    assert_eq!(images.len(), 10);
    let cameras: std::collections::BTreeSet<u32> = images.iter().map(|li| li.camera).collect();
    assert_eq!(cameras.into_iter().collect::<Vec<_>>(), vec![1, 2]);
    assert!(images.iter().all(|li| li.image.height() == 32 && li.image.width() == 16));
}

#[test]
fn ingest_parses_name_and_skips_junk() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("0001_c1_0001.png"), 50);
    fs::write(dir.path().join("junk.txt"), "x").unwrap();
    let images = ingest_folder(dir.path(), 16, 8).unwrap();
    assert_eq!(images.len(), 1);
    assert_eq!((images[0].identity, images[0].camera, images[0].sequence), (1, 1, 1));
}

#[test]
fn ingest_empty_folder_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("readme.md"), "x").unwrap();
    let err = ingest_folder(dir.path(), 16, 8).unwrap_err();
    assert!(matches!(err, CliError::Ingest(_)));
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn impersonation_without_target_fails_before_any_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = small_config(&out);
    cfg.attack.mode = AttackMode::Impersonate;
    let err = run_experiment(&cfg, Stage::Report).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert!(!out.join("dataset").exists());

    let status = binary().args(["--mode", "impersonate", "--out"]).arg(&out).arg("run").status().unwrap();
    assert_eq!(status.code(), Some(3));
    assert!(!out.join("dataset").exists());
}

#[test]
fn config_toml_round_trip() {
    let cfg = small_config(Path::new("somewhere"));
    assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    let default = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::from_toml_str(&default.to_toml_string()).unwrap(), default);
    assert!(ExperimentConfig::from_toml_str("no_such_field = 1").is_err());
}

#[test]
fn example_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/example.toml");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.output_dir = ExperimentConfig::default().output_dir;
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn overrides_apply_and_reseed() {
    let mut cfg = ExperimentConfig::default();
    cfg.apply(&Overrides { seed: Some(9), mode: Some(AttackMode::Impersonate), target: Some(4), output_dir: None });
    assert_eq!((cfg.seed, cfg.attack.mode, cfg.adversary.target), (9, AttackMode::Impersonate, Some(4)));
    let r = cfg.resolved();
    assert_eq!(r.attack.seed, cfg.stage_seed(Stage::Attack));
    assert_ne!(r.attack.seed, r.evaluation.seed);
}

#[test]
fn rerun_reuses_cached_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir.path().join("run"));
    let first = run_experiment(&cfg, Stage::Report).unwrap();
    assert!(first.stages.iter().all(|s| !s.cached));
    assert_eq!(first.stages.len(), Stage::ALL.len());
    let second = run_experiment(&cfg, Stage::Report).unwrap();
    assert!(second.stages.iter().all(|s| s.cached));
    for (a, b) in first.stages.iter().zip(&second.stages) {
        assert_eq!(a.content_hash, b.content_hash);
    }
    let manifest = read_manifest(&dir.path().join("run/attack")).unwrap();
    assert_eq!(manifest.global_seed, 0);

    // changing the attack invalidates attack and everything after it
    let mut changed = cfg.clone();
    changed.attack.max_iterations = 6;
    let third = run_experiment(&changed, Stage::Report).unwrap();
    let cached: Vec<bool> = third.stages.iter().map(|s| s.cached).collect();
    assert_eq!(cached, vec![true, true, true, false, false, false]);
}

#[test]
fn run_stops_at_requested_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let summary = run_experiment(&small_config(&out), Stage::Genset).unwrap();
    assert_eq!(summary.stages.len(), 3);
    assert!(out.join("genset").exists() && !out.join("attack").exists());
}

#[test]
fn stage_flag_outside_run_is_rejected() {
    let status = binary().args(["--stage", "attack", "evaluate"]).status().unwrap();
    assert_eq!(status.code(), Some(3));
    let status = binary().args(["--stage", "nonsense", "run"]).status().unwrap();
    assert_ne!(status.code(), Some(0));
}
