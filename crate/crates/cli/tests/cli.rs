mod common;

use std::process::Command;

use common::Workspace;
use composer_forge_cli::commands::{eval_dir, RUN_ARTIFACTS};
use composer_forge_cli::{cmd_ablate, cmd_encode, cmd_eval, cmd_ingest, cmd_train, ExperimentConfig, CACHE_ENV};
use composer_forge_core::nn::load_meta;
use composer_forge_core::parallel::Parallelism;
use composer_forge_core::pianoroll::{encode, from_cache_bytes, to_cache_bytes, Variant};
use composer_forge_core::smf::read_notes;
use composer_forge_core::testkit::SyntheticCorpus;
use serde_json::json;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_composer-forge"));
    c.env("RUST_LOG", "warn").env_remove(CACHE_ENV);
    c
}

fn two_styles(pieces: usize) -> SyntheticCorpus {
    let mut c = SyntheticCorpus::new(pieces, 25.0, 4);
    c.styles.truncate(2);
    c
}

fn prepared(overrides: serde_json::Value) -> (Workspace, ExperimentConfig) {
    let ws = Workspace::new(&two_styles(4), overrides);
    let cfg = ws.config();
    cmd_ingest(&cfg, false).unwrap();
    assert!(cmd_encode(&cfg, false).unwrap().failures.is_empty());
    (ws, cfg)
}

#[test]
fn missing_csv_exits_with_usage_code_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere/meta.csv");
    let out = bin()
        .current_dir(dir.path())
        .args(["ingest", "--csv"])
        .arg(&missing)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&missing.display().to_string()));
}

#[test]
fn reserved_and_invalid_flags_are_usage_errors() {
    let out = bin().args(["--pedal-extend", "config"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("reserved"));
    let out = bin().args(["--variant", "stereo", "config"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["--workers", "0", "config"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_echo_round_trips_and_honours_overrides() {
    let ws = Workspace::new(&two_styles(3), json!({}));
    let cache = ws.path().join("elsewhere");
    let out = bin()
        .arg("--config")
        .arg(&ws.config_path)
        .args(["--seed", "17", "--variant", "frame-binarized", "--segments", "7", "config"])
        .env(CACHE_ENV, &cache)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let echoed: ExperimentConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(echoed.seed, 17);
    assert_eq!(echoed.variant, Variant::FrameBinarized);
    assert_eq!(echoed.model.in_channels, 2);
    assert_eq!(echoed.n_eval_segments, 7);
    assert_eq!(echoed.data.cache_dir, cache);
    let path = ws.path().join("echo.json");
    std::fs::write(&path, &out.stdout).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), echoed);
}

#[test]
fn ingest_two_composer_fixture() {
    let ws = Workspace::new(&two_styles(5), json!({}));
    let cfg = ws.config();
    let r = cmd_ingest(&cfg, false).unwrap();
    assert_eq!(r.manifest.n_classes(), 2);
    assert_eq!((r.manifest.train.len(), r.manifest.test.len()), (6, 4));
    assert!(r.table.contains("total"));
    let first = std::fs::read(&cfg.data.manifest).unwrap();
    assert!(cmd_ingest(&cfg, false).unwrap().skipped);
    assert!(!cmd_ingest(&cfg, true).unwrap().skipped);
    assert_eq!(std::fs::read(&cfg.data.manifest).unwrap(), first);
}

#[test]
fn encode_is_idempotent_and_reports_bad_files() {
    let ws = Workspace::new(&two_styles(3), json!({}));
    let cfg = ws.config();
    cmd_ingest(&cfg, false).unwrap();
    let bad = cfg.data.midi_root.join("style1/piece002.midi");
    std::fs::write(&bad, b"MThd\x00\x00\x00\x06\x00\x02").unwrap();
    let first = cmd_encode(&cfg, false).unwrap();
    assert_eq!((first.encoded, first.skipped), (5, 0));
    assert_eq!(first.failures.len(), 1);
    assert_eq!(first.failures[0].0, "style1/piece002.midi");
    let again = cmd_encode(&cfg, false).unwrap();
    assert_eq!((again.encoded, again.skipped, again.failures.len()), (0, 5, 1));

    let id = "style0/piece001.midi";
    let cached = std::fs::read(cfg.data.cache_dir.join("style0_piece001.midi.roll")).unwrap();
    let roll = encode(&read_notes(&std::fs::read(cfg.data.midi_root.join(id)).unwrap()).unwrap().notes);
    assert_eq!(cached, to_cache_bytes(&roll));
    assert_eq!(from_cache_bytes(&cached, id).unwrap(), roll);
}

#[test]
fn train_eval_and_ablate_reuse_one_checkpoint() {
    let (_ws, cfg) = prepared(json!({}));
    let s = Parallelism::sequential().install(|| cmd_train(&cfg, false)).unwrap();
    assert!(!s.skipped);
    for name in RUN_ARTIFACTS {
        assert!(s.run_dir.join(name).is_file(), "{name}");
    }
    let meta = load_meta(&s.run_dir.join("best.ckpt")).unwrap();
    assert_eq!(meta.config_hash.as_deref(), Some(s.config_hash.as_str()));
    let log = std::fs::read_to_string(s.run_dir.join("log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,lr,train_loss,train_acc,val_f1"));
    assert_eq!(log.lines().count(), 3);
    let ckpt = std::fs::read(s.run_dir.join("best.ckpt")).unwrap();

    assert!(cmd_train(&cfg, false).unwrap().skipped);
    let mut short = cfg.clone();
    short.n_eval_segments = 2;
    let r4 = cmd_eval(&cfg, false).unwrap();
    let r2 = cmd_eval(&short, false).unwrap();
    assert_eq!((r4.n_segments_used, r2.n_segments_used), (4, 2));
    assert_ne!(eval_dir(&cfg), eval_dir(&short));
    for name in ["report.json", "confusion.csv", "per_class_f1.csv", "config.json"] {
        assert!(eval_dir(&cfg).join(name).is_file());
    }
    assert_eq!(r4.confusion.iter().flatten().sum::<u64>() as usize, r4.n_pieces);
    assert!(r4.config_hash.is_some() && r2.config_hash.is_some());
    assert_ne!(r4.config_hash, r2.config_hash);

    let rows = cmd_ablate(&cfg, false).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.axis == "segments" && (0.0..=1.0).contains(&r.weighted_f1)));
    assert_eq!(cmd_ablate(&cfg, false).unwrap(), rows);
    assert_eq!(std::fs::read(s.run_dir.join("best.ckpt")).unwrap(), ckpt);
}

#[test]
fn eval_from_its_own_config_reproduces_the_report() {
    let (_ws, cfg) = prepared(json!({ "train": { "epochs": 1 } }));
    Parallelism::sequential().install(|| cmd_train(&cfg, false)).unwrap();
    Parallelism::sequential().install(|| cmd_eval(&cfg, false)).unwrap();
    let dir = eval_dir(&cfg);
    let report = std::fs::read(dir.join("report.json")).unwrap();
    let echoed = ExperimentConfig::load(&dir.join("config.json")).unwrap();
    Parallelism::sequential().install(|| cmd_eval(&echoed, true)).unwrap();
    assert_eq!(std::fs::read(dir.join("report.json")).unwrap(), report);
}

#[test]
fn variant_mismatch_and_missing_checkpoints_are_reported() {
    let (_ws, cfg) = prepared(json!({ "train": { "epochs": 1 } }));
    cmd_train(&cfg, false).unwrap();
    let mut other = cfg.clone();
    other.variant = Variant::OnsetOmitted;
    other.model.in_channels = 1;
    other.data.checkpoint = Some(cfg.data.run_dir.join("best.ckpt"));
    assert_eq!(cmd_eval(&other, false).unwrap_err().exit_code(), 2);
    let mut ablate = cfg.clone();
    ablate.ablation.segment_grid.clear();
    ablate.ablation.variants = vec![Variant::Full, Variant::FrameBinarized];
    assert!(cmd_ablate(&ablate, false).is_err());
}

#[test]
fn binary_runs_the_whole_pipeline() {
    let ws = Workspace::new(&two_styles(3), json!({ "train": { "epochs": 1 } }));
    for cmd in ["ingest", "encode", "train", "eval"] {
        let out = bin().arg("--config").arg(&ws.config_path).args(["--workers", "1", cmd]).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = bin()
        .arg("--config")
        .arg(&ws.config_path)
        .args(["ablate", "--grid", "1,3"])
        .output()
        .unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 3);
    let midi = ws.path().join("midi/style0/piece000.midi");
    let out = bin().arg("notes").arg(&midi).output().unwrap();
    let notes: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(notes["notes"].as_array().is_some_and(|a| !a.is_empty()));
}
