use std::path::Path;
use std::process::{Command, Output};

fn safr(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_safr"));
    cmd.args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("SAFR_") {
            cmd.env_remove(k);
        }
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &[(&str, &str)] = &[
    ("SAFR_MODEL__WIDTH_MULTIPLIER", "0.125"),
    ("SAFR_MODEL__INPUT_SIZE", "32"),
    ("SAFR_SAMPLER__P", "4"),
    ("SAFR_SAMPLER__K", "2"),
    ("SAFR_TOTAL_EPOCHS", "1"),
    ("SAFR_SYNTH__NUM_IDS", "4"),
    ("SAFR_SYNTH__SAMPLES_PER_ID", "4"),
    ("SAFR_SYNTH__QUERY_PER_ID", "1"),
    ("SAFR_SYNTH__GALLERY_PER_ID", "2"),
    ("SAFR_SYNTH__IMAGE_SIZE", "32"),
];

fn synth(dir: &Path) -> String {
    let out = dir.join("data");
    let o = safr(&["synth-data", "--seed", "5", "--out", out.to_str().unwrap()], TINY);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("manifest.csv").to_string_lossy().into_owned()
}

#[test]
fn no_subcommand_prints_usage_and_exits_2() {
    let o = safr(&[], &[]);
    assert_eq!(o.status.code(), Some(2));
    let text = stdout(&o) + &stderr(&o);
    assert!(text.contains("Usage"), "{text}");
}

#[test]
fn unknown_flag_is_rejected_on_one_line() {
    let o = safr(&["profile", "--bogus"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr(&o).trim_end().lines().count(), 1, "{}", stderr(&o));
}

#[test]
fn bad_config_exits_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = safr(&["profile", "--out", out], &[("SAFR_LOSS__MARGIN", "\"wide\"")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("loss.margin"), "{}", stderr(&o));

    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"model": {"variant": "huge"}}"#).unwrap();
    let o = safr(&["profile", "--config", cfg.to_str().unwrap(), "--out", out], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.variant"), "{}", stderr(&o));

    let o = safr(&["profile", "--out", out], &[("SAFR_MODEL__WIDTH_MULTIPLIER", "-1")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.width_multiplier"), "{}", stderr(&o));
}

#[test]
fn runtime_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let o = safr(
        &["train", "--manifest", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()],
        &[],
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);
}

#[test]
fn profile_all_writes_five_cards() {
    let dir = tempfile::tempdir().unwrap();
    let o = safr(&["profile", "--variant", "all", "--out", dir.path().to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for v in ["baseline", "large", "medium", "small", "micro"] {
        assert!(dir.path().join(format!("{v}.md")).is_file());
        assert!(dir.path().join(format!("{v}.json")).is_file());
    }
    assert!(dir.path().join("resolved_config.json").is_file());
}

#[test]
fn precedence_flag_beats_env_beats_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"seed": 1, "synth": {"num_ids": 3}, "eval": {"max_rank": 7}}"#).unwrap();
    let out = dir.path().join("o");
    let o = safr(
        &["synth-data", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out", out.to_str().unwrap()],
        &[("SAFR_SEED", "4"), ("SAFR_SYNTH__NUM_IDS", "2")],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 9);
    assert_eq!(resolved["synth"]["num_ids"], 2);
    assert_eq!(resolved["eval"]["max_rank"], 7);
}

#[test]
fn train_eval_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let run = dir.path().join("run");
    let o = safr(&["train", "--manifest", &manifest, "--out", run.to_str().unwrap(), "--workers", "2"], TINY);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["last.ckpt", "best.ckpt", "train_log.jsonl", "labels.csv", "resolved_config.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let ckpt = run.join("last.ckpt");

    let ev = dir.path().join("eval");
    let o = safr(
        &[
            "eval",
            "--manifest",
            &manifest,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            ev.to_str().unwrap(),
            "--metric",
            "cosine",
            "--cross-camera-filter",
            "off",
        ],
        TINY,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("Rank-1"));
    assert!(ev.join("eval_report.json").is_file());

    let ex = dir.path().join("emb");
    let o = safr(
        &["export-embeddings", "--manifest", &manifest, "--checkpoint", ckpt.to_str().unwrap(), "--out", ex.to_str().unwrap()],
        TINY,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let first = std::fs::read(ex.join("gallery.emb")).unwrap();
    let (batch, meta) = safr::evaluation::read_embeddings(&ex.join("gallery.emb")).unwrap();
    assert_eq!(meta.count, 8);
    assert_eq!(first.len(), 4 * meta.count * meta.dims);
    assert_eq!(batch.identities.len(), 8);

    let o = safr(
        &["export-embeddings", "--manifest", &manifest, "--checkpoint", ckpt.to_str().unwrap(), "--out", ex.to_str().unwrap()],
        TINY,
    );
    assert!(o.status.success());
    assert_eq!(std::fs::read(ex.join("gallery.emb")).unwrap(), first);
}

#[test]
fn resolved_config_reproduces_training() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let a = dir.path().join("a");
    let o = safr(&["train", "--manifest", &manifest, "--seed", "3", "--out", a.to_str().unwrap()], TINY);
    assert!(o.status.success(), "{}", stderr(&o));

    let b = dir.path().join("b");
    let resolved = a.join("resolved_config.json");
    let o = safr(&["train", "--config", resolved.to_str().unwrap(), "--out", b.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));

    let losses = |dir: &Path| -> Vec<f64> {
        safr::training::read_log(&dir.join("train_log.jsonl"))
            .unwrap()
            .iter()
            .map(|r| r.loss_total)
            .collect()
    };
    assert_eq!(losses(&a), losses(&b));
    assert!(!losses(&a).is_empty());
}
