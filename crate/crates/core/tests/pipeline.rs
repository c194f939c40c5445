//! End-to-end runs through the harness: reproducibility, resume, evaluation,
//! sweeps and ablation wiring.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use dsgdn_core::harness::eval::{noise_grid, write_reports};
use dsgdn_core::harness::sweep::{parse_grid, run_sweep, SweepParam};
use dsgdn_core::harness::train::{evaluate_records, Checkpoint};
use dsgdn_core::harness::{dataset, train, train_on, Ablation, RunConfig};
use dsgdn_core::{model, rng, Error};

const FILES: [&str; 7] = [
    "metrics.jsonl",
    "losses.csv",
    "balance.csv",
    "lambda.csv",
    "checkpoint.json",
    "best.json",
    "summary.json",
];

fn small(epochs: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_overrides(&[
        "synth=tiny",
        "synth.dialogues=10",
        "hidden=8",
        "enc_heads=2",
        "heads=2",
        "batch_size=3",
        "lr=1e-3",
        "warmup=1",
        "p_exe=1",
    ])
    .unwrap();
    c.epochs = epochs;
    c
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn same_seed_runs_write_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(&small(3), Some(a.path()), false).unwrap();
    train(&small(3), Some(b.path()), false).unwrap();
    for f in FILES {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f} differs");
    }
    let balance = String::from_utf8(read(a.path(), "balance.csv")).unwrap();
    let rows: Vec<&str> = balance.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("0,,,"), "balance is gated off during warm-up: {}", rows[1]);
    assert!(!rows[2].starts_with("1,,,"), "balance runs after warm-up: {}", rows[2]);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    train(&small(4), Some(full.path()), false).unwrap();

    let part = tempfile::tempdir().unwrap();
    train(&small(2), Some(part.path()), false).unwrap();
    // a crash after logging but before checkpointing leaves stale rows behind
    let losses = part.path().join("losses.csv");
    let mut text = fs::read_to_string(&losses).unwrap();
    text.push_str("2,9,9,9,9,9,9\n");
    fs::write(&losses, text).unwrap();
    let resumed = train(&small(4), Some(part.path()), true).unwrap();

    for f in FILES {
        assert_eq!(read(full.path(), f), read(part.path(), f), "{f} differs after resume");
    }
    let again = train(&small(4), None, false).unwrap();
    assert_eq!(resumed, again);
}

#[test]
fn precision_f64_runs() {
    let mut c = small(1);
    c.set("precision", "f64").unwrap();
    let dir = tempfile::tempdir().unwrap();
    train(&c, Some(dir.path()), false).unwrap();
    assert_eq!(Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap().precision, "f64");
}

#[test]
fn non_finite_loss_names_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    train(&small(1), Some(dir.path()), false).unwrap();
    let path = dir.path().join("checkpoint.json");
    let mut ck = Checkpoint::load(&path).unwrap();
    for t in ck.params.values_mut() {
        t.data.iter_mut().for_each(|v| *v = 3e38);
    }
    ck.save(&path).unwrap();
    let err = train(&small(2), Some(dir.path()), true).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    let msg = err.to_string();
    assert!(msg.contains("epoch 1") && msg.contains("checkpoint.json"), "{msg}");
}

#[test]
fn zero_noise_row_equals_plain_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(2);
    train(&c, Some(dir.path()), false).unwrap();
    let ck = Checkpoint::load(&dir.path().join("best.json")).unwrap();
    let data = dataset::load(&c).unwrap();
    let rows = noise_grid(&ck, &data.test, &[0.0, 0.1, 0.7], c.seed, c.batch_size).unwrap();
    let plain = evaluate_records(&ck.param_store::<f32>().unwrap(), &ck.model, &data.test, c.batch_size).unwrap();
    assert_eq!(rows[0].metrics, plain);
    assert_eq!(rows[0].metrics.confusion.len(), 6);
    assert!(rows[0].metrics.confusion.iter().all(|r| r.len() == 6));

    let out = dir.path().join("eval");
    write_reports(&out, &rows).unwrap();
    let csv = fs::read_to_string(out.join("noise.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("sigma,wa_acc,wa_f1,n\n0,"));
    let conf: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("confusion.json")).unwrap()).unwrap();
    assert_eq!(conf.as_array().unwrap().len(), 3);
}

#[test]
fn sweep_points_are_training_runs() {
    let c = small(1);
    let data = dataset::load(&c).unwrap();
    let single = run_sweep(&c, SweepParam::Window, &parse_grid(SweepParam::Window, "5").unwrap(), None).unwrap();
    let direct = train_on(&c, &data, None, false).unwrap();
    assert_eq!(single[0].wa_f1, direct.test.wa_f1);
    assert_eq!(single[0].wa_acc, direct.test.wa_acc);

    let dir = tempfile::tempdir().unwrap();
    let grid = parse_grid(SweepParam::Window, "1,3,5,7,9").unwrap();
    run_sweep(&c, SweepParam::Window, &grid, Some(dir.path())).unwrap();
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("window,wa_acc,wa_f1,best_epoch\n1,"));
    assert!(dir.path().join("window=9").join("summary.json").exists());
}

fn names(a: Ablation) -> (BTreeSet<String>, RunConfig) {
    let mut c = small(1);
    c.apply_ablation(a);
    let data = dataset::load(&c).unwrap();
    let mcfg = dataset::model_config(&c, &data.info);
    let store = model::init_params::<f32, _>(&mcfg, &mut rng::stream(0, "init", 0)).unwrap();
    (store.names().map(str::to_string).collect(), c)
}

#[test]
fn ablations_change_only_their_subsystem() {
    let (full, cf) = names(Ablation::Full);
    let (no_md, cm) = names(Ablation::WithoutMd);
    let (plain, cp) = names(Ablation::WithoutDiffRgcn);
    let (bare, cn) = names(Ablation::NoGraph);

    assert_eq!(full, no_md);
    assert!(cf.balance.enabled && !cm.balance.enabled);
    assert_eq!(cf.to_text().replace("balance = true", "balance = false"), cm.to_text());

    let outside_gnn = |s: &BTreeSet<String>| s.iter().filter(|n| !n.starts_with("gnn.")).cloned().collect::<BTreeSet<_>>();
    assert_eq!(outside_gnn(&full), outside_gnn(&plain));
    assert_eq!(outside_gnn(&full), bare);
    assert!(bare.iter().all(|n| !n.starts_with("gnn.")));
    let removed: BTreeSet<_> = full.difference(&plain).collect();
    assert!(removed
        .iter()
        .all(|n| n.contains(".neg.") || n.contains(".rel.") || n.contains(".lambda.")));
    assert!(!removed.is_empty() && plain.is_subset(&full));
    assert!(cp.balance.enabled && cn.balance.enabled);
}
