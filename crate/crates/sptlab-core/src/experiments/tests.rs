use super::*;
use crate::checkpoint::load_checkpoint;
use crate::model::ModelParams;
use tempfile::tempdir;

fn tiny_sizes() -> SplitSizes {
    SplitSizes {
        train: 8,
        val: 8,
        test: 8,
        unlabeled: 24,
    }
}

fn tiny_cfg(stage: Stage, epochs: usize, seed: u64) -> RunConfig {
    RunConfig {
        dataset: DatasetSpec::Synthetic {
            master_seed: 7,
            sizes: tiny_sizes(),
            flip_fraction: 0.0,
        },
        model: ModelConfig::toy(8),
        stage,
        epochs,
        lr: 3e-3,
        batch_size: 0,
        seed,
        init: InitSpec::None,
        frozen: "none".into(),
        mask_fraction: 0.15,
        snapshot_epochs: None,
    }
}

fn params_equal(a: &ModelParams, b: &ModelParams) -> bool {
    a.names() == b.names()
        && a.names().iter().all(|n| {
            let (ma, mb) = (a.get(n).unwrap(), b.get(n).unwrap());
            ma.shape() == mb.shape()
                && ma
                    .data()
                    .iter()
                    .zip(mb.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

#[test]
fn stream_epoch_separates_stages() {
    assert_eq!(stream_epoch(Stage::Spt, 5), 5);
    assert_eq!(stream_epoch(Stage::Finetune, 5), (1 << 20) + 5);
    assert_eq!(
        stream_epoch(Stage::Finetune, 5),
        stream_epoch(Stage::Scratch, 5)
    );
}

#[test]
fn default_snapshots_cover_early_and_century_epochs() {
    assert_eq!(
        default_snapshot_epochs(250),
        [1, 10, 50, 100, 200].into_iter().collect()
    );
    assert_eq!(default_snapshot_epochs(2), [1].into_iter().collect());
    assert!(default_snapshot_epochs(0).is_empty());
}

#[test]
fn pretrain_zero_epochs_checkpoints_the_random_init() {
    let dir = tempdir().unwrap();
    let cfg = tiny_cfg(Stage::Spt, 0, 11);
    let (params, history) = run_pretrain(&cfg, Some(dir.path())).unwrap();
    assert!(history.records.is_empty());
    let fresh = ModelParams::init(&cfg.model, 11).unwrap();
    assert!(params_equal(&params, &fresh));

    let (loaded, manifest) = load_checkpoint(&dir.path().join("spt.ckpt")).unwrap();
    assert!(params_equal(&loaded, &fresh));
    assert_eq!(manifest.provenance.stage, "spt");
    assert_eq!(manifest.provenance.epochs, 0);
    assert!(!manifest.provenance.dataset_hash.is_empty());
}

#[test]
fn pretraining_reduces_reconstruction_loss() {
    let mut cfg = tiny_cfg(Stage::Spt, 12, 3);
    cfg.lr = 1e-2;
    cfg.batch_size = 4;
    let (_, history) = run_pretrain(&cfg, None).unwrap();
    history.validate().unwrap();
    // Masks are resampled every epoch, so compare two-epoch averages to
    // damp the sampling noise.
    let avg = |a: usize, b: usize| {
        (history.loss_at("unlabeled", a).unwrap() + history.loss_at("unlabeled", b).unwrap()) / 2.0
    };
    let (early, late) = (avg(1, 2), avg(11, 12));
    assert!(
        late < early,
        "reconstruction loss should drop: early={} late={}",
        early,
        late
    );
}

#[test]
fn pretrain_writes_requested_snapshots() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny_cfg(Stage::Spt, 3, 1);
    cfg.snapshot_epochs = Some(vec![2, 99]);
    run_pretrain(&cfg, Some(dir.path())).unwrap();
    assert!(dir.path().join("spt-epoch2.ckpt").exists());
    assert!(!dir.path().join("spt-epoch99.ckpt").exists());
    let (_, manifest) = load_checkpoint(&dir.path().join("spt-epoch2.ckpt")).unwrap();
    assert_eq!(manifest.provenance.epochs, 2);
}

#[test]
fn identical_configs_produce_identical_runs() {
    let cfg = tiny_cfg(Stage::Scratch, 2, 5);
    let (p1, h1) = run_finetune(&cfg, None).unwrap();
    let (p2, h2) = run_finetune(&cfg, None).unwrap();
    assert!(params_equal(&p1, &p2));
    assert_eq!(h1, h2);
}

#[test]
fn zero_epoch_finetune_only_evaluates() {
    let cfg = tiny_cfg(Stage::Finetune, 0, 2);
    let (params, history) = run_finetune(&cfg, None).unwrap();
    history.validate().unwrap();
    let splits: Vec<(&str, usize)> = history
        .records
        .iter()
        .map(|r| (r.split.as_str(), r.epoch))
        .collect();
    assert_eq!(splits, [("val", 0), ("test", 0)]);
    assert!(params_equal(&params, &ModelParams::init(&cfg.model, 2).unwrap()));
}

#[test]
fn training_history_has_all_three_splits_per_epoch() {
    let cfg = tiny_cfg(Stage::Scratch, 2, 9);
    let (_, history) = run_finetune(&cfg, None).unwrap();
    history.validate().unwrap();
    for epoch in 1..=2 {
        for split in ["train", "val", "test"] {
            assert!(
                history.loss_at(split, epoch).is_some(),
                "missing {} record at epoch {}",
                split,
                epoch
            );
        }
    }
    assert!(history.best_val().is_some());
}

#[test]
fn frozen_attention_blocks_are_untouched() {
    let mut cfg = tiny_cfg(Stage::Scratch, 2, 6);
    cfg.frozen = "attention".into();
    let init = ModelParams::init(&cfg.model, 6).unwrap();
    let (params, _) = run_finetune(&cfg, None).unwrap();
    for name in ["layer0.WQ", "layer0.WK", "layer0.WV", "layer0.WO"] {
        let (a, b) = (init.get(name).unwrap(), params.get(name).unwrap());
        assert!(
            a.data().iter().zip(b.data()).all(|(x, y)| x == y),
            "frozen block {} moved",
            name
        );
    }
    let (a, b) = (
        init.get("head.cls.W").unwrap(),
        params.get("head.cls.W").unwrap(),
    );
    assert!(
        a.data().iter().zip(b.data()).any(|(x, y)| x != y),
        "head should have trained"
    );
}

#[test]
fn checkpoint_with_mismatched_model_config_is_rejected() {
    let dir = tempdir().unwrap();
    let pre = tiny_cfg(Stage::Spt, 0, 1);
    run_pretrain(&pre, Some(dir.path())).unwrap();

    let mut ft = tiny_cfg(Stage::Finetune, 1, 1);
    ft.model = ModelConfig::toy(16);
    ft.init = InitSpec::Checkpoint {
        path: dir.path().join("spt.ckpt"),
        selection: "all".into(),
    };
    let err = run_finetune(&ft, None).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "got {:?}", err);
}

#[test]
fn scratch_stage_refuses_checkpoint_init() {
    let mut cfg = tiny_cfg(Stage::Scratch, 1, 1);
    cfg.init = InitSpec::Checkpoint {
        path: "/nonexistent.ckpt".into(),
        selection: "all".into(),
    };
    let err = run_finetune(&cfg, None).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn sweep_single_cells_match_direct_runs() {
    let dir = tempdir().unwrap();
    let base = tiny_cfg(Stage::Finetune, 2, 0);
    let grid = SweepGrid {
        lrs: vec![3e-3],
        seeds: vec![4],
        pretrain_epochs: vec![2],
        init_selections: vec!["none".into(), "all".into()],
        pretrain_lr: 1e-3,
        pretrain_batch: 8,
    };
    let table = run_sweep(&grid, &base).unwrap();
    assert_eq!(table.cells.len(), 2);
    for cell in &table.cells {
        assert!(cell.error.is_none(), "cell failed: {:?}", cell.error);
    }

    // Direct scratch run for the "none" cell.
    let mut scratch = base.clone();
    scratch.seed = 4;
    let (_, h_scratch) = run_finetune(&scratch, None).unwrap();

    // Direct pretrain + resume for the "all" cell.
    let mut pre = base.clone();
    pre.stage = Stage::Spt;
    pre.epochs = 2;
    pre.lr = 1e-3;
    pre.batch_size = 8;
    pre.seed = 4;
    run_pretrain(&pre, Some(dir.path())).unwrap();
    let mut resume = base.clone();
    resume.seed = 4;
    resume.init = InitSpec::Checkpoint {
        path: dir.path().join("spt.ckpt"),
        selection: "all".into(),
    };
    let (_, h_resume) = run_finetune(&resume, None).unwrap();

    for cell in &table.cells {
        let direct = if cell.init == "none" { &h_scratch } else { &h_resume };
        assert_eq!(
            cell.peak_test_acc.to_bits(),
            direct.peak_accuracy("test").unwrap().1.to_bits(),
            "sweep cell '{}' deviates from the direct run",
            cell.init
        );
        assert_eq!(
            cell.peak_train_acc.to_bits(),
            direct.peak_accuracy("train").unwrap().1.to_bits()
        );
    }

    let csv = table.to_csv();
    assert!(csv.starts_with("lr,seed,pretrain_epochs,init,"));
    assert_eq!(csv.lines().count(), 3);
    let summary = table.summary_csv();
    assert_eq!(summary.lines().count(), 3, "one row per (lr, init) group");
}

#[test]
fn sweep_records_per_cell_failures_without_aborting() {
    let base = tiny_cfg(Stage::Finetune, 1, 0);
    let grid = SweepGrid {
        lrs: vec![1e-3],
        seeds: vec![0],
        pretrain_epochs: vec![1],
        init_selections: vec!["no-such-selector".into(), "none".into()],
        pretrain_lr: 1e-3,
        pretrain_batch: 8,
    };
    let table = run_sweep(&grid, &base).unwrap();
    let bad = table.cells.iter().find(|c| c.init == "no-such-selector").unwrap();
    assert!(bad.error.as_deref().unwrap().contains("no-such-selector"));
    let good = table.cells.iter().find(|c| c.init == "none").unwrap();
    assert!(good.error.is_none());
    assert!(table.to_csv().contains("no-such-selector"));
}

#[test]
fn displacement_is_zero_between_identical_stages() {
    let cfg = ModelConfig::toy(8);
    let p = ModelParams::init(&cfg, 0).unwrap();
    let report = displacement_report(&StageParams {
        r: &p,
        spt: &p,
        sc: &p,
        ft: &p,
    })
    .unwrap();
    let mut lines = report.lines();
    assert_eq!(
        lines.next().unwrap(),
        "block,r_to_spt,r_to_sc,spt_to_ft,sc_to_ft,r_to_ft,norm_r,norm_spt,norm_sc,norm_ft"
    );
    let body: Vec<&str> = lines.collect();
    // Aggregate encoder row first, then one row per block.
    assert_eq!(body.len(), 1 + p.names().len());
    assert!(body[0].starts_with("encoder (all),"));
    for line in &body {
        let cols: Vec<&str> = line.split(',').collect();
        for c in &cols[1..6] {
            assert_eq!(c.parse::<f64>().unwrap(), 0.0);
        }
        let norms: Vec<f64> = cols[6..].iter().map(|c| c.parse().unwrap()).collect();
        assert!(norms.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn displacement_matches_hand_computed_frobenius_distance() {
    let cfg = ModelConfig::toy(8);
    let r = ModelParams::init(&cfg, 0).unwrap();
    let mut ft = r.clone();
    // Move encoder.E by a constant 0.5; distance is 0.5 * sqrt(numel).
    let block = ft.get_mut("encoder.E").unwrap();
    let numel = block.numel();
    for v in block.data_mut() {
        *v += 0.5;
    }
    let expect = 0.5 * (numel as f64).sqrt();

    let report = displacement_report(&StageParams {
        r: &r,
        spt: &r,
        sc: &r,
        ft: &ft,
    })
    .unwrap();
    for line in report.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let r_to_ft: f64 = cols[5].parse().unwrap();
        if cols[0] == "encoder.E" || cols[0] == "encoder (all)" {
            assert!(
                (r_to_ft - expect).abs() < 1e-12,
                "{}: {} vs {}",
                cols[0],
                r_to_ft,
                expect
            );
        } else {
            assert_eq!(r_to_ft, 0.0, "{} should not have moved", cols[0]);
        }
    }
}

#[test]
fn displacement_rejects_mismatched_block_sets() {
    let a = ModelParams::init(&ModelConfig::toy(8), 0).unwrap();
    let b = ModelParams::init(&ModelConfig::toy(16), 0).unwrap();
    let err = displacement_report(&StageParams {
        r: &a,
        spt: &b,
        sc: &a,
        ft: &a,
    })
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn run_config_fills_defaults_and_rejects_unknown_keys() {
    let model = serde_json::to_value(ModelConfig::toy(8)).unwrap();
    let minimal = serde_json::json!({
        "dataset": {"kind": "synthetic", "master_seed": 7},
        "model": model,
        "stage": "scratch",
        "epochs": 3,
        "seed": 0
    });
    let cfg: RunConfig = serde_json::from_value(minimal.clone()).unwrap();
    assert_eq!(cfg.lr, 1e-3);
    assert_eq!(cfg.batch_size, 0);
    assert_eq!(cfg.frozen, "none");
    assert_eq!(cfg.mask_fraction, 0.15);
    assert_eq!(cfg.init, InitSpec::None);
    match cfg.dataset {
        DatasetSpec::Synthetic {
            sizes,
            flip_fraction,
            ..
        } => {
            assert_eq!(sizes, SplitSizes::default());
            assert_eq!(flip_fraction, 0.15);
        }
        _ => panic!("wrong dataset kind"),
    }
    // Round trip preserves the resolved config exactly.
    let json = serde_json::to_string(&cfg).unwrap();
    let back: RunConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, cfg);

    let mut with_typo = minimal;
    with_typo["lr_schdule"] = serde_json::json!("cosine");
    let err = serde_json::from_value::<RunConfig>(with_typo).unwrap_err();
    assert!(err.to_string().contains("lr_schdule"), "{}", err);
}

#[test]
fn metrics_validation_rejects_gaps_and_bad_accuracy() {
    let mut h = MetricsHistory::default();
    h.push(1, "train", 0.5, 0.6);
    h.push(3, "train", 0.4, 0.7);
    assert!(h.validate().is_err());

    let mut h = MetricsHistory::default();
    h.push(1, "train", 0.5, 1.2);
    assert!(h.validate().is_err());

    let mut h = MetricsHistory::default();
    h.push(1, "train", 0.5, 0.6);
    h.push(2, "train", 0.4, 0.7);
    h.validate().unwrap();
    assert_eq!(h.to_csv().lines().count(), 3);
    assert_eq!(h.peak_accuracy("train"), Some((2, 0.7)));
}

#[test]
fn log_spaced_grid_hits_endpoints() {
    let lrs = log_spaced_lrs(1e-4, 1e-1, 8);
    assert_eq!(lrs.len(), 8);
    assert!((lrs[0] - 1e-4).abs() < 1e-18);
    assert!((lrs[7] - 1e-1).abs() < 1e-12);
    assert!(lrs.windows(2).all(|w| w[1] > w[0]));
    let grid = fig_grid_default();
    assert_eq!(grid.seeds.len(), 10);
    assert_eq!(grid.init_selections, ["none", "all"]);
}
