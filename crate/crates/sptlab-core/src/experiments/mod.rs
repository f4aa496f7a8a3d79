//! End-to-end training pipelines: masked-reconstruction pretraining,
//! label finetuning (from scratch or from a checkpoint, with optional
//! block freezing and hybrid initialization), learning-rate × seed sweeps,
//! and parameter-displacement reports.
//!
//! Every source of randomness is a keyed stream of the run seed, so a
//! config determines each metric and checkpoint byte exactly, independent
//! of thread count or execution order. Pretraining and finetuning offset
//! their epoch-keyed streams so the two stages never reuse noise.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, load_checkpoint, Provenance};
use crate::datagen::{
    generate_dataset, load_jsonl_dataset, Dataset, JsonlSchema, Sequence, SplitSizes,
};
use crate::error::{Error, Result};
use crate::model::{
    backward_pass, forward_classify_batch, forward_reconstruct_batch, InputKind, ModelConfig,
    Mode, ModelParams,
};
use crate::numeric::{streams, SeededRng};
use crate::objectives::{batch_cls_loss, batch_spt_loss, sample_mask, MaskSpec};
use crate::optimizer::{
    adamw_step, hybrid_init, select_for_config, AdamWHyper, AdamWState, ParamSelection,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Spt,
    Finetune,
    Scratch,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Spt => "spt",
            Stage::Finetune => "finetune",
            Stage::Scratch => "scratch",
        }
    }
}

/// Where the four data splits come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// The built-in synthetic task, regenerated from its seed.
    Synthetic {
        master_seed: u64,
        #[serde(default)]
        sizes: SplitSizes,
        #[serde(default = "default_flip_fraction")]
        flip_fraction: f64,
    },
    /// A directory with `train.jsonl`, `val.jsonl`, `test.jsonl`, and
    /// optionally `unlabeled.jsonl` (as written by data generation).
    Jsonl { path: PathBuf },
}

fn default_flip_fraction() -> f64 {
    0.15
}

/// Starting parameters for a finetune/scratch run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitSpec {
    /// Fresh random initialization from the run seed.
    #[default]
    None,
    /// Load a checkpoint and copy the selected blocks over a fresh init
    /// ("all" inherits the checkpoint completely).
    Checkpoint {
        path: PathBuf,
        #[serde(default = "default_selection")]
        selection: String,
    },
}

fn default_selection() -> String {
    "all".into()
}

/// One fully-resolved training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub stage: Stage,
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// 0 selects the stage default: 64 for pretraining, full-batch for
    /// label training.
    #[serde(default)]
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub init: InitSpec,
    /// Selector expression for blocks excluded from updates ("none" trains
    /// everything).
    #[serde(default = "default_frozen")]
    pub frozen: String,
    #[serde(default = "default_mask_fraction")]
    pub mask_fraction: f64,
    /// Pretraining epochs at which to save extra checkpoints; `None` uses
    /// {1, 10, 50} plus every multiple of 100.
    #[serde(default)]
    pub snapshot_epochs: Option<Vec<usize>>,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_frozen() -> String {
    "none".into()
}

fn default_mask_fraction() -> f64 {
    0.15
}

impl RunConfig {
    fn effective_batch(&self, split_len: usize) -> usize {
        if self.batch_size > 0 {
            self.batch_size.min(split_len)
        } else {
            match self.stage {
                Stage::Spt => 64.min(split_len),
                _ => split_len,
            }
        }
    }
}

/// One measured (epoch, split) point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    /// Classification accuracy in [0,1]; reconstruction rows report 0.
    pub accuracy: f64,
}

/// Per-epoch metrics of a run plus peak summaries.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub records: Vec<EpochRecord>,
}

impl MetricsHistory {
    fn push(&mut self, epoch: usize, split: &str, loss: f64, accuracy: f64) {
        self.records.push(EpochRecord {
            epoch,
            split: split.into(),
            loss,
            accuracy,
        });
    }

    /// Highest accuracy a split reached, with its (earliest) epoch.
    pub fn peak_accuracy(&self, split: &str) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for r in self.records.iter().filter(|r| r.split == split) {
            if best.map_or(true, |(_, acc)| r.accuracy > acc) {
                best = Some((r.epoch, r.accuracy));
            }
        }
        best
    }

    /// Model selection summary: best validation accuracy and its epoch.
    pub fn best_val(&self) -> Option<(usize, f64)> {
        self.peak_accuracy("val")
    }

    /// Loss a split recorded at a given epoch.
    pub fn loss_at(&self, split: &str, epoch: usize) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.split == split && r.epoch == epoch)
            .map(|r| r.loss)
    }

    /// `epoch,split,loss,accuracy` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,accuracy\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.split, r.loss, r.accuracy
            ));
        }
        out
    }

    /// Structural checks: accuracies in range, training epochs contiguous
    /// from 1 (a 0-epoch run records only epoch-0 evaluations).
    pub fn validate(&self) -> Result<()> {
        let mut per_split: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for r in &self.records {
            if !(0.0..=1.0).contains(&r.accuracy) {
                return Err(Error::InvalidArgument(format!(
                    "accuracy {} out of range at epoch {}",
                    r.accuracy, r.epoch
                )));
            }
            per_split.entry(r.split.as_str()).or_default().push(r.epoch);
        }
        for (split, epochs) in per_split {
            let from_one = epochs.first() == Some(&1);
            let from_zero_only = epochs == [0];
            if !from_zero_only {
                for (k, &e) in epochs.iter().enumerate() {
                    if !from_one || e != k + 1 {
                        return Err(Error::InvalidArgument(format!(
                            "split '{}' epochs not contiguous from 1: {:?}",
                            split, epochs
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Load or regenerate the dataset and its content hash.
pub fn resolve_dataset(spec: &DatasetSpec, model: &ModelConfig) -> Result<(Dataset, String)> {
    let data = match spec {
        DatasetSpec::Synthetic {
            master_seed,
            sizes,
            flip_fraction,
        } => generate_dataset(*master_seed, *sizes, *flip_fraction)?.splits,
        DatasetSpec::Jsonl { path } => {
            let schema = match model.input_kind {
                InputKind::Continuous { .. } => JsonlSchema::Continuous,
                InputKind::Token { .. } => JsonlSchema::Token,
            };
            let load = |name: &str, required: bool| -> Result<Vec<Sequence>> {
                let p = path.join(name);
                if !p.exists() {
                    if required {
                        return Err(Error::Data(format!("missing split file {}", p.display())));
                    }
                    return Ok(Vec::new());
                }
                load_jsonl_dataset(&p, schema)
            };
            Dataset {
                train: load("train.jsonl", true)?,
                val: load("val.jsonl", true)?,
                test: load("test.jsonl", true)?,
                unlabeled: load("unlabeled.jsonl", false)?,
            }
        }
    };
    let hash = data.content_hash();
    Ok((data, hash))
}

/// Offset finetuning's epoch-keyed streams away from pretraining's so the
/// two stages of one seed never share mask/dropout/shuffle noise.
fn stream_epoch(stage: Stage, epoch: usize) -> u64 {
    match stage {
        Stage::Spt => epoch as u64,
        _ => (1 << 20) + epoch as u64,
    }
}

fn default_snapshot_epochs(total: usize) -> BTreeSet<usize> {
    let mut set: BTreeSet<usize> = [1, 10, 50].into_iter().filter(|&e| e <= total).collect();
    let mut e = 100;
    while e <= total {
        set.insert(e);
        e += 100;
    }
    set
}

fn labels_of(seqs: &[Sequence], split: &str) -> Result<Vec<usize>> {
    seqs.iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::Data(format!("unlabeled sequence in '{}' split", split)))
        })
        .collect()
}

/// Eval-mode classification loss and accuracy over a whole split.
pub fn eval_split(
    params: &ModelParams,
    model: &ModelConfig,
    seqs: &[Sequence],
    split: &str,
) -> Result<(f64, f64)> {
    if seqs.is_empty() {
        return Err(Error::Data(format!("empty '{}' split", split)));
    }
    let labels = labels_of(seqs, split)?;
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    for chunk_start in (0..seqs.len()).step_by(128) {
        let end = (chunk_start + 128).min(seqs.len());
        let refs: Vec<&Sequence> = seqs[chunk_start..end].iter().collect();
        let (logits, _) = forward_classify_batch(&refs, params, model, Mode::Eval, &mut [])?;
        let (loss, _, acc) = batch_cls_loss(&logits, &labels[chunk_start..end])?;
        let w = (end - chunk_start) as f64;
        loss_sum += loss * w;
        acc_sum += acc * w;
    }
    let n = seqs.len() as f64;
    Ok((loss_sum / n, acc_sum / n))
}

struct PretrainOutcome {
    final_params: ModelParams,
    history: MetricsHistory,
    /// Parameter snapshots requested via `capture` (0 maps to the init).
    captured: BTreeMap<usize, ModelParams>,
}

#[allow(clippy::too_many_arguments)]
fn pretrain_core(
    model: &ModelConfig,
    data: &Dataset,
    seed: u64,
    lr: f64,
    batch: usize,
    mask_fraction: f64,
    epochs: usize,
    frozen: &ParamSelection,
    capture: &BTreeSet<usize>,
) -> Result<PretrainOutcome> {
    if data.unlabeled.is_empty() {
        return Err(Error::Data(
            "pretraining needs an unlabeled split, dataset has none".into(),
        ));
    }
    let spec = MaskSpec {
        fraction: mask_fraction,
    };
    spec.validate()?;
    if mask_fraction <= 0.0 {
        return Err(Error::InvalidArgument(
            "pretraining mask fraction must be positive".into(),
        ));
    }

    let mut params = ModelParams::init(model, seed)?;
    let mut state = AdamWState::new(model)?;
    let hp = AdamWHyper::with_lr(lr);
    let mut history = MetricsHistory::default();
    let mut captured = BTreeMap::new();
    if capture.contains(&0) {
        captured.insert(0, params.clone());
    }

    let n = data.unlabeled.len();
    for epoch in 1..=epochs {
        let se = stream_epoch(Stage::Spt, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        SeededRng::from_stream(seed, streams::epoch_shuffle(se)).shuffle(&mut order);

        let mut loss_weighted = 0.0;
        let mut masked_total = 0usize;
        for chunk in order.chunks(batch) {
            let refs: Vec<&Sequence> = chunk.iter().map(|&i| &data.unlabeled[i]).collect();
            let mut masks = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut rng = SeededRng::from_stream(seed, streams::mask_sampling(se, i as u64));
                masks.push(sample_mask(&data.unlabeled[i], &spec, &mut rng)?);
            }
            let mut rngs: Vec<SeededRng> = chunk
                .iter()
                .map(|&i| SeededRng::from_stream(seed, streams::dropout(se, i as u64)))
                .collect();
            let (preds, cache) = forward_reconstruct_batch(
                &refs,
                masks.clone(),
                &params,
                model,
                Mode::Train,
                &mut rngs,
            )?;
            let (loss, upstream) =
                batch_spt_loss(&refs, &masks, &preds, model.input_kind, cache.seq_len)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "reconstruction loss at epoch {}",
                    epoch
                )));
            }
            let grads = backward_pass(&cache, &params, &upstream)?;
            adamw_step(&mut params, &grads, &mut state, &hp, frozen)?;
            let m: usize = masks.iter().map(Vec::len).sum();
            loss_weighted += loss * m as f64;
            masked_total += m;
        }
        history.push(epoch, "unlabeled", loss_weighted / masked_total as f64, 0.0);
        if capture.contains(&epoch) {
            captured.insert(epoch, params.clone());
        }
    }

    Ok(PretrainOutcome {
        final_params: params,
        history,
        captured,
    })
}

/// Masked-reconstruction pretraining. Writes `spt.ckpt` (final) and
/// `spt-epoch{N}.ckpt` at each snapshot epoch when `out_dir` is given; a
/// 0-epoch run checkpoints the seed's random init.
pub fn run_pretrain(
    cfg: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<(ModelParams, MetricsHistory)> {
    if cfg.stage != Stage::Spt {
        return Err(Error::InvalidArgument(format!(
            "run_pretrain requires stage 'spt', got '{}'",
            cfg.stage.as_str()
        )));
    }
    if cfg.init != InitSpec::None {
        return Err(Error::InvalidArgument(
            "pretraining always starts from the seed's random init".into(),
        ));
    }
    let (data, hash) = resolve_dataset(&cfg.dataset, &cfg.model)?;
    let frozen = select_for_config(&cfg.frozen, &cfg.model)?;
    let snapshots: BTreeSet<usize> = match &cfg.snapshot_epochs {
        Some(list) => list.iter().copied().filter(|&e| e <= cfg.epochs).collect(),
        None => default_snapshot_epochs(cfg.epochs),
    };
    let outcome = pretrain_core(
        &cfg.model,
        &data,
        cfg.seed,
        cfg.lr,
        cfg.effective_batch(data.unlabeled.len().max(1)),
        cfg.mask_fraction,
        cfg.epochs,
        &frozen,
        &snapshots,
    )?;

    if let Some(dir) = out_dir {
        for (&epoch, params) in &outcome.captured {
            let prov = Provenance {
                stage: "spt".into(),
                seed: cfg.seed,
                epochs: epoch,
                dataset_hash: hash.clone(),
            };
            save_checkpoint(params, &cfg.model, &prov, &dir.join(format!("spt-epoch{}.ckpt", epoch)))?;
        }
        let prov = Provenance {
            stage: "spt".into(),
            seed: cfg.seed,
            epochs: cfg.epochs,
            dataset_hash: hash,
        };
        save_checkpoint(&outcome.final_params, &cfg.model, &prov, &dir.join("spt.ckpt"))?;
    }
    Ok((outcome.final_params, outcome.history))
}

fn finetune_core(
    cfg: &RunConfig,
    data: &Dataset,
    init: ModelParams,
    frozen: &ParamSelection,
) -> Result<(ModelParams, MetricsHistory)> {
    let labels = labels_of(&data.train, "train")?;
    let mut params = init;
    let mut state = AdamWState::new(&cfg.model)?;
    let hp = AdamWHyper::with_lr(cfg.lr);
    let mut history = MetricsHistory::default();

    if cfg.epochs == 0 {
        let (vl, va) = eval_split(&params, &cfg.model, &data.val, "val")?;
        let (tl, ta) = eval_split(&params, &cfg.model, &data.test, "test")?;
        history.push(0, "val", vl, va);
        history.push(0, "test", tl, ta);
        return Ok((params, history));
    }

    let n = data.train.len();
    let batch = cfg.effective_batch(n);
    for epoch in 1..=cfg.epochs {
        let se = stream_epoch(cfg.stage, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        SeededRng::from_stream(cfg.seed, streams::epoch_shuffle(se)).shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        for chunk in order.chunks(batch) {
            let refs: Vec<&Sequence> = chunk.iter().map(|&i| &data.train[i]).collect();
            let chunk_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut rngs: Vec<SeededRng> = chunk
                .iter()
                .map(|&i| SeededRng::from_stream(cfg.seed, streams::dropout(se, i as u64)))
                .collect();
            let (logits, cache) =
                forward_classify_batch(&refs, &params, &cfg.model, Mode::Train, &mut rngs)?;
            let (loss, upstream, acc) = batch_cls_loss(&logits, &chunk_labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "classification loss at epoch {}",
                    epoch
                )));
            }
            let grads = backward_pass(&cache, &params, &upstream)?;
            adamw_step(&mut params, &grads, &mut state, &hp, frozen)?;
            let w = chunk.len() as f64;
            loss_sum += loss * w;
            acc_sum += acc * w;
        }
        history.push(epoch, "train", loss_sum / n as f64, acc_sum / n as f64);

        let (vl, va) = eval_split(&params, &cfg.model, &data.val, "val")?;
        let (tl, ta) = eval_split(&params, &cfg.model, &data.test, "test")?;
        history.push(epoch, "val", vl, va);
        history.push(epoch, "test", tl, ta);
    }
    Ok((params, history))
}

/// Resolve the starting parameters for a finetune/scratch config.
fn resolve_init(cfg: &RunConfig) -> Result<ModelParams> {
    match (&cfg.init, cfg.stage) {
        (InitSpec::None, _) => ModelParams::init(&cfg.model, cfg.seed),
        (InitSpec::Checkpoint { .. }, Stage::Scratch) => Err(Error::Config(
            "a scratch run cannot start from a checkpoint; use stage 'finetune'".into(),
        )),
        (InitSpec::Checkpoint { path, selection }, _) => {
            let (ckpt_params, manifest) = load_checkpoint(path)?;
            if manifest.config != cfg.model {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model config",
                    path.display()
                )));
            }
            let sel = select_for_config(selection, &cfg.model)?;
            hybrid_init(&cfg.model, &ckpt_params, cfg.seed, &sel)
        }
    }
}

/// Label training (finetune or from scratch). Evaluates val and test each
/// epoch; peak accuracies come from the returned history (model selection
/// on val only). Writes `{stage}.ckpt` when `out_dir` is given.
pub fn run_finetune(
    cfg: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<(ModelParams, MetricsHistory)> {
    if cfg.stage == Stage::Spt {
        return Err(Error::InvalidArgument(
            "run_finetune handles stages 'finetune' and 'scratch'".into(),
        ));
    }
    let (data, hash) = resolve_dataset(&cfg.dataset, &cfg.model)?;
    let init = resolve_init(cfg)?;
    let frozen = select_for_config(&cfg.frozen, &cfg.model)?;
    let (params, history) = finetune_core(cfg, &data, init, &frozen)?;
    if let Some(dir) = out_dir {
        let prov = Provenance {
            stage: cfg.stage.as_str().into(),
            seed: cfg.seed,
            epochs: cfg.epochs,
            dataset_hash: hash,
        };
        save_checkpoint(
            &params,
            &cfg.model,
            &prov,
            &dir.join(format!("{}.ckpt", cfg.stage.as_str())),
        )?;
    }
    Ok((params, history))
}

/// The grid swept by [`run_sweep`]: finetune lr × seed × pretraining
/// duration × init selection. Pretraining runs once per seed at a fixed lr
/// and batch size, capturing the requested epoch snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub lrs: Vec<f64>,
    pub seeds: Vec<u64>,
    /// 0 means "use the untouched random init snapshot".
    pub pretrain_epochs: Vec<usize>,
    /// Blocks copied from the pretrained snapshot; "none" is from scratch.
    pub init_selections: Vec<String>,
    #[serde(default = "default_lr")]
    pub pretrain_lr: f64,
    #[serde(default = "default_pretrain_batch")]
    pub pretrain_batch: usize,
}

fn default_pretrain_batch() -> usize {
    64
}

/// 8 log-spaced learning rates in [1e-4, 1e-1].
pub fn log_spaced_lrs(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(count >= 2 && lo > 0.0 && hi > lo);
    let (llo, lhi) = (lo.log10(), hi.log10());
    (0..count)
        .map(|i| 10f64.powf(llo + (lhi - llo) * i as f64 / (count - 1) as f64))
        .collect()
}

/// The default sweep: SPT-vs-scratch across the lr grid, 10 seeds,
/// 10 pretraining epochs.
pub fn fig_grid_default() -> SweepGrid {
    SweepGrid {
        lrs: log_spaced_lrs(1e-4, 1e-1, 8),
        seeds: (0..10).collect(),
        pretrain_epochs: vec![10],
        init_selections: vec!["none".into(), "all".into()],
        pretrain_lr: 1e-3,
        pretrain_batch: 64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lr: f64,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub init: String,
    pub peak_train_acc: f64,
    pub peak_val_acc: f64,
    pub peak_test_acc: f64,
    /// Populated when the cell's run failed; the sweep continues.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    /// Per-cell CSV: `lr,seed,pretrain_epochs,init,peak_train_acc,peak_test_acc,error`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lr,seed,pretrain_epochs,init,peak_train_acc,peak_test_acc,error\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.lr,
                c.seed,
                c.pretrain_epochs,
                c.init,
                c.peak_train_acc,
                c.peak_test_acc,
                c.error.as_deref().unwrap_or("")
            ));
        }
        out
    }

    /// Aggregation across seeds per (lr, init, pretrain_epochs):
    /// mean/min/max of the peak accuracies, counting only successful cells.
    pub fn summary_csv(&self) -> String {
        #[derive(Default)]
        struct Agg {
            n: usize,
            train: Vec<f64>,
            test: Vec<f64>,
        }
        let mut groups: BTreeMap<(u64, String, usize), Agg> = BTreeMap::new();
        for c in self.cells.iter().filter(|c| c.error.is_none()) {
            let key = (c.lr.to_bits(), c.init.clone(), c.pretrain_epochs);
            let agg = groups.entry(key).or_default();
            agg.n += 1;
            agg.train.push(c.peak_train_acc);
            agg.test.push(c.peak_test_acc);
        }
        let stats = |v: &[f64]| -> (f64, f64, f64) {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (mean, min, max)
        };
        let mut out = String::from(
            "lr,init,pretrain_epochs,seeds,mean_peak_train,min_peak_train,max_peak_train,mean_peak_test,min_peak_test,max_peak_test\n",
        );
        for ((lr_bits, init, pe), agg) in groups {
            let (mt, mnt, mxt) = stats(&agg.train);
            let (me, mne, mxe) = stats(&agg.test);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                f64::from_bits(lr_bits),
                init,
                pe,
                agg.n,
                mt,
                mnt,
                mxt,
                me,
                mne,
                mxe
            ));
        }
        out
    }
}

/// Run the full grid. Each cell finetunes with its own lr/seed/init;
/// pretraining is shared per seed (one run capturing all requested epoch
/// counts). Failures are recorded per cell without aborting the sweep, and
/// results are independent of execution order.
pub fn run_sweep(grid: &SweepGrid, base: &RunConfig) -> Result<SweepTable> {
    if grid.lrs.is_empty()
        || grid.seeds.is_empty()
        || grid.pretrain_epochs.is_empty()
        || grid.init_selections.is_empty()
    {
        return Err(Error::InvalidArgument(
            "sweep grid has an empty dimension".into(),
        ));
    }
    let (data, _hash) = resolve_dataset(&base.dataset, &base.model)?;
    let capture: BTreeSet<usize> = grid.pretrain_epochs.iter().copied().collect();
    let needs_pretrain = grid.init_selections.iter().any(|s| s != "none");
    let max_pe = capture.iter().max().copied().unwrap_or(0);

    // Phase 1: one pretraining pass per seed, capturing every requested
    // epoch count (0 captures the init).
    let pretrained: BTreeMap<u64, Result<BTreeMap<usize, ModelParams>>> = grid
        .seeds
        .par_iter()
        .map(|&seed| {
            if !needs_pretrain || max_pe == 0 {
                let out = ModelParams::init(&base.model, seed)
                    .map(|p| capture.iter().map(|&pe| (pe, p.clone())).collect());
                return (seed, out);
            }
            let out = pretrain_core(
                &base.model,
                &data,
                seed,
                grid.pretrain_lr,
                grid.pretrain_batch.max(1),
                base.mask_fraction,
                max_pe,
                &ParamSelection::empty(),
                &capture,
            )
            .map(|o| o.captured);
            (seed, out)
        })
        .collect();

    // Phase 2: all finetune cells, in fixed grid order.
    let mut keys = Vec::new();
    for &lr in &grid.lrs {
        for &seed in &grid.seeds {
            for &pe in &grid.pretrain_epochs {
                for sel in &grid.init_selections {
                    keys.push((lr, seed, pe, sel.clone()));
                }
            }
        }
    }
    let cells: Vec<SweepCell> = keys
        .par_iter()
        .map(|(lr, seed, pe, sel)| {
            let mut cell = SweepCell {
                lr: *lr,
                seed: *seed,
                pretrain_epochs: *pe,
                init: sel.clone(),
                peak_train_acc: f64::NAN,
                peak_val_acc: f64::NAN,
                peak_test_acc: f64::NAN,
                error: None,
            };
            let run = || -> Result<MetricsHistory> {
                let mut cfg = base.clone();
                cfg.stage = Stage::Finetune;
                cfg.lr = *lr;
                cfg.seed = *seed;
                let init = if sel == "none" {
                    ModelParams::init(&cfg.model, *seed)?
                } else {
                    let snaps = pretrained
                        .get(seed)
                        .expect("seed pretrained in phase 1")
                        .as_ref()
                        .map_err(|e| Error::Config(format!("pretraining failed: {}", e)))?;
                    let src = snaps.get(pe).ok_or_else(|| {
                        Error::Config(format!("no pretraining snapshot at {} epochs", pe))
                    })?;
                    let selection = select_for_config(sel, &cfg.model)?;
                    hybrid_init(&cfg.model, src, *seed, &selection)?
                };
                let frozen = select_for_config(&cfg.frozen, &cfg.model)?;
                let (_, history) = finetune_core(&cfg, &data, init, &frozen)?;
                Ok(history)
            };
            match run() {
                Ok(history) => {
                    if let Some((_, a)) = history.peak_accuracy("train") {
                        cell.peak_train_acc = a;
                    }
                    if let Some((_, a)) = history.peak_accuracy("val") {
                        cell.peak_val_acc = a;
                    }
                    if let Some((_, a)) = history.peak_accuracy("test") {
                        cell.peak_test_acc = a;
                    }
                }
                Err(e) => cell.error = Some(e.to_string()),
            }
            cell
        })
        .collect();

    Ok(SweepTable { cells })
}

/// The four stages compared by the displacement table.
pub struct StageParams<'a> {
    /// Random initialization.
    pub r: &'a ModelParams,
    /// After masked-reconstruction pretraining.
    pub spt: &'a ModelParams,
    /// After supervised training from scratch.
    pub sc: &'a ModelParams,
    /// After finetuning the pretrained model.
    pub ft: &'a ModelParams,
}

/// Frobenius displacement `‖θ_B − θ_A‖` per block for the stage pairs
/// R→SPT, R→SC, SPT→FT, SC→FT, R→FT, plus per-stage norms. The first row
/// aggregates the encoder blocks; the rest follow canonical block order.
pub fn displacement_report(stages: &StageParams) -> Result<String> {
    let names = stages.r.names();
    for (label, p) in [("spt", stages.spt), ("sc", stages.sc), ("ft", stages.ft)] {
        if p.names() != names {
            return Err(Error::Config(format!(
                "'{}' checkpoint has different parameter blocks than 'r'",
                label
            )));
        }
        for name in &names {
            if p.get(name)?.shape() != stages.r.get(name)?.shape() {
                return Err(Error::Config(format!(
                    "block '{}' changes shape between checkpoints",
                    name
                )));
            }
        }
    }

    let dist = |a: &ModelParams, b: &ModelParams, keys: &[&str]| -> f64 {
        let mut acc = 0.0;
        for name in keys {
            let (ma, mb) = (a.get(name).unwrap(), b.get(name).unwrap());
            for (x, y) in ma.data().iter().zip(mb.data()) {
                let d = x - y;
                acc += d * d;
            }
        }
        acc.sqrt()
    };
    let norm = |p: &ModelParams, keys: &[&str]| -> f64 {
        let mut acc = 0.0;
        for name in keys {
            for v in p.get(name).unwrap().data() {
                acc += v * v;
            }
        }
        acc.sqrt()
    };

    let mut out = String::from(
        "block,r_to_spt,r_to_sc,spt_to_ft,sc_to_ft,r_to_ft,norm_r,norm_spt,norm_sc,norm_ft\n",
    );
    let mut push_row = |label: &str, keys: &[&str]| {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            label,
            dist(stages.r, stages.spt, keys),
            dist(stages.r, stages.sc, keys),
            dist(stages.spt, stages.ft, keys),
            dist(stages.sc, stages.ft, keys),
            dist(stages.r, stages.ft, keys),
            norm(stages.r, keys),
            norm(stages.spt, keys),
            norm(stages.sc, keys),
            norm(stages.ft, keys),
        ));
    };

    let encoder_keys: Vec<&str> = names
        .iter()
        .copied()
        .filter(|n| n.starts_with("encoder."))
        .collect();
    if !encoder_keys.is_empty() {
        push_row("encoder (all)", &encoder_keys);
    }
    for name in &names {
        push_row(name, &[name]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
