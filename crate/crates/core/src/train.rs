//! Training and evaluation loops: seeded shuffling, per-record graphs with
//! gradient accumulation over each batch, Adam updates, per-epoch dev
//! evaluation, and best-checkpoint selection by dev accuracy.

use crate::config::{Ablation, Config, FusionMode};
use crate::data::{LabelVocab, Polarity, SentenceRecord, TokenVocab};
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::{Model, RecordInputs};
use crate::params::ParamStore;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

pub struct TrainOutcome {
    /// Store holding the best epoch's parameter values.
    pub store: ParamStore,
    pub model: Model,
    pub vocab: TokenVocab,
    pub labels: LabelVocab,
    /// One line per epoch; format pinned for byte-identical reruns.
    pub log: String,
    pub best_epoch: usize,
    pub best_dev: Metrics,
    pub epochs_run: usize,
}

/// Runs every record through the model and tallies gold versus predicted.
pub fn evaluate(
    model: &Model,
    store: &mut ParamStore,
    inputs: &[RecordInputs],
) -> Result<(Metrics, Vec<Polarity>)> {
    if inputs.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let mut pairs = Vec::with_capacity(inputs.len());
    let mut preds = Vec::with_capacity(inputs.len());
    for rec in inputs {
        let g = crate::autodiff::Graph::new();
        let fwd = model.forward(&g, store, rec)?;
        let pred = fwd.prediction();
        pairs.push((rec.label, pred));
        preds.push(pred);
    }
    Ok((Metrics::from_pairs(pairs), preds))
}

pub fn build_inputs(
    records: &[SentenceRecord],
    vocab: &TokenVocab,
    labels: &LabelVocab,
    l: usize,
) -> Result<Vec<RecordInputs>> {
    records
        .iter()
        .map(|r| RecordInputs::build(r, vocab, labels, l))
        .collect()
}

pub fn train(
    cfg: &Config,
    train_records: &[SentenceRecord],
    dev_records: &[SentenceRecord],
) -> Result<TrainOutcome> {
    if train_records.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if dev_records.is_empty() {
        return Err(Error::invalid("dev set is empty"));
    }
    let vocab = TokenVocab::from_records(train_records);
    let labels = LabelVocab::from_records(train_records);
    let model = Model {
        cfg: cfg.clone(),
        vocab_size: vocab.len(),
        n_labels: labels.len(),
    };
    let train_inputs = build_inputs(train_records, &vocab, &labels, cfg.l)?;
    let dev_inputs = build_inputs(dev_records, &vocab, &labels, cfg.l)?;

    let mut store = ParamStore::new(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_inputs.len()).collect();

    let mut log = String::new();
    let mut best: Option<(f64, f64, usize, Vec<(String, crate::matrix::Matrix)>)> = None;
    let mut best_dev = None;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut correct = 0usize;
        let mut step = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            store.zero_grads();
            for &idx in batch {
                step += 1;
                let rec = &train_inputs[idx];
                let at = |e: Error| {
                    Error::numerical(format!("epoch {epoch} step {step}: {e}"))
                };
                let g = crate::autodiff::Graph::new();
                let fwd = model.forward(&g, &mut store, rec).map_err(at)?;
                let loss = model.loss_for(&g, &fwd, rec.label).map_err(at)?;
                let total = loss.total.scalar_value();
                if !total.is_finite() {
                    return Err(Error::numerical(format!(
                        "epoch {epoch} step {step}: non-finite total loss {total}"
                    )));
                }
                if fwd.prediction() == rec.label {
                    correct += 1;
                }
                sums[0] += loss.ce;
                sums[1] += loss.seg;
                sums[2] += loss.root;
                sums[3] += total;
                g.backward(loss.total)
                    .map_err(|e| Error::numerical(format!("epoch {epoch} step {step}: {e}")))?;
                g.export_grads(&mut store);
            }
            store.scale_grads(1.0 / batch.len() as f64);
            store.adam_step(cfg.lr, cfg.weight_decay);
        }

        let n = train_inputs.len() as f64;
        let train_acc = correct as f64 / n;
        let (dev_metrics, _) = evaluate(&model, &mut store, &dev_inputs)?;
        let dev_acc = dev_metrics.accuracy();
        let dev_f1 = dev_metrics.macro_f1();
        let _ = writeln!(
            log,
            "epoch={} train_ce={:.6} train_seg={:.6} train_root={:.6} train_total={:.6} train_acc={:.6} dev_acc={:.6} dev_f1={:.6}",
            epoch, sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n, train_acc, dev_acc, dev_f1
        );

        let better = match &best {
            None => true,
            Some((acc, f1, _, _)) => {
                dev_acc > *acc || (dev_acc == *acc && dev_f1 > *f1)
            }
        };
        if better {
            best = Some((dev_acc, dev_f1, epoch, store.snapshot_values()));
            best_dev = Some(dev_metrics);
        }

        if train_acc >= cfg.early_stop_train_acc {
            break;
        }
    }

    let (_, _, best_epoch, snapshot) = best.expect("at least one epoch ran");
    store.restore_values(&snapshot);
    Ok(TrainOutcome {
        store,
        model,
        vocab,
        labels,
        log,
        best_epoch,
        best_dev: best_dev.expect("metrics recorded with best"),
        epochs_run,
    })
}

/// The seven comparison runs: the four ablations under adaptive fusion plus
/// the three alternative fusion strategies on the full model.
pub fn sweep_modes(base: &Config) -> Vec<(String, Config)> {
    let mut out = Vec::new();
    for ablation in [
        Ablation::Full,
        Ablation::NoSesg,
        Ablation::NoSylg,
        Ablation::NoFusion,
    ] {
        let mut c = base.clone();
        c.ablation = ablation;
        c.fusion_mode = FusionMode::Adaptive;
        out.push((ablation.as_str().to_string(), c));
    }
    for mode in [FusionMode::Concat, FusionMode::Sum, FusionMode::Gate] {
        let mut c = base.clone();
        c.ablation = Ablation::Full;
        c.fusion_mode = mode;
        out.push((mode.as_str().to_string(), c));
    }
    out
}

pub struct SweepRow {
    pub mode: String,
    pub accuracies: Vec<f64>,
    pub f1s: Vec<f64>,
}

impl SweepRow {
    pub fn mean_accuracy(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    pub fn mean_f1(&self) -> f64 {
        self.f1s.iter().sum::<f64>() / self.f1s.len() as f64
    }
}

/// Trains every comparison mode once per seed and collects the best dev
/// metrics of each run.
pub fn ablation_sweep(
    base: &Config,
    train_records: &[SentenceRecord],
    dev_records: &[SentenceRecord],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("ablation sweep needs at least one seed"));
    }
    let mut rows = Vec::new();
    for (mode, cfg) in sweep_modes(base) {
        let mut accuracies = Vec::with_capacity(seeds.len());
        let mut f1s = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            let out = train(&c, train_records, dev_records)?;
            accuracies.push(out.best_dev.accuracy());
            f1s.push(out.best_dev.macro_f1());
        }
        rows.push(SweepRow {
            mode,
            accuracies,
            f1s,
        });
    }
    Ok(rows)
}
