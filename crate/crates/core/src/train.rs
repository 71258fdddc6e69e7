//! Optimizer loop, early stopping and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{ForwardOptions, FrozenEncoder, TokenBatch};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::tasks::{Dataset, Example};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    /// Width of the sequence-length bins used when reporting accuracy.
    #[serde(default = "default_bin_width")]
    pub bin_width: usize,
    /// Stop once eval accuracy reaches this value.
    #[serde(default)]
    pub target_eval_acc: Option<f64>,
    /// Score per-epoch train metrics on only the first `n` training
    /// examples.
    #[serde(default)]
    pub train_metrics_subset: Option<usize>,
}

fn default_bin_width() -> usize {
    16
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("train.lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.train_metrics_subset == Some(0) {
            return Err(Error::Config("train.train_metrics_subset must be >= 1".into()));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("bin_width", self.bin_width),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be >= 1")));
            }
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "train.patience ({}) exceeds train.max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// Adam with `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8` and a constant step size.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim("adam", p.shape(), g.shape()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = Self::BETA1 * *mi + (1.0 - Self::BETA1) * gi;
                *vi = Self::BETA2 * *vi + (1.0 - Self::BETA2) * gi * gi;
                *x -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + Self::EPS);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    /// Inclusive sequence-length range.
    pub min_len: usize,
    pub max_len: usize,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub correct: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub bins: Vec<BinReport>,
}

/// Groups example indices by sequence length, preserving order within a
/// length, then splits each group into batches of at most `size`.
fn length_batches(data: &[Example], idx: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut lens: Vec<usize> = idx.iter().map(|&i| data[i].tokens.len()).collect();
    lens.sort_unstable();
    lens.dedup();
    let mut out = Vec::new();
    for len in lens {
        let group: Vec<usize> = idx.iter().copied().filter(|&i| data[i].tokens.len() == len).collect();
        out.extend(group.chunks(size).map(|c| c.to_vec()));
    }
    out
}

fn make_batch(data: &[Example], idx: &[usize]) -> Result<(TokenBatch, Vec<usize>)> {
    let rows: Vec<&[usize]> = idx.iter().map(|&i| data[i].tokens.as_slice()).collect();
    let labels = idx.iter().map(|&i| data[i].label).collect();
    Ok((TokenBatch::from_rows(&rows)?, labels))
}

/// Dropout-free accuracy and mean loss, overall and per length bin of
/// width `bin_width` (bin `k` holds lengths `k·w + 1 ..= (k+1)·w`).
pub fn evaluate(model: &FrozenEncoder, data: &Dataset, bin_width: usize, batch_size: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    if bin_width == 0 || batch_size == 0 {
        return Err(Error::Contract("bin width and batch size must be >= 1".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut loss_sum = 0.0;
    let mut bins: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    for batch in length_batches(&data.examples, &idx, batch_size) {
        let (tokens, labels) = make_batch(&data.examples, &batch)?;
        let logits = model.logits(&tokens)?;
        let k = logits.last_dim();
        let bin = (tokens.seq - 1) / bin_width;
        let entry = bins.entry(bin).or_insert((0, 0));
        for (row, &y) in logits.data().chunks(k).zip(&labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss_sum += lse - row[y];
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            entry.0 += 1;
            entry.1 += usize::from(pred == y);
        }
    }
    if !loss_sum.is_finite() {
        return Err(Error::Numeric(format!("evaluation loss is {loss_sum}")));
    }
    let count: usize = bins.values().map(|b| b.0).sum();
    let correct: usize = bins.values().map(|b| b.1).sum();
    Ok(EvalReport {
        count,
        correct,
        loss: loss_sum / count as f64,
        accuracy: correct as f64 / count as f64,
        bins: bins
            .into_iter()
            .map(|(k, (n, c))| BinReport {
                min_len: k * bin_width + 1,
                max_len: (k + 1) * bin_width,
                count: n,
                correct: c,
                accuracy: c as f64 / n as f64,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_loss: f64,
    pub eval_acc: f64,
    /// Wallclock seconds spent on the epoch's optimizer steps.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were restored at the end.
    pub best_epoch: usize,
    pub best_eval_acc: f64,
    pub stopped_early: bool,
    pub adapter_params: usize,
    pub head_params: usize,
    pub base_fingerprint: String,
    pub final_eval: EvalReport,
}

impl Metrics {
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epochs.is_empty() {
            return 0.0;
        }
        self.epochs.iter().map(|e| e.seconds).sum::<f64>() / self.epochs.len() as f64
    }
}

/// Minibatch Adam on the adapters and head. After every epoch both splits
/// are scored without dropout; training stops once eval accuracy has not
/// improved for `patience` epochs, and the best weights are restored.
/// `on_epoch` sees each record as soon as it is complete.
pub fn train(
    model: &mut FrozenEncoder,
    train_set: &Dataset,
    eval_set: &Dataset,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Metrics> {
    opts.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let fingerprint = model.base_fingerprint();
    let scored = match opts.train_metrics_subset {
        Some(n) => Dataset {
            examples: train_set.examples[..n.min(train_set.len())].to_vec(),
        },
        None => train_set.clone(),
    };
    let mut adam = Adam::new(opts.lr);
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..opts.max_epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = rng_for(opts.seed, &[0x5eed, epoch as u64]);
        order.shuffle(&mut rng);
        let mut batches = length_batches(&train_set.examples, &order, opts.batch_size);
        batches.shuffle(&mut rng);
        for (step, batch) in batches.iter().enumerate() {
            let (tokens, labels) = make_batch(&train_set.examples, batch)?;
            let fwd = ForwardOptions::train(derive_seed(opts.seed, &[0xd0, epoch as u64, step as u64]));
            let (_, grads) = model.loss_and_grads(&tokens, &labels, &fwd).map_err(|e| match e {
                Error::Numeric(reason) => Error::Training { epoch, reason },
                other => other,
            })?;
            adam.step(model.trainable_mut(), &grads)?;
        }
        let seconds = start.elapsed().as_secs_f64();

        let tr = evaluate(model, &scored, opts.bin_width, opts.batch_size).map_err(|e| diverged(e, epoch))?;
        let ev = evaluate(model, eval_set, opts.bin_width, opts.batch_size).map_err(|e| diverged(e, epoch))?;
        let rec = EpochRecord {
            epoch,
            train_loss: tr.loss,
            train_acc: tr.accuracy,
            eval_loss: ev.loss,
            eval_acc: ev.accuracy,
            seconds,
        };
        on_epoch(&rec);
        epochs.push(rec);

        if best.as_ref().is_none_or(|b| ev.accuracy > b.1) {
            let snapshot = model.trainable().into_iter().map(|(_, t)| t.clone()).collect();
            best = Some((epoch, ev.accuracy, snapshot));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if opts.target_eval_acc.is_some_and(|t| ev.accuracy >= t) {
            break;
        }
        if since_best >= opts.patience {
            stopped_early = epoch + 1 < opts.max_epochs;
            break;
        }
    }

    let (best_epoch, best_eval_acc, weights) = best.expect("at least one epoch ran");
    for (dst, src) in model.trainable_mut().into_iter().zip(weights) {
        *dst = src;
    }
    if model.base_fingerprint() != fingerprint {
        return Err(Error::Contract("base weights changed during training".into()));
    }
    let final_eval = evaluate(model, eval_set, opts.bin_width, opts.batch_size)?;
    Ok(Metrics {
        epochs,
        best_epoch,
        best_eval_acc,
        stopped_early,
        adapter_params: model.adapter_param_count(),
        head_params: model.head_param_count(),
        base_fingerprint: fingerprint,
        final_eval,
    })
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numeric(reason) => Error::Training { epoch, reason },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{attach_adapters, build_encoder, EncoderConfig, Pooling};
    use crate::planner::plan_alternating;
    use crate::tasks::{gen_task, TaskKind, TaskSpec};
    use crate::time_module::AdapterConfig;

    fn setup(kind: TaskKind) -> (FrozenEncoder, Dataset, Dataset) {
        let enc = EncoderConfig {
            layers: 2,
            width: 8,
            heads: 2,
            ff_width: 16,
            vocab: 10,
            max_seq: 8,
            classes: 2,
            fused_qkv: false,
            pooling: Pooling::Mean,
        };
        let model = attach_adapters(
            build_encoder(&enc, 1).unwrap(),
            &plan_alternating(2),
            &AdapterConfig::new(2),
            2,
        )
        .unwrap();
        let spec = TaskSpec {
            kind,
            seq_len: 6,
            n_train: 40,
            n_eval: 20,
            vocab: 10,
            seed: 3,
            classes: 2,
            parity_window: Some(2),
            eval_lengths: None,
        };
        let (tr, ev) = gen_task(&spec).unwrap();
        (model, tr, ev)
    }

    fn opts(lr: f64) -> TrainOptions {
        TrainOptions {
            lr,
            batch_size: 8,
            max_epochs: 4,
            patience: 4,
            seed: 9,
            bin_width: 8,
            target_eval_acc: None,
            train_metrics_subset: None,
        }
    }

    #[test]
    fn zero_lr_keeps_metrics_flat() {
        let (mut m, tr, ev) = setup(TaskKind::Parity);
        let before = m.trainable().into_iter().map(|(_, t)| t.clone()).collect::<Vec<_>>();
        let met = train(&mut m, &tr, &ev, &opts(0.0), |_| {}).unwrap();
        for e in &met.epochs {
            assert_eq!(e.train_loss, met.epochs[0].train_loss);
            assert_eq!(e.eval_acc, met.epochs[0].eval_acc);
        }
        let after = m.trainable().into_iter().map(|(_, t)| t.clone()).collect::<Vec<_>>();
        assert_eq!(before, after);
    }

    #[test]
    fn identical_seeds_identical_curves() {
        let (mut a, tr, ev) = setup(TaskKind::CopyClassify);
        let mut b = a.clone();
        let ma = train(&mut a, &tr, &ev, &opts(0.01), |_| {}).unwrap();
        let mb = train(&mut b, &tr, &ev, &opts(0.01), |_| {}).unwrap();
        let curve = |m: &Metrics| m.epochs.iter().map(|e| (e.train_loss, e.eval_loss)).collect::<Vec<_>>();
        assert_eq!(curve(&ma), curve(&mb));
        assert_ne!(ma.epochs[0].train_loss, ma.epochs[3].train_loss);
    }

    #[test]
    fn base_untouched_and_best_restored() {
        let (mut m, tr, ev) = setup(TaskKind::Parity);
        let fp = m.base_fingerprint();
        let met = train(&mut m, &tr, &ev, &opts(0.05), |_| {}).unwrap();
        assert_eq!(m.base_fingerprint(), fp);
        let best = met.epochs.iter().map(|e| e.eval_acc).fold(0.0, f64::max);
        assert_eq!(met.best_eval_acc, best);
        assert_eq!(met.final_eval.accuracy, best);
    }

    #[test]
    fn adam_zero_lr_is_identity_and_moves_otherwise() {
        let mut p = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::new([3], vec![0.3, -0.1, 0.0]).unwrap();
        let mut a = Adam::new(0.0);
        a.step(vec![&mut p], std::slice::from_ref(&g)).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
        let mut a = Adam::new(0.1);
        a.step(vec![&mut p], std::slice::from_ref(&g)).unwrap();
        // First step moves each coordinate by lr·sign(g).
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 1.9).abs() < 1e-6);
        assert_eq!(p.data()[2], 0.5);
    }

    #[test]
    fn evaluate_bins_partition() {
        let (m, _, _) = setup(TaskKind::Needle);
        let spec = TaskSpec {
            kind: TaskKind::Needle,
            seq_len: 8,
            n_train: 0,
            n_eval: 60,
            vocab: 10,
            seed: 4,
            classes: 2,
            parity_window: None,
            eval_lengths: Some(vec![2, 3, 5, 8]),
        };
        let (_, ev) = gen_task(&spec).unwrap();
        let r = evaluate(&m, &ev, 3, 7).unwrap();
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 60);
        assert_eq!(r.count, 60);
        let one = evaluate(&m, &ev, 8, 7).unwrap();
        assert_eq!(one.bins.len(), 1);
        assert_eq!(one.bins[0].accuracy, one.accuracy);
        assert!(matches!(evaluate(&m, &Dataset::default(), 3, 7), Err(Error::Input(_))));
    }

    #[test]
    fn bad_options() {
        let mut o = opts(0.1);
        o.patience = 5;
        assert!(matches!(o.validate(), Err(Error::Config(_))));
        let mut o = opts(-1.0);
        o.patience = 1;
        assert!(o.validate().is_err());
    }
}
