//! Forecasting and classification heads, their training loop and metrics.

use std::fmt;

use log::info;

use crate::autodiff::{Tape, Var};
use crate::data::{patchify, Dataset, Split};
use crate::error::{Error, Result};
use crate::ipn::normalize_on_tape;
use crate::model::{DecopModel, Head};
use crate::params::{Adam, AdamConfig, Bound, ParamStore};
use crate::rng::Rng;

/// `[B, F]` forecasts on the input scale. The horizon is mapped back with
/// the instance statistics of each look-back window.
pub fn forecast_forward(
    tape: &mut Tape,
    model: &DecopModel,
    bound: &Bound,
    xs: &[Vec<f64>],
    train: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let Some(Head::Forecast { weight, bias, .. }) = model.head else {
        return Err(Error::Contract("model has no forecasting head".into()));
    };
    let (z, stats) = encode_windows(tape, model, bound, xs, train, rng)?;
    let (n, d) = (model.n_patches(), model.cfg.dcl.d_model);
    let flat = tape.reshape(z, &[xs.len(), n * d])?;
    let mut y = tape.matmul(flat, bound.var(weight))?;
    y = tape.add_row(y, bound.var(bias))?;
    let scale: Vec<f64> = stats.iter().map(|s| s.instance_scale()).collect();
    let shift: Vec<f64> = stats.iter().map(|s| s.instance_mean).collect();
    tape.row_affine(y, &scale, &shift)
}

/// `[B, C]` class scores from the patch-averaged representation.
pub fn classify_forward(
    tape: &mut Tape,
    model: &DecopModel,
    bound: &Bound,
    xs: &[Vec<f64>],
    train: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let Some(Head::Classify { weight, bias, .. }) = model.head else {
        return Err(Error::Contract("model has no classification head".into()));
    };
    let (z, _) = encode_windows(tape, model, bound, xs, train, rng)?;
    let (n, d) = (model.n_patches(), model.cfg.dcl.d_model);
    let grouped = tape.reshape(z, &[xs.len(), n, d])?;
    let pooled = tape.mean_axis(grouped, 1)?;
    let scores = tape.matmul(pooled, bound.var(weight))?;
    tape.add_row(scores, bound.var(bias))
}

fn encode_windows(
    tape: &mut Tape,
    model: &DecopModel,
    bound: &Bound,
    xs: &[Vec<f64>],
    train: bool,
    rng: &mut Rng,
) -> Result<(Var, Vec<crate::ipn::NormStats>)> {
    let cfg = &model.cfg;
    if let Some(x) = xs.iter().find(|x| x.len() != cfg.seq_len) {
        return Err(Error::Contract(format!(
            "look-back of length {} but the model was built for {}; re-patch with matching seq_len",
            x.len(),
            cfg.seq_len
        )));
    }
    let raw = xs
        .iter()
        .map(|x| patchify(x, cfg.patch_len, cfg.stride))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let (normed, stats) = normalize_on_tape(tape, bound.var(model.alpha), &raw, &refs)?;
    let enc = model.encode(tape, bound, normed, xs.len(), None, train, rng)?;
    Ok((enc.z_k, stats))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForecastMetrics {
    pub mse: f64,
    pub mae: f64,
}

/// Percentages; precision, recall and F1 are macro averages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metrics {
    Forecast(ForecastMetrics),
    Classify(ClassMetrics),
}

impl Metrics {
    /// Selection score, lower is better: MSE, or negative macro F1.
    pub fn score(&self) -> f64 {
        match self {
            Metrics::Forecast(m) => m.mse,
            Metrics::Classify(m) => -m.f1,
        }
    }

    pub fn pairs(&self) -> Vec<(&'static str, f64)> {
        match *self {
            Metrics::Forecast(m) => vec![("mse", m.mse), ("mae", m.mae)],
            Metrics::Classify(m) => vec![
                ("acc", m.acc),
                ("precision", m.precision),
                ("recall", m.recall),
                ("f1", m.f1),
            ],
        }
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.pairs().iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
        f.write_str(&parts.join(" "))
    }
}

pub fn forecast_metrics(preds: &[f64], targets: &[f64]) -> Result<ForecastMetrics> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Contract(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let n = preds.len() as f64;
    let (se, ae) = preds.iter().zip(targets).fold((0.0, 0.0), |(se, ae), (p, t)| {
        let e = p - t;
        (se + e * e, ae + e.abs())
    });
    Ok(ForecastMetrics { mse: se / n, mae: ae / n })
}

/// Precision, recall and F1 of one class as fractions; any zero division
/// yields 0.
pub fn class_scores(preds: &[usize], targets: &[usize], class: usize) -> (f64, f64, f64) {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &t) in preds.iter().zip(targets) {
        match (p == class, t == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

pub fn class_metrics(preds: &[usize], targets: &[usize], classes: usize) -> Result<ClassMetrics> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Contract(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let correct = preds.iter().zip(targets).filter(|(p, t)| p == t).count();
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for c in 0..classes {
        let (cp, cr, cf) = class_scores(preds, targets, c);
        p += cp;
        r += cr;
        f += cf;
    }
    let k = classes as f64;
    Ok(ClassMetrics {
        acc: 100.0 * correct as f64 / preds.len() as f64,
        precision: 100.0 * p / k,
        recall: 100.0 * r / k,
        f1: 100.0 * f / k,
    })
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Error of repeating the last look-back value over the horizon.
pub fn last_value_baseline(data: &Dataset, split: Split, seq_len: usize, pred_len: usize) -> Result<ForecastMetrics> {
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for w in data.sample_windows(split, seq_len, pred_len) {
        if let crate::data::Target::Horizon(y) = w.target {
            preds.extend(std::iter::repeat_n(w.x[seq_len - 1], y.len()));
            targets.extend(y);
        }
    }
    forecast_metrics(&preds, &targets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Look-back positions per step; each contributes every channel.
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Train only the head, keeping the encoder fixed.
    pub probe: bool,
    pub seed: u64,
    pub max_batches: Option<usize>,
    /// Evaluate on at most this many evenly spaced positions per split.
    pub eval_positions: Option<usize>,
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("finetune_lr", "must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub epochs: Vec<FinetuneEpoch>,
    /// Epoch whose parameters were kept; 0 means the starting point.
    pub best_epoch: usize,
    pub best_val: Metrics,
}

fn pred_len(model: &DecopModel) -> usize {
    match model.head {
        Some(Head::Forecast { horizon, .. }) => horizon,
        _ => 0,
    }
}

/// Every `k`-th position so that at most `limit` remain.
fn thin(mut positions: Vec<usize>, limit: Option<usize>) -> Vec<usize> {
    if let Some(limit) = limit {
        if limit > 0 && positions.len() > limit {
            let step = positions.len().div_ceil(limit);
            positions = positions.into_iter().step_by(step).collect();
        }
    }
    positions
}

/// Deterministic evaluation of `model` on a split, in eval mode.
pub fn evaluate(
    model: &DecopModel,
    data: &Dataset,
    split: Split,
    batch_size: usize,
    limit: Option<usize>,
) -> Result<Metrics> {
    let (l, f) = (model.cfg.seq_len, pred_len(model));
    let positions = thin(data.positions(split, l, f), limit);
    if positions.is_empty() {
        return Err(Error::Size(format!("no {} windows in {}", split.name(), data.name)));
    }
    let mut rng = Rng::new(0);
    let mut fpred = Vec::new();
    let mut ftarget = Vec::new();
    let mut cpred = Vec::new();
    let mut ctarget = Vec::new();
    for chunk in positions.chunks(batch_size.max(1)) {
        let windows: Vec<_> = chunk
            .iter()
            .flat_map(|&p| (0..data.channels).map(move |c| data.window(p, c, l, f)))
            .collect();
        let xs: Vec<Vec<f64>> = windows.iter().map(|w| w.x.clone()).collect();
        let mut tape = Tape::new();
        let bound = model.store.bind_frozen(&mut tape);
        match model.head {
            Some(Head::Forecast { .. }) => {
                let y = forecast_forward(&mut tape, model, &bound, &xs, false, &mut rng)?;
                fpred.extend_from_slice(tape.value(y).data());
                for w in windows {
                    if let crate::data::Target::Horizon(t) = w.target {
                        ftarget.extend(t);
                    }
                }
            }
            Some(Head::Classify { classes, .. }) => {
                let s = classify_forward(&mut tape, model, &bound, &xs, false, &mut rng)?;
                cpred.extend(tape.value(s).data().chunks(classes).map(argmax));
                for w in windows {
                    match w.target {
                        crate::data::Target::Class(c) => ctarget.push(c),
                        _ => return Err(Error::Contract("classification needs labelled windows".into())),
                    }
                }
            }
            None => return Err(Error::Contract("model has no task head".into())),
        }
    }
    match model.head {
        Some(Head::Classify { classes, .. }) => Ok(Metrics::Classify(class_metrics(&cpred, &ctarget, classes)?)),
        _ => Ok(Metrics::Forecast(forecast_metrics(&fpred, &ftarget)?)),
    }
}

pub struct Finetuner {
    pub model: DecopModel,
    pub cfg: FinetuneConfig,
    adam: Adam,
    rng: Rng,
    epoch: usize,
}

impl Finetuner {
    /// The model must already carry a task head.
    pub fn new(model: DecopModel, cfg: FinetuneConfig) -> Result<Self> {
        cfg.validate()?;
        if model.head.is_none() {
            return Err(Error::Contract("fine-tuning needs a task head".into()));
        }
        let mut ids = if cfg.probe { Vec::new() } else { model.encoder_params() };
        ids.extend(model.head_params());
        let adam = Adam::new(AdamConfig::with_lr(cfg.lr), &model.store, &ids);
        let rng = Rng::new(cfg.seed).fork(0x4649_4e45);
        Ok(Finetuner {
            model,
            cfg,
            adam,
            rng,
            epoch: 0,
        })
    }

    /// One pass over (a seeded subset of) the training windows; returns the
    /// mean training loss.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<f64> {
        self.epoch += 1;
        let (l, f) = (self.model.cfg.seq_len, pred_len(&self.model));
        let mut positions = data.shuffled_positions(Split::Train, l, f, &mut self.rng);
        if positions.is_empty() {
            return Err(Error::Size(format!("no training windows in {}", data.name)));
        }
        if let Some(cap) = self.cfg.max_batches {
            positions.truncate(cap * self.cfg.batch_size);
        }
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, chunk) in positions.chunks(self.cfg.batch_size).enumerate() {
            let windows: Vec<_> = chunk
                .iter()
                .flat_map(|&p| (0..data.channels).map(move |c| data.window(p, c, l, f)))
                .collect();
            let xs: Vec<Vec<f64>> = windows.iter().map(|w| w.x.clone()).collect();
            let mut tape = Tape::new();
            let bound = self.model.store.bind(&mut tape);
            let loss = match self.model.head {
                Some(Head::Forecast { .. }) => {
                    let y = forecast_forward(&mut tape, &self.model, &bound, &xs, true, &mut self.rng)?;
                    let target: Vec<f64> = windows
                        .into_iter()
                        .flat_map(|w| match w.target {
                            crate::data::Target::Horizon(t) => t,
                            crate::data::Target::Class(_) => Vec::new(),
                        })
                        .collect();
                    let target = tape.constant(crate::tensor::Tensor::new(&[xs.len(), f], target)?);
                    tape.mse(y, target)?
                }
                Some(Head::Classify { .. }) => {
                    let s = classify_forward(&mut tape, &self.model, &bound, &xs, true, &mut self.rng)?;
                    let labels: Vec<usize> = windows
                        .iter()
                        .map(|w| match w.target {
                            crate::data::Target::Class(c) => Ok(c),
                            _ => Err(Error::Contract("classification needs labelled windows".into())),
                        })
                        .collect::<Result<_>>()?;
                    tape.softmax_cross_entropy(s, &labels)?
                }
                None => unreachable!("checked in new"),
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite { epoch: self.epoch, batch: bi });
            }
            let mut grads = tape.backward(loss)?;
            self.model.store.accumulate(&bound, &mut grads);
            self.adam.step(&mut self.model.store)?;
            self.model.store.zero_grad();
            total += value;
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    pub fn evaluate(&self, data: &Dataset, split: Split) -> Result<Metrics> {
        evaluate(&self.model, data, split, self.cfg.batch_size, self.cfg.eval_positions)
    }

    /// Trains with validation-based selection and early stopping; the best
    /// parameters (possibly the starting ones) are restored at the end.
    pub fn fit(&mut self, data: &Dataset) -> Result<FinetuneReport> {
        let mut best_val = self.evaluate(data, Split::Val)?;
        let mut best: (usize, ParamStore) = (0, self.model.store.clone());
        let mut stale = 0;
        let mut epochs = Vec::new();
        for _ in 0..self.cfg.epochs {
            let train_loss = self.train_epoch(data)?;
            let val = self.evaluate(data, Split::Val)?;
            info!("finetune epoch {} loss {train_loss:.6} val {val}", self.epoch);
            epochs.push(FinetuneEpoch {
                epoch: self.epoch,
                train_loss,
                val,
            });
            if val.score() < best_val.score() {
                best_val = val;
                best = (self.epoch, self.model.store.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.cfg.patience {
                    info!("no validation improvement for {stale} epochs; stopping");
                    break;
                }
            }
        }
        self.model.store = best.1;
        Ok(FinetuneReport {
            epochs,
            best_epoch: best.0,
            best_val,
        })
    }
}

/// `epoch,train_loss,<val metrics>` rows.
pub fn metrics_csv(report: &FinetuneReport) -> String {
    let mut out = String::from("epoch,train_loss");
    if let Some(first) = report.epochs.first() {
        for (k, _) in first.val.pairs() {
            out.push_str(&format!(",val_{k}"));
        }
    }
    out.push('\n');
    for e in &report.epochs {
        out.push_str(&format!("{},{}", e.epoch, e.train_loss));
        for (_, v) in e.val.pairs() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
