//! Masked-patch pretraining with a frequency-denoised positive view.
//!
//! One optimization step:
//! normalize the batch with IPN, build the denoised view of every
//! normalized series, draw one patch mask per instance and apply it to both
//! views, encode both, align the final-block representations, reconstruct
//! the masked patches of both views, and take an Adam step on
//! `recon + gamma * cl`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::warn;

use crate::autodiff::{Tape, Var};
use crate::data::{patchify, unpatchify_values, Dataset, PatchSet, Split};
use crate::error::{Error, Result};
use crate::icm::{contrastive_loss, positive_views, FilterConfig};
use crate::ipn::{compute_stats, normalize, normalize_on_tape};
use crate::model::DecopModel;
use crate::params::{Adam, AdamConfig, Bound};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    /// One flag per patch; `true` means hidden from the encoder.
    pub masked: Vec<bool>,
}

impl MaskSpec {
    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Exactly `floor(ratio * n)` distinct patches, uniformly at random.
pub fn random_mask(n: usize, ratio: f64, rng: &mut Rng) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config("mask_ratio", format!("{ratio} is outside [0, 1)")));
    }
    let k = (ratio * n as f64).floor() as usize;
    let mut masked = vec![false; n];
    for i in rng.choose(n, k) {
        masked[i] = true;
    }
    Ok(MaskSpec { ratio, masked })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub gamma: f64,
    pub epochs: usize,
    /// Look-back positions per step; each contributes every channel.
    pub batch_size: usize,
    pub lr: f64,
    pub mask_ratio: f64,
    pub beta: f64,
    pub seed: u64,
    /// Upper bound on steps per epoch; `None` runs over every window.
    pub max_batches: Option<usize>,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config("mask_ratio", "must be in [0, 1)"));
        }
        FilterConfig::new(self.beta)?;
        Ok(())
    }
}

/// Inputs of one step that do not depend on the parameters being
/// differentiated: raw patches, the denoised view and the patch masks.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    /// Instances (`positions * channels`), position-major.
    pub instances: usize,
    pub raw: Vec<PatchSet>,
    pub xs: Vec<Vec<f64>>,
    /// Denoised view, `[instances * n, patch_len]`.
    pub view: Tensor,
    /// Per-patch mask over all instances, shared by both views.
    pub mask: Vec<bool>,
}

/// Builds a step's inputs from `positions * channels` look-back windows.
/// The view is computed from the series normalized with the model's current
/// `alpha` and carries no gradient.
pub fn prepare_batch(
    model: &DecopModel,
    xs: Vec<Vec<f64>>,
    positions: usize,
    channels: usize,
    filter: &FilterConfig,
    mask_ratio: f64,
    rng: &mut Rng,
) -> Result<PreparedBatch> {
    let cfg = &model.cfg;
    let (l, p, s) = (cfg.seq_len, cfg.patch_len, cfg.stride);
    if xs.len() != positions * channels || xs.iter().any(|x| x.len() != l) {
        return Err(Error::Contract(format!(
            "expected {positions} x {channels} windows of length {l}"
        )));
    }
    let alpha = model.alpha_value();
    let raw = xs.iter().map(|x| patchify(x, p, s)).collect::<Result<Vec<_>>>()?;
    let mut normalized = Vec::with_capacity(xs.len() * l);
    for (ps, x) in raw.iter().zip(&xs) {
        let stats = compute_stats(ps, x, alpha);
        let np = normalize(ps, &stats);
        normalized.extend(unpatchify_values(&np.patches, p, s, l));
    }
    let denoised = positive_views(&normalized, positions, channels, l, filter)?;
    let mut view = Vec::with_capacity(xs.len() * model.n_patches() * p);
    for series in denoised.chunks(l) {
        view.extend(patchify(series, p, s)?.patches);
    }
    let n = model.n_patches();
    let view = Tensor::new(&[xs.len() * n, p], view)?;
    let mut mask = Vec::with_capacity(xs.len() * n);
    for _ in 0..xs.len() {
        mask.extend(random_mask(n, mask_ratio, rng)?.masked);
    }
    Ok(PreparedBatch {
        instances: xs.len(),
        raw,
        xs,
        view,
        mask,
    })
}

/// Squared error over the masked patches, divided by the number of masked
/// values. Unmasked patches do not contribute. With nothing masked the loss
/// is zero.
pub fn recon_loss(tape: &mut Tape, target: Var, pred: Var, mask: &[bool]) -> Result<Var> {
    let (rows, p) = tape.value(target).dims2()?;
    if mask.len() != rows {
        return Err(Error::shape("recon_loss", &[rows, p], &[mask.len()]));
    }
    let weights: Vec<f64> = mask.iter().flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, p)).collect();
    let weights = Tensor::new(&[rows, p], weights)?;
    let count = mask.iter().filter(|&&m| m).count() * p;
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let gated = tape.mul_const(sq, &weights)?;
    let total = tape.sum(gated);
    if count == 0 {
        warn!("reconstruction loss with no masked patches");
        return Ok(tape.scale(total, 0.0));
    }
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// `recon + gamma * cl`.
pub fn total_loss(tape: &mut Tape, recon: Var, cl: Var, gamma: f64) -> Result<Var> {
    let weighted = tape.scale(cl, gamma);
    tape.add(recon, weighted)
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub recon: Var,
    pub cl: Var,
    pub total: Var,
}

/// Records the full pretraining loss of a prepared batch.
pub fn batch_loss(
    tape: &mut Tape,
    model: &DecopModel,
    bound: &Bound,
    batch: &PreparedBatch,
    gamma: f64,
    train: bool,
    rng: &mut Rng,
) -> Result<LossVars> {
    let xs: Vec<&[f64]> = batch.xs.iter().map(Vec::as_slice).collect();
    let (anchor, _) = normalize_on_tape(tape, bound.var(model.alpha), &batch.raw, &xs)?;
    let view = tape.constant(batch.view.clone());
    let b = batch.instances;
    let enc_a = model.encode(tape, bound, anchor, b, Some(&batch.mask), train, rng)?;
    let enc_v = model.encode(tape, bound, view, b, Some(&batch.mask), train, rng)?;
    let cl = contrastive_loss(tape, enc_a.z_e, enc_v.z_e, b, model.n_patches())?;
    let rec_a = model.reconstruct(tape, bound, enc_a.z_k)?;
    let rec_v = model.reconstruct(tape, bound, enc_v.z_k)?;
    let loss_a = recon_loss(tape, anchor, rec_a, &batch.mask)?;
    let loss_v = recon_loss(tape, view, rec_v, &batch.mask)?;
    let both = tape.add(loss_a, loss_v)?;
    let recon = tape.scale(both, 0.5);
    let total = total_loss(tape, recon, cl, gamma)?;
    Ok(LossVars { recon, cl, total })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub recon: f64,
    pub cl: f64,
    pub total: f64,
    pub batches: usize,
    /// Averaged representations with zero norm in the alignment loss.
    pub zero_norm: usize,
    /// Patches whose blended variance was clamped.
    pub ipn_clamped: usize,
    pub seconds: f64,
}

pub struct Pretrainer {
    pub model: DecopModel,
    pub cfg: PretrainConfig,
    adam: Adam,
    filter: FilterConfig,
    rng: Rng,
    epoch: usize,
}

impl Pretrainer {
    pub fn new(model: DecopModel, cfg: PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let filter = FilterConfig::new(cfg.beta)?;
        let adam = Adam::new(AdamConfig::with_lr(cfg.lr), &model.store, &model.pretrain_params());
        let rng = Rng::new(cfg.seed).fork(0x5052_4554);
        Ok(Pretrainer {
            model,
            cfg,
            adam,
            filter,
            rng,
            epoch: 0,
        })
    }

    /// One pass over (a seeded subset of) the training windows.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        let start = Instant::now();
        self.epoch += 1;
        let (l, m) = (self.model.cfg.seq_len, data.channels);
        let mut positions = data.shuffled_positions(Split::Train, l, 0, &mut self.rng);
        if positions.is_empty() {
            return Err(Error::Size(format!("no training windows of length {l} in {}", data.name)));
        }
        if let Some(cap) = self.cfg.max_batches {
            positions.truncate(cap * self.cfg.batch_size);
        }
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0;
        let mut zero_norm = 0;
        let mut clamped = 0;
        for (bi, chunk) in positions.chunks(self.cfg.batch_size).enumerate() {
            let xs: Vec<Vec<f64>> = chunk
                .iter()
                .flat_map(|&p| (0..m).map(move |c| data.slice(c, p, l)))
                .collect();
            let batch = prepare_batch(&self.model, xs, chunk.len(), m, &self.filter, self.cfg.mask_ratio, &mut self.rng)?;
            let mut tape = Tape::new();
            let bound = self.model.store.bind(&mut tape);
            let loss = batch_loss(&mut tape, &self.model, &bound, &batch, self.cfg.gamma, true, &mut self.rng)?;
            let (recon, cl, total) = (
                tape.value(loss.recon).item(),
                tape.value(loss.cl).item(),
                tape.value(loss.total).item(),
            );
            if !total.is_finite() {
                return Err(Error::NonFinite { epoch: self.epoch, batch: bi });
            }
            zero_norm += tape.zero_norm_rows();
            let alpha = self.model.alpha_value();
            clamped += batch
                .raw
                .iter()
                .zip(&batch.xs)
                .map(|(ps, x)| compute_stats(ps, x, alpha).clamped)
                .sum::<usize>();
            let mut grads = tape.backward(loss.total)?;
            self.model.store.accumulate(&bound, &mut grads);
            self.adam.step(&mut self.model.store)?;
            sums.0 += recon;
            sums.1 += cl;
            sums.2 += total;
            batches += 1;
        }
        let k = batches as f64;
        Ok(EpochMetrics {
            epoch: self.epoch,
            recon: sums.0 / k,
            cl: sums.1 / k,
            total: sums.2 / k,
            batches,
            zero_norm,
            ipn_clamped: clamped,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn fit(&mut self, data: &Dataset) -> Result<Vec<EpochMetrics>> {
        (0..self.cfg.epochs).map(|_| self.run_epoch(data)).collect()
    }

    pub fn into_model(self) -> DecopModel {
        self.model
    }
}

/// `epoch,recon,cl,total` rows. Contains no timing so that identical seeded
/// runs produce identical files.
pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut out = String::from("epoch,recon,cl,total\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.recon, r.cl, r.total));
    }
    crate::io::write_atomic(path, out.as_bytes())
}

/// `epoch,seconds` rows.
pub fn write_timing_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "epoch,seconds").expect("in-memory write");
    for r in rows {
        writeln!(out, "{},{:.3}", r.epoch, r.seconds).expect("in-memory write");
    }
    crate::io::write_atomic(path, &out)
}
