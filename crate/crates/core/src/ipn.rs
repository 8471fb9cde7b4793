//! Instance-wise patch normalization.
//!
//! Every patch is normalized with a blend of its own statistics and the
//! statistics of the whole look-back window:
//!
//! ```text
//! E[x_n]   = (1 - a) E_I + a E_P[x_n]
//! Var[x_n] = (1 - a) Var_I + a Var_P[x_n]        (clamped to >= eps)
//! x~_n     = (x_n - E[x_n]) / sqrt(Var[x_n] + eps)
//! ```
//!
//! with population moments and a learnable scalar `a`.

use crate::autodiff::{Tape, Var};
use crate::data::PatchSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IPN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub patch_mean: Vec<f64>,
    pub patch_var: Vec<f64>,
    pub instance_mean: f64,
    pub instance_var: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
    pub alpha: f64,
    /// Patches whose blended variance fell below `eps` and was raised to it.
    pub clamped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenormMode {
    /// Per-patch blended statistics; values must be aligned with the patches.
    Patchwise,
    /// Instance statistics only (used for forecast horizons).
    Instance,
}

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

pub fn compute_stats(patches: &PatchSet, x: &[f64], alpha: f64) -> NormStats {
    let (instance_mean, instance_var) = moments(x);
    let (patch_mean, patch_var): (Vec<f64>, Vec<f64>) = (0..patches.n).map(|i| moments(patches.patch(i))).unzip();
    let mut clamped = 0;
    let mean = patch_mean.iter().map(|&ep| (1.0 - alpha) * instance_mean + alpha * ep).collect();
    let var = patch_var
        .iter()
        .map(|&vp| {
            let v = (1.0 - alpha) * instance_var + alpha * vp;
            if v < IPN_EPS {
                clamped += 1;
                IPN_EPS
            } else {
                v
            }
        })
        .collect();
    NormStats {
        patch_mean,
        patch_var,
        instance_mean,
        instance_var,
        mean,
        var,
        eps: IPN_EPS,
        alpha,
        clamped,
    }
}

impl NormStats {
    pub fn instance_scale(&self) -> f64 {
        (self.instance_var + self.eps).sqrt()
    }

    fn patch_scale(&self, i: usize) -> f64 {
        (self.var[i] + self.eps).sqrt()
    }
}

/// Normalized copy of the patches.
pub fn normalize(patches: &PatchSet, stats: &NormStats) -> PatchSet {
    let p = patches.patch_len;
    let mut out = patches.clone();
    for (i, chunk) in out.patches.chunks_mut(p).enumerate() {
        let (m, s) = (stats.mean[i], stats.patch_scale(i));
        chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    out
}

/// Maps normalized values back to the input scale.
pub fn denormalize(values: &[f64], stats: &NormStats, mode: DenormMode, patch_len: usize) -> Result<Vec<f64>> {
    match mode {
        DenormMode::Instance => {
            let (m, s) = (stats.instance_mean, stats.instance_scale());
            Ok(values.iter().map(|v| v * s + m).collect())
        }
        DenormMode::Patchwise => {
            if patch_len == 0 || values.len() != stats.mean.len() * patch_len {
                return Err(Error::Contract(format!(
                    "{} values do not align with {} patches of length {patch_len}",
                    values.len(),
                    stats.mean.len()
                )));
            }
            Ok(values
                .chunks(patch_len)
                .enumerate()
                .flat_map(|(i, chunk)| {
                    let (m, s) = (stats.mean[i], stats.patch_scale(i));
                    chunk.iter().map(move |v| v * s + m)
                })
                .collect())
        }
    }
}

/// Normalizes a batch of patch sets on the tape as a function of the `alpha`
/// parameter. Returns the `[batch * n, patch_len]` result and the statistics
/// of every instance.
pub fn normalize_on_tape(tape: &mut Tape, alpha: Var, batch: &[PatchSet], xs: &[&[f64]]) -> Result<(Var, Vec<NormStats>)> {
    let a = tape.value(alpha).item();
    let Some(first) = batch.first() else {
        return Err(Error::Contract("empty batch".into()));
    };
    let (n, p) = (first.n, first.patch_len);
    if xs.len() != batch.len() || batch.iter().any(|b| b.n != n || b.patch_len != p) {
        return Err(Error::Contract("inconsistent patch sets in batch".into()));
    }
    let mut values = Vec::with_capacity(batch.len() * n * p);
    let mut jacobian = Vec::with_capacity(batch.len() * n * p);
    let mut all_stats = Vec::with_capacity(batch.len());
    for (ps, x) in batch.iter().zip(xs) {
        let stats = compute_stats(ps, x, a);
        for i in 0..n {
            let s = stats.patch_scale(i);
            let m = stats.mean[i];
            let dm = stats.patch_mean[i] - stats.instance_mean;
            let raw_v = (1.0 - a) * stats.instance_var + a * stats.patch_var[i];
            let dv = if raw_v < IPN_EPS { 0.0 } else { stats.patch_var[i] - stats.instance_var };
            for &xv in ps.patch(i) {
                let centered = xv - m;
                values.push(centered / s);
                jacobian.push(-dm / s - centered * dv / (2.0 * s * s * s));
            }
        }
        all_stats.push(stats);
    }
    let out = Tensor::new(&[batch.len() * n, p], values)?;
    let var = tape.scalar_map(alpha, out, jacobian)?;
    Ok((var, all_stats))
}
