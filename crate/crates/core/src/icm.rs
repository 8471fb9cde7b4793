//! Frequency-domain positive views and the instance-level alignment loss.
//!
//! The positive view of a batch is built by removing, per instance, the
//! low-amplitude frequency bins that are not among the batch-wide salient
//! ones:
//!
//! 1. `S_mean[k]` = amplitude of bin `k` averaged over the batch, then over channels;
//! 2. `S_invar`   = the `topK = floor(beta * floor(L/2))` bins with the largest `S_mean`;
//! 3. `S_var`     = per instance, the `topM = floor((1 - beta) * floor(L/2))` bins
//!    with the smallest amplitude, minus `S_invar`;
//! 4. the mask zeroes `S_var` and the inverse transform gives the view.
//!
//! Bins `k` in `[0, floor(L/2))` take part in the selection; bin
//! `floor(L/2)` (the Nyquist bin for even `L`) is always kept.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// One-sided spectra of a `batch x channels` group of real series.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub batch: usize,
    pub channels: usize,
    pub len: usize,
    /// `batch * channels` rows of `len / 2 + 1` coefficients.
    pub coeffs: Vec<Vec<Complex64>>,
}

impl Spectrum {
    pub fn bins(&self) -> usize {
        self.len / 2 + 1
    }

    pub fn amplitude(&self, b: usize, m: usize, k: usize) -> f64 {
        self.coeffs[b * self.channels + m][k].norm()
    }

    /// Unmodified inverse transform.
    pub fn inverse(&self) -> Vec<f64> {
        let fft = Transform::new(self.len);
        self.coeffs.iter().flat_map(|c| fft.inverse(c)).collect()
    }
}

struct Transform {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Transform {
    fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        Transform {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf.truncate(self.len / 2 + 1);
        buf
    }

    /// Real series from a one-sided spectrum, using conjugate symmetry for
    /// the missing half.
    fn inverse(&self, half: &[Complex64]) -> Vec<f64> {
        let l = self.len;
        let mut buf = vec![Complex64::new(0.0, 0.0); l];
        buf[..half.len()].copy_from_slice(half);
        buf[0].im = 0.0;
        if l.is_multiple_of(2) {
            buf[l / 2].im = 0.0;
        }
        for k in 1..l.div_ceil(2) {
            buf[l - k] = half[k].conj();
        }
        self.inverse.process(&mut buf);
        buf.iter().map(|c| c.re / l as f64).collect()
    }
}

/// Transforms `batch * channels` series of length `len`, stored contiguously.
/// `X[k] = sum_t x[t] exp(-2 pi i k t / L)`.
pub fn dft_forward(x: &[f64], batch: usize, channels: usize, len: usize) -> Result<Spectrum> {
    if len < 2 || x.len() != batch * channels * len {
        return Err(Error::shape("dft_forward", &[x.len()], &[batch, channels, len]));
    }
    let fft = Transform::new(len);
    let coeffs = x.chunks(len).map(|s| fft.forward(s)).collect();
    Ok(Spectrum {
        batch,
        channels,
        len,
        coeffs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    /// Fraction of bins kept as globally salient.
    pub beta: f64,
}

impl FilterConfig {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::config("beta", format!("{beta} is outside (0, 1]")));
        }
        Ok(FilterConfig { beta })
    }

    pub fn top_k(&self, len: usize) -> usize {
        (self.beta * (len / 2) as f64).floor() as usize
    }

    pub fn top_m(&self, len: usize) -> usize {
        ((1.0 - self.beta) * (len / 2) as f64).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyMask {
    pub batch: usize,
    pub channels: usize,
    /// Number of selectable bins, `floor(L/2)`.
    pub bins: usize,
    /// 1 keeps a bin, 0 removes it.
    pub values: Vec<u8>,
    /// Globally retained bins, ascending.
    pub invariant: Vec<usize>,
}

impl FrequencyMask {
    pub fn get(&self, b: usize, m: usize, k: usize) -> u8 {
        self.values[(b * self.channels + m) * self.bins + k]
    }

    /// Removed bins of one instance, ascending.
    pub fn removed(&self, b: usize, m: usize) -> Vec<usize> {
        (0..self.bins).filter(|&k| self.get(b, m, k) == 0).collect()
    }
}

/// Indices ordered by `key`, ties broken by lower index.
fn ranked(keys: &[f64], descending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = keys[a].total_cmp(&keys[b]);
        let ord = if descending { ord.reverse() } else { ord };
        ord.then(a.cmp(&b))
    });
    idx
}

pub fn build_fmask(spec: &Spectrum, cfg: &FilterConfig) -> Result<FrequencyMask> {
    let bins = spec.len / 2;
    let (top_k, top_m) = (cfg.top_k(spec.len), cfg.top_m(spec.len));
    if top_k == 0 && top_m >= bins {
        return Err(Error::config("beta", "filter would remove every bin"));
    }
    let (b_n, m_n) = (spec.batch, spec.channels);
    let mut s_mean = vec![0.0; bins];
    for m in 0..m_n {
        for k in 0..bins {
            let over_batch: f64 = (0..b_n).map(|b| spec.amplitude(b, m, k)).sum::<f64>() / b_n as f64;
            s_mean[k] += over_batch / m_n as f64;
        }
    }
    let mut invariant: Vec<usize> = ranked(&s_mean, true).into_iter().take(top_k).collect();
    invariant.sort_unstable();
    let mut is_invariant = vec![false; bins];
    invariant.iter().for_each(|&k| is_invariant[k] = true);

    let mut values = vec![1u8; b_n * m_n * bins];
    for (i, row) in values.chunks_mut(bins).enumerate() {
        let amps: Vec<f64> = spec.coeffs[i][..bins].iter().map(|c| c.norm()).collect();
        for k in ranked(&amps, false).into_iter().take(top_m) {
            if !is_invariant[k] {
                row[k] = 0;
            }
        }
    }
    Ok(FrequencyMask {
        batch: b_n,
        channels: m_n,
        bins,
        values,
        invariant,
    })
}

/// Zeroes the masked bins and transforms back to the time domain.
pub fn apply_and_invert(spec: &Spectrum, mask: &FrequencyMask) -> Result<Vec<f64>> {
    if mask.batch != spec.batch || mask.channels != spec.channels || mask.bins != spec.len / 2 {
        return Err(Error::shape(
            "apply_and_invert",
            &[spec.batch, spec.channels, spec.len / 2],
            &[mask.batch, mask.channels, mask.bins],
        ));
    }
    let fft = Transform::new(spec.len);
    let mut out = Vec::with_capacity(spec.coeffs.len() * spec.len);
    for (i, coeffs) in spec.coeffs.iter().enumerate() {
        let mut masked = coeffs.clone();
        let row = &mask.values[i * mask.bins..(i + 1) * mask.bins];
        for (c, &keep) in masked.iter_mut().zip(row) {
            if keep == 0 {
                *c = Complex64::new(0.0, 0.0);
            }
        }
        out.extend(fft.inverse(&masked));
    }
    Ok(out)
}

/// Denoised positive views of `batch * channels` series of length `len`.
pub fn positive_views(x: &[f64], batch: usize, channels: usize, len: usize, cfg: &FilterConfig) -> Result<Vec<f64>> {
    let spec = dft_forward(x, batch, channels, len)?;
    let mask = build_fmask(&spec, cfg)?;
    apply_and_invert(&spec, &mask)
}

/// Alignment loss between two encodings shaped `[groups * n, d]`: each
/// group's rows are averaged, the averages are scaled to unit length, and
/// the loss is one minus the mean cosine similarity, in `[0, 2]`.
pub fn contrastive_loss(tape: &mut Tape, z: Var, z_tilde: Var, groups: usize, n: usize) -> Result<Var> {
    if tape.shape(z) != tape.shape(z_tilde) {
        return Err(Error::shape("contrastive_loss", tape.shape(z), tape.shape(z_tilde)));
    }
    let (rows, d) = tape.value(z).dims2()?;
    if rows != groups * n {
        return Err(Error::shape("contrastive_loss", &[rows, d], &[groups, n, d]));
    }
    let mut pooled = [z, z_tilde];
    for v in &mut pooled {
        let r = tape.reshape(*v, &[groups, n, d])?;
        let avg = tape.mean_axis(r, 1)?;
        *v = tape.l2_normalize_rows(avg)?;
    }
    let sim = tape.dot(pooled[0], pooled[1])?;
    let scaled = tape.scale(sim, -1.0 / groups as f64);
    Ok(tape.add_scalar(scaled, 1.0))
}
