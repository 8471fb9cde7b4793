//! Hierarchical windowed encoder.
//!
//! Patch embeddings `[N, D]` are grouped into non-overlapping windows of
//! `W_k` consecutive patches (zero-padded at the end), each window is
//! flattened to one `W_k * D` vector and mixed by a temporal learner, and the
//! result is reshaped back and added to a dropout residual. Blocks run with
//! non-decreasing window sizes so the receptive field grows with depth.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnerKind {
    Linear,
    Mlp,
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LearnerKind::Linear => "linear",
            LearnerKind::Mlp => "mlp",
        })
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(LearnerKind::Linear),
            "mlp" => Ok(LearnerKind::Mlp),
            other => Err(Error::config("learner", format!("`{other}` is not linear or mlp"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DclConfig {
    pub d_model: usize,
    pub windows: Vec<usize>,
    pub learner: LearnerKind,
    pub dropout: f64,
    /// Hidden width of the mlp learner as a multiple of `W_k * D`.
    pub mlp_ratio: usize,
}

impl DclConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::config("d_model", "must be positive"));
        }
        if self.windows.is_empty() || self.windows.contains(&0) {
            return Err(Error::config("windows", "need at least one positive window size"));
        }
        if self.windows.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config("windows", "window sizes must be non-decreasing"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must be in [0, 1)"));
        }
        if self.learner == LearnerKind::Mlp && self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio", "must be positive"));
        }
        Ok(())
    }

    /// Parameters of one block, determined by window size, width and kind.
    pub fn block_params(&self, window: usize) -> usize {
        let wd = window * self.d_model;
        match self.learner {
            LearnerKind::Linear => wd * wd + wd,
            LearnerKind::Mlp => {
                let h = self.mlp_ratio * wd;
                wd * h + h + h * wd + wd
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DclBlock {
    pub window: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: Option<(ParamId, ParamId)>,
}

/// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` weight and bias of an affine map.
pub(crate) fn init_affine(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) -> Result<(ParamId, ParamId)> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = store.insert(&format!("{prefix}.weight"), Tensor::uniform(&[fan_in, fan_out], bound, rng))?;
    let b = store.insert(&format!("{prefix}.bias"), Tensor::uniform(&[fan_out], bound, rng))?;
    Ok((w, b))
}

impl DclBlock {
    pub fn init(store: &mut ParamStore, index: usize, window: usize, cfg: &DclConfig, rng: &mut Rng) -> Result<Self> {
        let wd = window * cfg.d_model;
        let prefix = format!("dcl.{index}");
        match cfg.learner {
            LearnerKind::Linear => {
                let (w1, b1) = init_affine(store, &format!("{prefix}.fc1"), wd, wd, rng)?;
                Ok(DclBlock { window, w1, b1, w2: None })
            }
            LearnerKind::Mlp => {
                let h = cfg.mlp_ratio * wd;
                let (w1, b1) = init_affine(store, &format!("{prefix}.fc1"), wd, h, rng)?;
                let w2 = init_affine(store, &format!("{prefix}.fc2"), h, wd, rng)?;
                Ok(DclBlock { window, w1, b1, w2: Some(w2) })
            }
        }
    }

    /// Looks up an existing block's parameters by name.
    pub fn find(store: &ParamStore, index: usize, window: usize, learner: LearnerKind) -> Result<Self> {
        let id = |name: String| store.id(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")));
        let prefix = format!("dcl.{index}");
        let w1 = id(format!("{prefix}.fc1.weight"))?;
        let b1 = id(format!("{prefix}.fc1.bias"))?;
        let w2 = match learner {
            LearnerKind::Linear => None,
            LearnerKind::Mlp => Some((id(format!("{prefix}.fc2.weight"))?, id(format!("{prefix}.fc2.bias"))?)),
        };
        Ok(DclBlock { window, w1, b1, w2 })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w1, self.b1];
        if let Some((w, b)) = self.w2 {
            ids.extend([w, b]);
        }
        ids
    }
}

/// Number of windows after padding `n` patches to a multiple of `window`.
pub fn window_count(n: usize, window: usize) -> usize {
    n.div_ceil(window)
}

/// `[batch * n, d]` -> `[batch * ceil(n / w), w * d]`: zero-pad each
/// instance's patch axis to a multiple of `w` and flatten every window.
pub fn window_partition(tape: &mut Tape, z: Var, batch: usize, n: usize, window: usize) -> Result<Var> {
    let (rows, d) = tape.value(z).dims2()?;
    if rows != batch * n || window == 0 {
        return Err(Error::shape("window_partition", &[rows, d], &[batch, n, window]));
    }
    let nw = window_count(n, window);
    let z = tape.reshape(z, &[batch, n, d])?;
    let z = tape.pad_axis(z, 1, nw * window - n)?;
    tape.reshape(z, &[batch * nw, window * d])
}

/// Inverse of [`window_partition`]: back to `[batch * n, d]` with the padding dropped.
pub fn window_merge(tape: &mut Tape, zr: Var, batch: usize, n: usize, window: usize, d: usize) -> Result<Var> {
    let nw = window_count(n, window);
    if tape.shape(zr) != [batch * nw, window * d] {
        return Err(Error::shape("window_merge", tape.shape(zr), &[batch * nw, window * d]));
    }
    let z = tape.reshape(zr, &[batch, nw * window, d])?;
    let z = tape.narrow(z, 1, n)?;
    tape.reshape(z, &[batch * n, d])
}

#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    /// Learner output reshaped back to `[batch * n, d]`, before the residual.
    pub z_e: Var,
    /// `z_e + dropout(input)`.
    pub z_k: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    tape: &mut Tape,
    bound: &Bound,
    block: &DclBlock,
    z_p: Var,
    batch: usize,
    n: usize,
    dropout: f64,
    train: bool,
    rng: &mut Rng,
) -> Result<BlockOutput> {
    let (_, d) = tape.value(z_p).dims2()?;
    let zr = window_partition(tape, z_p, batch, n, block.window)?;
    let mut h = tape.matmul(zr, bound.var(block.w1))?;
    h = tape.add_row(h, bound.var(block.b1))?;
    if let Some((w2, b2)) = block.w2 {
        h = tape.gelu(h);
        h = tape.matmul(h, bound.var(w2))?;
        h = tape.add_row(h, bound.var(b2))?;
    }
    let z_e = window_merge(tape, h, batch, n, block.window, d)?;
    let residual = tape.dropout(z_p, dropout, train, rng)?;
    let z_k = tape.add(z_e, residual)?;
    Ok(BlockOutput { z_e, z_k })
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// Pre-residual output of the last block (fed to the alignment loss).
    pub z_e: Var,
    /// Output of the last block (fed to the task heads).
    pub z_k: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn encoder_forward(
    tape: &mut Tape,
    bound: &Bound,
    blocks: &[DclBlock],
    z_p: Var,
    batch: usize,
    n: usize,
    dropout: f64,
    train: bool,
    rng: &mut Rng,
) -> Result<EncoderOutput> {
    if blocks.windows(2).any(|w| w[0].window > w[1].window) {
        return Err(Error::Contract("encoder blocks must have non-decreasing windows".into()));
    }
    let mut z = z_p;
    let mut z_e = z_p;
    for block in blocks {
        let out = block_forward(tape, bound, block, z, batch, n, dropout, train, rng)?;
        z = out.z_k;
        z_e = out.z_e;
    }
    Ok(EncoderOutput { z_e, z_k: z })
}
