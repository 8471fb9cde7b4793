//! Learnable state shared by pretraining and fine-tuning.

use crate::autodiff::{Tape, Var};
use crate::data::patch_count;
use crate::dcl::{encoder_forward, init_affine, DclBlock, DclConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Scale of the uniform init of the positional encoding and mask token.
pub const EMBED_INIT: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub alpha_init: f64,
    pub dcl: DclConfig,
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        patch_count(self.seq_len, self.patch_len, self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.patch_len > self.seq_len {
            return Err(Error::config("patch_len", format!("must be in 1..={}", self.seq_len)));
        }
        if self.stride == 0 || self.stride > self.patch_len {
            return Err(Error::config("stride", format!("must be in 1..={}", self.patch_len)));
        }
        if !self.alpha_init.is_finite() {
            return Err(Error::config("alpha_init", "must be finite"));
        }
        self.dcl.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Forecast { weight: ParamId, bias: ParamId, horizon: usize },
    Classify { weight: ParamId, bias: ParamId, classes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecopModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub alpha: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub pos: ParamId,
    pub mask_token: ParamId,
    pub blocks: Vec<DclBlock>,
    pub recon_w: ParamId,
    pub recon_b: ParamId,
    pub head: Option<Head>,
}

impl DecopModel {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (p, d, n) = (cfg.patch_len, cfg.dcl.d_model, cfg.n_patches());
        let mut store = ParamStore::new();
        let alpha = store.insert("ipn.alpha", Tensor::scalar(cfg.alpha_init))?;
        let (proj_w, proj_b) = init_affine(&mut store, "proj", p, d, rng)?;
        let pos = store.insert("pos", Tensor::uniform(&[n, d], EMBED_INIT, rng))?;
        let mask_token = store.insert("mask_token", Tensor::uniform(&[d], EMBED_INIT, rng))?;
        let blocks = cfg
            .dcl
            .windows
            .iter()
            .enumerate()
            .map(|(i, &w)| DclBlock::init(&mut store, i, w, &cfg.dcl, rng))
            .collect::<Result<Vec<_>>>()?;
        let (recon_w, recon_b) = init_affine(&mut store, "recon", d, p, rng)?;
        Ok(DecopModel {
            cfg,
            store,
            alpha,
            proj_w,
            proj_b,
            pos,
            mask_token,
            blocks,
            recon_w,
            recon_b,
            head: None,
        })
    }

    /// Rebuilds a model around an existing parameter store, checking that
    /// every expected parameter is present with the expected shape.
    pub fn from_store(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let (p, d, n) = (cfg.patch_len, cfg.dcl.d_model, cfg.n_patches());
        let find = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store.id(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let got = store.get(id).value.shape();
            if got != shape {
                return Err(Error::Incompatible(format!("parameter `{name}` has shape {got:?}, expected {shape:?}")));
            }
            Ok(id)
        };
        let alpha = find("ipn.alpha", &[1])?;
        let proj_w = find("proj.weight", &[p, d])?;
        let proj_b = find("proj.bias", &[d])?;
        let pos = find("pos", &[n, d])?;
        let mask_token = find("mask_token", &[d])?;
        let recon_w = find("recon.weight", &[d, p])?;
        let recon_b = find("recon.bias", &[p])?;
        let mut blocks = Vec::new();
        for (i, &w) in cfg.dcl.windows.iter().enumerate() {
            let block = DclBlock::find(&store, i, w, cfg.dcl.learner)?;
            let wd = w * d;
            if store.get(block.w1).value.shape()[0] != wd {
                return Err(Error::Incompatible(format!("block {i} does not match window {w}")));
            }
            blocks.push(block);
        }
        let head = if let (Some(w), Some(b)) = (store.id("head.forecast.weight"), store.id("head.forecast.bias")) {
            Some(Head::Forecast {
                weight: w,
                bias: b,
                horizon: store.get(b).value.numel(),
            })
        } else if let (Some(w), Some(b)) = (store.id("head.classify.weight"), store.id("head.classify.bias")) {
            Some(Head::Classify {
                weight: w,
                bias: b,
                classes: store.get(b).value.numel(),
            })
        } else {
            None
        };
        Ok(DecopModel {
            cfg,
            store,
            alpha,
            proj_w,
            proj_b,
            pos,
            mask_token,
            blocks,
            recon_w,
            recon_b,
            head,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.cfg.n_patches()
    }

    pub fn alpha_value(&self) -> f64 {
        self.store.get(self.alpha).value.item()
    }

    /// Affine map from the flattened `[N * D]` representation to `horizon` points.
    pub fn add_forecast_head(&mut self, horizon: usize, rng: &mut Rng) -> Result<Head> {
        if horizon == 0 {
            return Err(Error::config("pred_len", "must be positive for forecasting"));
        }
        let fan_in = self.n_patches() * self.cfg.dcl.d_model;
        let (weight, bias) = init_affine(&mut self.store, "head.forecast", fan_in, horizon, rng)?;
        let head = Head::Forecast { weight, bias, horizon };
        self.head = Some(head);
        Ok(head)
    }

    /// Affine map from the patch-averaged `[D]` representation to class scores.
    pub fn add_classify_head(&mut self, classes: usize, rng: &mut Rng) -> Result<Head> {
        if classes < 2 {
            return Err(Error::config("num_classes", "need at least two classes"));
        }
        let (weight, bias) = init_affine(&mut self.store, "head.classify", self.cfg.dcl.d_model, classes, rng)?;
        let head = Head::Classify { weight, bias, classes };
        self.head = Some(head);
        Ok(head)
    }

    /// Parameters updated by pretraining (everything except task heads).
    pub fn pretrain_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.alpha, self.proj_w, self.proj_b, self.pos, self.mask_token];
        ids.extend(self.blocks.iter().flat_map(DclBlock::param_ids));
        ids.extend([self.recon_w, self.recon_b]);
        ids
    }

    /// Parameters of the encoder path used at fine-tuning time.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.alpha, self.proj_w, self.proj_b, self.pos];
        ids.extend(self.blocks.iter().flat_map(DclBlock::param_ids));
        ids
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        match self.head {
            Some(Head::Forecast { weight, bias, .. }) | Some(Head::Classify { weight, bias, .. }) => vec![weight, bias],
            None => Vec::new(),
        }
    }

    /// Patch projection plus positional encoding. Rows flagged in `mask`
    /// are replaced by the mask token before the positional term is added.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, patches: Var, batch: usize, mask: Option<&[bool]>) -> Result<Var> {
        let n = self.n_patches();
        if tape.shape(patches) != [batch * n, self.cfg.patch_len] {
            return Err(Error::Contract(format!(
                "patches of shape {:?} do not match {batch} instances of {n} patches of length {}; re-patch the input or re-initialize the model",
                tape.shape(patches),
                self.cfg.patch_len
            )));
        }
        let mut z = tape.matmul(patches, bound.var(self.proj_w))?;
        z = tape.add_row(z, bound.var(self.proj_b))?;
        if let Some(mask) = mask {
            z = tape.mask_rows(z, bound.var(self.mask_token), mask)?;
        }
        tape.add_tiled(z, bound.var(self.pos))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        patches: Var,
        batch: usize,
        mask: Option<&[bool]>,
        train: bool,
        rng: &mut Rng,
    ) -> Result<EncoderOutput> {
        let z_p = self.embed(tape, bound, patches, batch, mask)?;
        encoder_forward(
            tape,
            bound,
            &self.blocks,
            z_p,
            batch,
            self.n_patches(),
            self.cfg.dcl.dropout,
            train,
            rng,
        )
    }

    /// `[rows, D] -> [rows, P]` patch reconstruction.
    pub fn reconstruct(&self, tape: &mut Tape, bound: &Bound, z_k: Var) -> Result<Var> {
        let x = tape.matmul(z_k, bound.var(self.recon_w))?;
        tape.add_row(x, bound.var(self.recon_b))
    }
}
