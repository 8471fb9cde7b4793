//! Analytic parameter and compute counts.
//!
//! Compute is counted as multiply-accumulates of the matrix products in one
//! forward pass, and FLOPs as `2 * MACs`. Elementwise work (normalization,
//! bias adds, activations, residuals) is not counted. Per-sample figures
//! multiply the per-instance count by the number of channels, since every
//! channel is encoded as its own instance.

use crate::dcl::{window_count, LearnerKind};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Forecast { horizon: usize },
    Classify { classes: usize },
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Forecast { .. } => "finetune-forecast",
            Stage::Classify { .. } => "finetune-classify",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageCount {
    pub stage: Stage,
    pub components: Vec<Component>,
    /// Values stored in a checkpoint written after this stage.
    pub stored_params: u64,
}

impl StageCount {
    /// Parameters on the stage's forward path.
    pub fn params(&self) -> u64 {
        self.components.iter().map(|c| c.params).sum()
    }

    pub fn macs(&self) -> u64 {
        self.components.iter().map(|c| c.macs).sum()
    }

    pub fn flops_per_instance(&self) -> u64 {
        2 * self.macs()
    }

    pub fn flops_per_sample(&self, channels: usize) -> u64 {
        self.flops_per_instance() * channels as u64
    }
}

fn affine(name: &str, rows: usize, fan_in: usize, fan_out: usize) -> Component {
    Component {
        name: name.into(),
        params: (fan_in * fan_out + fan_out) as u64,
        macs: (rows * fan_in * fan_out) as u64,
    }
}

/// Encoder components shared by every stage: IPN, projection, positional
/// encoding and the windowed blocks.
fn encoder(cfg: &ModelConfig) -> Vec<Component> {
    let (n, p, d) = (cfg.n_patches(), cfg.patch_len, cfg.dcl.d_model);
    let mut parts = vec![
        Component {
            name: "ipn".into(),
            params: 1,
            macs: 0,
        },
        affine("projection", n, p, d),
        Component {
            name: "positional".into(),
            params: (n * d) as u64,
            macs: 0,
        },
    ];
    for (i, &w) in cfg.dcl.windows.iter().enumerate() {
        let wd = w * d;
        let rows = window_count(n, w);
        let c = match cfg.dcl.learner {
            LearnerKind::Linear => affine("", rows, wd, wd),
            LearnerKind::Mlp => {
                let h = cfg.dcl.mlp_ratio * wd;
                let a = affine("", rows, wd, h);
                let b = affine("", rows, h, wd);
                Component {
                    name: String::new(),
                    params: a.params + b.params,
                    macs: a.macs + b.macs,
                }
            }
        };
        parts.push(Component {
            name: format!("block{i} (W={w})"),
            ..c
        });
    }
    parts
}

/// Counts for one stage under `cfg`.
pub fn count(cfg: &ModelConfig, stage: Stage) -> StageCount {
    let (n, p, d) = (cfg.n_patches(), cfg.patch_len, cfg.dcl.d_model);
    let mask = Component {
        name: "mask_token".into(),
        params: d as u64,
        macs: 0,
    };
    let recon = affine("reconstruction", n, d, p);
    let pretrain_stored: u64 = encoder(cfg).iter().map(|c| c.params).sum::<u64>() + mask.params + recon.params;
    let mut components = encoder(cfg);
    let stored_params = match stage {
        Stage::Pretrain => {
            components.push(mask);
            components.push(recon);
            pretrain_stored
        }
        Stage::Forecast { horizon } => {
            let head = affine("forecast head", 1, n * d, horizon);
            let stored = pretrain_stored + head.params;
            components.push(head);
            stored
        }
        Stage::Classify { classes } => {
            let head = affine("classify head", 1, d, classes);
            let stored = pretrain_stored + head.params;
            components.push(head);
            stored
        }
    };
    StageCount {
        stage,
        components,
        stored_params,
    }
}

/// Window configurations and parameter counts reported for the linear
/// learner at look-back 512 with patch and stride 12.
pub const REFERENCE_WINDOW_PARAMS: [(usize, usize, f64); 5] = [
    (1, 1, 0.165e6),
    (1, 3, 0.446e6),
    (2, 5, 0.999e6),
    (4, 8, 2.3e6),
    (42, 42, 88.8e6),
];

/// Largest relative deviation of the pretrain-stage parameter counts from
/// [`REFERENCE_WINDOW_PARAMS`] at width `d_model`.
pub fn reference_error(base: &ModelConfig, d_model: usize) -> f64 {
    REFERENCE_WINDOW_PARAMS
        .iter()
        .map(|&(a, b, target)| {
            let mut cfg = base.clone();
            cfg.dcl.d_model = d_model;
            cfg.dcl.windows = vec![a, b];
            let got = count(&cfg, Stage::Pretrain).params() as f64;
            (got - target).abs() / target
        })
        .fold(0.0, f64::max)
}

/// Width in `range` with the smallest [`reference_error`]; ties go to the
/// smaller width.
pub fn calibrate_d_model(base: &ModelConfig, range: std::ops::RangeInclusive<usize>) -> (usize, f64) {
    range
        .map(|d| (d, reference_error(base, d)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}
