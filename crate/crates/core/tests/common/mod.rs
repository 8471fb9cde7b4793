//! Helpers shared by the integration tests.
#![allow(dead_code)]

use decop::autodiff::{Tape, Var};
use decop::params::{Bound, ParamStore};
use decop::rng::Rng;
use decop::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Below this analytic magnitude the comparison is absolute.
pub const FD_SMALL: f64 = 1e-4;
pub const FD_ABS_TOL: f64 = 1e-7;

#[derive(Debug, Default, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    pub failures: usize,
    pub worst_rel: f64,
}

impl FdReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        let diff = (analytic - numeric).abs();
        let ok = if analytic.abs() < FD_SMALL {
            diff < FD_ABS_TOL
        } else {
            let rel = diff / analytic.abs().max(numeric.abs());
            self.worst_rel = self.worst_rel.max(rel);
            rel < FD_REL_TOL
        };
        if !ok {
            self.failures += 1;
        }
    }

    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.failures += other.failures;
        self.worst_rel = self.worst_rel.max(other.worst_rel);
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures == 0
    }
}

/// Central differences of a scalar function of several tensors against the
/// tape's gradients. `f` gets a fresh tape and one leaf per input and must
/// be deterministic (reseed any randomness inside).
pub fn check_fn(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> FdReport {
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).expect("scalar loss");
    let mut report = FdReport::default();
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            report.record(analytic.data()[j], (up - down) / (2.0 * FD_STEP));
        }
    }
    report
}

/// Same check over every value of a parameter store; `f` sees the store's
/// parameters bound to the tape.
pub fn check_store(store: &ParamStore, f: impl Fn(&mut Tape, &Bound) -> Var) -> FdReport {
    let eval = |s: &ParamStore| {
        let mut tape = Tape::new();
        let bound = s.bind_frozen(&mut tape);
        let out = f(&mut tape, &bound);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = f(&mut tape, &bound);
    let grads = tape.backward(loss).expect("scalar loss");
    let mut report = FdReport::default();
    let mut work = store.clone();
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in &names {
        let id = store.id(name).unwrap();
        let numel = store.get(id).value.numel();
        let analytic = grads
            .get(bound.var(id))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).value.shape()));
        for j in 0..numel {
            let orig = work.get(id).value.data()[j];
            work.get_mut(id).value.data_mut()[j] = orig + FD_STEP;
            let up = eval(&work);
            work.get_mut(id).value.data_mut()[j] = orig - FD_STEP;
            let down = eval(&work);
            work.get_mut(id).value.data_mut()[j] = orig;
            report.record(analytic.data()[j], (up - down) / (2.0 * FD_STEP));
        }
    }
    report
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Reduces `v` to a scalar through a fixed random weighting so every output
/// element carries a distinct gradient.
pub fn probe(tape: &mut Tape, v: Var) -> Var {
    let shape = tape.shape(v).to_vec();
    let w = random_tensor(&shape, &mut Rng::new(shape.iter().product::<usize>() as u64 + 17));
    let w = tape.constant(w);
    tape.dot(v, w).unwrap()
}

/// Finite-difference reports for every differentiable primitive.
pub fn primitive_reports() -> Vec<(&'static str, FdReport)> {
    let mut rng = Rng::new(42);
    let mut r = |s: &[usize]| random_tensor(s, &mut rng);
    let (a23, b34, c23, row3, tile23) = (r(&[2, 3]), r(&[3, 4]), r(&[2, 3]), r(&[3]), r(&[2, 3]));
    let (x234, x43, x6) = (r(&[2, 3, 4]), r(&[4, 3]), r(&[6]));
    let logits = r(&[4, 3]);
    let tok = r(&[3]);
    let scalar = Tensor::scalar(0.37);
    let konst = r(&[2, 3]);
    let mut out = Vec::new();
    out.push(("matmul", check_fn(&[a23.clone(), b34.clone()], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        probe(t, y)
    })));
    out.push(("add", check_fn(&[a23.clone(), c23.clone()], |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        probe(t, y)
    })));
    out.push(("sub", check_fn(&[a23.clone(), c23.clone()], |t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        probe(t, y)
    })));
    out.push(("mul", check_fn(&[a23.clone(), c23.clone()], |t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        probe(t, y)
    })));
    out.push(("mul self", check_fn(std::slice::from_ref(&a23), |t, v| {
        let y = t.mul(v[0], v[0]).unwrap();
        probe(t, y)
    })));
    out.push(("add_row", check_fn(&[a23.clone(), row3.clone()], |t, v| {
        let y = t.add_row(v[0], v[1]).unwrap();
        probe(t, y)
    })));
    out.push(("add_tiled", check_fn(&[x43.clone().reshaped(&[4, 3]).unwrap(), tile23.clone()], |t, v| {
        let y = t.add_tiled(v[0], v[1]).unwrap();
        probe(t, y)
    })));
    out.push(("mul_const", check_fn(std::slice::from_ref(&a23), |t, v| {
        let y = t.mul_const(v[0], &konst).unwrap();
        probe(t, y)
    })));
    out.push(("row_affine", check_fn(std::slice::from_ref(&a23), |t, v| {
        let y = t.row_affine(v[0], &[1.5, -0.5], &[2.0, 3.0]).unwrap();
        probe(t, y)
    })));
    out.push(("scale", check_fn(std::slice::from_ref(&a23), |t, v| {
        let y = t.scale(v[0], -2.5);
        probe(t, y)
    })));
    out.push(("add_scalar", check_fn(std::slice::from_ref(&a23), |t, v| {
        let y = t.add_scalar(v[0], 4.0);
        let y = t.mul(y, y).unwrap();
        probe(t, y)
    })));
    out.push(("sum", check_fn(std::slice::from_ref(&x234), |t, v| {
        let y = t.mul(v[0], v[0]).unwrap();
        t.sum(y)
    })));
    for axis in 0..3 {
        out.push(("mean_axis", check_fn(std::slice::from_ref(&x234), move |t, v| {
            let y = t.mean_axis(v[0], axis).unwrap();
            probe(t, y)
        })));
    }
    out.push(("reshape", check_fn(std::slice::from_ref(&x234), |t, v| {
        let y = t.reshape(v[0], &[6, 4]).unwrap();
        probe(t, y)
    })));
    out.push(("pad_axis", check_fn(std::slice::from_ref(&x234), |t, v| {
        let y = t.pad_axis(v[0], 1, 2).unwrap();
        let y = t.add_scalar(y, 1.0);
        probe(t, y)
    })));
    out.push(("narrow", check_fn(std::slice::from_ref(&x234), |t, v| {
        let y = t.narrow(v[0], 2, 3).unwrap();
        probe(t, y)
    })));
    out.push(("permute", check_fn(std::slice::from_ref(&x234), |t, v| {
        let y = t.permute(v[0], &[2, 0, 1]).unwrap();
        probe(t, y)
    })));
    out.push(("dropout", check_fn(std::slice::from_ref(&x234), |t, v| {
        let y = t.dropout(v[0], 0.3, true, &mut Rng::new(5)).unwrap();
        probe(t, y)
    })));
    out.push(("gelu", check_fn(std::slice::from_ref(&x234), |t, v| {
        let y = t.gelu(v[0]);
        probe(t, y)
    })));
    out.push(("mse", check_fn(&[a23.clone(), c23.clone()], |t, v| t.mse(v[0], v[1]).unwrap())));
    out.push(("dot", check_fn(&[x6.clone(), x6.clone().reshaped(&[6]).unwrap()], |t, v| {
        let sq = t.mul(v[1], v[1]).unwrap();
        t.dot(v[0], sq).unwrap()
    })));
    out.push(("mask_rows", check_fn(&[x43.clone(), tok.clone()], |t, v| {
        let y = t.mask_rows(v[0], v[1], &[true, false, true, false]).unwrap();
        probe(t, y)
    })));
    out.push(("l2_normalize_rows", check_fn(std::slice::from_ref(&x43), |t, v| {
        let y = t.l2_normalize_rows(v[0]).unwrap();
        probe(t, y)
    })));
    out.push(("scalar_map", check_fn(std::slice::from_ref(&scalar), |t, v| {
        // y_i = sin(c_i * a), with its derivative supplied explicitly.
        let a = t.value(v[0]).item();
        let c = [0.5, -1.0, 2.0, 3.0];
        let vals = Tensor::new(&[4], c.iter().map(|c| (c * a).sin()).collect()).unwrap();
        let jac = c.iter().map(|c| c * (c * a).cos()).collect();
        let y = t.scalar_map(v[0], vals, jac).unwrap();
        probe(t, y)
    })));
    out.push(("softmax_cross_entropy", check_fn(std::slice::from_ref(&logits), |t, v| {
        t.softmax_cross_entropy(v[0], &[0, 2, 1, 2]).unwrap()
    })));
    out.push(("two-layer mlp mse", {
        let mut rng = Rng::new(3);
        let x = random_tensor(&[4, 8], &mut rng);
        let target = random_tensor(&[4, 2], &mut rng);
        let ws = [
            random_tensor(&[8, 6], &mut rng),
            random_tensor(&[6], &mut rng),
            random_tensor(&[6, 2], &mut rng),
            random_tensor(&[2], &mut rng),
        ];
        check_fn(&ws, |t, v| {
            let xi = t.constant(x.clone());
            let mut h = t.matmul(xi, v[0]).unwrap();
            h = t.add_row(h, v[1]).unwrap();
            h = t.gelu(h);
            h = t.matmul(h, v[2]).unwrap();
            h = t.add_row(h, v[3]).unwrap();
            let y = t.constant(target.clone());
            t.mse(h, y).unwrap()
        })
    }));
    out
}

pub mod tiny {
    use decop::dcl::{DclConfig, LearnerKind};
    use decop::icm::FilterConfig;
    use decop::model::{DecopModel, ModelConfig};
    use decop::pretrain::{batch_loss, prepare_batch, LossVars, PreparedBatch};
    use decop::rng::Rng;

    use super::*;

    pub fn config(learner: LearnerKind) -> ModelConfig {
        ModelConfig {
            seq_len: 24,
            patch_len: 4,
            stride: 4,
            alpha_init: 0.01,
            dcl: DclConfig {
                d_model: 4,
                windows: vec![2, 3],
                learner,
                dropout: 0.2,
                mlp_ratio: 1,
            },
        }
    }

    /// A small model and a prepared batch of 2 positions x 2 channels.
    pub fn setup(learner: LearnerKind, seed: u64) -> (DecopModel, PreparedBatch) {
        let mut rng = Rng::new(seed);
        let model = DecopModel::new(config(learner), &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                (0..24)
                    .map(|t| (t as f64 * 0.4 + i as f64).sin() * (1.0 + i as f64) + 0.3 * rng.normal() + i as f64)
                    .collect()
            })
            .collect();
        let batch = prepare_batch(&model, xs, 2, 2, &FilterConfig::new(0.3).unwrap(), 0.4, &mut rng).unwrap();
        (model, batch)
    }

    pub fn losses(tape: &mut Tape, model: &DecopModel, bound: &Bound, batch: &PreparedBatch, gamma: f64) -> LossVars {
        batch_loss(tape, model, bound, batch, gamma, true, &mut Rng::new(9)).unwrap()
    }

    /// Finite-difference check of the full pretraining loss with respect to
    /// every parameter, alpha included.
    pub fn composed_report(learner: LearnerKind, gamma: f64) -> FdReport {
        let (model, batch) = setup(learner, 1);
        check_store(&model.store, |tape, bound| losses(tape, &model, bound, &batch, gamma).total)
    }

    /// Same for the alignment loss alone.
    pub fn contrastive_report(learner: LearnerKind) -> FdReport {
        let (model, batch) = setup(learner, 2);
        check_store(&model.store, |tape, bound| losses(tape, &model, bound, &batch, 0.1).cl)
    }
}

pub mod locality {
    use decop::autodiff::Tape;
    use decop::dcl::{encoder_forward, DclBlock, DclConfig, LearnerKind};
    use decop::params::ParamStore;
    use decop::rng::Rng;
    use decop::tensor::Tensor;

    /// Below this a finite-difference response counts as no dependence.
    pub const OFF_WINDOW_TOL: f64 = 1e-10;

    /// `s[i][j]`: largest change of encoder output patch `i` per unit
    /// perturbation of input patch `j` (eval mode, one instance).
    pub fn sensitivity(windows: &[usize], learner: LearnerKind, n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let cfg = DclConfig {
            d_model: d,
            windows: windows.to_vec(),
            learner,
            dropout: 0.1,
            mlp_ratio: 1,
        };
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let blocks: Vec<DclBlock> = windows
            .iter()
            .enumerate()
            .map(|(i, &w)| DclBlock::init(&mut store, i, w, &cfg, &mut rng).unwrap())
            .collect();
        let input = Tensor::uniform(&[n, d], 1.0, &mut rng);
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let bound = store.bind_frozen(&mut tape);
            let z = tape.constant(x.clone());
            let out = encoder_forward(&mut tape, &bound, &blocks, z, 1, n, 0.1, false, &mut Rng::new(0)).unwrap();
            tape.value(out.z_k).data().to_vec()
        };
        let base = run(&input);
        let h = 1e-3;
        let mut s = vec![vec![0.0f64; n]; n];
        for j in 0..n {
            for k in 0..d {
                let mut x = input.clone();
                x.data_mut()[j * d + k] += h;
                let moved = run(&x);
                for (i, row) in s.iter_mut().enumerate() {
                    let delta = (0..d).map(|c| (moved[i * d + c] - base[i * d + c]).abs()).fold(0.0, f64::max) / h;
                    row[j] = row[j].max(delta);
                }
            }
        }
        s
    }

    /// Input patches output patch `i` responds to.
    pub fn reach(s: &[Vec<f64>], i: usize) -> Vec<usize> {
        (0..s.len()).filter(|&j| s[i][j] > OFF_WINDOW_TOL).collect()
    }
}

/// Direct evaluation of `X[k] = sum_t x[t] exp(-2 pi i k t / L)` for all `L` bins.
pub fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
    let l = x.len();
    (0..l)
        .map(|k| {
            x.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, &v)| {
                let ang = -std::f64::consts::TAU * ((k * t) % l) as f64 / l as f64;
                (re + v * ang.cos(), im + v * ang.sin())
            })
        })
        .collect()
}
