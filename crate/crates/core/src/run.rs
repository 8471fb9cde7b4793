//! End-to-end commands: each reads a [`RunConfig`], does its work and writes
//! its artifacts under `output_dir`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{RunConfig, Task};
use crate::data::{patchify, unpatchify_values, Dataset, Split};
use crate::error::{Error, Result};
use crate::finetune::{evaluate, last_value_baseline, metrics_csv, FinetuneReport, Finetuner, ForecastMetrics, Metrics};
use crate::flops::{self, Stage};
use crate::icm::{positive_views, FilterConfig};
use crate::io::write_atomic;
use crate::ipn::{compute_stats, normalize};
use crate::model::{DecopModel, Head};
use crate::pretrain::{write_metrics_csv, write_timing_csv, EpochMetrics, Pretrainer};
use crate::rng::Rng;

const HEAD_STREAM: u64 = 0x4845_4144;

pub const PRETRAIN_BEST: &str = "pretrain_best.ckpt";
pub const PRETRAIN_FINAL: &str = "pretrain_final.ckpt";
pub const PRETRAIN_METRICS: &str = "pretrain_metrics.csv";
pub const PRETRAIN_TIMING: &str = "pretrain_timing.csv";
pub const FINETUNE_CKPT: &str = "finetune.ckpt";
pub const FINETUNE_METRICS: &str = "finetune_metrics.csv";
pub const REPORT: &str = "report.txt";
pub const EVAL_REPORT: &str = "eval_report.txt";
pub const CONFIG_ECHO: &str = "config.echo";

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

pub struct PretrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub model: DecopModel,
}

/// Pretrains from a seeded initialization and writes the best and final
/// checkpoints, the metrics and timing CSVs and the configuration echo.
pub fn pretrain(cfg: &RunConfig) -> Result<PretrainOutcome> {
    let data = cfg.load_dataset()?;
    write_atomic(&out(cfg, CONFIG_ECHO), cfg.echo().as_bytes())?;
    let model = DecopModel::new(cfg.model_config(), &mut Rng::new(cfg.seed))?;
    let mut trainer = Pretrainer::new(model, cfg.pretrain_config())?;
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let echo = cfg.echo();
    for _ in 0..cfg.epochs {
        let m = trainer.run_epoch(&data)?;
        info!(
            "pretrain epoch {} recon {:.6} cl {:.6} total {:.6} ({} batches, {:.1}s)",
            m.epoch, m.recon, m.cl, m.total, m.batches, m.seconds
        );
        if m.zero_norm > 0 || m.ipn_clamped > 0 {
            info!("  {} zero-norm representations, {} clamped patch variances", m.zero_norm, m.ipn_clamped);
        }
        if best.is_none_or(|(_, t)| m.total < t) {
            best = Some((m.epoch, m.total));
            checkpoint::save(&out(cfg, PRETRAIN_BEST), &echo, &trainer.model.store)?;
        }
        epochs.push(m);
        write_metrics_csv(&out(cfg, PRETRAIN_METRICS), &epochs)?;
        write_timing_csv(&out(cfg, PRETRAIN_TIMING), &epochs)?;
    }
    let model = trainer.into_model();
    checkpoint::save(&out(cfg, PRETRAIN_FINAL), &echo, &model.store)?;
    Ok(PretrainOutcome {
        epochs,
        best_epoch: best.map_or(0, |b| b.0),
        model,
    })
}

/// Restores a model from a checkpoint after checking structural agreement
/// with `cfg`.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<DecopModel> {
    let ck: Checkpoint = checkpoint::load(path)?;
    ck.check_compatible(cfg)?;
    DecopModel::from_store(cfg.model_config(), ck.store)
}

/// Makes sure the model carries the head `cfg` asks for.
fn ensure_head(model: &mut DecopModel, cfg: &RunConfig, data: &Dataset) -> Result<()> {
    let mut rng = Rng::new(cfg.seed).fork(HEAD_STREAM);
    match (cfg.task, model.head) {
        (Task::Forecast, None) => {
            model.add_forecast_head(cfg.pred_len, &mut rng)?;
        }
        (Task::Classify, None) => {
            let classes = data
                .num_classes()
                .ok_or_else(|| Error::config("label_column", "dataset has no labels"))?;
            model.add_classify_head(classes.max(2), &mut rng)?;
        }
        (Task::Forecast, Some(Head::Forecast { horizon, .. })) if horizon == cfg.pred_len => {}
        (Task::Classify, Some(Head::Classify { classes, .. })) if Some(classes) == data.num_classes().map(|c| c.max(2)) => {}
        (_, Some(head)) => {
            return Err(Error::Incompatible(format!(
                "checkpoint head {head:?} does not fit task {} (pred_len {})",
                cfg.task.as_str(),
                cfg.pred_len
            )))
        }
    }
    Ok(())
}

pub struct FinetuneOutcome {
    pub report: FinetuneReport,
    pub test: Metrics,
    pub baseline: Option<ForecastMetrics>,
    pub model: DecopModel,
}

/// Fine-tunes from `checkpoint` (or from a seeded random initialization),
/// evaluates the selected parameters on the test split and writes the
/// fine-tuned checkpoint, per-epoch metrics and a key-value report.
pub fn finetune(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<FinetuneOutcome> {
    let data = cfg.load_dataset()?;
    let mut model = match checkpoint {
        Some(path) => load_model(cfg, path)?,
        None => DecopModel::new(cfg.model_config(), &mut Rng::new(cfg.seed))?,
    };
    ensure_head(&mut model, cfg, &data)?;
    write_atomic(&out(cfg, CONFIG_ECHO), cfg.echo().as_bytes())?;
    let mut tuner = Finetuner::new(model, cfg.finetune_config())?;
    let report = tuner.fit(&data)?;
    let test = tuner.evaluate(&data, Split::Test)?;
    let baseline = match cfg.task {
        Task::Forecast => Some(last_value_baseline(&data, Split::Test, cfg.seq_len, cfg.pred_len)?),
        Task::Classify => None,
    };
    checkpoint::save(&out(cfg, FINETUNE_CKPT), &cfg.echo(), &tuner.model.store)?;
    write_atomic(&out(cfg, FINETUNE_METRICS), metrics_csv(&report).as_bytes())?;
    let mut text = summary(cfg, &test, baseline.as_ref());
    writeln!(text, "best_epoch = {}", report.best_epoch).unwrap();
    for (k, v) in report.best_val.pairs() {
        writeln!(text, "val_{k} = {v}").unwrap();
    }
    write_atomic(&out(cfg, REPORT), text.as_bytes())?;
    Ok(FinetuneOutcome {
        report,
        test,
        baseline,
        model: tuner.model,
    })
}

fn summary(cfg: &RunConfig, test: &Metrics, baseline: Option<&ForecastMetrics>) -> String {
    let mut text = String::new();
    writeln!(text, "dataset = {}", cfg.dataset_name).unwrap();
    writeln!(text, "task = {}", cfg.task.as_str()).unwrap();
    for (k, v) in test.pairs() {
        writeln!(text, "test_{k} = {v}").unwrap();
    }
    if let Some(b) = baseline {
        writeln!(text, "naive_test_mse = {}", b.mse).unwrap();
        writeln!(text, "naive_test_mae = {}", b.mae).unwrap();
    }
    text
}

/// Evaluates a fine-tuned checkpoint on the test split and writes a report.
pub fn eval(cfg: &RunConfig, checkpoint: &Path) -> Result<Metrics> {
    let data = cfg.load_dataset()?;
    let model = load_model(cfg, checkpoint)?;
    if model.head.is_none() {
        return Err(Error::Incompatible("checkpoint has no task head; fine-tune it first".into()));
    }
    let metrics = evaluate(
        &model,
        &data,
        Split::Test,
        cfg.batch_size,
        cfg.finetune_config().eval_positions,
    )?;
    let baseline = match cfg.task {
        Task::Forecast => Some(last_value_baseline(&data, Split::Test, cfg.seq_len, cfg.pred_len)?),
        Task::Classify => None,
    };
    write_atomic(&out(cfg, EVAL_REPORT), summary(cfg, &metrics, baseline.as_ref()).as_bytes())?;
    Ok(metrics)
}

/// Parameter and FLOPs report for the pretraining and fine-tuning stages.
/// The channel count is taken from the dataset.
pub fn flops_report(cfg: &RunConfig) -> Result<String> {
    let data = cfg.load_dataset()?;
    let mcfg = cfg.model_config();
    let finetune_stage = match cfg.task {
        Task::Forecast => Stage::Forecast { horizon: cfg.pred_len },
        Task::Classify => Stage::Classify {
            classes: data.num_classes().unwrap_or(2).max(2),
        },
    };
    let mut text = String::new();
    writeln!(
        text,
        "config: L={} P={} S={} N={} D={} windows={:?} learner={} channels={}",
        cfg.seq_len,
        cfg.patch_len,
        cfg.stride,
        mcfg.n_patches(),
        cfg.d_model,
        cfg.windows,
        cfg.learner,
        data.channels
    )
    .unwrap();
    for stage in [Stage::Pretrain, finetune_stage] {
        let c = flops::count(&mcfg, stage);
        writeln!(text, "[{}]", stage.name()).unwrap();
        for comp in &c.components {
            writeln!(text, "  {:<20} params {:>12}  macs {:>14}", comp.name, comp.params, comp.macs).unwrap();
        }
        writeln!(text, "  params = {}", c.params()).unwrap();
        writeln!(text, "  stored_params = {}", c.stored_params).unwrap();
        writeln!(text, "  flops_per_instance = {}", c.flops_per_instance()).unwrap();
        writeln!(text, "  flops_per_sample = {}", c.flops_per_sample(data.channels)).unwrap();
    }
    Ok(text)
}

/// Normalized anchor, denoised view and removed component of one channel of
/// the first training window, as `t,anchor,denoised,noise` rows. All
/// channels of the window form the batch that sets the salient bins.
pub fn filter_viz(cfg: &RunConfig, channel: usize) -> Result<(PathBuf, String)> {
    let data = cfg.load_dataset()?;
    if channel >= data.channels {
        return Err(Error::config(
            "channel",
            format!("{channel} is out of range for {} channels", data.channels),
        ));
    }
    let l = cfg.seq_len;
    let start = *data
        .positions(Split::Train, l, cfg.pred_len)
        .first()
        .ok_or_else(|| Error::Size(format!("no training window of length {l}")))?;
    let mut anchors = Vec::with_capacity(data.channels * l);
    for c in 0..data.channels {
        let x = data.slice(c, start, l);
        let ps = patchify(&x, cfg.patch_len, cfg.stride)?;
        let stats = compute_stats(&ps, &x, cfg.alpha_init);
        anchors.extend(unpatchify_values(&normalize(&ps, &stats).patches, cfg.patch_len, cfg.stride, l));
    }
    let denoised = positive_views(&anchors, 1, data.channels, l, &FilterConfig::new(cfg.beta)?)?;
    let mut csv = String::from("t,anchor,denoised,noise\n");
    let off = channel * l;
    for t in 0..l {
        let (a, d) = (anchors[off + t], denoised[off + t]);
        writeln!(csv, "{t},{a},{d},{}", a - d).unwrap();
    }
    let path = out(cfg, &format!("filter_viz_ch{channel}.csv"));
    write_atomic(&path, csv.as_bytes())?;
    Ok((path, csv))
}
