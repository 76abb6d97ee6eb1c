use std::fmt::Write as _;

use crate::adapter::FusedDenoiser;
use crate::backbone::TaskKind;
use crate::diffusion::{sample, Denoiser, NoiseSchedule, SeededNoise};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, mix_seed};
use crate::geometry::GeometricTrajectory;
use crate::numerics::Tensor;

use super::checkpoint::Checkpoint;
use super::metrics::{ade, fde, marginal_score};
use super::task::{finetune_examples, pretrain_examples, Example};
use super::train::schedule;
use super::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Samples `K` per record.
    pub samples: usize,
    /// Index of the first sample, so that runs can be split.
    pub first_sample: usize,
    /// Records used; 0 means all.
    pub records: usize,
    pub bins: usize,
    pub seed: u64,
}

impl EvalOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            samples: cfg.samples,
            first_sample: 0,
            records: cfg.eval_records,
            bins: cfg.bins,
            seed: cfg.seed,
        }
    }
}

/// Metric lines in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub entries: Vec<(String, f64)>,
}

impl Report {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.entries.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|e| e.1)
    }

    /// One `name<TAB>value` line per metric.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (n, v) in &self.entries {
            let _ = writeln!(out, "{n}\t{v:?}");
        }
        out
    }
}

/// Seed of sample `k` of record `r`.
pub fn sample_seed(seed: u64, record: usize, k: usize) -> u64 {
    mix_seed(mix_seed(seed, record as u64), k as u64)
}

/// `K` samples per example, sample `k` of record `r` seeded by
/// [`sample_seed`].
pub fn draw_samples<D: Denoiser + ?Sized>(
    model: &D,
    examples: &[Example],
    sched: &NoiseSchedule,
    opts: &EvalOptions,
) -> Result<Vec<Vec<Tensor>>> {
    if examples.is_empty() {
        return Err(Error::Invalid("no records to evaluate".into()));
    }
    if opts.samples == 0 {
        return Err(Error::Invalid("need at least one sample per record".into()));
    }
    map_indexed(examples, |r, ex| {
        (opts.first_sample..opts.first_sample + opts.samples)
            .map(|k| {
                let mut noise = SeededNoise::new(sample_seed(opts.seed, r, k));
                sample(model, &ex.input(), sched, &mut noise, &mut |_, _| {})
            })
            .collect()
    })
    .into_iter()
    .collect()
}

/// Mean over records of the per-record ADE and FDE.
pub fn forecast_errors(samples: &[Vec<Tensor>], examples: &[Example]) -> Result<(f64, f64)> {
    let (mut a, mut f) = (0.0, 0.0);
    for (s, ex) in samples.iter().zip(examples) {
        a += ade(s, &ex.target)?;
        f += fde(s, &ex.target)?;
    }
    let n = examples.len() as f64;
    Ok((a / n, f / n))
}

/// Marginal score of all samples against all targets.
pub fn pooled_marginal(samples: &[Vec<Tensor>], examples: &[Example], bins: usize) -> Result<f64> {
    let all: Vec<Tensor> = samples.iter().flatten().cloned().collect();
    let refs: Vec<Tensor> = examples.iter().map(|e| e.target.clone()).collect();
    marginal_score(&all, &refs, bins)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskMetric {
    Forecast,
    Marginal,
}

/// Samples `model` on `examples` and appends `prefix.ade`/`prefix.fde` or
/// `prefix.marginal`.
pub fn task_metrics<D: Denoiser + ?Sized>(
    report: &mut Report,
    prefix: &str,
    metric: TaskMetric,
    model: &D,
    examples: &[Example],
    sched: &NoiseSchedule,
    opts: &EvalOptions,
) -> Result<()> {
    let samples = draw_samples(model, examples, sched, opts)?;
    match metric {
        TaskMetric::Forecast => {
            let (a, f) = forecast_errors(&samples, examples)?;
            report.push(format!("{prefix}.ade"), a);
            report.push(format!("{prefix}.fde"), f);
        }
        TaskMetric::Marginal => report.push(
            format!("{prefix}.marginal"),
            pooled_marginal(&samples, examples, opts.bins)?,
        ),
    }
    Ok(())
}

fn take(records: &[GeometricTrajectory], limit: usize) -> &[GeometricTrajectory] {
    if limit == 0 {
        records
    } else {
        &records[..limit.min(records.len())]
    }
}

/// Base on the pretraining task; with an adapter also the zero-shot base
/// and the fused model on the fine-tuning task, and the fused model with
/// its adapter detached on the pretraining task.
pub fn evaluate(
    base: &Checkpoint,
    adapter: Option<&Checkpoint>,
    test: &[GeometricTrajectory],
    opts: &EvalOptions,
) -> Result<Report> {
    let test = take(test, opts.records);
    if test.is_empty() {
        return Err(Error::Invalid("empty test set".into()));
    }
    let model = base.model()?;
    let pre_cfg = &base.config;
    let sched = schedule(pre_cfg)?;
    let pre = pretrain_examples(test, pre_cfg)?;
    let pre_metric = match pre_cfg.task {
        TaskKind::Uncond => TaskMetric::Marginal,
        TaskKind::Cond => TaskMetric::Forecast,
    };
    let mut report = Report::default();
    task_metrics(&mut report, "base.pretrain", pre_metric, &model, &pre, &sched, opts)?;
    if let Some(ad) = adapter {
        let (model, stack) = ad.stack(base)?;
        let ft = finetune_examples(test, &ad.config)?;
        task_metrics(
            &mut report,
            "base.finetune",
            TaskMetric::Forecast,
            &model,
            &ft,
            &sched,
            opts,
        )?;
        let fused = FusedDenoiser::new(&model, &stack);
        task_metrics(
            &mut report,
            "fused.finetune",
            TaskMetric::Forecast,
            &fused,
            &ft,
            &sched,
            opts,
        )?;
        let detached = FusedDenoiser::detached(&model);
        task_metrics(
            &mut report,
            "detached.pretrain",
            pre_metric,
            &detached,
            &pre,
            &sched,
            opts,
        )?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ZeroDenoiser;
    use crate::simdata::{simulate_charged, SimParams};

    #[test]
    fn k_samples_average_single_runs() {
        let cfg = RunConfig::parse("diffusion_steps = 5").unwrap();
        let recs: Vec<_> = (0..2)
            .map(|s| simulate_charged(3, cfg.record_frames(), &SimParams::default(), s).unwrap())
            .collect();
        let ex = pretrain_examples(&recs, &cfg).unwrap();
        let sched = schedule(&cfg).unwrap();
        let stub = ZeroDenoiser {
            conditional: false,
            steps: 5,
        };
        let opts = EvalOptions {
            samples: 5,
            ..EvalOptions::from_config(&cfg)
        };
        let all = forecast_errors(&draw_samples(&stub, &ex, &sched, &opts).unwrap(), &ex).unwrap();
        let mut sum = (0.0, 0.0);
        for k in 0..5 {
            let one = EvalOptions {
                samples: 1,
                first_sample: k,
                ..opts
            };
            let r = forecast_errors(&draw_samples(&stub, &ex, &sched, &one).unwrap(), &ex).unwrap();
            sum = (sum.0 + r.0 / 5.0, sum.1 + r.1 / 5.0);
        }
        assert!((all.0 - sum.0).abs() <= 1e-12 && (all.1 - sum.1).abs() <= 1e-12);
        assert!(draw_samples(&stub, &[], &sched, &opts).is_err());
    }

    #[test]
    fn report_lines() {
        let mut r = Report::default();
        r.push("a.ade", 0.5);
        r.push("a.fde", 2.0);
        assert_eq!(r.render(), "a.ade\t0.5\na.fde\t2.0\n");
        assert_eq!(r.get("a.fde"), Some(2.0));
    }
}
