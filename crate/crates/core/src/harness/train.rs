use rand::Rng;

use crate::adapter::{finetune_step, AdapterStack, FusedDenoiser};
use crate::backbone::DenoiserModel;
use crate::diffusion::{batch_loss, build_schedule, Denoiser, NoiseSchedule, TrainItem};
use crate::error::{Error, Result};
use crate::exec::{mix_seed, seeded_rng};
use crate::geometry::GeometricTrajectory;
use crate::numerics::{adam_step, AdamConfig, OptimizerState};

use super::checkpoint::{adapter_config, params_sha256, Checkpoint};
use super::task::{finetune_examples, pretrain_examples, Example};
use super::RunConfig;

const VAL_STREAM: u64 = 0x7661_6c69_6461_7465;
const BATCH_STREAM: u64 = 0x6261_7463_6800_0000;
const NOISE_STREAM: u64 = 0x6e6f_6973_6500_0000;

pub fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    build_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end, cfg.beta_increasing)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// State after the last step.
    pub last: Checkpoint,
    /// State with the lowest validation loss.
    pub best: Checkpoint,
    /// `(step, validation loss)`, starting with step 0.
    pub val_history: Vec<(usize, f64)>,
    pub train_losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial_val_loss(&self) -> f64 {
        self.val_history[0].1
    }

    pub fn final_val_loss(&self) -> f64 {
        self.val_history.last().expect("step 0 is always validated").1
    }

    pub fn best_val_loss(&self) -> f64 {
        self.val_history.iter().map(|v| v.1).fold(f64::INFINITY, f64::min)
    }
}

/// Validation loss with draws fixed by the run seed.
pub fn validation_loss<D: Denoiser + ?Sized>(
    model: &D,
    examples: &[Example],
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let items: Vec<TrainItem> = examples.iter().map(|e| e.item()).collect();
    Ok(batch_loss(model, &items, sched, mix_seed(seed, VAL_STREAM), false)?.loss)
}

fn batch_of<'a>(examples: &'a [Example], cfg: &RunConfig, step: usize) -> Vec<TrainItem<'a>> {
    let mut rng = seeded_rng(mix_seed(mix_seed(cfg.seed, BATCH_STREAM), step as u64));
    (0..cfg.batch_size)
        .map(|_| examples[rng.random_range(0..examples.len())].item())
        .collect()
}

fn step_seed(cfg: &RunConfig, step: usize) -> u64 {
    mix_seed(mix_seed(cfg.seed, NOISE_STREAM), step as u64)
}

fn check_sets(train: &[Example], val: &[Example]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("training and validation sets must be non-empty".into()));
    }
    Ok(())
}

/// Runs `steps` optimizer steps with validation at step 0, every
/// `val_every` steps and at the end.
fn run_loop(
    cfg: &RunConfig,
    val_every: usize,
    mut step_fn: impl FnMut(usize) -> Result<f64>,
    mut val_fn: impl FnMut() -> Result<f64>,
    mut snapshot: impl FnMut(usize, &[f64]) -> Checkpoint,
) -> Result<TrainReport> {
    let mut losses = Vec::with_capacity(cfg.steps);
    let v0 = val_fn()?;
    let mut val_history = vec![(0, v0)];
    let mut best = snapshot(0, &losses);
    let mut best_val = v0;
    let mut last_good = best.clone();
    for step in 0..cfg.steps {
        let loss = match step_fn(step) {
            Ok(l) if l.is_finite() => l,
            Ok(_) | Err(Error::NonFinite(_)) => {
                log::error!("loss is not finite at step {step}");
                return Err(Error::Diverged {
                    step,
                    last_good: Box::new(last_good),
                });
            }
            Err(e) => return Err(e),
        };
        losses.push(loss);
        let done = step + 1;
        if done % val_every == 0 || done == cfg.steps {
            let v = val_fn()?;
            log::info!("step {done}: train {loss:.5} val {v:.5}");
            val_history.push((done, v));
            let snap = snapshot(done, &losses);
            if v < best_val {
                best_val = v;
                best = snap.clone();
            }
            last_good = snap;
        }
    }
    let last = snapshot(cfg.steps, &losses);
    Ok(TrainReport {
        last,
        best,
        val_history,
        train_losses: losses,
    })
}

/// Trains a base denoiser from scratch.
pub fn pretrain(cfg: &RunConfig, train: &[GeometricTrajectory], val: &[GeometricTrajectory]) -> Result<TrainReport> {
    cfg.validate()?;
    let train = pretrain_examples(train, cfg)?;
    let val = pretrain_examples(val, cfg)?;
    check_sets(&train, &val)?;
    let sched = schedule(cfg)?;
    let feature_dim = train[0].features.cols();
    let model = std::cell::RefCell::new(DenoiserModel::init(cfg.model_config(feature_dim), cfg.seed)?);
    let mut opt = OptimizerState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    run_loop(
        cfg,
        cfg.val_every,
        |step| {
            let mut m = model.borrow_mut();
            let eval = batch_loss(&*m, &batch_of(&train, cfg, step), &sched, step_seed(cfg, step), true)?;
            adam_step(m.params_mut(), &eval.grads, &mut opt)?;
            Ok(eval.loss)
        },
        || validation_loss(&*model.borrow(), &val, &sched, cfg.seed),
        |step, losses| Checkpoint::base(cfg, &model.borrow(), step, losses),
    )
}

/// Trains an adapter on a frozen base. The base hash is checked before
/// and after training.
pub fn finetune(
    base: &Checkpoint,
    cfg: &RunConfig,
    train: &[GeometricTrajectory],
    val: &[GeometricTrajectory],
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut base_cfg = base.config.clone();
    base_cfg.control = cfg.control;
    base_cfg.control_frames = cfg.control_frames;
    base_cfg.frame_position = cfg.frame_position;
    if base_cfg.model_config(base.feature_dim) != cfg.model_config(base.feature_dim) {
        return Err(Error::Config("fine-tune config disagrees with the base model".into()));
    }
    let model = base.model()?;
    let before = params_sha256(model.params());
    if before != base.blob_sha256() {
        return Err(Error::HashMismatch {
            expected: base.blob_sha256(),
            actual: before,
        });
    }
    let train = finetune_examples(train, cfg)?;
    let val = finetune_examples(val, cfg)?;
    check_sets(&train, &val)?;
    let sched = schedule(cfg)?;
    let stack = std::cell::RefCell::new(AdapterStack::new(&model, adapter_config(cfg), mix_seed(cfg.seed, 1))?);
    let mut opt = OptimizerState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let report = run_loop(
        cfg,
        cfg.val_every,
        |step| {
            finetune_step(
                &model,
                &mut stack.borrow_mut(),
                &batch_of(&train, cfg, step),
                &sched,
                &mut opt,
                step_seed(cfg, step),
            )
        },
        || validation_loss(&FusedDenoiser::new(&model, &stack.borrow()), &val, &sched, cfg.seed),
        |step, losses| Checkpoint::adapter(cfg, base, &stack.borrow(), step, losses, &model),
    )?;
    let after = params_sha256(model.params());
    if after != before {
        return Err(Error::Contract("base parameters changed during fine-tuning".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simdata::{make_dataset, DatasetConfig};

    fn toy() -> (RunConfig, Vec<GeometricTrajectory>, Vec<GeometricTrajectory>) {
        let cfg = RunConfig::parse(
            "hidden = 8\ntime_dim = 8\nframe_dim = 4\nattn_dim = 4\nframes = 4\ncontrol_frames = 2\n\
             diffusion_steps = 20\nbatch_size = 4\nsteps = 0\nparticles = 3\nbeta_increasing = true",
        )
        .unwrap();
        let data = make_dataset(&DatasetConfig {
            particles: 3,
            frames: cfg.record_frames(),
            train: 8,
            val: 4,
            test: 1,
            ..DatasetConfig::desk()
        })
        .unwrap();
        (cfg, data.train, data.val)
    }

    #[test]
    fn zero_budget_returns_the_initial_model() {
        let (cfg, train, val) = toy();
        let r = pretrain(&cfg, &train, &val).unwrap();
        assert!(r.train_losses.is_empty());
        assert!(r.last.loss_tail.is_empty());
        let init = DenoiserModel::init(cfg.model_config(2), cfg.seed).unwrap();
        assert_eq!(r.last.params.blob(), init.params().blob());

        let f = finetune(&r.last, &cfg, &train, &val).unwrap();
        let (_, stack) = f.last.stack(&r.last).unwrap();
        assert!(stack
            .params()
            .iter()
            .filter(|p| p.name.contains(".zc."))
            .all(|p| p.value.max_abs() == 0.0));
        assert_eq!(f.last.base_sha256, f.last.base_sha256_after);
    }

    #[test]
    fn training_is_deterministic_and_validated() {
        let (mut cfg, train, val) = toy();
        cfg.steps = 30;
        cfg.val_every = 10;
        cfg.lr = 3e-3;
        let a = pretrain(&cfg, &train, &val).unwrap();
        let b = pretrain(&cfg, &train, &val).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.val_history.iter().map(|v| v.0).collect::<Vec<_>>(),
            vec![0, 10, 20, 30]
        );
        assert_eq!(
            a.best_val_loss(),
            a.val_history.iter().map(|v| v.1).fold(f64::INFINITY, f64::min)
        );

        let mut other = cfg.clone();
        other.hidden = 16;
        assert!(matches!(finetune(&a.last, &other, &train, &val), Err(Error::Config(_))));
        let f = finetune(&a.last, &cfg, &train, &val).unwrap();
        assert_eq!(f.last.base_sha256.as_deref(), Some(a.last.blob_sha256().as_str()));
    }

    #[test]
    fn divergence_reports_the_step() {
        let (mut cfg, train, val) = toy();
        cfg.steps = 5;
        cfg.lr = 1e300;
        match pretrain(&cfg, &train, &val) {
            Err(Error::Diverged { step, last_good }) => {
                assert!(step >= 1);
                assert_eq!(last_good.step, 0);
            }
            other => panic!("{other:?}"),
        }
    }
}
