use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::exec::seeded_rng;
use crate::geometry::{com_project, rotate_vectors, translate, Mat3};
use crate::numerics::Tensor;

use super::{process_for, reverse_mean_cond, reverse_mean_uncond, DenoiseInput, Denoiser, NoiseSchedule, Process};

/// Supplies standard Gaussian tensors to a sampler.
pub trait NoiseSource {
    fn standard_normal(&mut self, shape: &[usize]) -> Tensor;
}

pub struct SeededNoise {
    rng: ChaCha8Rng,
}

impl SeededNoise {
    pub fn new(seed: u64) -> Self {
        Self { rng: seeded_rng(seed) }
    }
}

impl NoiseSource for SeededNoise {
    fn standard_normal(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| StandardNormal.sample(&mut self.rng))
    }
}

/// Rotates every 3-vector drawn from `inner`.
pub struct RotatedNoise<S> {
    pub inner: S,
    pub rotation: Mat3,
}

impl<S: NoiseSource> NoiseSource for RotatedNoise<S> {
    fn standard_normal(&mut self, shape: &[usize]) -> Tensor {
        rotate_vectors(&self.inner.standard_normal(shape), &self.rotation)
    }
}

/// Ancestral sampling from `x_𝒯` down to `x_0`. `observer` sees every
/// state as `(τ, x_τ)`, the prior included. No noise is added on the last step.
pub fn sample<D: Denoiser + ?Sized>(
    model: &D,
    input: &DenoiseInput,
    sched: &NoiseSchedule,
    noise: &mut dyn NoiseSource,
    observer: &mut dyn FnMut(usize, &Tensor),
) -> Result<Tensor> {
    let steps = sched.steps();
    if steps > model.max_tau() {
        return Err(Error::Invalid(format!(
            "schedule has {steps} steps, model was built for {}",
            model.max_tau()
        )));
    }
    let (n, t) = (input.n_nodes(), input.frames);
    let shape = [n, t, 3];
    let process = process_for(model, input)?;
    let anchor = match process {
        Process::Anchored => Some(
            model
                .anchor(input)?
                .ok_or_else(|| Error::Invalid("conditional model without an anchor".into()))?,
        ),
        Process::Subspace { .. } => None,
    };
    let draw = |noise: &mut dyn NoiseSource| {
        let z = noise.standard_normal(&shape);
        match process {
            Process::Subspace { .. } => com_project(&z),
            Process::Anchored => z,
        }
    };
    let mut x = match (&process, &anchor) {
        (Process::Subspace { reference }, _) => translate(&draw(noise), reference),
        (Process::Anchored, Some(xr)) => xr.add(&draw(noise))?,
        (Process::Anchored, None) => unreachable!(),
    };
    observer(steps, &x);
    for tau in (1..=steps).rev() {
        let eps = model.predict(input, &x, tau)?;
        let mu = match (&process, &anchor) {
            (Process::Subspace { reference }, _) => {
                let back = reference.map(|v| -v);
                translate(
                    &reverse_mean_uncond(&translate(&x, &back), tau, &eps, sched)?,
                    reference,
                )
            }
            (Process::Anchored, Some(xr)) => reverse_mean_cond(&x, xr, tau, &eps, sched)?,
            (Process::Anchored, None) => unreachable!(),
        };
        x = if tau > 1 {
            mu.add(&draw(noise).scale(sched.sigma(tau)?))?
        } else {
            mu
        };
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("sampler state at step {tau}")));
        }
        observer(tau - 1, &x);
    }
    Ok(x)
}

/// Sampling from the mean-free prior; rejects conditional models.
pub fn sample_uncond<D: Denoiser + ?Sized>(
    model: &D,
    input: &DenoiseInput,
    sched: &NoiseSchedule,
    noise: &mut dyn NoiseSource,
    observer: &mut dyn FnMut(usize, &Tensor),
) -> Result<Tensor> {
    if model.conditional() {
        return Err(Error::Invalid("sample_uncond needs an unconditional model".into()));
    }
    sample(model, input, sched, noise, observer)
}

/// Sampling given condition frames or a control.
pub fn sample_cond<D: Denoiser + ?Sized>(
    model: &D,
    input: &DenoiseInput,
    sched: &NoiseSchedule,
    noise: &mut dyn NoiseSource,
    observer: &mut dyn FnMut(usize, &Tensor),
) -> Result<Tensor> {
    if input.condition.is_none() && input.control.is_none() {
        return Err(Error::Invalid("sample_cond needs condition frames or a control".into()));
    }
    sample(model, input, sched, noise, observer)
}
