use rand::Rng;
use rand_distr::StandardNormal;

use crate::controls::{Control, FramePosition};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, mix_seed, seeded_rng};
use crate::geometry::{center_of_mass, com_project, translate, Vec3};
use crate::numerics::{Gradients, Tape, Tensor};

use super::{forward_noise_uncond, DenoiseInput, Denoiser, NoiseSchedule};

/// Forward process used to noise a training target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Process {
    /// `c + √ᾱ·P(x₀) + √(1−ᾱ)·ε̃` with mean-free noise around the
    /// reference point `c`.
    Subspace { reference: Vec3 },
    /// `x_r + √ᾱ·(x₀ − x_r) + √(1−ᾱ)·ε` around the model's anchor.
    Anchored,
}

/// Reference point of the mean-free process: the center of mass of the
/// control geometry closest to the predicted frames, or the origin.
pub fn reference_point(control: Option<&Control>) -> Result<Vec3> {
    match control {
        None | Some(Control::Global { .. }) => Ok([0.0; 3]),
        Some(Control::Frame { coords, position }) => {
            let s = coords.shape();
            let (n, tf) = (s[0], s[1]);
            let pick = match position {
                FramePosition::Prefix => tf - 1,
                FramePosition::Suffix => 0,
            };
            let frame = Tensor::from_fn(&[n, 3], |k| coords.data()[((k / 3) * tf + pick) * 3 + k % 3]);
            center_of_mass(&frame)
        }
        Some(Control::Subgraph { graph, .. }) => center_of_mass(&graph.coords),
    }
}

pub fn process_for<D: Denoiser + ?Sized>(model: &D, input: &DenoiseInput) -> Result<Process> {
    if model.conditional() {
        if input.condition.is_none() {
            return Err(Error::Invalid("conditional model needs condition frames".into()));
        }
        Ok(Process::Anchored)
    } else {
        Ok(Process::Subspace {
            reference: reference_point(input.control)?,
        })
    }
}

/// Diffusion step and standard noise for one training target.
#[derive(Clone, Debug, PartialEq)]
pub struct LossDraw {
    pub tau: usize,
    pub noise: Tensor,
}

impl LossDraw {
    /// `τ` uniform on `1..=steps`; noise projected for the mean-free process.
    pub fn new(process: Process, n: usize, t: usize, steps: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let tau = rng.random_range(1..=steps);
        let raw = Tensor::from_fn(&[n, t, 3], |_| rng.sample(StandardNormal));
        let noise = match process {
            Process::Subspace { .. } => com_project(&raw),
            Process::Anchored => raw,
        };
        Self { tau, noise }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub grads: Gradients,
}

/// `‖ε − ε_θ(x_τ, τ)‖²` for one target under `draw`.
pub fn denoising_loss<D: Denoiser + ?Sized>(
    model: &D,
    input: &DenoiseInput,
    x0: &Tensor,
    sched: &NoiseSchedule,
    draw: &LossDraw,
    with_grad: bool,
) -> Result<LossEval> {
    let (n, t) = (input.n_nodes(), input.frames);
    if x0.shape() != [n, t, 3] || draw.noise.shape() != [n, t, 3] {
        return Err(Error::Shape(format!(
            "target {:?} and noise {:?} must be {n}×{t}×3",
            x0.shape(),
            draw.noise.shape()
        )));
    }
    let process = process_for(model, input)?;
    let tau = draw.tau;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xt = match process {
        Process::Subspace { reference } => {
            let xt = forward_noise_uncond(&com_project(x0), tau, &draw.noise, sched)?;
            tape.constant_owned(n * t, 3, translate(&xt, &reference).into_data())
        }
        Process::Anchored => {
            let xr = model
                .record_anchor(&mut tape, &bound, input)?
                .ok_or_else(|| Error::Invalid("conditional model without an anchor".into()))?;
            let ab = sched.alpha_bar(tau)?;
            let x0v = tape.constant_owned(n * t, 3, x0.data().to_vec());
            let d = tape.sub(x0v, xr)?;
            let d = tape.scale(d, ab.sqrt());
            let m = tape.add(d, xr)?;
            let e = tape.constant_owned(n * t, 3, draw.noise.scale((1.0 - ab).sqrt()).into_data());
            tape.add(m, e)?
        }
    };
    let pred = model.record(&mut tape, &bound, input, xt, tau)?;
    let target = tape.constant_owned(n * t, 3, draw.noise.data().to_vec());
    let l = tape.sq_dist(pred, target)?;
    let loss = tape.item(l);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("denoising loss at step {tau}")));
    }
    let grads = if with_grad { tape.backward(l)? } else { Gradients::new() };
    Ok(LossEval { loss, grads })
}

fn seeded_loss<D: Denoiser + ?Sized>(
    model: &D,
    input: &DenoiseInput,
    x0: &Tensor,
    sched: &NoiseSchedule,
    seed: u64,
    with_grad: bool,
) -> Result<LossEval> {
    let process = process_for(model, input)?;
    let draw = LossDraw::new(process, input.n_nodes(), input.frames, sched.steps(), seed);
    denoising_loss(model, input, x0, sched, &draw, with_grad)
}

/// Mean-free denoising loss; the model must not be conditional.
pub fn loss_uncond<D: Denoiser + ?Sized>(
    model: &D,
    input: &DenoiseInput,
    x0: &Tensor,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<LossEval> {
    if model.conditional() {
        return Err(Error::Invalid("loss_uncond needs an unconditional model".into()));
    }
    seeded_loss(model, input, x0, sched, seed, true)
}

/// Anchored denoising loss; the input must carry condition frames.
pub fn loss_cond<D: Denoiser + ?Sized>(
    model: &D,
    input: &DenoiseInput,
    x0: &Tensor,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<LossEval> {
    if !model.conditional() {
        return Err(Error::Invalid("loss_cond needs a conditional model".into()));
    }
    seeded_loss(model, input, x0, sched, seed, true)
}

/// One training target with its context.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub input: DenoiseInput<'a>,
    pub x0: &'a Tensor,
}

/// Mean loss (and mean gradient) over a batch; item `k` uses the draw
/// seeded by `mix_seed(seed, k)`.
pub fn batch_loss<D: Denoiser + ?Sized>(
    model: &D,
    items: &[TrainItem],
    sched: &NoiseSchedule,
    seed: u64,
    with_grad: bool,
) -> Result<LossEval> {
    if items.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let evals = map_indexed(items, |k, it| {
        seeded_loss(model, &it.input, it.x0, sched, mix_seed(seed, k as u64), with_grad)
    });
    let mut loss = 0.0;
    let mut grads = Gradients::new();
    for e in evals {
        let e = e?;
        loss += e.loss;
        grads.merge(&e.grads)?;
    }
    let inv = 1.0 / items.len() as f64;
    grads.scale(inv);
    Ok(LossEval {
        loss: loss * inv,
        grads,
    })
}
