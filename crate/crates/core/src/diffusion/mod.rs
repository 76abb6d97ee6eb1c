//! Noise schedules, the mean-free and anchored forward processes, denoising
//! losses and ancestral samplers.

mod loss;
mod process;
mod sample;
mod schedule;

pub use loss::{
    batch_loss, denoising_loss, loss_cond, loss_uncond, process_for, reference_point, LossDraw, LossEval, Process,
    TrainItem,
};
pub use process::{
    anchor_mean, anchor_weights, forward_noise_cond, forward_noise_uncond, reverse_mean_cond, reverse_mean_uncond,
    sample_subspace_gaussian,
};
pub use sample::{sample, sample_cond, sample_uncond, NoiseSource, RotatedNoise, SeededNoise};
pub use schedule::{build_linear_schedule, build_schedule, NoiseSchedule};

use crate::controls::Control;
use crate::error::{Error, Result};
use crate::numerics::{Bound, Tape, Tensor, Var};

/// Everything a denoiser sees besides the noised coordinates and the step.
#[derive(Clone, Copy, Debug)]
pub struct DenoiseInput<'a> {
    /// Raw node features `N×H`.
    pub features: &'a Tensor,
    pub edges: &'a [(usize, usize)],
    /// Frame count `T` of the noised coordinates.
    pub frames: usize,
    /// Condition frames `N×T_c×3` of a conditional model.
    pub condition: Option<&'a Tensor>,
    /// Control consumed by an attached adapter.
    pub control: Option<&'a Control>,
}

impl DenoiseInput<'_> {
    pub fn n_nodes(&self) -> usize {
        self.features.rows()
    }
}

/// A noise predictor that can record itself on a tape.
pub trait Denoiser: Sync {
    /// Registers the parameters on `tape`.
    fn bind(&self, tape: &mut Tape) -> Bound;

    /// Whether the model uses the anchored conditional process.
    fn conditional(&self) -> bool;

    fn max_tau(&self) -> usize;

    /// Predicted noise `(N·T)×3` for noised coordinates `x` (`(N·T)×3`).
    fn record(&self, tape: &mut Tape, bound: &Bound, input: &DenoiseInput, x: Var, tau: usize) -> Result<Var>;

    /// Anchor `x_r` of the conditional process, `None` for mean-free models.
    fn record_anchor(&self, tape: &mut Tape, bound: &Bound, input: &DenoiseInput) -> Result<Option<Var>>;

    /// Value-level prediction, `N×T×3` in and out.
    fn predict(&self, input: &DenoiseInput, x: &Tensor, tau: usize) -> Result<Tensor> {
        let n = input.n_nodes();
        let t = input.frames;
        if x.shape() != [n, t, 3] {
            return Err(Error::Shape(format!(
                "noised coordinates {:?}, expected {:?}",
                x.shape(),
                [n, t, 3]
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.constant_owned(n * t, 3, x.data().to_vec());
        let out = self.record(&mut tape, &bound, input, xv, tau)?;
        tape.value(out).reshape(&[n, t, 3])
    }

    fn anchor(&self, input: &DenoiseInput) -> Result<Option<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        match self.record_anchor(&mut tape, &bound, input)? {
            None => Ok(None),
            Some(v) => Ok(Some(tape.value(v).reshape(&[input.n_nodes(), input.frames, 3])?)),
        }
    }
}

/// Predicts zero noise. In conditional mode its anchor is the last
/// condition frame.
#[derive(Clone, Copy, Debug)]
pub struct ZeroDenoiser {
    pub conditional: bool,
    pub steps: usize,
}

impl Denoiser for ZeroDenoiser {
    fn bind(&self, _tape: &mut Tape) -> Bound {
        Bound::default()
    }

    fn conditional(&self) -> bool {
        self.conditional
    }

    fn max_tau(&self) -> usize {
        self.steps
    }

    fn record(&self, tape: &mut Tape, _bound: &Bound, input: &DenoiseInput, _x: Var, _tau: usize) -> Result<Var> {
        Ok(tape.constant_owned(
            input.n_nodes() * input.frames,
            3,
            vec![0.0; input.n_nodes() * input.frames * 3],
        ))
    }

    fn record_anchor(&self, tape: &mut Tape, _bound: &Bound, input: &DenoiseInput) -> Result<Option<Var>> {
        if !self.conditional {
            return Ok(None);
        }
        let c = input
            .condition
            .ok_or_else(|| Error::Invalid("conditional model called without condition frames".into()))?;
        let (n, tc) = (c.shape()[0], c.shape()[1]);
        let t = input.frames;
        let xr = anchor_mean(c, &vec![0.0; t], &Tensor::zeros(&[n, tc.saturating_sub(1)]))?;
        Ok(Some(tape.constant_owned(n * t, 3, xr.into_data())))
    }
}
