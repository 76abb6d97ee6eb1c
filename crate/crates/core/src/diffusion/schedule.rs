use crate::error::{Error, Result};

/// `β`, `α = 1 − β`, `ᾱ` and the reverse variance `σ² = β`, indexed by
/// diffusion step `τ ∈ 1..=𝒯`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear interpolation from `beta_start` at `τ = 1` to `beta_end` at `τ = 𝒯`.
pub fn build_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Invalid("schedule needs at least one step".into()));
    }
    for (name, b) in [("beta_start", beta_start), ("beta_end", beta_end)] {
        if !(b > 0.0 && b < 1.0) {
            return Err(Error::Invalid(format!("{name} = {b} outside (0, 1)")));
        }
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|k| beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64)
            .collect()
    };
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

/// Same endpoints, with `β` forced to increase in `τ` when `increasing` is set.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64, increasing: bool) -> Result<NoiseSchedule> {
    if increasing {
        build_linear_schedule(steps, beta_start.min(beta_end), beta_start.max(beta_end))
    } else {
        build_linear_schedule(steps, beta_start, beta_end)
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, tau: usize) -> Result<usize> {
        if tau == 0 || tau > self.betas.len() {
            return Err(Error::Invalid(format!(
                "diffusion step {tau} outside 1..={}",
                self.betas.len()
            )));
        }
        Ok(tau - 1)
    }

    pub fn beta(&self, tau: usize) -> Result<f64> {
        Ok(self.betas[self.idx(tau)?])
    }

    pub fn alpha(&self, tau: usize) -> Result<f64> {
        Ok(1.0 - self.betas[self.idx(tau)?])
    }

    pub fn alpha_bar(&self, tau: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.idx(tau)?])
    }

    pub fn sigma(&self, tau: usize) -> Result<f64> {
        Ok(self.betas[self.idx(tau)?].sqrt())
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}
