//! Closed-form forward marginals, anchors and reverse means.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::exec::seeded_rng;
use crate::geometry::{center_of_mass, com_project};
use crate::numerics::Tensor;

use super::NoiseSchedule;

const MEAN_FREE_TOL: f64 = 1e-10;

/// A standard Gaussian `N×T×3` draw projected onto the mean-free subspace.
pub fn sample_subspace_gaussian(n: usize, t: usize, seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    let raw = Tensor::from_fn(&[n, t, 3], |_| StandardNormal.sample(&mut rng));
    com_project(&raw)
}

fn check_mean_free(x: &Tensor, what: &str) -> Result<()> {
    let m = center_of_mass(x)?;
    if m.iter().any(|v| v.abs() > MEAN_FREE_TOL) {
        return Err(Error::Invalid(format!("{what} is not mean-free: mean {m:?}")));
    }
    Ok(())
}

/// `√ᾱ_τ·x̃₀ + √(1−ᾱ_τ)·ε̃`.
pub fn forward_noise_uncond(x0: &Tensor, tau: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_mean_free(x0, "x0")?;
    check_mean_free(eps, "noise")?;
    let ab = sched.alpha_bar(tau)?;
    x0.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))
}

/// `x_r + √ᾱ_τ·(x₀ − x_r) + √(1−ᾱ_τ)·ε`.
pub fn forward_noise_cond(
    x0: &Tensor,
    x_r: &Tensor,
    tau: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let ab = sched.alpha_bar(tau)?;
    x0.sub(x_r)?
        .scale(ab.sqrt())
        .add(x_r)?
        .add(&eps.scale((1.0 - ab).sqrt()))
}

/// Anchor weights `w^{(t,s)}_i` as an `N×T×T_c` tensor.
///
/// `W_{t,s,i} = γ_t·ĥ_{s,i}` for `s < T_c − 1`; the last weight is one minus
/// the rest, so every `(i, t)` row sums to one.
pub fn anchor_weights(gamma: &[f64], h_hat: &Tensor, tc: usize) -> Result<Tensor> {
    if tc == 0 {
        return Err(Error::Invalid("anchor needs at least one condition frame".into()));
    }
    let n = h_hat.shape()[0];
    if h_hat.shape() != [n, tc - 1] {
        return Err(Error::Shape(format!("ĥ must be N×{}, got {:?}", tc - 1, h_hat.shape())));
    }
    let t = gamma.len();
    let mut w = Tensor::zeros(&[n, t, tc]);
    for i in 0..n {
        for (ti, g) in gamma.iter().enumerate() {
            let mut rest = 0.0;
            for s in 0..tc - 1 {
                let v = g * h_hat.data()[i * (tc - 1) + s];
                w.set(&[i, ti, s], v);
                rest += v;
            }
            w.set(&[i, ti, tc - 1], 1.0 - rest);
        }
    }
    Ok(w)
}

/// `x_r^{(t)}_i = Σ_s w^{(t,s)}_i·x_c^{(s)}_i`, written as the last frame
/// plus weighted offsets so the sum-to-one closure is exact.
pub fn anchor_mean(x_c: &Tensor, gamma: &[f64], h_hat: &Tensor) -> Result<Tensor> {
    let s = x_c.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!("condition frames must be N×T_c×3, got {s:?}")));
    }
    let (n, tc) = (s[0], s[1]);
    if tc == 0 {
        return Err(Error::Invalid("anchor needs at least one condition frame".into()));
    }
    if h_hat.shape() != [n, tc - 1] {
        return Err(Error::Shape(format!(
            "ĥ must be {n}×{}, got {:?}",
            tc - 1,
            h_hat.shape()
        )));
    }
    let t = gamma.len();
    let c = x_c.data();
    Ok(Tensor::from_fn(&[n, t, 3], |k| {
        let (i, ti, d) = (k / (t * 3), (k / 3) % t, k % 3);
        let last = c[(i * tc + tc - 1) * 3 + d];
        let mut acc = 0.0;
        for s in 0..tc - 1 {
            acc += (c[(i * tc + s) * 3 + d] - last) * h_hat.data()[i * (tc - 1) + s];
        }
        last + gamma[ti] * acc
    }))
}

/// `(1/√α_τ)·(x̃_τ − β_τ/√(1−ᾱ_τ)·ε̃)`.
pub fn reverse_mean_uncond(x: &Tensor, tau: usize, eps_pred: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let (a, b, ab) = (sched.alpha(tau)?, sched.beta(tau)?, sched.alpha_bar(tau)?);
    Ok(x.sub(&eps_pred.scale(b / (1.0 - ab).sqrt()))?.scale(1.0 / a.sqrt()))
}

/// `x_r + (1/√α_τ)·(x_τ − x_r − β_τ/√(1−ᾱ_τ)·ε)`.
pub fn reverse_mean_cond(
    x: &Tensor,
    x_r: &Tensor,
    tau: usize,
    eps_pred: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let rel = x.sub(x_r)?;
    reverse_mean_uncond(&rel, tau, eps_pred, sched)?.add(x_r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::build_linear_schedule;
    use crate::geometry::{translate, RigidMotion};

    fn gaussian(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = seeded_rng(seed);
        Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn subspace_draw_is_mean_free_and_reproducible() {
        let a = sample_subspace_gaussian(5, 4, 3);
        let m = center_of_mass(&a).unwrap();
        assert!(m.iter().all(|v| v.abs() <= 1e-12));
        assert_eq!(a, sample_subspace_gaussian(5, 4, 3));
    }

    #[test]
    fn uncond_forward_cases() {
        let s = build_linear_schedule(10, 0.1, 0.2).unwrap();
        let x0 = com_project(&gaussian(1, &[3, 2, 3]));
        let zero = Tensor::zeros(&[3, 2, 3]);
        let got = forward_noise_uncond(&x0, 4, &zero, &s).unwrap();
        assert_eq!(got, x0.scale(s.alpha_bar(4).unwrap().sqrt()));
        assert!(forward_noise_uncond(&gaussian(2, &[3, 2, 3]), 4, &zero, &s).is_err());
    }

    #[test]
    fn cond_forward_fixed_point_and_equivariance() {
        let s = build_linear_schedule(10, 0.1, 0.2).unwrap();
        let xr = gaussian(3, &[3, 2, 3]);
        let zero = Tensor::zeros(&[3, 2, 3]);
        for tau in 1..=10 {
            let got = forward_noise_cond(&xr, &xr, tau, &zero, &s).unwrap();
            assert!(got.max_abs_diff(&xr).unwrap() <= 1e-15);
        }
        let x0 = gaussian(4, &[3, 2, 3]);
        let eps = gaussian(5, &[3, 2, 3]);
        let g = RigidMotion::random(6, 2.0);
        let a = g.apply_points(&forward_noise_cond(&x0, &xr, 5, &eps, &s).unwrap());
        let b = forward_noise_cond(
            &g.apply_points(&x0),
            &g.apply_points(&xr),
            5,
            &g.apply_vectors(&eps),
            &s,
        )
        .unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn anchor_cases() {
        let xc = gaussian(7, &[4, 1, 3]);
        let xr = anchor_mean(&xc, &[0.3, -1.0, 2.0], &Tensor::zeros(&[4, 0])).unwrap();
        for i in 0..4 {
            for t in 0..3 {
                for d in 0..3 {
                    assert_eq!(xr.at(&[i, t, d]), xc.at(&[i, 0, d]));
                }
            }
        }
        let xc = gaussian(8, &[4, 3, 3]);
        let hh = gaussian(9, &[4, 2]);
        let xr = anchor_mean(&xc, &[0.0, 0.0], &hh).unwrap();
        for i in 0..4 {
            for d in 0..3 {
                assert_eq!(xr.at(&[i, 1, d]), xc.at(&[i, 2, d]));
            }
        }
        let gamma = [0.7, -0.4, 1.3];
        let w = anchor_weights(&gamma, &hh, 3).unwrap();
        for row in w.data().chunks(3) {
            assert_eq!(row[2], 1.0 - (row[0] + row[1]));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
        }
        let d = [1.0, -2.0, 3.0];
        let a = anchor_mean(&xc, &gamma, &hh).unwrap();
        let b = anchor_mean(&translate(&xc, &d), &gamma, &hh).unwrap();
        assert!(translate(&a, &d).max_abs_diff(&b).unwrap() <= 1e-12);
        // Weighted sum with explicit weights agrees with the offset form.
        for i in 0..4 {
            for t in 0..3 {
                for dd in 0..3 {
                    let direct: f64 = (0..3).map(|s| w.at(&[i, t, s]) * xc.at(&[i, s, dd])).sum();
                    assert!((direct - a.at(&[i, t, dd])).abs() <= 1e-12);
                }
            }
        }
        assert!(anchor_mean(&Tensor::zeros(&[2, 0, 3]), &gamma, &Tensor::zeros(&[2, 0])).is_err());
    }

    #[test]
    fn reverse_means() {
        let s = build_linear_schedule(10, 0.1, 0.2).unwrap();
        let x = com_project(&gaussian(10, &[3, 2, 3]));
        let zero = Tensor::zeros(&[3, 2, 3]);
        let mu = reverse_mean_uncond(&x, 3, &zero, &s).unwrap();
        assert_eq!(mu, x.scale(1.0 / s.alpha(3).unwrap().sqrt()));
        assert!(reverse_mean_uncond(&x, 0, &zero, &s).is_err());

        let eps = com_project(&gaussian(11, &[3, 2, 3]));
        let mu = reverse_mean_uncond(&x, 7, &eps, &s).unwrap();
        let (a, b, ab) = (1.0 - s.betas()[6], s.betas()[6], s.alpha_bars()[6]);
        for k in 0..x.len() {
            let want = (x.data()[k] - b / (1.0 - ab).sqrt() * eps.data()[k]) / a.sqrt();
            assert!((mu.data()[k] - want).abs() <= 1e-14);
        }

        let xr = gaussian(12, &[3, 2, 3]);
        assert!(
            reverse_mean_cond(&xr, &xr, 5, &zero, &s)
                .unwrap()
                .max_abs_diff(&xr)
                .unwrap()
                <= 1e-15
        );
        let via_cond = reverse_mean_cond(&x, &zero, 7, &eps, &s).unwrap();
        assert!(via_cond.max_abs_diff(&mu).unwrap() <= 1e-15);
        let d = [0.5, 4.0, -1.0];
        let m1 = reverse_mean_cond(&x, &xr, 7, &eps, &s).unwrap();
        let m2 = reverse_mean_cond(&translate(&x, &d), &translate(&xr, &d), 7, &eps, &s).unwrap();
        assert!(translate(&m1, &d).max_abs_diff(&m2).unwrap() <= 1e-12);
    }

    #[test]
    fn tiny_beta_reverse_mean_is_nearly_identity() {
        let s = build_linear_schedule(1, 1e-12, 1e-12).unwrap();
        let x = com_project(&gaussian(13, &[2, 2, 3]));
        let eps = com_project(&gaussian(14, &[2, 2, 3]));
        let mu = reverse_mean_uncond(&x, 1, &eps, &s).unwrap();
        assert!(mu.max_abs_diff(&x).unwrap() <= 1e-5);
    }
}
