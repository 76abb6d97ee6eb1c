use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamSet};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over all trainable parameter tensors.
    pub max_rel_error: f64,
    /// Parameter holding the largest error.
    pub worst: Option<String>,
    pub checked_scalars: usize,
}

/// Compares analytic gradients against central differences.
///
/// `eval` returns the loss and its analytic gradients for a parameter set.
/// The error of a parameter tensor is `‖a − d‖ / max(‖a‖, ‖d‖, 1e-12)` with
/// `a` the analytic and `d` the finite-difference gradient; a scalar
/// parameter reduces to the element-wise form.
pub fn grad_check<F>(params: &ParamSet, fd_step: f64, eval: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(f64, Gradients)>,
{
    if !(fd_step > 0.0) {
        return Err(Error::Invalid(format!("fd_step must be positive, got {fd_step}")));
    }
    let (loss, analytic) = eval(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss at the unperturbed point".into()));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked_scalars: 0,
    };
    let mut work = params.clone();
    for p in params.trainable() {
        let a = analytic
            .get(&p.name)
            .ok_or_else(|| Error::Contract(format!("no analytic gradient for `{}`", p.name)))?;
        let mut diff_sq = 0.0;
        let mut fd_sq = 0.0;
        for i in 0..p.value.len() {
            let orig = p.value.data()[i];
            let mut probe = |x: f64| -> Result<f64> {
                work.value_mut(&p.name)?.data_mut()[i] = x;
                let (l, _) = eval(&work)?;
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        param: p.name.clone(),
                        index: i,
                    });
                }
                Ok(l)
            };
            let plus = probe(orig + fd_step)?;
            let minus = probe(orig - fd_step)?;
            work.value_mut(&p.name)?.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * fd_step);
            let an = a.data()[i];
            diff_sq += (an - fd) * (an - fd);
            fd_sq += fd * fd;
            report.checked_scalars += 1;
        }
        let denom = a.norm().max(fd_sq.sqrt()).max(1e-12);
        let rel = diff_sq.sqrt() / denom;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(p.name.clone());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    fn quadratic(ps: &ParamSet) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let b = tape.bind(ps);
        let w = b.get("w")?;
        let c = tape.constant(&Tensor::row(&[1.0, -2.0, 0.5]));
        let d = tape.sq_dist(w, c)?;
        let l = tape.scale(d, 3.0);
        let g = tape.backward(l)?;
        Ok((tape.item(l), g))
    }

    #[test]
    fn quadratic_loss_is_nearly_exact() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::row(&[0.3, 0.1, -0.7]), true).unwrap();
        let r = grad_check(&ps, DEFAULT_FD_STEP, quadratic).unwrap();
        assert!(r.max_rel_error <= 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn parameter_outside_the_loss_scores_zero() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::row(&[0.3, 0.1, -0.7]), true).unwrap();
        ps.insert("unused", Tensor::row(&[1.0, 2.0]), true).unwrap();
        let r = grad_check(&ps, DEFAULT_FD_STEP, |p| {
            let (l, mut g) = quadratic(p)?;
            g.insert("unused", Tensor::zeros(&[1, 2]));
            Ok((l, g))
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-9);
    }

    #[test]
    fn non_finite_loss_names_the_perturbation() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::scalar(0.0), true).unwrap();
        let err = grad_check(&ps, 1e-5, |p| {
            let w = p.value("w")?.item();
            let l = if w > 0.0 { f64::INFINITY } else { w };
            let mut g = Gradients::new();
            g.insert("w", Tensor::scalar(1.0));
            Ok((l, g))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { ref param, index: 0 } if param == "w"));
    }
}
