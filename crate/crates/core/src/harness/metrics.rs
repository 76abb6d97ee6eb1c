use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn check_sets(preds: &[Tensor], truth: &Tensor) -> Result<(usize, usize)> {
    if preds.is_empty() {
        return Err(Error::Invalid("need at least one sample".into()));
    }
    let s = truth.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!("truth must be N×T×3, got {s:?}")));
    }
    if let Some(p) = preds.iter().find(|p| p.shape() != s) {
        return Err(Error::Shape(format!("prediction {:?} vs truth {s:?}", p.shape())));
    }
    Ok((s[0], s[1]))
}

fn row_dist(a: &[f64], b: &[f64]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean over samples of `(1/TN) Σ_t Σ_i ‖x − y‖₂`.
pub fn ade(preds: &[Tensor], truth: &Tensor) -> Result<f64> {
    let (n, t) = check_sets(preds, truth)?;
    let per: Vec<f64> = preds
        .iter()
        .map(|p| {
            p.data()
                .chunks(3)
                .zip(truth.data().chunks(3))
                .map(|(a, b)| row_dist(a, b))
                .sum::<f64>()
                / (n * t) as f64
        })
        .collect();
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Mean over samples of `(1/N) Σ_i ‖x^{(T−1)} − y^{(T−1)}‖₂`.
pub fn fde(preds: &[Tensor], truth: &Tensor) -> Result<f64> {
    let (n, t) = check_sets(preds, truth)?;
    let last = |d: &[f64], i: usize| -> [f64; 3] {
        let o = (i * t + t - 1) * 3;
        [d[o], d[o + 1], d[o + 2]]
    };
    let per: Vec<f64> = preds
        .iter()
        .map(|p| {
            (0..n)
                .map(|i| row_dist(&last(p.data(), i), &last(truth.data(), i)))
                .sum::<f64>()
                / n as f64
        })
        .collect();
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

fn frame_values(set: &[Tensor], t: usize, frames: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for x in set {
        for row in x.data().chunks(3 * frames) {
            out.extend_from_slice(&row[t * 3..t * 3 + 3]);
        }
    }
    out
}

fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    let w = (hi - lo) / bins as f64;
    for &v in values {
        let k = (((v - lo) / w) as usize).min(bins - 1);
        h[k] += 1.0;
    }
    let total = values.len() as f64;
    h.iter().map(|c| c / total).collect()
}

/// Per-frame marginal coordinate densities over shared bins, compared by
/// mean absolute error and averaged over frames. `x`, `y` and `z` values
/// of every node are pooled.
pub fn marginal_score(samples: &[Tensor], reference: &[Tensor], bins: usize) -> Result<f64> {
    if samples.is_empty() || reference.is_empty() {
        return Err(Error::Invalid("marginal score needs non-empty sets".into()));
    }
    if bins < 2 {
        return Err(Error::Invalid(format!("need at least 2 bins, got {bins}")));
    }
    let frames = samples[0].shape().get(1).copied().unwrap_or(0);
    for x in samples.iter().chain(reference) {
        let s = x.shape();
        if s.len() != 3 || s[1] != frames || s[2] != 3 {
            return Err(Error::Shape(format!(
                "trajectory {s:?} does not have {frames} frames of 3-vectors"
            )));
        }
    }
    let mut total = 0.0;
    for t in 0..frames {
        let a = frame_values(samples, t, frames);
        let b = frame_values(reference, t, frames);
        let lo = a.iter().chain(&b).copied().fold(f64::INFINITY, f64::min);
        let hi = a.iter().chain(&b).copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            log::warn!("frame {t}: all values equal, scoring 0");
            continue;
        }
        let (p, q) = (histogram(&a, lo, hi, bins), histogram(&b, lo, hi, bins));
        total += p.iter().zip(&q).map(|(x, y)| (x - y).abs()).sum::<f64>() / bins as f64;
    }
    Ok(total / frames as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(rows: &[[f64; 3]], n: usize, t: usize) -> Tensor {
        Tensor::new(&[n, t, 3], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn hand_computed_displacements() {
        let truth = traj(&[[0.0; 3]], 1, 1);
        let pred = traj(&[[3.0, 4.0, 0.0]], 1, 1);
        assert_eq!(ade(std::slice::from_ref(&pred), &truth).unwrap(), 5.0);
        assert_eq!(fde(&[pred], &truth).unwrap(), 5.0);
        assert_eq!(ade(std::slice::from_ref(&truth), &truth).unwrap(), 0.0);
        let truth = traj(&[[0.0; 3]; 4], 2, 2);
        let pred = traj(
            &[[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, -1.0], [3.0, 0.0, 0.0]],
            2,
            2,
        );
        assert_eq!(ade(std::slice::from_ref(&pred), &truth).unwrap(), 2.0);
        assert_eq!(fde(&[pred], &truth).unwrap(), 3.0);
        assert!(ade(&[traj(&[[0.0; 3]], 1, 1)], &truth).is_err());
    }

    #[test]
    fn marginal_identity_and_order() {
        let a: Vec<Tensor> = (0..4)
            .map(|k| Tensor::from_fn(&[2, 3, 3], |i| ((i * 7 + k * 3) % 5) as f64))
            .collect();
        assert_eq!(marginal_score(&a, &a, 50).unwrap(), 0.0);
        let mut rev = a.clone();
        rev.reverse();
        let b: Vec<Tensor> = a.iter().map(|x| x.scale(1.5)).collect();
        assert_eq!(
            marginal_score(&a, &b, 10).unwrap(),
            marginal_score(&rev, &b, 10).unwrap()
        );
        let flat = vec![Tensor::zeros(&[1, 1, 3])];
        assert_eq!(marginal_score(&flat, &flat, 4).unwrap(), 0.0);
        assert!(marginal_score(&a, &b, 1).is_err());
    }
}
