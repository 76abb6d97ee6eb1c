//! Turns simulated records into training and evaluation examples.
//!
//! A record's frames are laid out as `[context | predicted | suffix]`. The
//! predicted window starts after `context_frames()` frames.

use crate::backbone::TaskKind;
use crate::controls::{Control, ControlKind, FramePosition};
use crate::diffusion::{DenoiseInput, TrainItem};
use crate::error::{Error, Result};
use crate::geometry::{center_of_mass, fully_connected, GeometricTrajectory, RigidMotion};
use crate::numerics::Tensor;

use super::RunConfig;

/// Length of the global control vector built by [`finetune_example`].
pub const GLOBAL_DIM: usize = 1;

/// One denoising problem with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: Tensor,
    pub edges: Vec<(usize, usize)>,
    pub condition: Option<Tensor>,
    pub control: Option<Control>,
    /// `N×T×3` ground truth of the predicted window.
    pub target: Tensor,
}

impl Example {
    pub fn frames(&self) -> usize {
        self.target.shape()[1]
    }

    pub fn input(&self) -> DenoiseInput<'_> {
        DenoiseInput {
            features: &self.features,
            edges: &self.edges,
            frames: self.frames(),
            condition: self.condition.as_ref(),
            control: self.control.as_ref(),
        }
    }

    pub fn item(&self) -> TrainItem<'_> {
        TrainItem {
            input: self.input(),
            x0: &self.target,
        }
    }

    /// The example with every coordinate moved by `g`.
    pub fn transformed(&self, g: &RigidMotion) -> Example {
        Example {
            features: self.features.clone(),
            edges: self.edges.clone(),
            condition: self.condition.as_ref().map(|c| g.apply_points(c)),
            control: self.control.as_ref().map(|c| c.transformed(g)),
            target: g.apply_points(&self.target),
        }
    }

    /// The example without its control.
    pub fn without_control(&self) -> Example {
        Example {
            control: None,
            ..self.clone()
        }
    }
}

/// Frames `a..b` of an `N×T×3` tensor.
pub fn frame_range(coords: &Tensor, a: usize, b: usize) -> Result<Tensor> {
    let s = coords.shape();
    if s.len() != 3 || a > b || b > s[1] {
        return Err(Error::Shape(format!("frames {a}..{b} of {s:?}")));
    }
    let (n, t, k) = (s[0], s[1], b - a);
    Ok(Tensor::from_fn(&[n, k, 3], |i| {
        let (node, rest) = (i / (k * 3), i % (k * 3));
        coords.data()[node * t * 3 + a * 3 + rest]
    }))
}

/// Nodes `a..b` of a tensor whose first axis is the node axis.
pub fn node_range(x: &Tensor, a: usize, b: usize) -> Result<Tensor> {
    let s = x.shape();
    if a > b || b > s[0] {
        return Err(Error::Shape(format!("nodes {a}..{b} of {s:?}")));
    }
    let stride = x.len() / s[0].max(1);
    let mut shape = s.to_vec();
    shape[0] = b - a;
    Tensor::new(&shape, x.data()[a * stride..b * stride].to_vec())
}

fn check_record(rec: &GeometricTrajectory, cfg: &RunConfig) -> Result<()> {
    if rec.n_frames() < cfg.record_frames() {
        return Err(Error::Invalid(format!(
            "record has {} frames, the task needs {}",
            rec.n_frames(),
            cfg.record_frames()
        )));
    }
    Ok(())
}

/// Pretraining example: the predicted window, with condition frames for a
/// conditional task.
pub fn pretrain_example(rec: &GeometricTrajectory, cfg: &RunConfig) -> Result<Example> {
    check_record(rec, cfg)?;
    let l = cfg.context_frames();
    let condition = match cfg.task {
        TaskKind::Cond => Some(frame_range(&rec.coords, l - cfg.cond_frames, l)?),
        TaskKind::Uncond => None,
    };
    Ok(Example {
        features: rec.features.clone(),
        edges: rec.edges.clone(),
        condition,
        control: None,
        target: frame_range(&rec.coords, l, l + cfg.frames)?,
    })
}

/// Radius of gyration of one frame.
fn gyration(frame: &Tensor) -> Result<f64> {
    let c = center_of_mass(frame)?;
    let n = frame.rows() as f64;
    let ss: f64 = frame
        .data()
        .chunks(3)
        .map(|p| (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>())
        .sum();
    Ok((ss / n).sqrt())
}

/// Fine-tuning example for the configured control variant.
///
/// * frame: the control frames just before (prefix) or after (suffix) the
///   predicted window;
/// * global: the radius of gyration of the last target frame;
/// * subgraph: particle 0 over the predicted window, the other particles
///   are generated.
pub fn finetune_example(rec: &GeometricTrajectory, cfg: &RunConfig) -> Result<Example> {
    let mut ex = pretrain_example(rec, cfg)?;
    let l = cfg.context_frames();
    let t = cfg.frames;
    match cfg.control {
        ControlKind::Frame => {
            let (a, b) = match cfg.frame_position {
                FramePosition::Prefix => (l - cfg.control_frames, l),
                FramePosition::Suffix => (l + t, l + t + cfg.control_frames),
            };
            ex.control = Some(Control::Frame {
                coords: frame_range(&rec.coords, a, b)?,
                position: cfg.frame_position,
            });
        }
        ControlKind::Global => {
            let last = frame_range(&ex.target, t - 1, t)?.reshape(&[rec.n_nodes(), 3])?;
            ex.control = Some(Control::Global {
                vector: vec![gyration(&last)?],
            });
        }
        ControlKind::Subgraph => {
            let n = rec.n_nodes();
            let feats = |from, to| node_range(&rec.features, from, to);
            let graph = GeometricTrajectory::new(feats(0, 1)?, node_range(&ex.target, 0, 1)?, Vec::new())?;
            ex.features = feats(1, n)?;
            ex.target = node_range(&ex.target, 1, n)?;
            ex.edges = fully_connected(n - 1);
            if let Some(c) = &ex.condition {
                ex.condition = Some(node_range(c, 1, n)?);
            }
            ex.control = Some(Control::Subgraph {
                graph,
                cross_edges: None,
            });
        }
    }
    Ok(ex)
}

pub fn pretrain_examples(recs: &[GeometricTrajectory], cfg: &RunConfig) -> Result<Vec<Example>> {
    recs.iter().map(|r| pretrain_example(r, cfg)).collect()
}

pub fn finetune_examples(recs: &[GeometricTrajectory], cfg: &RunConfig) -> Result<Vec<Example>> {
    recs.iter().map(|r| finetune_example(r, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simdata::{simulate_charged, SimParams};

    fn record(frames: usize) -> GeometricTrajectory {
        simulate_charged(4, frames, &SimParams::default(), 7).unwrap()
    }

    #[test]
    fn frame_window_layout() {
        let rec = record(12);
        let cfg = RunConfig::desk();
        let ex = finetune_example(&rec, &cfg).unwrap();
        assert_eq!(ex.target, frame_range(&rec.coords, 4, 12).unwrap());
        match ex.control.unwrap() {
            Control::Frame { coords, .. } => assert_eq!(coords, frame_range(&rec.coords, 0, 4).unwrap()),
            other => panic!("{other:?}"),
        }
        assert!(pretrain_example(&record(11), &cfg).is_err());
    }

    #[test]
    fn subgraph_splits_off_node_zero() {
        let rec = record(12);
        let cfg = RunConfig::parse("control = subgraph").unwrap();
        let ex = finetune_example(&rec, &cfg).unwrap();
        assert_eq!(ex.target.shape(), &[3, 8, 3]);
        assert_eq!(ex.edges.len(), 6);
        let full = frame_range(&rec.coords, 0, 8).unwrap();
        assert_eq!(ex.target.data(), &full.data()[8 * 3..]);
        match ex.control.unwrap() {
            Control::Subgraph { graph, .. } => assert_eq!(graph.coords.data(), &full.data()[..8 * 3]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn global_vector_is_invariant() {
        let rec = record(12);
        let cfg = RunConfig::parse("control = global").unwrap();
        let ex = finetune_example(&rec, &cfg).unwrap();
        let g = RigidMotion::random(3, 2.0);
        let moved = GeometricTrajectory {
            coords: g.apply_points(&rec.coords),
            ..rec.clone()
        };
        let a = match ex.control.unwrap() {
            Control::Global { vector } => vector[0],
            _ => unreachable!(),
        };
        let b = match finetune_example(&moved, &cfg).unwrap().control.unwrap() {
            Control::Global { vector } => vector[0],
            _ => unreachable!(),
        };
        assert!((a - b).abs() <= 1e-12);
    }
}
