//! Geometric controls and the operators that couple them into a noised
//! trajectory and decouple the denoiser output again.
//!
//! A [`CouplingPlan`] is a pair of index maps. Coupled coordinates are
//! gathered from the stacked rows `[input rows; control rows]`, and the
//! decoupled output is gathered back from the coupled rows. The same plan
//! drives value-level coupling and the tape-level adapter.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::exec::mix_seed;
use crate::geometry::{GeometricTrajectory, RigidMotion};
use crate::numerics::{mlp_forward, Activation, Bound, MlpSpec, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FramePosition {
    Prefix,
    Suffix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControlKind {
    Global,
    Subgraph,
    Frame,
}

impl ControlKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlKind::Global => "global",
            ControlKind::Subgraph => "subgraph",
            ControlKind::Frame => "frame",
        }
    }
}

impl std::str::FromStr for ControlKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(ControlKind::Global),
            "subgraph" => Ok(ControlKind::Subgraph),
            "frame" => Ok(ControlKind::Frame),
            other => Err(Error::Config(format!("unknown control `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Control {
    /// A global vector `c̃`, e.g. a one-hot class.
    Global { vector: Vec<f64> },
    /// Extra nodes with their own edges. `graph.coords` has one frame or
    /// as many as the input. `cross_edges` pairs `(input node, control
    /// node)` are linked both ways; `None` links every pair.
    Subgraph {
        graph: GeometricTrajectory,
        cross_edges: Option<Vec<(usize, usize)>>,
    },
    /// Extra frames `N×T̃×3` for the same nodes.
    Frame { coords: Tensor, position: FramePosition },
}

impl Control {
    pub fn kind(&self) -> ControlKind {
        match self {
            Control::Global { .. } => ControlKind::Global,
            Control::Subgraph { .. } => ControlKind::Subgraph,
            Control::Frame { .. } => ControlKind::Frame,
        }
    }

    /// The control with its geometric content moved by `g`.
    pub fn transformed(&self, g: &RigidMotion) -> Control {
        match self {
            Control::Global { .. } => self.clone(),
            Control::Subgraph { graph, cross_edges } => Control::Subgraph {
                graph: crate::geometry::apply_rigid_motion(graph, g),
                cross_edges: cross_edges.clone(),
            },
            Control::Frame { coords, position } => Control::Frame {
                coords: g.apply_points(coords),
                position: *position,
            },
        }
    }

    /// Control coordinates as flat rows, in the order a plan indexes them.
    pub fn coord_rows(&self) -> Vec<f64> {
        match self {
            Control::Global { .. } => Vec::new(),
            Control::Subgraph { graph, .. } => graph.coords.data().to_vec(),
            Control::Frame { coords, .. } => coords.data().to_vec(),
        }
    }
}

fn control_err(variant: &'static str, reason: impl Into<String>) -> Error {
    Error::Control {
        variant,
        reason: reason.into(),
    }
}

/// Index maps between an input graph and its coupled graph.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingPlan {
    pub input_nodes: usize,
    pub input_frames: usize,
    pub n_nodes: usize,
    pub frames: usize,
    /// Coupled node → index into `[input nodes; control nodes]`.
    pub node_source: Arc<[usize]>,
    /// Coupled row → index into `[input rows; control rows]`.
    pub coord_source: Arc<[usize]>,
    /// Input row → coupled row.
    pub keep_rows: Arc<[usize]>,
    pub edges: Vec<(usize, usize)>,
    pub frame_positions: Vec<f64>,
}

/// What [`decouple`] needs to undo a coupling.
pub type CouplingRecord = CouplingPlan;

impl CouplingPlan {
    pub fn identity(n: usize, t: usize, edges: &[(usize, usize)]) -> Self {
        Self {
            input_nodes: n,
            input_frames: t,
            n_nodes: n,
            frames: t,
            node_source: (0..n).collect::<Vec<_>>().into(),
            coord_source: (0..n * t).collect::<Vec<_>>().into(),
            keep_rows: (0..n * t).collect::<Vec<_>>().into(),
            edges: edges.to_vec(),
            frame_positions: (0..t).map(|f| f as f64).collect(),
        }
    }

    /// `T̃` control frames joined to `T` input frames. Input frames keep
    /// positions `0..T`; prefix frames sit at negative positions.
    pub fn frames(n: usize, t: usize, tf: usize, edges: &[(usize, usize)], position: FramePosition) -> Result<Self> {
        if tf == 0 {
            return Err(control_err("frame", "no control frames"));
        }
        let f = t + tf;
        let mut coord_source = Vec::with_capacity(n * f);
        let mut keep = vec![0usize; n * t];
        for i in 0..n {
            for k in 0..f {
                let input_frame = match position {
                    FramePosition::Prefix => k.checked_sub(tf),
                    FramePosition::Suffix => (k < t).then_some(k),
                };
                match input_frame {
                    Some(ti) => {
                        coord_source.push(i * t + ti);
                        keep[i * t + ti] = i * f + k;
                    }
                    None => {
                        let s = match position {
                            FramePosition::Prefix => k,
                            FramePosition::Suffix => k - t,
                        };
                        coord_source.push(n * t + i * tf + s);
                    }
                }
            }
        }
        let frame_positions = (0..f)
            .map(|k| match position {
                FramePosition::Prefix => k as f64 - tf as f64,
                FramePosition::Suffix => k as f64,
            })
            .collect();
        Ok(Self {
            input_nodes: n,
            input_frames: t,
            n_nodes: n,
            frames: f,
            node_source: (0..n).collect::<Vec<_>>().into(),
            coord_source: coord_source.into(),
            keep_rows: keep.into(),
            edges: edges.to_vec(),
            frame_positions,
        })
    }

    /// Input nodes followed by `m` control nodes with `tf ∈ {1, T}` frames.
    pub fn subgraph(
        n: usize,
        t: usize,
        edges: &[(usize, usize)],
        m: usize,
        tf: usize,
        control_edges: &[(usize, usize)],
        cross: Option<&[(usize, usize)]>,
    ) -> Result<Self> {
        if tf != 1 && tf != t {
            return Err(control_err(
                "subgraph",
                format!("control has {tf} frames, input has {t}"),
            ));
        }
        let mut plan = Self::identity(n, t, edges);
        plan.n_nodes = n + m;
        plan.node_source = (0..n + m).collect::<Vec<_>>().into();
        let mut src: Vec<usize> = (0..n * t).collect();
        for k in 0..m {
            for f in 0..t {
                src.push(n * t + k * tf + if tf == 1 { 0 } else { f });
            }
        }
        plan.coord_source = src.into();
        for &(a, b) in control_edges {
            if a >= m || b >= m {
                return Err(control_err("subgraph", format!("control edge ({a}, {b}) out of range")));
            }
            plan.edges.push((n + a, n + b));
        }
        let all: Vec<(usize, usize)>;
        let cross = match cross {
            Some(c) => c,
            None => {
                all = (0..n).flat_map(|i| (0..m).map(move |k| (i, k))).collect();
                &all
            }
        };
        for &(i, k) in cross {
            if i >= n || k >= m {
                return Err(control_err("subgraph", format!("cross edge ({i}, {k}) out of range")));
            }
            plan.edges.push((i, n + k));
            plan.edges.push((n + k, i));
        }
        Ok(plan)
    }

    pub fn for_control(control: &Control, n: usize, t: usize, edges: &[(usize, usize)]) -> Result<Self> {
        match control {
            Control::Global { .. } => Ok(Self::identity(n, t, edges)),
            Control::Subgraph { graph, cross_edges } => Self::subgraph(
                n,
                t,
                edges,
                graph.n_nodes(),
                graph.n_frames(),
                &graph.edges,
                cross_edges.as_deref(),
            ),
            Control::Frame { coords, position } => {
                let s = coords.shape();
                if s.len() != 3 || s[2] != 3 {
                    return Err(control_err("frame", format!("control frames must be N×T̃×3, got {s:?}")));
                }
                if s[0] != n {
                    return Err(control_err(
                        "frame",
                        format!("control has {} nodes, input has {n}", s[0]),
                    ));
                }
                Self::frames(n, t, s[1], edges, *position)
            }
        }
    }
}

/// The perceptron `σ` lifting a global control vector into node-feature space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalEncoder {
    pub prefix: String,
    pub spec: MlpSpec,
}

impl GlobalEncoder {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            spec: MlpSpec::new(&[in_dim, out_dim, out_dim], Activation::Silu),
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng, zero: bool) -> Result<()> {
        self.spec.init(params, &self.prefix, rng, 1.0, true)?;
        if zero {
            for l in 0..self.spec.depth() {
                for suffix in ["w", "b"] {
                    let name = format!("{}.{l}.{suffix}", self.prefix);
                    let shape = params.value(&name)?.shape().to_vec();
                    params.set_value(&name, Tensor::zeros(&shape))?;
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self, params: &ParamSet, vector: &[f64]) -> Result<Vec<f64>> {
        self.check(vector)?;
        mlp_forward(&self.spec.linears(params, &self.prefix)?, vector, self.spec.activation)
    }

    /// `σ(c̃)` as a `1×out` node.
    pub fn record(&self, tape: &mut Tape, bound: &Bound, vector: &[f64]) -> Result<Var> {
        self.check(vector)?;
        let c = tape.constant_owned(1, vector.len(), vector.to_vec());
        self.spec.forward(tape, bound, &self.prefix, c)
    }

    fn check(&self, vector: &[f64]) -> Result<()> {
        if vector.len() != self.spec.in_dim() {
            return Err(control_err(
                "global",
                format!(
                    "vector has length {}, encoder expects {}",
                    vector.len(),
                    self.spec.in_dim()
                ),
            ));
        }
        Ok(())
    }
}

/// Couples `control` into `traj`. A global control needs its encoder.
pub fn couple(
    traj: &GeometricTrajectory,
    control: &Control,
    encoder: Option<(&GlobalEncoder, &ParamSet)>,
) -> Result<(GeometricTrajectory, CouplingRecord)> {
    let (n, t) = (traj.n_nodes(), traj.n_frames());
    let plan = CouplingPlan::for_control(control, n, t, &traj.edges)?;
    let h = traj.feature_dim();
    let features = match control {
        Control::Global { vector } => {
            let (enc, params) = encoder.ok_or_else(|| control_err("global", "no encoder supplied"))?;
            let lift = enc.encode(params, vector)?;
            if lift.len() != h {
                return Err(control_err(
                    "global",
                    format!("encoder output {} vs feature width {h}", lift.len()),
                ));
            }
            Tensor::from_fn(&[n, h], |k| traj.features.data()[k] + lift[k % h])
        }
        Control::Subgraph { graph, .. } => {
            if graph.feature_dim() != h {
                return Err(control_err(
                    "subgraph",
                    format!("control features {} vs input features {h}", graph.feature_dim()),
                ));
            }
            let mut data = traj.features.data().to_vec();
            data.extend_from_slice(graph.features.data());
            Tensor::new(&[plan.n_nodes, h], data)?
        }
        Control::Frame { .. } => traj.features.clone(),
    };
    let mut stacked = traj.coords.data().to_vec();
    stacked.extend(control.coord_rows());
    let mut coords = Vec::with_capacity(plan.coord_source.len() * 3);
    for &r in plan.coord_source.iter() {
        coords.extend_from_slice(&stacked[r * 3..r * 3 + 3]);
    }
    let coords = Tensor::new(&[plan.n_nodes, plan.frames, 3], coords)?;
    let coupled = GeometricTrajectory::new(features, coords, plan.edges.clone())?;
    Ok((coupled, plan))
}

/// Restricts a coupled `N'×F×3` output to the input rows, `N×T×3`.
pub fn decouple(output: &Tensor, record: &CouplingRecord) -> Result<Tensor> {
    if output.shape() != [record.n_nodes, record.frames, 3] {
        return Err(Error::Shape(format!(
            "output {:?} does not match the coupled graph {:?}",
            output.shape(),
            [record.n_nodes, record.frames, 3]
        )));
    }
    let mut out = Vec::with_capacity(record.keep_rows.len() * 3);
    for &r in record.keep_rows.iter() {
        out.extend_from_slice(&output.data()[r * 3..r * 3 + 3]);
    }
    Tensor::new(&[record.input_nodes, record.input_frames, 3], out)
}

/// A denoiser that acts on an arbitrary (coupled) trajectory.
pub trait GraphDenoiser {
    fn denoise_graph(&self, traj: &GeometricTrajectory, frame_positions: &[f64], tau: usize) -> Result<Tensor>;
}

/// Negative control: adds the absolute first-frame coordinates of each node
/// to its features before calling the wrapped denoiser.
pub struct AbsolutePositionLeak<D>(pub D);

impl<D: GraphDenoiser> GraphDenoiser for AbsolutePositionLeak<D> {
    fn denoise_graph(&self, traj: &GeometricTrajectory, frame_positions: &[f64], tau: usize) -> Result<Tensor> {
        let (t, h) = (traj.n_frames(), traj.feature_dim());
        let leaked = Tensor::from_fn(traj.features.shape(), |k| {
            let i = k / h;
            let o = i * t * 3;
            traj.features.data()[k] + traj.coords.data()[o + k % h % 3]
        });
        let mut g = traj.clone();
        g.features = leaked;
        self.0.denoise_graph(&g, frame_positions, tau)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub trials: usize,
    /// Largest `max|R·F(x, C) − F(g·x, g·C)| / max(max|F(x, C)|, 1e-12)`.
    pub max_deviation: f64,
    pub failing_trial: Option<u64>,
    pub passed: bool,
}

fn composed<D: GraphDenoiser + ?Sized>(
    den: &D,
    traj: &GeometricTrajectory,
    control: &Control,
    encoder: Option<(&GlobalEncoder, &ParamSet)>,
    tau: usize,
) -> Result<Tensor> {
    let (coupled, plan) = couple(traj, control, encoder)?;
    let out = den.denoise_graph(&coupled, &plan.frame_positions, tau)?;
    decouple(&out, &plan)
}

/// Checks `g·(g∘ε∘f)(x, C) = (g∘ε∘f)(g·x, g·C)` for the given motions.
pub fn audit_with_motions<D: GraphDenoiser + ?Sized>(
    den: &D,
    traj: &GeometricTrajectory,
    control: &Control,
    encoder: Option<(&GlobalEncoder, &ParamSet)>,
    tau: usize,
    motions: &[(u64, RigidMotion)],
    tol: f64,
) -> Result<AuditReport> {
    let base = composed(den, traj, control, encoder, tau)?;
    let scale = base.max_abs().max(1e-12);
    let mut report = AuditReport {
        trials: motions.len(),
        max_deviation: 0.0,
        failing_trial: None,
        passed: true,
    };
    for (seed, g) in motions {
        let moved = composed(
            den,
            &crate::geometry::apply_rigid_motion(traj, g),
            &control.transformed(g),
            encoder,
            tau,
        )?;
        let dev = moved.max_abs_diff(&g.apply_vectors(&base))? / scale;
        if dev > report.max_deviation {
            report.max_deviation = dev;
        }
        if !(dev <= tol) && report.failing_trial.is_none() {
            report.failing_trial = Some(*seed);
            report.passed = false;
        }
    }
    Ok(report)
}

/// Randomized audit over `trials` rigid motions derived from `seed`.
pub fn audit_coupled<D: GraphDenoiser + ?Sized>(
    den: &D,
    traj: &GeometricTrajectory,
    control: &Control,
    encoder: Option<(&GlobalEncoder, &ParamSet)>,
    tau: usize,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<AuditReport> {
    let motions: Vec<(u64, RigidMotion)> = (0..trials as u64)
        .map(|k| {
            let s = mix_seed(seed, k);
            (s, RigidMotion::random(s, 3.0))
        })
        .collect();
    audit_with_motions(den, traj, control, encoder, tau, &motions, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{DenoiserModel, ModelConfig};
    use crate::exec::seeded_rng;
    use crate::geometry::fully_connected;
    use rand_distr::StandardNormal;

    fn gaussian(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = seeded_rng(seed);
        Tensor::from_fn(shape, |_| rand::Rng::sample::<f64, _>(&mut rng, StandardNormal))
    }

    fn traj(n: usize, t: usize, seed: u64) -> GeometricTrajectory {
        GeometricTrajectory::new(
            gaussian(seed, &[n, 2]),
            gaussian(seed + 1, &[n, t, 3]),
            fully_connected(n),
        )
        .unwrap()
    }

    fn model() -> DenoiserModel {
        DenoiserModel::init(
            ModelConfig {
                hidden: 8,
                time_dim: 8,
                frame_dim: 4,
                attn_dim: 4,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn zero_encoder_is_identity() {
        let x = traj(3, 2, 1);
        let enc = GlobalEncoder::new("enc", 4, 2);
        let mut ps = ParamSet::new();
        enc.init(&mut ps, &mut seeded_rng(0), true).unwrap();
        let c = Control::Global {
            vector: vec![0.0, 1.0, 0.0, 0.0],
        };
        let (y, rec) = couple(&x, &c, Some((&enc, &ps))).unwrap();
        assert_eq!(y, x);
        let out = gaussian(5, &[3, 2, 3]);
        assert_eq!(decouple(&out, &rec).unwrap(), out);
        assert!(couple(&x, &c, None).is_err());
    }

    #[test]
    fn empty_subgraph_is_identity() {
        let x = traj(3, 2, 2);
        let empty = GeometricTrajectory::new(Tensor::zeros(&[0, 2]), Tensor::zeros(&[0, 1, 3]), vec![]).unwrap();
        let c = Control::Subgraph {
            graph: empty,
            cross_edges: None,
        };
        let (y, rec) = couple(&x, &c, None).unwrap();
        assert_eq!(y, x);
        assert_eq!(&*rec.keep_rows, &(0..6).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn subgraph_decouple_keeps_input_rows_in_order() {
        let x = traj(2, 1, 3);
        let g = GeometricTrajectory::new(gaussian(9, &[2, 2]), gaussian(10, &[2, 1, 3]), vec![(0, 1), (1, 0)]).unwrap();
        let c = Control::Subgraph {
            graph: g,
            cross_edges: Some(vec![(0, 1)]),
        };
        let (y, rec) = couple(&x, &c, None).unwrap();
        assert_eq!(y.n_nodes(), 4);
        assert!(y.edges.contains(&(0, 3)) && y.edges.contains(&(3, 0)) && y.edges.contains(&(2, 3)));
        let out = Tensor::from_fn(&[4, 1, 3], |k| k as f64);
        let d = decouple(&out, &rec).unwrap();
        assert_eq!(d.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn subgraph_selection_oracle() {
        // A record that keeps nodes {0, 2} of a 4-node output.
        let mut rec = CouplingPlan::identity(2, 1, &[]);
        rec.n_nodes = 4;
        rec.keep_rows = vec![0, 2].into();
        let out = Tensor::from_fn(&[4, 1, 3], |k| (k / 3) as f64);
        assert_eq!(decouple(&out, &rec).unwrap().data(), &[0.0, 0.0, 0.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn frame_round_trip() {
        let x = traj(3, 2, 4);
        let ctrl = gaussian(11, &[3, 3, 3]);
        for position in [FramePosition::Prefix, FramePosition::Suffix] {
            let c = Control::Frame {
                coords: ctrl.clone(),
                position,
            };
            let (y, rec) = couple(&x, &c, None).unwrap();
            assert_eq!(y.n_frames(), 5);
            assert_eq!(decouple(&y.coords, &rec).unwrap(), x.coords);
        }
        let c = Control::Frame {
            coords: gaussian(12, &[2, 3, 3]),
            position: FramePosition::Prefix,
        };
        assert!(matches!(
            couple(&x, &c, None),
            Err(Error::Control { variant: "frame", .. })
        ));
    }

    #[test]
    fn audits_pass_for_every_variant_and_fail_for_the_leak() {
        let m = model();
        let x = traj(4, 3, 20);
        let enc = GlobalEncoder::new("enc", 3, 2);
        let mut ps = ParamSet::new();
        enc.init(&mut ps, &mut seeded_rng(1), false).unwrap();
        let sub =
            GeometricTrajectory::new(gaussian(21, &[2, 2]), gaussian(22, &[2, 1, 3]), vec![(0, 1), (1, 0)]).unwrap();
        let controls = [
            Control::Global {
                vector: vec![1.0, 0.0, 0.0],
            },
            Control::Subgraph {
                graph: sub,
                cross_edges: None,
            },
            Control::Frame {
                coords: gaussian(23, &[4, 2, 3]),
                position: FramePosition::Prefix,
            },
        ];
        for c in &controls {
            let r = audit_coupled(&m, &x, c, Some((&enc, &ps)), 40, 5, 1e-8, 7).unwrap();
            assert!(r.passed, "{:?}: {}", c.kind(), r.max_deviation);
            let broken = audit_coupled(
                &AbsolutePositionLeak(m.clone()),
                &x,
                c,
                Some((&enc, &ps)),
                40,
                5,
                1e-8,
                7,
            )
            .unwrap();
            assert!(!broken.passed && broken.failing_trial.is_some());
        }
        let id = audit_with_motions(&m, &x, &controls[2], None, 40, &[(0, RigidMotion::identity())], 0.0).unwrap();
        assert_eq!(id.max_deviation, 0.0);
    }
}
