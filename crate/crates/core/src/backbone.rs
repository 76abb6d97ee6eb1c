//! Equivariant message-passing denoiser over trajectories.
//!
//! Coordinates of a trajectory with `N` nodes and `T` frames live on the
//! tape as an `(N·T)×3` matrix whose row `i·T + t` is `x_i^t`. Edges connect
//! nodes within a frame; each layer then mixes frames per node with a
//! scalar attention. Every coordinate update is a relative vector times an
//! invariant scalar.

use std::sync::Arc;

use rand::Rng;

use crate::controls::{CouplingPlan, FramePosition, GraphDenoiser};
use crate::diffusion::{DenoiseInput, Denoiser};
use crate::error::{Error, Result};
use crate::exec::seeded_rng;
use crate::geometry::GeometricTrajectory;
use crate::numerics::{Activation, Bound, MlpSpec, ParamSet, Tape, Tensor, Var};

const ANCHOR_HIDDEN: usize = 8;

/// Sinusoidal embedding of a diffusion step: `dim/2` sines followed by
/// `dim/2` cosines at geometrically spaced frequencies.
pub fn time_embed(tau: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Invalid(format!(
            "embedding dim must be even and positive, got {dim}"
        )));
    }
    Ok(sinusoid(tau as f64, dim))
}

pub(crate) fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freq = |k: usize| (-(10_000f64.ln()) * k as f64 / half as f64).exp();
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|k| (pos * freq(k)).sin()));
    out.extend((0..half).map(|k| (pos * freq(k)).cos()));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Uncond,
    Cond,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Uncond => "uncond",
            TaskKind::Cond => "cond",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncond" => Ok(TaskKind::Uncond),
            "cond" => Ok(TaskKind::Cond),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: TaskKind,
    /// Raw node-feature width `H`.
    pub feature_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub time_dim: usize,
    pub frame_dim: usize,
    pub attn_dim: usize,
    /// Predicted frames `T`.
    pub frames: usize,
    /// Condition frames `T_c`; only used by conditional models.
    pub cond_frames: usize,
    pub diffusion_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Uncond,
            feature_dim: 2,
            hidden: 32,
            layers: 2,
            time_dim: 32,
            frame_dim: 8,
            attn_dim: 8,
            frames: 8,
            cond_frames: 0,
            diffusion_steps: 100,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("attn_dim", self.attn_dim),
            ("frames", self.frames),
            ("diffusion_steps", self.diffusion_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("time_dim", self.time_dim), ("frame_dim", self.frame_dim)] {
            if v == 0 || v % 2 != 0 {
                return Err(Error::Config(format!("{name} must be even and positive, got {v}")));
            }
        }
        if self.kind == TaskKind::Cond && self.cond_frames == 0 {
            return Err(Error::Config("a conditional model needs cond_frames ≥ 1".into()));
        }
        Ok(())
    }

    pub fn layer_spec(&self) -> LayerSpec {
        LayerSpec {
            hidden: self.hidden,
            time_dim: self.time_dim,
            frame_dim: self.frame_dim,
            attn_dim: self.attn_dim,
        }
    }
}

/// Index maps for message passing on `N` nodes over `F` frames.
#[derive(Clone, Debug)]
pub struct Topology {
    n: usize,
    frames: usize,
    edge_src_node: Arc<[usize]>,
    edge_dst_node: Arc<[usize]>,
    edge_src_row: Arc<[usize]>,
    edge_dst_row: Arc<[usize]>,
    edge_frame: Vec<usize>,
    edge_inv_degree: Vec<f64>,
    pair_query: Arc<[usize]>,
    pair_key: Arc<[usize]>,
    row_node: Arc<[usize]>,
}

impl Topology {
    /// Edge `(i, j)` carries a message from `j` into `i`.
    pub fn new(n: usize, frames: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Shape("topology needs at least one frame".into()));
        }
        let mut degree = vec![0usize; n];
        for &(i, j) in edges {
            if i >= n || j >= n || i == j {
                return Err(Error::Shape(format!("bad edge ({i}, {j}) for {n} nodes")));
            }
            degree[i] += 1;
        }
        let e = edges.len() * frames;
        let (mut sn, mut dn, mut sr, mut dr, mut ef, mut inv) = (
            Vec::with_capacity(e),
            Vec::with_capacity(e),
            Vec::with_capacity(e),
            Vec::with_capacity(e),
            Vec::with_capacity(e),
            Vec::with_capacity(e),
        );
        for &(i, j) in edges {
            for t in 0..frames {
                sn.push(i);
                dn.push(j);
                sr.push(i * frames + t);
                dr.push(j * frames + t);
                ef.push(t);
                inv.push(1.0 / degree[i] as f64);
            }
        }
        let mut pq = Vec::with_capacity(n * frames * frames);
        let mut pk = Vec::with_capacity(n * frames * frames);
        for i in 0..n {
            for t in 0..frames {
                for s in 0..frames {
                    pq.push(i * frames + t);
                    pk.push(i * frames + s);
                }
            }
        }
        let row_node: Vec<usize> = (0..n * frames).map(|r| r / frames).collect();
        Ok(Self {
            n,
            frames,
            edge_src_node: sn.into(),
            edge_dst_node: dn.into(),
            edge_src_row: sr.into(),
            edge_dst_row: dr.into(),
            edge_frame: ef,
            edge_inv_degree: inv,
            pair_query: pq.into(),
            pair_key: pk.into(),
            row_node: row_node.into(),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn rows(&self) -> usize {
        self.n * self.frames
    }

    pub fn edge_rows(&self) -> usize {
        self.edge_frame.len()
    }
}

/// Per-edge-row invariant context: `[time embedding, frame embedding]`.
pub fn edge_context(
    topo: &Topology,
    tau: usize,
    frame_positions: &[f64],
    time_dim: usize,
    frame_dim: usize,
) -> Result<Tensor> {
    if frame_positions.len() != topo.frames {
        return Err(Error::Shape(format!(
            "{} frame positions for {} frames",
            frame_positions.len(),
            topo.frames
        )));
    }
    let te = time_embed(tau, time_dim)?;
    let fe: Vec<Vec<f64>> = frame_positions.iter().map(|&p| sinusoid(p, frame_dim)).collect();
    let w = time_dim + frame_dim;
    let mut data = Vec::with_capacity(topo.edge_rows() * w);
    for &f in &topo.edge_frame {
        data.extend_from_slice(&te);
        data.extend_from_slice(&fe[f]);
    }
    Ok(Tensor::from_parts(vec![topo.edge_rows(), w], data))
}

/// Frame positions `0, 1, …, T−1`.
pub fn default_positions(frames: usize) -> Vec<f64> {
    (0..frames).map(|t| t as f64).collect()
}

/// Shapes of one equivariant layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub hidden: usize,
    pub time_dim: usize,
    pub frame_dim: usize,
    pub attn_dim: usize,
}

impl LayerSpec {
    fn msg(&self) -> MlpSpec {
        let d = 2 * self.hidden + 1 + self.time_dim + self.frame_dim;
        MlpSpec::new(&[d, self.hidden, self.hidden], Activation::Silu)
    }

    fn coord(&self) -> MlpSpec {
        MlpSpec::new(&[self.hidden, self.hidden, 1], Activation::Silu)
    }

    fn feat(&self) -> MlpSpec {
        MlpSpec::new(&[2 * self.hidden, self.hidden, self.hidden], Activation::Silu)
    }

    pub fn init(&self, params: &mut ParamSet, prefix: &str, rng: &mut impl Rng, trainable: bool) -> Result<()> {
        self.msg().init(params, &format!("{prefix}.msg"), rng, 1.0, trainable)?;
        self.coord()
            .init(params, &format!("{prefix}.coord"), rng, 0.5, trainable)?;
        self.feat()
            .init(params, &format!("{prefix}.feat"), rng, 1.0, trainable)?;
        let a = self.attn_dim;
        let h = self.hidden;
        let std = 1.0 / (h as f64).sqrt();
        for (name, cols) in [("q", a), ("k", a), ("v", 1)] {
            let w = Tensor::from_fn(&[h, cols], |_| std * rng.sample::<f64, _>(rand_distr::StandardNormal));
            params.insert(format!("{prefix}.attn.{name}"), w, trainable)?;
        }
        Ok(())
    }

    /// Parameter-name suffixes (after the prefix) of one layer.
    pub fn suffixes(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (net, spec) in [("msg", self.msg()), ("coord", self.coord()), ("feat", self.feat())] {
            for l in 0..spec.depth() {
                out.push(format!("{net}.{l}.w"));
                out.push(format!("{net}.{l}.b"));
            }
        }
        out.extend(["attn.q", "attn.k", "attn.v"].map(String::from));
        out
    }

    /// Records one layer. `h` is `N×hidden`, `x` is `(N·F)×3`, `ctx` is the
    /// edge context. Returns the updated features and the displacement.
    pub fn record(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        topo: &Topology,
        ctx: Var,
        h: Var,
        x: Var,
    ) -> Result<(Var, Var)> {
        let rows = topo.rows();
        if tape.shape(h) != (topo.n, self.hidden) || tape.shape(x) != (rows, 3) {
            return Err(Error::Shape(format!(
                "layer input h {:?}, x {:?} for {} nodes × {} frames",
                tape.shape(h),
                tape.shape(x),
                topo.n,
                topo.frames
            )));
        }
        let hi = tape.gather_rows(h, topo.edge_src_node.clone())?;
        let hj = tape.gather_rows(h, topo.edge_dst_node.clone())?;
        let xi = tape.gather_rows(x, topo.edge_src_row.clone())?;
        let xj = tape.gather_rows(x, topo.edge_dst_row.clone())?;
        let diff = tape.sub(xi, xj)?;
        let sq = tape.mul(diff, diff)?;
        let d2 = tape.row_sum(sq);
        let inp = tape.concat_cols(&[hi, hj, d2, ctx])?;
        let pre = self.msg().forward(tape, bound, &format!("{prefix}.msg"), inp)?;
        let m = tape.silu(pre);

        let c = self.coord().forward(tape, bound, &format!("{prefix}.coord"), m)?;
        let inv = tape.constant_owned(topo.edge_rows(), 1, topo.edge_inv_degree.clone());
        let w = tape.mul(c, inv)?;
        let damp = tape.inv_sqrt1p(d2)?;
        let w = tape.mul(w, damp)?;
        let wd = tape.mul_col(diff, w)?;
        let d = tape.scatter_add_rows(wd, topo.edge_src_row.clone(), rows)?;
        let msum = tape.scatter_add_rows(m, topo.edge_src_row.clone(), rows)?;

        let wq = bound.get(&format!("{prefix}.attn.q"))?;
        let wk = bound.get(&format!("{prefix}.attn.k"))?;
        let wv = bound.get(&format!("{prefix}.attn.v"))?;
        let q = tape.matmul(msum, wq)?;
        let k = tape.matmul(msum, wk)?;
        let qg = tape.gather_rows(q, topo.pair_query.clone())?;
        let kg = tape.gather_rows(k, topo.pair_key.clone())?;
        let qk = tape.mul(qg, kg)?;
        let logits = tape.row_sum(qk);
        let logits = tape.scale(logits, 1.0 / (self.attn_dim as f64).sqrt());
        let a = tape.segment_softmax(logits, topo.frames)?;

        let ds = tape.gather_rows(d, topo.pair_key.clone())?;
        let ds = tape.mul_col(ds, a)?;
        let dmix = tape.scatter_add_rows(ds, topo.pair_query.clone(), rows)?;
        let xs = tape.gather_rows(x, topo.pair_key.clone())?;
        let xt = tape.gather_rows(x, topo.pair_query.clone())?;
        let rel = tape.sub(xs, xt)?;
        let rel = tape.mul_col(rel, a)?;
        let rmix = tape.scatter_add_rows(rel, topo.pair_query.clone(), rows)?;
        let v = tape.matmul(msum, wv)?;
        let v = tape.scale(v, 2.0);
        let v = tape.sigmoid(v);
        let v = tape.scale(v, 2.0);
        let one = tape.constant_owned(rows, 1, vec![1.0; rows]);
        let v = tape.sub(v, one)?;
        let rmix = tape.mul_col(rmix, v)?;
        let dx = tape.add(d, dmix)?;
        let dx = tape.add(dx, rmix)?;

        let mnode = tape.scatter_add_rows(msum, topo.row_node.clone(), topo.n)?;
        let mnode = tape.scale(mnode, 1.0 / topo.frames as f64);
        let fin = tape.concat_cols(&[h, mnode])?;
        let upd = self.feat().forward(tape, bound, &format!("{prefix}.feat"), fin)?;
        let h2 = tape.add(h, upd)?;
        Ok((h2, dx))
    }
}

/// Value-level single layer on a trajectory whose features already have
/// the hidden width. Returns `(features N×hidden, displacements N×T×3)`.
pub fn layer_forward(
    params: &ParamSet,
    prefix: &str,
    spec: &LayerSpec,
    traj: &GeometricTrajectory,
    tau: usize,
    frame_positions: &[f64],
) -> Result<(Tensor, Tensor)> {
    let (n, f) = (traj.n_nodes(), traj.n_frames());
    let topo = Topology::new(n, f, &traj.edges)?;
    let mut tape = Tape::new();
    let bound = tape.bind_frozen(params);
    let ctx = edge_context(&topo, tau, frame_positions, spec.time_dim, spec.frame_dim)?;
    let ctx = tape.constant(&ctx);
    let h = tape.constant(&traj.features);
    let x = tape.constant_owned(n * f, 3, traj.coords.data().to_vec());
    let (h2, dx) = spec.record(&mut tape, &bound, prefix, &topo, ctx, h, x)?;
    Ok((tape.value(h2), tape.value(dx).reshape(&[n, f, 3])?))
}

/// The base denoiser `ε_θ` with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    config: ModelConfig,
    params: ParamSet,
}

pub fn layer_prefix(k: usize) -> String {
    format!("layer{k}")
}

impl DenoiserModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamSet::new();
        MlpSpec::new(&[config.feature_dim, config.hidden], Activation::Identity).init(
            &mut params,
            "embed",
            &mut rng,
            1.0,
            true,
        )?;
        let spec = config.layer_spec();
        for k in 0..config.layers {
            spec.init(&mut params, &layer_prefix(k), &mut rng, true)?;
        }
        if config.kind == TaskKind::Cond {
            params.insert("anchor.gamma", Tensor::zeros(&[config.frames, 1]), true)?;
            MlpSpec::new(&[config.feature_dim + 1, ANCHOR_HIDDEN, 1], Activation::Silu).init(
                &mut params,
                "anchor.h",
                &mut rng,
                1.0,
                true,
            )?;
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against a freshly laid-out model of the same config.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let layout = Self::init(config.clone(), 0)?;
        if layout.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                layout.params.len(),
                params.len()
            )));
        }
        for p in layout.params.iter() {
            let got = params
                .get(&p.name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{}`", p.name)))?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    got.value.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn freeze(&mut self) {
        self.params.freeze_all();
    }

    fn check_tau(&self, tau: usize) -> Result<()> {
        if tau > self.config.diffusion_steps {
            return Err(Error::Invalid(format!(
                "diffusion step {tau} outside 0..={}",
                self.config.diffusion_steps
            )));
        }
        Ok(())
    }

    /// Hidden node features `N×hidden` from raw features `N×H`.
    pub fn record_embed(&self, tape: &mut Tape, bound: &Bound, features: &Tensor) -> Result<Var> {
        if features.cols() != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "model expects {} feature columns, got {}",
                self.config.feature_dim,
                features.cols()
            )));
        }
        let f = tape.constant(features);
        MlpSpec::new(&[self.config.feature_dim, self.config.hidden], Activation::Identity)
            .forward(tape, bound, "embed", f)
    }

    /// Sum of all layer displacements on a (possibly coupled) graph.
    pub fn record_trunk(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        topo: &Topology,
        ctx: Var,
        h0: Var,
        x0: Var,
    ) -> Result<Var> {
        let spec = self.config.layer_spec();
        let (mut h, mut x) = (h0, x0);
        let mut total: Option<Var> = None;
        for k in 0..self.config.layers {
            let (h2, dx) = spec.record(tape, bound, &layer_prefix(k), topo, ctx, h, x)?;
            h = h2;
            x = tape.add(x, dx)?;
            total = Some(match total {
                None => dx,
                Some(t) => tape.add(t, dx)?,
            });
        }
        Ok(total.expect("at least one layer"))
    }

    fn record_context(&self, tape: &mut Tape, topo: &Topology, tau: usize, positions: &[f64]) -> Result<Var> {
        let ctx = edge_context(topo, tau, positions, self.config.time_dim, self.config.frame_dim)?;
        Ok(tape.constant(&ctx))
    }

    /// Anchor `x_r` as an `(N·T)×3` node for conditional models.
    pub fn record_anchor_mean(&self, tape: &mut Tape, bound: &Bound, features: &Tensor, cond: &Tensor) -> Result<Var> {
        let (n, tc) = check_condition(cond, features.rows(), self.config.cond_frames)?;
        let t = self.config.frames;
        let c = cond.data();
        let last: Vec<f64> = (0..n)
            .flat_map(|i| {
                let o = (i * tc + tc - 1) * 3;
                c[o..o + 3].to_vec()
            })
            .collect();
        let rows_nt: Arc<[usize]> = (0..n * t).map(|r| r / t).collect::<Vec<_>>().into();
        let last = tape.constant_owned(n, 3, last);
        let base = tape.gather_rows(last, rows_nt.clone())?;
        if tc == 1 {
            return Ok(base);
        }
        let m = tc - 1;
        let h = features.cols();
        let mut inp = Vec::with_capacity(n * m * (h + 1));
        let mut rel = Vec::with_capacity(n * m * 3);
        for i in 0..n {
            for s in 0..m {
                inp.extend_from_slice(&features.data()[i * h..(i + 1) * h]);
                inp.push(anchor_offset(s, tc));
                for d in 0..3 {
                    rel.push(c[(i * tc + s) * 3 + d] - c[(i * tc + tc - 1) * 3 + d]);
                }
            }
        }
        let inp = tape.constant_owned(n * m, h + 1, inp);
        let logit = MlpSpec::new(&[h + 1, ANCHOR_HIDDEN, 1], Activation::Silu).forward(tape, bound, "anchor.h", inp)?;
        let hhat = tape.sigmoid(logit);
        let rel = tape.constant_owned(n * m, 3, rel);
        let wrel = tape.mul_col(rel, hhat)?;
        let node_of: Arc<[usize]> = (0..n * m).map(|r| r / m).collect::<Vec<_>>().into();
        let dsum = tape.scatter_add_rows(wrel, node_of, n)?;
        let dsum = tape.gather_rows(dsum, rows_nt)?;
        let gamma = bound.get("anchor.gamma")?;
        let frame_of: Arc<[usize]> = (0..n * t).map(|r| r % t).collect::<Vec<_>>().into();
        let g = tape.gather_rows(gamma, frame_of)?;
        let shift = tape.mul_col(dsum, g)?;
        tape.add(base, shift)
    }

    /// Anchor weights `ĥ` per node and non-last condition frame (`N×(T_c−1)`).
    pub fn anchor_features(&self, features: &Tensor) -> Result<Tensor> {
        let tc = self.config.cond_frames;
        let (n, h) = (features.rows(), features.cols());
        let m = tc.saturating_sub(1);
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&self.params);
        let mut inp = Vec::with_capacity(n * m * (h + 1));
        for i in 0..n {
            for s in 0..m {
                inp.extend_from_slice(&features.data()[i * h..(i + 1) * h]);
                inp.push(anchor_offset(s, tc));
            }
        }
        if m == 0 {
            return Ok(Tensor::zeros(&[n, 0]));
        }
        let inp = tape.constant_owned(n * m, h + 1, inp);
        let logit =
            MlpSpec::new(&[h + 1, ANCHOR_HIDDEN, 1], Activation::Silu).forward(&mut tape, &bound, "anchor.h", inp)?;
        let hhat = tape.sigmoid(logit);
        tape.value(hhat).reshape(&[n, m])
    }
}

/// Offset of condition frame `s` from the last one, as seen by `ĥ`.
fn anchor_offset(s: usize, tc: usize) -> f64 {
    s as f64 - (tc - 1) as f64
}

pub(crate) fn check_condition(cond: &Tensor, n: usize, tc: usize) -> Result<(usize, usize)> {
    let s = cond.shape();
    if s.len() != 3 || s[0] != n || s[1] != tc || s[2] != 3 || tc == 0 {
        return Err(Error::Shape(format!("condition frames must be {n}×{tc}×3, got {s:?}")));
    }
    Ok((n, tc))
}

impl Denoiser for DenoiserModel {
    fn bind(&self, tape: &mut Tape) -> Bound {
        tape.bind(&self.params)
    }

    fn conditional(&self) -> bool {
        self.config.kind == TaskKind::Cond
    }

    fn max_tau(&self) -> usize {
        self.config.diffusion_steps
    }

    fn record(&self, tape: &mut Tape, bound: &Bound, input: &DenoiseInput, x: Var, tau: usize) -> Result<Var> {
        self.check_tau(tau)?;
        let n = input.features.rows();
        let t = input.frames;
        if tape.shape(x) != (n * t, 3) {
            return Err(Error::Shape(format!(
                "noised coordinates {:?}, expected {:?}",
                tape.shape(x),
                (n * t, 3)
            )));
        }
        let h0 = self.record_embed(tape, bound, input.features)?;
        match self.config.kind {
            TaskKind::Uncond => {
                let topo = Topology::new(n, t, input.edges)?;
                let ctx = self.record_context(tape, &topo, tau, &default_positions(t))?;
                let out = self.record_trunk(tape, bound, &topo, ctx, h0, x)?;
                Ok(tape.center_rows(out))
            }
            TaskKind::Cond => {
                let cond = input
                    .condition
                    .ok_or_else(|| Error::Invalid("conditional model called without condition frames".into()))?;
                let (_, tc) = check_condition(cond, n, self.config.cond_frames)?;
                let plan = CouplingPlan::frames(n, t, tc, input.edges, FramePosition::Prefix)?;
                let c = tape.constant_owned(n * tc, 3, cond.data().to_vec());
                let src = tape.concat_rows(&[x, c])?;
                let xc = tape.gather_rows(src, plan.coord_source.clone())?;
                let topo = Topology::new(plan.n_nodes, plan.frames, &plan.edges)?;
                let ctx = self.record_context(tape, &topo, tau, &plan.frame_positions)?;
                let out = self.record_trunk(tape, bound, &topo, ctx, h0, xc)?;
                tape.gather_rows(out, plan.keep_rows.clone())
            }
        }
    }

    fn record_anchor(&self, tape: &mut Tape, bound: &Bound, input: &DenoiseInput) -> Result<Option<Var>> {
        match self.config.kind {
            TaskKind::Uncond => Ok(None),
            TaskKind::Cond => {
                let cond = input
                    .condition
                    .ok_or_else(|| Error::Invalid("conditional model called without condition frames".into()))?;
                self.record_anchor_mean(tape, bound, input.features, cond).map(Some)
            }
        }
    }
}

impl GraphDenoiser for DenoiserModel {
    fn denoise_graph(&self, traj: &GeometricTrajectory, frame_positions: &[f64], tau: usize) -> Result<Tensor> {
        self.check_tau(tau)?;
        let (n, f) = (traj.n_nodes(), traj.n_frames());
        let topo = Topology::new(n, f, &traj.edges)?;
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&self.params);
        let h0 = self.record_embed(&mut tape, &bound, &traj.features)?;
        let x = tape.constant_owned(n * f, 3, traj.coords.data().to_vec());
        let ctx = self.record_context(&mut tape, &topo, tau, frame_positions)?;
        let out = self.record_trunk(&mut tape, &bound, &topo, ctx, h0, x)?;
        let out = tape.center_rows(out);
        tape.value(out).reshape(&[n, f, 3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_rigid_motion, fully_connected, RigidMotion};
    use rand_distr::StandardNormal;

    fn gaussian(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = seeded_rng(seed);
        Tensor::from_fn(shape, |_| rand::Rng::sample::<f64, _>(&mut rng, StandardNormal))
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            time_dim: 8,
            frame_dim: 4,
            attn_dim: 4,
            frames: 3,
            ..ModelConfig::default()
        }
    }

    fn hidden_traj(seed: u64, n: usize, t: usize, hidden: usize) -> GeometricTrajectory {
        GeometricTrajectory::new(
            gaussian(seed, &[n, hidden]),
            gaussian(seed + 1, &[n, t, 3]),
            fully_connected(n),
        )
        .unwrap()
    }

    #[test]
    fn time_embedding_cases() {
        let e = time_embed(0, 8).unwrap();
        assert!(e[..4].iter().all(|&v| v == 0.0));
        assert!(e[4..].iter().all(|&v| v == 1.0));
        assert_eq!(time_embed(37, 32).unwrap(), time_embed(37, 32).unwrap());
        assert!(time_embed(3, 7).is_err());
        let v: Vec<Vec<f64>> = [1, 500, 1000].iter().map(|&t| time_embed(t, 32).unwrap()).collect();
        for a in 0..3 {
            for b in a + 1..3 {
                let gap: f64 = v[a].iter().zip(&v[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!(gap > 0.01);
            }
        }
    }

    #[test]
    fn zero_nets_give_zero_displacement() {
        let cfg = small_config();
        let spec = cfg.layer_spec();
        let mut params = ParamSet::new();
        spec.init(&mut params, "l", &mut seeded_rng(0), true).unwrap();
        let names: Vec<String> = params.names().map(String::from).collect();
        for name in names {
            let shape = params.value(&name).unwrap().shape().to_vec();
            params.set_value(&name, Tensor::zeros(&shape)).unwrap();
        }
        let traj = hidden_traj(1, 4, 3, cfg.hidden);
        let (h, dx) = layer_forward(&params, "l", &spec, &traj, 5, &default_positions(3)).unwrap();
        assert_eq!(dx.max_abs(), 0.0);
        assert_eq!(h, traj.features);
    }

    #[test]
    fn lone_node_does_not_move() {
        let cfg = small_config();
        let spec = cfg.layer_spec();
        let mut params = ParamSet::new();
        spec.init(&mut params, "l", &mut seeded_rng(2), true).unwrap();
        let traj = GeometricTrajectory::new(gaussian(3, &[1, cfg.hidden]), gaussian(4, &[1, 3, 3]), vec![]).unwrap();
        let (_, dx) = layer_forward(&params, "l", &spec, &traj, 5, &default_positions(3)).unwrap();
        assert_eq!(dx.max_abs(), 0.0);
    }

    #[test]
    fn layer_is_equivariant() {
        let cfg = small_config();
        let spec = cfg.layer_spec();
        let mut params = ParamSet::new();
        spec.init(&mut params, "l", &mut seeded_rng(5), true).unwrap();
        for seed in 0..10 {
            let traj = hidden_traj(100 + seed, 5, 3, cfg.hidden);
            let g = RigidMotion::random(seed, 3.0);
            let pos = default_positions(3);
            let (h, dx) = layer_forward(&params, "l", &spec, &traj, 7, &pos).unwrap();
            let (hg, dxg) = layer_forward(&params, "l", &spec, &apply_rigid_motion(&traj, &g), 7, &pos).unwrap();
            let rotated = g.apply_vectors(&dx);
            let rel = dxg.max_abs_diff(&rotated).unwrap() / dx.max_abs().max(1e-12);
            assert!(rel <= 1e-8, "{rel}");
            assert!(hg.max_abs_diff(&h).unwrap() <= 1e-10);
        }
    }

    fn model_output(model: &DenoiserModel, feats: &Tensor, x: &Tensor, tau: usize, cond: Option<&Tensor>) -> Tensor {
        let n = feats.rows();
        let edges = fully_connected(n);
        let input = DenoiseInput {
            features: feats,
            edges: &edges,
            frames: model.config().frames,
            condition: cond,
            control: None,
        };
        model.predict(&input, x, tau).unwrap()
    }

    #[test]
    fn model_is_equivariant_and_mean_free() {
        let model = DenoiserModel::init(small_config(), 11).unwrap();
        let feats = gaussian(12, &[4, 2]);
        for seed in 0..5 {
            let x = gaussian(20 + seed, &[4, 3, 3]);
            let g = RigidMotion::random(seed, 4.0);
            let out = model_output(&model, &feats, &x, 30, None);
            let outg = model_output(&model, &feats, &g.apply_points(&x), 30, None);
            let rel = outg.max_abs_diff(&g.apply_vectors(&out)).unwrap() / out.max_abs();
            assert!(rel <= 1e-8, "{rel}");
            let m = crate::geometry::center_of_mass(&out).unwrap();
            assert!(m.iter().all(|v| v.abs() <= 1e-10));
        }
    }

    #[test]
    fn conditional_model_is_equivariant() {
        let cfg = ModelConfig {
            kind: TaskKind::Cond,
            cond_frames: 2,
            ..small_config()
        };
        let mut model = DenoiserModel::init(cfg, 13).unwrap();
        model
            .params_mut()
            .set_value("anchor.gamma", gaussian(1, &[3, 1]))
            .unwrap();
        let feats = gaussian(14, &[3, 2]);
        let x = gaussian(15, &[3, 3, 3]);
        let c = gaussian(16, &[3, 2, 3]);
        let g = RigidMotion::random(9, 2.0);
        let out = model_output(&model, &feats, &x, 10, Some(&c));
        let outg = model_output(&model, &feats, &g.apply_points(&x), 10, Some(&g.apply_points(&c)));
        let rel = outg.max_abs_diff(&g.apply_vectors(&out)).unwrap() / out.max_abs();
        assert!(rel <= 1e-8, "{rel}");
    }

    #[test]
    fn permuting_nodes_permutes_outputs() {
        let model = DenoiserModel::init(small_config(), 17).unwrap();
        let n = 4;
        let feats = gaussian(18, &[n, 2]);
        let x = gaussian(19, &[n, 3, 3]);
        let perm = [2, 0, 3, 1];
        let pf = Tensor::from_fn(&[n, 2], |k| feats.data()[perm[k / 2] * 2 + k % 2]);
        let px = Tensor::from_fn(&[n, 3, 3], |k| x.data()[perm[k / 9] * 9 + k % 9]);
        let out = model_output(&model, &feats, &x, 4, None);
        let pout = model_output(&model, &pf, &px, 4, None);
        for i in 0..n {
            for k in 0..9 {
                assert!((pout.data()[i * 9 + k] - out.data()[perm[i] * 9 + k]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn evaluation_leaves_parameters_alone() {
        let model = DenoiserModel::init(small_config(), 21).unwrap();
        let before = model.params().blob();
        let feats = gaussian(22, &[3, 2]);
        for s in 0..3 {
            model_output(&model, &feats, &gaussian(s, &[3, 3, 3]), 1, None);
        }
        assert_eq!(model.params().blob(), before);
    }

    #[test]
    fn step_out_of_range_is_rejected() {
        let model = DenoiserModel::init(small_config(), 23).unwrap();
        let feats = gaussian(24, &[3, 2]);
        let edges = fully_connected(3);
        let input = DenoiseInput {
            features: &feats,
            edges: &edges,
            frames: 3,
            condition: None,
            control: None,
        };
        assert!(model.predict(&input, &gaussian(1, &[3, 3, 3]), 101).is_err());
    }
}
