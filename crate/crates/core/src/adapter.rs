//! Adapter blocks on a frozen base denoiser.
//!
//! Each block couples the control into the noised graph, runs a trainable
//! copy of one base layer, decouples back to the input rows and applies an
//! equivariant zero-convolution. Block outputs are summed and added to the
//! base prediction.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::backbone::{edge_context, layer_prefix, DenoiserModel, LayerSpec, Topology};
use crate::controls::{Control, ControlKind, CouplingPlan, GlobalEncoder};
use crate::diffusion::{batch_loss, DenoiseInput, Denoiser, NoiseSchedule, TrainItem};
use crate::error::{Error, Result};
use crate::exec::seeded_rng;
use crate::geometry::com_project;
use crate::numerics::{adam_step, Bound, OptimizerState, ParamSet, Tape, Tensor, Var};

/// `(φ_x, φ_h)` of one zero-convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroConv {
    pub phi_x: f64,
    pub phi_h: Vec<f64>,
}

impl ZeroConv {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            phi_x: 0.0,
            phi_h: vec![0.0; hidden],
        }
    }
}

/// `(φ_x·(x_i − x̄), φ_h ⊙ h_i)` with `x̄` the mean over all coordinate rows.
pub fn zero_conv_apply(coords: &Tensor, feats: &Tensor, zc: &ZeroConv) -> Result<(Tensor, Tensor)> {
    if feats.cols() != zc.phi_h.len() {
        return Err(Error::Shape(format!(
            "features have {} columns, φ_h has {}",
            feats.cols(),
            zc.phi_h.len()
        )));
    }
    let x = com_project(coords).scale(zc.phi_x);
    let h = feats.cols();
    let f = Tensor::from_fn(feats.shape(), |k| zc.phi_h[k % h] * feats.data()[k]);
    Ok((x, f))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CopyStrategy {
    /// Every `K`-th layer from the bottom, `K = ⌊depth/B⌋`.
    Strided,
    First,
    Last,
}

impl CopyStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            CopyStrategy::Strided => "strided",
            CopyStrategy::First => "first",
            CopyStrategy::Last => "last",
        }
    }
}

impl std::str::FromStr for CopyStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strided" => Ok(CopyStrategy::Strided),
            "first" => Ok(CopyStrategy::First),
            "last" => Ok(CopyStrategy::Last),
            other => Err(Error::Config(format!("unknown copy strategy `{other}`"))),
        }
    }
}

pub fn select_copy_layers(depth: usize, budget: usize, strategy: CopyStrategy) -> Result<Vec<usize>> {
    if budget == 0 || budget > depth {
        return Err(Error::Invalid(format!(
            "adapter budget {budget} must be in 1..={depth}"
        )));
    }
    Ok(match strategy {
        CopyStrategy::Strided => {
            let k = depth / budget;
            (0..budget).map(|b| b * k).collect()
        }
        CopyStrategy::First => (0..budget).collect(),
        CopyStrategy::Last => (depth - budget..depth).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    Standard,
    NoZeroConv,
    NoTrainableCopy,
}

impl AblationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Standard => "standard",
            AblationMode::NoZeroConv => "no_zero_conv",
            AblationMode::NoTrainableCopy => "no_trainable_copy",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(AblationMode::Standard),
            "no_zero_conv" => Ok(AblationMode::NoZeroConv),
            "no_trainable_copy" => Ok(AblationMode::NoTrainableCopy),
            other => Err(Error::Config(format!("unknown ablation mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    pub blocks: usize,
    pub strategy: CopyStrategy,
    pub control: ControlKind,
    pub ablation: AblationMode,
    /// Length `K` of a global control vector.
    pub global_dim: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            blocks: 1,
            strategy: CopyStrategy::Strided,
            control: ControlKind::Frame,
            ablation: AblationMode::Standard,
            global_dim: 1,
        }
    }
}

const NO_ZERO_CONV_STD: f64 = 0.01;

fn block_prefix(b: usize) -> String {
    format!("block{b}")
}

/// Trainable layer copies, zero-convolutions and control encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterStack {
    config: AdapterConfig,
    source_layers: Vec<usize>,
    spec: LayerSpec,
    params: ParamSet,
}

impl AdapterStack {
    pub fn new(base: &DenoiserModel, config: AdapterConfig, seed: u64) -> Result<Self> {
        let source_layers = select_copy_layers(base.config().layers, config.blocks, config.strategy)?;
        let spec = base.config().layer_spec();
        let mut stack = Self {
            config: config.clone(),
            source_layers,
            spec,
            params: ParamSet::new(),
        };
        stack.populate(base, config.ablation, seed)?;
        Ok(stack)
    }

    fn populate(&mut self, base: &DenoiserModel, mode: AblationMode, seed: u64) -> Result<()> {
        let mut rng = seeded_rng(seed);
        let mut params = ParamSet::new();
        let hidden = self.spec.hidden;
        for (b, &src) in self.source_layers.iter().enumerate() {
            let bp = block_prefix(b);
            let copy = format!("{bp}.copy");
            match mode {
                AblationMode::NoTrainableCopy => self.spec.init(&mut params, &copy, &mut rng, true)?,
                _ => {
                    for s in self.spec.suffixes() {
                        let v = base.params().value(&format!("{}.{s}", layer_prefix(src)))?.clone();
                        params.insert(format!("{copy}.{s}"), v, true)?;
                    }
                }
            }
            let (px, ph) = match mode {
                AblationMode::NoZeroConv => (
                    Tensor::from_fn(&[1, 1], |_| NO_ZERO_CONV_STD * rng.sample::<f64, _>(StandardNormal)),
                    Tensor::from_fn(&[1, hidden], |_| {
                        NO_ZERO_CONV_STD * rng.sample::<f64, _>(StandardNormal)
                    }),
                ),
                _ => (Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, hidden])),
            };
            params.insert(format!("{bp}.zc.x"), px, true)?;
            params.insert(format!("{bp}.zc.h"), ph, true)?;
            if self.config.control == ControlKind::Global {
                self.encoder(b).init(&mut params, &mut rng, false)?;
            }
        }
        self.params = params;
        self.config.ablation = mode;
        Ok(())
    }

    /// Rebuilds a stack from stored parameters.
    pub fn from_params(
        base: &DenoiserModel,
        config: AdapterConfig,
        source_layers: Vec<usize>,
        params: ParamSet,
    ) -> Result<Self> {
        let layout = Self::new(base, config.clone(), 0)?;
        if layout.source_layers != source_layers {
            return Err(Error::Format(format!(
                "source layers {source_layers:?} do not match the configured selection {:?}",
                layout.source_layers
            )));
        }
        for p in layout.params.iter() {
            let got = params
                .get(&p.name)
                .ok_or_else(|| Error::Format(format!("missing adapter parameter `{}`", p.name)))?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "adapter parameter `{}` has the wrong shape",
                    p.name
                )));
            }
        }
        if params.len() != layout.params.len() {
            return Err(Error::Format("unexpected adapter parameters".into()));
        }
        Ok(Self { params, ..layout })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn source_layers(&self) -> &[usize] {
        &self.source_layers
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn encoder(&self, b: usize) -> GlobalEncoder {
        GlobalEncoder::new(
            format!("{}.encoder", block_prefix(b)),
            self.config.global_dim,
            self.spec.hidden,
        )
    }

    pub fn zero_conv(&self, b: usize) -> Result<ZeroConv> {
        let bp = block_prefix(b);
        Ok(ZeroConv {
            phi_x: self.params.value(&format!("{bp}.zc.x"))?.item(),
            phi_h: self.params.value(&format!("{bp}.zc.h"))?.data().to_vec(),
        })
    }

    fn check_control<'c>(&self, control: Option<&'c Control>) -> Result<&'c Control> {
        let c = control.ok_or_else(|| Error::Control {
            variant: self.config.control.as_str(),
            reason: "adapter called without a control".into(),
        })?;
        if c.kind() != self.config.control {
            return Err(Error::Control {
                variant: c.kind().as_str(),
                reason: format!("adapter is bound to {} controls", self.config.control.as_str()),
            });
        }
        Ok(c)
    }

    /// Records the summed block output `s` as an `(N·T)×3` node.
    pub fn record(
        &self,
        base: &DenoiserModel,
        tape: &mut Tape,
        base_bound: &Bound,
        bound: &Bound,
        input: &DenoiseInput,
        x: Var,
        tau: usize,
    ) -> Result<Var> {
        let control = self.check_control(input.control)?;
        let (n, t) = (input.n_nodes(), input.frames);
        let plan = CouplingPlan::for_control(control, n, t, input.edges)?;
        let raw = match control {
            Control::Subgraph { graph, .. } => {
                if graph.feature_dim() != input.features.cols() {
                    return Err(Error::Control {
                        variant: "subgraph",
                        reason: "control and input feature widths differ".into(),
                    });
                }
                let mut d = input.features.data().to_vec();
                d.extend_from_slice(graph.features.data());
                Tensor::new(&[plan.n_nodes, input.features.cols()], d)?
            }
            _ => input.features.clone(),
        };
        let h0 = base.record_embed(tape, base_bound, &raw)?;
        let rows = control.coord_rows();
        let xc = if rows.is_empty() {
            tape.gather_rows(x, plan.coord_source.clone())?
        } else {
            let c = tape.constant_owned(rows.len() / 3, 3, rows);
            let src = tape.concat_rows(&[x, c])?;
            tape.gather_rows(src, plan.coord_source.clone())?
        };
        let topo = Topology::new(plan.n_nodes, plan.frames, &plan.edges)?;
        let cfg = base.config();
        let ctx = edge_context(&topo, tau, &plan.frame_positions, cfg.time_dim, cfg.frame_dim)?;
        let ctx = tape.constant(&ctx);

        let mut total: Option<Var> = None;
        let (mut h, mut xs) = (h0, xc);
        for b in 0..self.source_layers.len() {
            let bp = block_prefix(b);
            let h_in = match control {
                Control::Global { vector } => {
                    let lift = self.encoder(b).record(tape, bound, vector)?;
                    tape.add_row(h, lift)?
                }
                _ => h,
            };
            let (h2, dx) = self
                .spec
                .record(tape, bound, &format!("{bp}.copy"), &topo, ctx, h_in, xs)?;
            h = h2;
            xs = tape.add(xs, dx)?;
            let kept = tape.gather_rows(xs, plan.keep_rows.clone())?;
            let centered = tape.center_rows(kept);
            let phi = bound.get(&format!("{bp}.zc.x"))?;
            let s = tape.scale_by(centered, phi)?;
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
        Ok(total.expect("at least one block"))
    }
}

/// Reconfigures `stack` for an ablation, redrawing what the mode changes.
pub fn ablation_mode(stack: AdapterStack, base: &DenoiserModel, mode: AblationMode, seed: u64) -> Result<AdapterStack> {
    let mut s = stack;
    s.populate(base, mode, seed)?;
    Ok(s)
}

/// `ε_θ + s_{θ′,φ}`; without an adapter this is the base alone.
#[derive(Clone, Copy, Debug)]
pub struct FusedDenoiser<'a> {
    pub base: &'a DenoiserModel,
    pub adapter: Option<&'a AdapterStack>,
}

impl<'a> FusedDenoiser<'a> {
    pub fn new(base: &'a DenoiserModel, adapter: &'a AdapterStack) -> Self {
        Self {
            base,
            adapter: Some(adapter),
        }
    }

    pub fn detached(base: &'a DenoiserModel) -> Self {
        Self { base, adapter: None }
    }
}

impl Denoiser for FusedDenoiser<'_> {
    fn bind(&self, tape: &mut Tape) -> Bound {
        let mut b = self.base.bind(tape);
        if let Some(a) = self.adapter {
            b.extend(tape.bind(a.params()))
                .expect("adapter and base parameter names are disjoint");
        }
        b
    }

    fn conditional(&self) -> bool {
        self.base.conditional()
    }

    fn max_tau(&self) -> usize {
        self.base.max_tau()
    }

    fn record(&self, tape: &mut Tape, bound: &Bound, input: &DenoiseInput, x: Var, tau: usize) -> Result<Var> {
        let eps = self.base.record(tape, bound, input, x, tau)?;
        match self.adapter {
            None => Ok(eps),
            Some(a) => {
                let s = a.record(self.base, tape, bound, bound, input, x, tau)?;
                tape.add(eps, s)
            }
        }
    }

    fn record_anchor(&self, tape: &mut Tape, bound: &Bound, input: &DenoiseInput) -> Result<Option<Var>> {
        self.base.record_anchor(tape, bound, input)
    }
}

/// Value-level adapter output `s_{θ′,φ}`, `N×T×3`.
pub fn adapter_forward(
    stack: &AdapterStack,
    base: &DenoiserModel,
    input: &DenoiseInput,
    x: &Tensor,
    tau: usize,
) -> Result<Tensor> {
    let (n, t) = (input.n_nodes(), input.frames);
    let mut tape = Tape::new();
    let bb = tape.bind_frozen(base.params());
    let ab = tape.bind(stack.params());
    let xv = tape.constant_owned(n * t, 3, x.data().to_vec());
    let s = stack.record(base, &mut tape, &bb, &ab, input, xv, tau)?;
    tape.value(s).reshape(&[n, t, 3])
}

pub fn fused_score(
    base: &DenoiserModel,
    stack: &AdapterStack,
    input: &DenoiseInput,
    x: &Tensor,
    tau: usize,
) -> Result<Tensor> {
    FusedDenoiser::new(base, stack).predict(input, x, tau)
}

/// One Adam step on the adapter. Returns the mean batch loss before the step.
pub fn finetune_step(
    base: &DenoiserModel,
    stack: &mut AdapterStack,
    batch: &[TrainItem],
    sched: &NoiseSchedule,
    opt: &mut OptimizerState,
    seed: u64,
) -> Result<f64> {
    if let Some(p) = base.params().trainable().next() {
        return Err(Error::Contract(format!("base parameter `{}` is not frozen", p.name)));
    }
    let eval = batch_loss(&FusedDenoiser::new(base, stack), batch, sched, seed, true)?;
    adam_step(stack.params_mut(), &eval.grads, opt)?;
    Ok(eval.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::controls::FramePosition;
    use crate::geometry::{fully_connected, RigidMotion};
    use crate::numerics::AdamConfig;

    fn gaussian(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = seeded_rng(seed);
        Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
    }

    fn base() -> DenoiserModel {
        let mut m = DenoiserModel::init(
            ModelConfig {
                hidden: 8,
                time_dim: 8,
                frame_dim: 4,
                attn_dim: 4,
                frames: 3,
                layers: 2,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        m.freeze();
        m
    }

    #[test]
    fn zero_conv_cases() {
        let x = gaussian(1, &[3, 2, 3]);
        let h = gaussian(2, &[3, 4]);
        let (a, b) = zero_conv_apply(&x, &h, &ZeroConv::zeros(4)).unwrap();
        assert_eq!(a.max_abs(), 0.0);
        assert_eq!(b.max_abs(), 0.0);
        let two = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        let zc = ZeroConv {
            phi_x: 1.0,
            phi_h: vec![0.0; 4],
        };
        let (a, _) = zero_conv_apply(&two, &gaussian(3, &[2, 4]), &zc).unwrap();
        assert_eq!(a, two);
        let zc = ZeroConv {
            phi_x: 0.37,
            phi_h: vec![0.1, -0.2, 0.3, 0.4],
        };
        let g = RigidMotion::random(4, 5.0);
        let (a, _) = zero_conv_apply(&x, &h, &zc).unwrap();
        let (ag, _) = zero_conv_apply(&g.apply_points(&x), &h, &zc).unwrap();
        assert!(ag.max_abs_diff(&g.apply_vectors(&a)).unwrap() <= 1e-12);
        let (at, _) = zero_conv_apply(&crate::geometry::translate(&x, &[3.0, -1.0, 2.0]), &h, &zc).unwrap();
        assert!(at.max_abs_diff(&a).unwrap() <= 1e-12);
    }

    #[test]
    fn layer_selection() {
        assert_eq!(select_copy_layers(6, 3, CopyStrategy::Strided).unwrap(), vec![0, 2, 4]);
        assert_eq!(
            select_copy_layers(6, 6, CopyStrategy::Strided).unwrap(),
            (0..6).collect::<Vec<_>>()
        );
        assert_eq!(select_copy_layers(6, 1, CopyStrategy::First).unwrap(), vec![0]);
        assert_eq!(select_copy_layers(6, 2, CopyStrategy::Last).unwrap(), vec![4, 5]);
        assert!(select_copy_layers(6, 7, CopyStrategy::Strided).is_err());
    }

    #[test]
    fn fresh_stack_is_silent_and_copies_are_exact() {
        let m = base();
        let stack = AdapterStack::new(&m, AdapterConfig::default(), 2).unwrap();
        for s in m.config().layer_spec().suffixes() {
            assert_eq!(
                stack.params().value(&format!("block0.copy.{s}")).unwrap(),
                m.params().value(&format!("layer0.{s}")).unwrap()
            );
        }
        let f = gaussian(3, &[4, 2]);
        let e = fully_connected(4);
        let ctrl = Control::Frame {
            coords: gaussian(4, &[4, 2, 3]),
            position: FramePosition::Prefix,
        };
        let input = DenoiseInput {
            features: &f,
            edges: &e,
            frames: 3,
            condition: None,
            control: Some(&ctrl),
        };
        let x = gaussian(5, &[4, 3, 3]);
        assert_eq!(adapter_forward(&stack, &m, &input, &x, 9).unwrap().max_abs(), 0.0);
        let fused = fused_score(&m, &stack, &input, &x, 9).unwrap();
        let alone = m.predict(&input, &x, 9).unwrap();
        assert_eq!(fused.max_abs_diff(&alone).unwrap(), 0.0);

        let wrong = Control::Global { vector: vec![1.0] };
        let bad = DenoiseInput {
            control: Some(&wrong),
            ..input
        };
        assert!(matches!(
            adapter_forward(&stack, &m, &bad, &x, 9),
            Err(Error::Control { .. })
        ));
    }

    #[test]
    fn ablations_change_what_they_claim() {
        let m = base();
        let stack = AdapterStack::new(&m, AdapterConfig::default(), 2).unwrap();
        let nz = ablation_mode(stack.clone(), &m, AblationMode::NoZeroConv, 3).unwrap();
        assert_ne!(nz.zero_conv(0).unwrap().phi_x, 0.0);
        let nc = ablation_mode(stack, &m, AblationMode::NoTrainableCopy, 3).unwrap();
        for k in 0..m.config().layers {
            let same = m.config().layer_spec().suffixes().iter().all(|s| {
                nc.params().value(&format!("block0.copy.{s}")).unwrap()
                    == m.params().value(&format!("layer{k}.{s}")).unwrap()
            });
            assert!(!same);
        }
        assert!("sideways".parse::<AblationMode>().is_err());
    }

    #[test]
    fn finetune_moves_only_the_adapter() {
        let m = base();
        let before = m.params().blob();
        let mut stack = AdapterStack::new(&m, AdapterConfig::default(), 2).unwrap();
        let f = gaussian(6, &[2, 2]);
        let e = fully_connected(2);
        let ctrl = Control::Frame {
            coords: gaussian(7, &[2, 2, 3]),
            position: FramePosition::Prefix,
        };
        let x0 = gaussian(8, &[2, 3, 3]);
        let items = [TrainItem {
            input: DenoiseInput {
                features: &f,
                edges: &e,
                frames: 3,
                condition: None,
                control: Some(&ctrl),
            },
            x0: &x0,
        }];
        let sched = crate::diffusion::build_linear_schedule(100, 1e-4, 0.02).unwrap();
        let mut opt = OptimizerState::new(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        });
        let snapshot = stack.params().blob();
        let l = finetune_step(&m, &mut stack, &items, &sched, &mut opt, 1).unwrap();
        assert!(l.is_finite());
        assert_eq!(stack.params().blob(), snapshot);
        let mut opt = OptimizerState::new(AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        });
        for step in 0..100 {
            finetune_step(&m, &mut stack, &items, &sched, &mut opt, step).unwrap();
        }
        assert_eq!(m.params().blob(), before);

        let mut unfrozen = m.clone();
        unfrozen.params_mut().set_trainable("embed.0.w", true).unwrap();
        assert!(matches!(
            finetune_step(&unfrozen, &mut stack, &items, &sched, &mut opt, 0),
            Err(Error::Contract(_))
        ));
    }
}
