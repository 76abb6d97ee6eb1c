use crate::adapter::FusedDenoiser;
use crate::backbone::{DenoiserModel, TaskKind};
use crate::controls::{audit_coupled, AuditReport, Control, GlobalEncoder};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::exec::mix_seed;
use crate::geometry::{GeometricTrajectory, RigidMotion};

use super::checkpoint::Checkpoint;
use super::task::{finetune_example, pretrain_example, Example};

/// Checks `ε(g·x, g·C) = R·ε(x, C)` over `trials` random rigid motions,
/// with the example target as the noised input.
pub fn audit_model<D: Denoiser + ?Sized>(
    model: &D,
    example: &Example,
    tau: usize,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<AuditReport> {
    let out = model.predict(&example.input(), &example.target, tau)?;
    let scale = out.max_abs().max(1e-12);
    let mut report = AuditReport {
        trials,
        max_deviation: 0.0,
        failing_trial: None,
        passed: true,
    };
    for k in 0..trials as u64 {
        let s = mix_seed(seed, k);
        let g = RigidMotion::random(s, 3.0);
        let moved = example.transformed(&g);
        let got = model.predict(&moved.input(), &moved.target, tau)?;
        let dev = got.max_abs_diff(&g.apply_vectors(&out))? / scale;
        report.max_deviation = report.max_deviation.max(dev);
        if !(dev <= tol) && report.failing_trial.is_none() {
            report.failing_trial = Some(s);
            report.passed = false;
        }
    }
    Ok(report)
}

/// Audits a base checkpoint and, if given, its adapter on one record:
/// the base on its own task, the coupled base for the adapter's control,
/// and the fused model.
pub fn audit_checkpoints(
    base: &Checkpoint,
    adapter: Option<&Checkpoint>,
    record: &GeometricTrajectory,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<Vec<(String, AuditReport)>> {
    let model = base.model()?;
    let tau = (base.config.diffusion_steps / 2).max(1);
    let mut out = Vec::new();
    let pre = pretrain_example(record, &base.config)?;
    out.push(("base".to_string(), audit_model(&model, &pre, tau, trials, tol, seed)?));
    if let Some(ad) = adapter {
        let (model, stack) = ad.stack(base)?;
        let ex = finetune_example(record, &ad.config)?;
        let control = ex
            .control
            .as_ref()
            .ok_or_else(|| Error::Invalid("fine-tune example without a control".into()))?;
        if model.config().kind == TaskKind::Uncond {
            out.push((
                format!("coupled.{}", control.kind().as_str()),
                coupled_audit(&model, &ex, control, tau, trials, tol, seed)?,
            ));
        }
        let fused = FusedDenoiser::new(&model, &stack);
        out.push(("fused".to_string(), audit_model(&fused, &ex, tau, trials, tol, seed)?));
    }
    Ok(out)
}

fn coupled_audit(
    model: &DenoiserModel,
    ex: &Example,
    control: &Control,
    tau: usize,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<AuditReport> {
    let traj = GeometricTrajectory::new(ex.features.clone(), ex.target.clone(), ex.edges.clone())?;
    let enc_params;
    let encoder = match control {
        Control::Global { vector } => {
            let enc = GlobalEncoder::new("audit.encoder", vector.len(), ex.features.cols());
            let mut p = crate::numerics::ParamSet::new();
            enc.init(&mut p, &mut crate::exec::seeded_rng(seed), false)?;
            enc_params = p;
            Some((enc, &enc_params))
        }
        _ => None,
    };
    let enc_ref = encoder.as_ref().map(|(e, p)| (e, *p));
    audit_coupled(model, &traj, control, enc_ref, tau, trials, tol, seed)
}
