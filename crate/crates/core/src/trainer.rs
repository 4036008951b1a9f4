//! Full-batch Adam training of the network and, for identification, of the
//! wall-loss constants.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{LossBreakdown, LossContext, Mode};
use crate::physics::LossConstants;
use crate::resonet::ResoNetModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::invalid("Adam betas must lie in (0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step(&self) -> u32 {
        self.step
    }
}

/// One bias-corrected Adam update. `lr_scale[i]`, when given, multiplies
/// the learning rate of parameter `i`.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr_scale: Option<&[f64]>,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::invalid("parameter, gradient and optimizer state lengths differ"));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Instability(format!("non-finite gradient component {i}")));
    }
    state.step += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        let lr = cfg.lr * lr_scale.map_or(1.0, |s| s[i]);
        params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Learning-rate multiplier for the two log loss constants.
    pub loss_constant_lr_scale: f64,
    /// Epochs during which the loss constants are held fixed.
    pub freeze_epochs: usize,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_interval: usize,
    /// Abort once the total loss exceeds this multiple of the initial loss.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20_000,
            adam: AdamConfig::default(),
            loss_constant_lr_scale: 1.0,
            freeze_epochs: 2_000,
            checkpoint_interval: 0,
            divergence_factor: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.freeze_epochs >= self.epochs {
            return Err(Error::invalid("freeze_epochs must be smaller than epochs"));
        }
        if !(self.loss_constant_lr_scale >= 0.0 && self.loss_constant_lr_scale.is_finite()) {
            return Err(Error::invalid("loss_constant_lr_scale must be non-negative"));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::invalid("divergence_factor must exceed 1"));
        }
        Ok(())
    }
}

/// Loss and loss constants of one epoch. The loss is evaluated before the
/// update, the constants after it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub gc: f64,
    pub rc: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str =
        "epoch,pde,boundary,coupling,periodic0,periodic1,data,total,gc,rc,gc_error_percent,rc_error_percent";

    /// One CSV row; the percent errors are relative to `truth`.
    pub fn write_csv<W: Write>(&self, out: &mut W, truth: &LossConstants) -> std::io::Result<()> {
        let l = &self.loss;
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:.6},{:.6}",
            self.epoch,
            l.pde,
            l.boundary,
            l.coupling,
            l.periodic0,
            l.periodic1,
            l.data,
            l.total,
            self.gc,
            self.rc,
            100.0 * relative_error(self.gc, truth.gc),
            100.0 * relative_error(self.rc, truth.rc)
        )
    }
}

/// What happens to the loss constants during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstantPolicy {
    /// Held at their current values throughout.
    Fixed,
    /// Held for `freeze_epochs`, then trained jointly.
    Trainable,
}

/// Hook invoked after every epoch with the updated model.
pub type Observer<'a> = dyn FnMut(&EpochRecord, &ResoNetModel) -> Result<()> + 'a;

/// Train `model` in place. Returns the per-epoch history and the loss at
/// the final parameters.
pub fn train(
    model: &mut ResoNetModel,
    ctx: &LossContext,
    mode: Mode,
    policy: ConstantPolicy,
    config: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<(Vec<EpochRecord>, LossBreakdown)> {
    config.validate()?;
    retain_freed_memory();
    let n = model.params().len();
    let slots = model.loss_constant_slots();
    let mut lr_scale = vec![1.0; n];
    for s in slots {
        lr_scale[s] = config.loss_constant_lr_scale;
    }
    let mut state = AdamState::new(n);
    let mut history = Vec::with_capacity(config.epochs);
    let mut initial = None;

    for epoch in 1..=config.epochs {
        let (loss, mut grad) = ctx.total_with_gradient(model, mode)?;
        let reference = *initial.get_or_insert(loss.total);
        if !loss.total.is_finite() || loss.total > config.divergence_factor * reference {
            return Err(Error::Instability(format!(
                "training diverged at epoch {epoch}: loss {:e} against initial {:e}",
                loss.total, reference
            )));
        }
        let frozen = match policy {
            ConstantPolicy::Fixed => true,
            ConstantPolicy::Trainable => epoch <= config.freeze_epochs,
        };
        if frozen {
            for s in slots {
                grad[s] = 0.0;
            }
        }
        adam_step(model.params_mut().values_mut(), &grad, &mut state, &config.adam, Some(&lr_scale))?;
        let LossConstants { gc, rc } = model.loss_constants();
        let record = EpochRecord { epoch, loss, gc, rc };
        observer(&record, model)?;
        history.push(record);
    }
    let last = ctx.total(model, mode)?;
    Ok((history, last))
}

/// Keep freed buffers in the heap. Every epoch allocates and frees the same
/// multi-megabyte arrays; with glibc's defaults they go back to the kernel
/// and are page-faulted in again on the next epoch, which costs about as
/// much as the arithmetic.
fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        // SAFETY: mallopt only adjusts allocator tuning parameters.
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        });
    }
}

/// Signed relative error `(estimate - truth) / truth`.
pub fn relative_error(estimate: f64, truth: f64) -> f64 {
    (estimate - truth) / truth
}

/// Outcome of an identification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationResult {
    pub gc: f64,
    pub rc: f64,
    pub true_gc: f64,
    pub true_rc: f64,
    /// Signed relative errors in percent.
    pub gc_error_percent: f64,
    pub rc_error_percent: f64,
    pub final_loss: LossBreakdown,
    pub seed: u64,
    pub epochs: usize,
    pub noise: f64,
    #[serde(skip)]
    pub history: Vec<EpochRecord>,
}

impl IdentificationResult {
    pub fn new(
        history: Vec<EpochRecord>,
        final_loss: LossBreakdown,
        truth: LossConstants,
        seed: u64,
        noise: f64,
    ) -> Result<Self> {
        let last = history.last().ok_or_else(|| Error::invalid("empty training history"))?;
        Ok(Self {
            gc: last.gc,
            rc: last.rc,
            true_gc: truth.gc,
            true_rc: truth.rc,
            gc_error_percent: 100.0 * relative_error(last.gc, truth.gc),
            rc_error_percent: 100.0 * relative_error(last.rc, truth.rc),
            final_loss,
            seed,
            epochs: history.len(),
            noise,
            history,
        })
    }

    /// Per-epoch error history: `epoch,gc,rc,gc_error_percent,rc_error_percent`.
    pub fn write_error_history<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,gc,rc,gc_error_percent,rc_error_percent")?;
        for r in &self.history {
            writeln!(
                out,
                "{},{:e},{:e},{:.6},{:.6}",
                r.epoch,
                r.gc,
                r.rc,
                100.0 * relative_error(r.gc, self.true_gc),
                100.0 * relative_error(r.rc, self.true_rc)
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.5, -0.5];
        let mut state = AdamState::new(2);
        adam_step(&mut p, &[1.0, -3.0], &mut state, &cfg, None).unwrap();
        assert_relative_eq!(p[0], 0.5 - 1e-3, max_relative = 1e-7);
        assert_relative_eq!(p[1], -0.5 + 1e-3, max_relative = 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.1, 0.2, 0.3];
        let before = p.clone();
        let mut state = AdamState::new(3);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0; 3], &mut state, &cfg, None).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn lr_scale_zero_freezes_entry() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.0, 1.0];
        let mut state = AdamState::new(2);
        adam_step(&mut p, &[1.0, 1.0], &mut state, &cfg, Some(&[1.0, 0.0])).unwrap();
        assert!(p[0] < 1.0);
        assert_eq!(p[1], 1.0);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = vec![0.0];
        let mut state = AdamState::new(1);
        let err = adam_step(&mut p, &[f64::NAN], &mut state, &AdamConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::Instability(_)));
    }

    #[test]
    fn adam_minimises_quadratic() {
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut p = vec![3.0, -2.0];
        let mut state = AdamState::new(2);
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 1.0)];
            adam_step(&mut p, &g, &mut state, &cfg, None).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.freeze_epochs = c.epochs;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.adam.beta1 = 1.0;
        assert!(c.validate().is_err());
        c = TrainConfig {
            epochs: 0,
            freeze_epochs: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn signed_relative_error() {
        assert_relative_eq!(relative_error(7.40e-5, 7.29e-5), 0.0150891, max_relative = 1e-5);
        assert!(relative_error(0.5, 1.0) < 0.0);
    }
}
