//! Experiment pipelines shared by the command-line tool and the tests.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::excitation::PeriodicWaveform;
use crate::fdm::{add_noise, relative_l2, FdmConfig, FdmSolution, FdmSolver, Outlet};
use crate::geometry::TubeProfile;
use crate::loss::{CollocationSets, LossBreakdown, LossContext, LossWeights, Mode, ResidualScales};
use crate::physics::{LossConstants, PhysicalConstants, RadiationParams};
use crate::resonet::{ResoNetModel, ScalingSpec};
use crate::trainer::{train, ConstantPolicy, EpochRecord, IdentificationResult, Observer};

/// Independent seed for one consumer of the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

const STREAM_INIT: u64 = 1;
const STREAM_SETS: u64 = 2;
const STREAM_NOISE: u64 = 3;

/// Physical problem shared by all experiments.
#[derive(Debug, Clone)]
pub struct Setup {
    pub consts: PhysicalConstants,
    pub profile: TubeProfile,
    pub excitation: PeriodicWaveform,
    pub truth: LossConstants,
    pub fdm: FdmConfig,
}

impl Setup {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            consts: cfg.constants,
            profile: cfg.tube.build()?,
            excitation: cfg.excitation.waveform()?,
            truth: cfg.losses,
            fdm: cfg.fdm,
        })
    }

    pub fn solver(&self, losses: &LossConstants, outlet: Outlet) -> Result<FdmSolver> {
        FdmSolver::new(&self.fdm, &self.profile, &self.consts, losses, &self.excitation, outlet)
    }

    /// Steady-state finite-difference solution with the given loss constants.
    pub fn reference(&self, losses: &LossConstants) -> Result<FdmSolution> {
        self.solver(losses, Outlet::Radiation)?.run_to_steady_state(&self.fdm)
    }

    pub fn period(&self) -> f64 {
        self.excitation.period()
    }

    /// Cross-sectional area averaged over the tube length.
    pub fn mean_area(&self) -> Result<f64> {
        let n = 1000;
        let l = self.profile.length();
        let mut sum = 0.0;
        for i in 0..n {
            sum += self.profile.area_at((i as f64 + 0.5) / n as f64 * l)?;
        }
        Ok(sum / n as f64)
    }

    /// Largest rate of change of the inlet flow.
    fn peak_flow_rate(&self) -> Result<f64> {
        let a0 = self.profile.inlet_area();
        self.excitation
            .times()
            .map(|t| self.excitation.derivative(t).map(|d| a0 * d.abs()))
            .try_fold(0.0f64, |m, d| d.map(|d| m.max(d)))
            .ok_or_else(|| Error::invalid("excitation must be band-limited"))
    }

    /// Inertance of the air column, `rho * integral dx / A`.
    fn column_inertance(&self) -> Result<f64> {
        let n = 1000;
        let l = self.profile.length();
        let mut sum = 0.0;
        for i in 0..n {
            sum += 1.0 / self.profile.area_at((i as f64 + 0.5) / n as f64 * l)?;
        }
        Ok(self.consts.rho * sum * l / n as f64)
    }

    fn outlet_pressure_scale(&self) -> Result<f64> {
        let rad = RadiationParams::for_outlet(self.profile.outlet_area(), &self.consts)?;
        Ok(rad.inertance * self.peak_flow_rate()?)
    }

    /// Output scales estimated from the excitation alone. The flow is of
    /// the order of the inlet flow; the pressure is what the inertance of
    /// the air column plus the radiation load develops for it.
    pub fn scaling(&self) -> Result<ScalingSpec> {
        let rad = RadiationParams::for_outlet(self.profile.outlet_area(), &self.consts)?;
        Ok(ScalingSpec {
            x_scale: self.profile.length(),
            t_scale: self.period(),
            p_scale: (rad.inertance + self.column_inertance()?) * self.peak_flow_rate()?,
            u_scale: self.profile.inlet_area() * self.excitation.max_abs(),
        })
    }

    pub fn residual_scales(&self, scaling: &ScalingSpec) -> Result<ResidualScales> {
        Ok(ResidualScales {
            continuity: self.mean_area()? * scaling.p_scale / (self.consts.bulk_modulus * scaling.t_scale),
            momentum: scaling.p_scale / scaling.x_scale,
            inlet_velocity: scaling.u_scale / self.profile.inlet_area(),
            outlet_pressure: self.outlet_pressure_scale()?,
            pressure: scaling.p_scale,
            flow: scaling.u_scale,
            period: scaling.t_scale,
        })
    }

    pub fn context(&self, cfg: &RunConfig, scaling: &ScalingSpec, measured: Option<&PeriodicWaveform>) -> Result<LossContext> {
        let mut sets = CollocationSets::generate(
            &cfg.collocation,
            self.profile.length(),
            self.period(),
            derive_seed(cfg.seed, STREAM_SETS),
        )?;
        if let Some(m) = measured {
            sets = sets.with_measurements(m, cfg.collocation.measurement)?;
        }
        let weights = LossWeights::from_scales(&self.residual_scales(scaling)?).apply(&cfg.weights);
        LossContext::new(sets, weights, &self.profile, &self.consts, &self.excitation)
    }

    pub fn model(&self, cfg: &RunConfig, scaling: ScalingSpec, losses: LossConstants) -> Result<ResoNetModel> {
        ResoNetModel::init(cfg.network, scaling, losses, derive_seed(cfg.seed, STREAM_INIT))
    }
}

/// Network pressure at the outlet at the given times.
pub fn outlet_prediction(model: &ResoNetModel, times: &[f64]) -> Result<Vec<f64>> {
    let xs = vec![model.scaling().x_scale; times.len()];
    Ok(model.forward_pu_batch(&xs, times)?.0)
}

/// Relative L2 error of the network's outlet pressure against a reference series.
pub fn outlet_error(model: &ResoNetModel, times: &[f64], reference: &[f64]) -> Result<f64> {
    if times.len() != reference.len() {
        return Err(Error::invalid("reference times and values differ in length"));
    }
    Ok(relative_l2(&outlet_prediction(model, times)?, reference))
}

#[derive(Debug, Clone)]
pub struct ForwardOutcome {
    pub model: ResoNetModel,
    pub history: Vec<EpochRecord>,
    pub final_loss: LossBreakdown,
}

/// Train the forward problem with the loss constants fixed at their true values.
pub fn run_forward(cfg: &RunConfig, setup: &Setup, observer: &mut Observer<'_>) -> Result<ForwardOutcome> {
    let scaling = setup.scaling()?;
    let ctx = setup.context(cfg, &scaling, None)?;
    let mut model = setup.model(cfg, scaling, setup.truth)?;
    let (history, final_loss) = train(&mut model, &ctx, Mode::Forward, ConstantPolicy::Fixed, &cfg.training, observer)?;
    Ok(ForwardOutcome {
        model,
        history,
        final_loss,
    })
}

/// Measured outlet pressure: the reference solution plus optional noise.
pub fn measurement(cfg: &RunConfig, reference: &FdmSolution) -> Result<PeriodicWaveform> {
    add_noise(
        &reference.outlet_waveform(),
        cfg.identification.noise,
        derive_seed(cfg.seed, STREAM_NOISE),
    )
}

/// Identify the loss constants from outlet pressure generated by the
/// finite-difference solver with the configured true constants.
pub fn run_identification(
    cfg: &RunConfig,
    setup: &Setup,
    reference: &FdmSolution,
    observer: &mut Observer<'_>,
) -> Result<(IdentificationResult, ResoNetModel)> {
    let measured = measurement(cfg, reference)?;
    let scaling = setup.scaling()?;
    let ctx = setup.context(cfg, &scaling, Some(&measured))?;
    let start = LossConstants {
        gc: cfg.identification.gc_init_factor * setup.truth.gc,
        rc: cfg.identification.rc_init_factor * setup.truth.rc,
    };
    let mut model = setup.model(cfg, scaling, start)?;
    let (history, final_loss) = train(
        &mut model,
        &ctx,
        Mode::Inverse,
        ConstantPolicy::Trainable,
        &cfg.training,
        observer,
    )?;
    let result = IdentificationResult::new(history, final_loss, setup.truth, cfg.seed, cfg.identification.noise)?;
    Ok((result, model))
}
