//! Leapfrog (centered time, centered space) reference solver for the lossy
//! transmission-line equations
//!
//! ```text
//! dU/dx = -G p - (A/K) dp/dt
//! dp/dx = -R U - (rho/A) dU/dt
//! ```
//!
//! on a collocated grid, with the inlet volume velocity forced to
//! `A(0) v(t)` and a radiation load at the outlet:
//! `(U_l - U_r) R_r = L_r dU_r/dt`, `p_l = (U_l - U_r) R_r`.
//!
//! The loss terms are averaged over time levels `n-1` and `n+1`, which keeps
//! the leapfrog computational mode damped; since they are linear the update
//! stays explicit.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excitation::PeriodicWaveform;
use crate::geometry::TubeProfile;
use crate::physics::{g_at, r_at, LossConstants, PhysicalConstants, RadiationParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FdmConfig {
    /// Spatial step (m).
    pub dx: f64,
    /// Requested time step (s); adjusted so that one period is a whole number of steps.
    pub dt: f64,
    pub periods_max: usize,
    /// Relative period-to-period change of the outlet pressure regarded as steady.
    pub steady_tol: f64,
    /// Robert-Asselin coefficient damping the leapfrog computational mode.
    pub time_filter: f64,
}

impl Default for FdmConfig {
    fn default() -> Self {
        Self {
            dx: 1e-3,
            dt: 0.5e-6,
            periods_max: 200,
            steady_tol: 1e-3,
            time_filter: 0.01,
        }
    }
}

impl FdmConfig {
    /// Both steps halved.
    pub fn refined(&self) -> Self {
        Self {
            dx: 0.5 * self.dx,
            dt: 0.5 * self.dt,
            ..*self
        }
    }
}

/// Outlet boundary model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Outlet {
    /// Baffled-piston radiation load.
    #[default]
    Radiation,
    /// Closed end, `U_l = 0`.
    Rigid,
}

/// Discretization of the tube and of one excitation period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub cells: usize,
    pub dx: f64,
    pub dt: f64,
    pub steps_per_period: usize,
    pub length: f64,
    pub period: f64,
}

impl Grid {
    pub fn new(config: &FdmConfig, length: f64, period: f64) -> Result<Self> {
        if !(config.dx > 0.0 && config.dt > 0.0) {
            return Err(Error::invalid("dx and dt must be positive"));
        }
        let ratio = length / config.dx;
        let cells = ratio.round();
        if cells < 2.0 || ((ratio - cells) / ratio).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "dx = {} does not divide the tube length {length}",
                config.dx
            )));
        }
        let steps = (period / config.dt).round();
        if steps < 1.0 {
            return Err(Error::invalid("time step exceeds the period"));
        }
        let steps_per_period = steps as usize;
        Ok(Self {
            cells: cells as usize,
            dx: length / cells,
            dt: period / steps,
            steps_per_period,
            length,
            period,
        })
    }

    pub fn nodes(&self) -> usize {
        self.cells + 1
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.dx
    }

    pub fn cfl(&self, c: f64) -> f64 {
        c * self.dt / self.dx
    }
}

/// Fields at two consecutive time levels plus the radiation flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FdmState {
    pub step: usize,
    pub p_prev: Vec<f64>,
    pub p: Vec<f64>,
    pub u_prev: Vec<f64>,
    pub u: Vec<f64>,
    pub ur: f64,
    p_next: Vec<f64>,
    u_next: Vec<f64>,
}

impl FdmState {
    pub fn at_rest(nodes: usize) -> Self {
        Self {
            step: 0,
            p_prev: vec![0.0; nodes],
            p: vec![0.0; nodes],
            u_prev: vec![0.0; nodes],
            u: vec![0.0; nodes],
            ur: 0.0,
            p_next: Vec::new(),
            u_next: Vec::new(),
        }
    }
}

/// Time integrator for one tube, load and excitation.
#[derive(Debug, Clone)]
pub struct FdmSolver {
    grid: Grid,
    outlet: Outlet,
    bulk_modulus: f64,
    rho: f64,
    area: Vec<f64>,
    g: Vec<f64>,
    r: Vec<f64>,
    radiation: RadiationParams,
    /// Inlet volume velocity at each step of one period.
    inlet_flow: Vec<f64>,
    time_filter: f64,
}

impl FdmSolver {
    pub fn new(
        config: &FdmConfig,
        profile: &TubeProfile,
        consts: &PhysicalConstants,
        losses: &LossConstants,
        excitation: &PeriodicWaveform,
        outlet: Outlet,
    ) -> Result<Self> {
        consts.validate()?;
        losses.validate()?;
        let grid = Grid::new(config, profile.length(), excitation.period())?;
        let cfl = grid.cfl(consts.c);
        if cfl >= 1.0 {
            return Err(Error::invalid(format!("CFL number {cfl:.3} must be below 1")));
        }
        let mut area = Vec::with_capacity(grid.nodes());
        let mut g = Vec::with_capacity(grid.nodes());
        let mut r = Vec::with_capacity(grid.nodes());
        for i in 0..grid.nodes() {
            let x = grid.x(i).min(grid.length);
            let radius = profile.radius_at(x)?;
            area.push(profile.area_at(x)?);
            g.push(g_at(radius, losses.gc)?);
            r.push(r_at(radius, losses.rc)?);
        }
        let radiation = RadiationParams::for_outlet(*area.last().expect("nodes"), consts)?;
        let inlet_flow = (0..grid.steps_per_period)
            .map(|n| area[0] * excitation.sample(n as f64 * grid.dt))
            .collect();
        Ok(Self {
            grid,
            outlet,
            bulk_modulus: consts.bulk_modulus,
            rho: consts.rho,
            area,
            g,
            r,
            radiation,
            inlet_flow,
            time_filter: config.time_filter,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn area(&self) -> &[f64] {
        &self.area
    }

    pub fn radiation(&self) -> RadiationParams {
        self.radiation
    }

    /// Inlet volume velocity at time level `step`.
    pub fn inlet_flow_at(&self, step: usize) -> f64 {
        self.inlet_flow[step % self.grid.steps_per_period]
    }

    /// Resting state whose current level also carries the forced inlet flow.
    pub fn initial_state(&self) -> FdmState {
        let mut state = FdmState::at_rest(self.grid.nodes());
        state.u[0] = self.inlet_flow_at(0);
        state
    }

    /// Advance `state` by one time step.
    pub fn step(&self, state: &mut FdmState) -> Result<()> {
        let n = self.grid.nodes();
        let last = n - 1;
        let dt = self.grid.dt;
        let inv_2dx = 0.5 / self.grid.dx;
        let k = self.bulk_modulus;
        let rho = self.rho;
        let next = state.step + 1;
        let mut p_next = std::mem::take(&mut state.p_next);
        let mut u_next = std::mem::take(&mut state.u_next);
        p_next.resize(n, 0.0);
        u_next.resize(n, 0.0);

        for i in 0..n {
            let a = self.area[i];
            let du_dx = if i == 0 {
                (-3.0 * state.u[0] + 4.0 * state.u[1] - state.u[2]) * inv_2dx
            } else if i == last {
                (3.0 * state.u[last] - 4.0 * state.u[last - 1] + state.u[last - 2]) * inv_2dx
            } else {
                (state.u[i + 1] - state.u[i - 1]) * inv_2dx
            };
            let damp = dt * k * self.g[i] / a;
            p_next[i] = (state.p_prev[i] * (1.0 - damp) - 2.0 * dt * k / a * du_dx) / (1.0 + damp);
        }
        for i in 1..last {
            let a = self.area[i];
            let dp_dx = (state.p[i + 1] - state.p[i - 1]) * inv_2dx;
            let damp = dt * a * self.r[i] / rho;
            u_next[i] = (state.u_prev[i] * (1.0 - damp) - 2.0 * dt * a / rho * dp_dx) / (1.0 + damp);
        }
        u_next[0] = self.inlet_flow_at(next);

        match self.outlet {
            Outlet::Radiation => {
                let RadiationParams {
                    resistance,
                    inertance,
                } = self.radiation;
                // The outlet pressure R_r (U_l - U_r) inside the one-sided
                // gradient damps U_l; like the wall losses it is averaged over
                // levels n-1 and n+1, otherwise the leapfrog update diverges.
                let a = self.area[last];
                let damp = dt * a * self.r[last] / rho;
                let kappa = 3.0 * dt * a * resistance / (rho * self.grid.dx);
                let rest = (-4.0 * state.p[last - 1] + state.p[last - 2]) * inv_2dx;
                u_next[last] = (state.u_prev[last] * (1.0 - damp - 0.5 * kappa)
                    - 2.0 * dt * a / rho * rest
                    + kappa * state.ur)
                    / (1.0 + damp + 0.5 * kappa);

                let alpha = 0.5 * dt * resistance / inertance;
                let ur_next =
                    (state.ur * (1.0 - alpha) + alpha * (u_next[last] + state.u[last])) / (1.0 + alpha);
                state.ur = ur_next;
                p_next[last] = (u_next[last] - ur_next) * resistance;
            }
            Outlet::Rigid => {
                u_next[last] = 0.0;
            }
        }

        // Robert-Asselin filter on level n; the forced inlet flow is exact.
        let nu = self.time_filter;
        if nu > 0.0 {
            for i in 0..n {
                state.p[i] += nu * (p_next[i] - 2.0 * state.p[i] + state.p_prev[i]);
            }
            for i in 1..n {
                state.u[i] += nu * (u_next[i] - 2.0 * state.u[i] + state.u_prev[i]);
            }
        }

        state.p_prev = std::mem::replace(&mut state.p, p_next);
        state.u_prev = std::mem::replace(&mut state.u, u_next);
        state.p_next = Vec::new();
        state.u_next = Vec::new();
        state.step = next;

        if !(state.p[last].is_finite() && state.u[last].is_finite() && state.p[0].is_finite()) {
            return Err(Error::Instability(format!(
                "non-finite field at step {next} (t = {:.6e} s)",
                next as f64 * dt
            )));
        }
        Ok(())
    }

    /// Total acoustic energy `sum (A p^2 / 2K + rho U^2 / 2A) dx` of the current level.
    pub fn acoustic_energy(&self, state: &FdmState) -> f64 {
        let n = self.grid.nodes();
        (0..n)
            .map(|i| {
                let a = self.area[i];
                let density = a * state.p[i] * state.p[i] / (2.0 * self.bulk_modulus)
                    + self.rho * state.u[i] * state.u[i] / (2.0 * a);
                let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                w * density
            })
            .sum::<f64>()
            * self.grid.dx
    }

    /// Integrate from rest until the outlet pressure repeats itself from one
    /// period to the next within `config.steady_tol`.
    pub fn run_to_steady_state(&self, config: &FdmConfig) -> Result<FdmSolution> {
        let steps = self.grid.steps_per_period;
        let nodes = self.grid.nodes();
        let mut state = self.initial_state();
        let mut p_field = vec![0.0; steps * nodes];
        let mut u_field = vec![0.0; steps * nodes];
        let mut ur = vec![0.0; steps];
        let mut outlet_prev: Option<Vec<f64>> = None;
        let mut residual = f64::INFINITY;

        for period in 1..=config.periods_max {
            for j in 0..steps {
                let row = j * nodes;
                p_field[row..row + nodes].copy_from_slice(&state.p);
                u_field[row..row + nodes].copy_from_slice(&state.u);
                ur[j] = state.ur;
                self.step(&mut state)?;
            }
            let outlet: Vec<f64> = (0..steps).map(|j| p_field[j * nodes + nodes - 1]).collect();
            if let Some(prev) = &outlet_prev {
                let peak = outlet.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let diff = outlet
                    .iter()
                    .zip(prev)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                residual = if peak > 0.0 {
                    diff / peak
                } else if diff == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                };
                if residual <= config.steady_tol {
                    return Ok(FdmSolution {
                        grid: self.grid,
                        p: p_field,
                        u: u_field,
                        ur,
                        periods: period,
                        residual,
                        converged: true,
                    });
                }
            }
            outlet_prev = Some(outlet);
        }
        Err(Error::NonConvergence {
            periods: config.periods_max,
            residual,
            tolerance: config.steady_tol,
        })
    }
}

/// One steady-state period of the finite-difference solution.
///
/// Fields are stored time-major: `p[j * nodes + i]` is the pressure at node
/// `i` and time `j * dt`, with `t = 0` at the start of an excitation period.
#[derive(Debug, Clone, PartialEq)]
pub struct FdmSolution {
    pub grid: Grid,
    pub p: Vec<f64>,
    pub u: Vec<f64>,
    pub ur: Vec<f64>,
    /// Number of periods integrated.
    pub periods: usize,
    /// Relative change of the outlet pressure over the last period.
    pub residual: f64,
    pub converged: bool,
}

impl FdmSolution {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.grid.steps_per_period).map(move |j| j as f64 * self.grid.dt)
    }

    fn node_series(&self, field: &[f64], i: usize) -> Vec<f64> {
        let nodes = self.grid.nodes();
        (0..self.grid.steps_per_period).map(|j| field[j * nodes + i]).collect()
    }

    /// Time series of `field` at position `x`, linearly interpolated between nodes.
    fn series_at(&self, field: &[f64], x: f64) -> Result<Vec<f64>> {
        if !(0.0..=self.grid.length * (1.0 + 1e-12)).contains(&x) {
            return Err(Error::invalid(format!("probe position {x} outside tube")));
        }
        let pos = (x / self.grid.dx).min(self.grid.cells as f64);
        let i = (pos.floor() as usize).min(self.grid.cells - 1);
        let w = pos - i as f64;
        let a = self.node_series(field, i);
        let b = self.node_series(field, i + 1);
        Ok(a.iter().zip(&b).map(|(a, b)| a + w * (b - a)).collect())
    }

    pub fn pressure_at(&self, x: f64) -> Result<Vec<f64>> {
        self.series_at(&self.p, x)
    }

    pub fn flow_at(&self, x: f64) -> Result<Vec<f64>> {
        self.series_at(&self.u, x)
    }

    /// Outlet pressure over one period.
    pub fn outlet_pressure(&self) -> Vec<f64> {
        self.node_series(&self.p, self.grid.cells)
    }

    /// Inlet volume velocity over one period.
    pub fn inlet_flow(&self) -> Vec<f64> {
        self.node_series(&self.u, 0)
    }

    pub fn outlet_waveform(&self) -> PeriodicWaveform {
        PeriodicWaveform::from_samples(1.0 / self.grid.period, self.outlet_pressure())
            .expect("non-empty period")
    }

    /// Little-endian dump: `u64 nodes, u64 steps, f64 dx, f64 dt`, then the
    /// pressure field and the flow field, each `steps x nodes` row-major f64.
    pub fn write_field_dump<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&(self.grid.nodes() as u64).to_le_bytes())?;
        out.write_all(&(self.grid.steps_per_period as u64).to_le_bytes())?;
        out.write_all(&self.grid.dx.to_le_bytes())?;
        out.write_all(&self.grid.dt.to_le_bytes())?;
        for v in self.p.iter().chain(&self.u) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Fields read back from a dump written by [`FdmSolution::write_field_dump`].
#[derive(Debug, Clone, PartialEq)]
pub struct FieldDump {
    pub nodes: usize,
    pub steps: usize,
    pub dx: f64,
    pub dt: f64,
    pub p: Vec<f64>,
    pub u: Vec<f64>,
}

impl FieldDump {
    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut next = |input: &mut R| -> Result<[u8; 8]> {
            input.read_exact(&mut word)?;
            Ok(word)
        };
        let nodes = u64::from_le_bytes(next(&mut input)?) as usize;
        let steps = u64::from_le_bytes(next(&mut input)?) as usize;
        let dx = f64::from_le_bytes(next(&mut input)?);
        let dt = f64::from_le_bytes(next(&mut input)?);
        if nodes < 2 || steps == 0 || !(dx > 0.0 && dt > 0.0) {
            return Err(Error::invalid("malformed field dump header"));
        }
        let len = nodes
            .checked_mul(steps)
            .ok_or_else(|| Error::invalid("field dump dimensions overflow"))?;
        let read_field = |input: &mut R| -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; len * 8];
            input.read_exact(&mut bytes)?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect())
        };
        let p = read_field(&mut input)?;
        let u = read_field(&mut input)?;
        Ok(Self { nodes, steps, dx, dt, p, u })
    }

    pub fn length(&self) -> f64 {
        (self.nodes - 1) as f64 * self.dx
    }

    pub fn period(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.steps).map(|j| j as f64 * self.dt).collect()
    }

    pub fn outlet_pressure(&self) -> Vec<f64> {
        (0..self.steps).map(|j| self.p[j * self.nodes + self.nodes - 1]).collect()
    }
}

/// Relative L2 distance `|a - b| / |b|`.
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// Outlet pressure under the baseline constants and under each constant doubled.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub baseline: Vec<f64>,
    pub double_gc: Vec<f64>,
    pub double_rc: Vec<f64>,
    pub deviation_gc: f64,
    pub deviation_rc: f64,
    pub ratio: f64,
}

/// Compare steady outlet pressures for `(G0, R0)`, `(factor G0, R0)` and `(G0, factor R0)`.
pub fn sensitivity_study(
    config: &FdmConfig,
    profile: &TubeProfile,
    consts: &PhysicalConstants,
    baseline: &LossConstants,
    excitation: &PeriodicWaveform,
    factor: f64,
) -> Result<SensitivityReport> {
    if !(baseline.gc > 0.0 && baseline.rc > 0.0) {
        return Err(Error::invalid("baseline loss constants must be positive"));
    }
    let run = |losses: LossConstants| -> Result<Vec<f64>> {
        let solver = FdmSolver::new(config, profile, consts, &losses, excitation, Outlet::Radiation)?;
        Ok(solver.run_to_steady_state(config)?.outlet_pressure())
    };
    let base = run(*baseline)?;
    let double_gc = run(LossConstants {
        gc: factor * baseline.gc,
        ..*baseline
    })?;
    let double_rc = run(LossConstants {
        rc: factor * baseline.rc,
        ..*baseline
    })?;
    let deviation_gc = relative_l2(&double_gc, &base);
    let deviation_rc = relative_l2(&double_rc, &base);
    Ok(SensitivityReport {
        ratio: deviation_gc / deviation_rc,
        baseline: base,
        double_gc,
        double_rc,
        deviation_gc,
        deviation_rc,
    })
}

/// Add independent Gaussian noise whose standard deviation is `level` times
/// the standard deviation of the clean waveform.
pub fn add_noise(waveform: &PeriodicWaveform, level: f64, seed: u64) -> Result<PeriodicWaveform> {
    if !(level >= 0.0 && level.is_finite()) {
        return Err(Error::invalid(format!("noise level must be nonnegative, got {level}")));
    }
    if level == 0.0 {
        return Ok(waveform.clone());
    }
    let sigma = level * waveform.std_dev();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = waveform
        .samples()
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + sigma * z
        })
        .collect();
    PeriodicWaveform::from_samples(waveform.f0(), samples)
}
