//! Physics-informed loss terms.
//!
//! Each term has a field-level form that takes sampled fields (pressure,
//! flow and their derivatives, in physical units) and returns the weighted
//! mean square together with its adjoints with respect to those fields.
//! [`LossContext`] evaluates the network on the collocation sets, feeds the
//! fields through these functions and pushes the adjoints back through the
//! tape to obtain parameter gradients.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::excitation::PeriodicWaveform;
use crate::geometry::TubeProfile;
use crate::physics::{LossConstants, PhysicalConstants, RadiationParams};
use crate::resonet::{stack_inputs, FieldDerivatives, ResoNetModel};

/// Number of points in each collocation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SetSizes {
    pub interior: usize,
    pub boundary: usize,
    pub coupling: usize,
    pub periodic: usize,
    pub measurement: usize,
}

impl Default for SetSizes {
    fn default() -> Self {
        Self {
            interior: 5000,
            boundary: 1000,
            coupling: 1000,
            periodic: 1000,
            measurement: 1000,
        }
    }
}

/// Radical inverse of `i` in base `b`.
fn radical_inverse(mut i: u64, b: u64) -> f64 {
    let inv = 1.0 / b as f64;
    let (mut f, mut out) = (inv, 0.0);
    while i > 0 {
        out += f * (i % b) as f64;
        i /= b;
        f *= inv;
    }
    out
}

fn shifted_lattice(n: usize, shift: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 + 0.5) / n as f64 + shift).fract()).collect()
}

/// Fixed point sets on which the loss terms are evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSets {
    length: f64,
    period: f64,
    /// Interior points: Halton sequence (bases 2, 3) with a random shift.
    pub interior_x: Vec<f64>,
    pub interior_t: Vec<f64>,
    /// Times on the inlet `x = 0`.
    pub boundary_t: Vec<f64>,
    /// Times on the outlet `x = l`.
    pub coupling_t: Vec<f64>,
    /// Positions evaluated at both `t = 0` and `t = T`.
    pub periodic_x: Vec<f64>,
    /// Measurement times on the outlet and the measured pressures there.
    pub measurement_t: Vec<f64>,
    pub measurement_p: Vec<f64>,
}

impl CollocationSets {
    pub fn generate(sizes: &SetSizes, length: f64, period: f64, seed: u64) -> Result<Self> {
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::invalid("domain length must be positive"));
        }
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::invalid(
                "period must be positive: t = 0 and t = T would coincide",
            ));
        }
        if sizes.interior == 0 || sizes.boundary == 0 || sizes.coupling == 0 || sizes.periodic == 0 {
            return Err(Error::invalid("collocation sets must be non-empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (sx, st): (f64, f64) = (rng.random(), rng.random());
        let mut interior_x = Vec::with_capacity(sizes.interior);
        let mut interior_t = Vec::with_capacity(sizes.interior);
        for i in 0..sizes.interior as u64 {
            interior_x.push(length * (radical_inverse(i + 1, 2) + sx).fract());
            interior_t.push(period * (radical_inverse(i + 1, 3) + st).fract());
        }
        let scale = |v: Vec<f64>, s: f64| v.into_iter().map(|u| u * s).collect::<Vec<_>>();
        Ok(Self {
            length,
            period,
            interior_x,
            interior_t,
            boundary_t: scale(shifted_lattice(sizes.boundary, rng.random()), period),
            coupling_t: scale(shifted_lattice(sizes.coupling, rng.random()), period),
            periodic_x: scale(shifted_lattice(sizes.periodic, rng.random()), length),
            measurement_t: Vec::new(),
            measurement_p: Vec::new(),
        })
    }

    /// Attach `count` outlet pressure samples taken at evenly spaced indices of `measured`.
    pub fn with_measurements(mut self, measured: &PeriodicWaveform, count: usize) -> Result<Self> {
        let samples = measured.samples();
        if count == 0 || count > samples.len() {
            return Err(Error::invalid(format!(
                "measurement count {count} must be in 1..={}",
                samples.len()
            )));
        }
        if (measured.period() - self.period).abs() > 1e-9 * self.period {
            return Err(Error::invalid("measured waveform period differs from the domain period"));
        }
        let dt = self.period / samples.len() as f64;
        self.measurement_t.clear();
        self.measurement_p.clear();
        for i in 0..count {
            let j = i * samples.len() / count;
            self.measurement_t.push(j as f64 * dt);
            self.measurement_p.push(samples[j]);
        }
        Ok(self)
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn has_measurements(&self) -> bool {
        !self.measurement_t.is_empty()
    }
}

/// Weights of the individual residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub e1: f64,
    pub e2: f64,
    pub b: f64,
    pub c: f64,
    pub p0_u: f64,
    pub p0_p: f64,
    pub p1_u: f64,
    pub p1_p: f64,
    pub m: f64,
}

/// Optional replacements for individual default weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightOverrides {
    pub e1: Option<f64>,
    pub e2: Option<f64>,
    pub b: Option<f64>,
    pub c: Option<f64>,
    pub p0_u: Option<f64>,
    pub p0_p: Option<f64>,
    pub p1_u: Option<f64>,
    pub p1_p: Option<f64>,
    pub m: Option<f64>,
}

/// Characteristic magnitude of each residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualScales {
    /// `du/dx + G p + (A/K) dp/dt`.
    pub continuity: f64,
    /// `dp/dx + R u + (rho/A) du/dt`.
    pub momentum: f64,
    /// Inlet particle velocity.
    pub inlet_velocity: f64,
    /// Outlet pressure, for the coupling and data terms.
    pub outlet_pressure: f64,
    /// Pressure and flow anywhere in the tube.
    pub pressure: f64,
    pub flow: f64,
    pub period: f64,
}

impl LossWeights {
    /// Each weight is the inverse square of its residual scale, so every term
    /// starts out of order one.
    pub fn from_scales(s: &ResidualScales) -> Self {
        Self {
            e1: s.continuity.powi(-2),
            e2: s.momentum.powi(-2),
            b: s.inlet_velocity.powi(-2),
            c: s.outlet_pressure.powi(-2),
            p0_u: s.flow.powi(-2),
            p0_p: s.pressure.powi(-2),
            p1_u: (s.period / s.flow).powi(2),
            p1_p: (s.period / s.pressure).powi(2),
            m: s.outlet_pressure.powi(-2),
        }
    }

    pub fn zero() -> Self {
        Self {
            e1: 0.0,
            e2: 0.0,
            b: 0.0,
            c: 0.0,
            p0_u: 0.0,
            p0_p: 0.0,
            p1_u: 0.0,
            p1_p: 0.0,
            m: 0.0,
        }
    }

    pub fn apply(mut self, o: &WeightOverrides) -> Self {
        let pairs = [
            (&mut self.e1, o.e1),
            (&mut self.e2, o.e2),
            (&mut self.b, o.b),
            (&mut self.c, o.c),
            (&mut self.p0_u, o.p0_u),
            (&mut self.p0_p, o.p0_p),
            (&mut self.p1_u, o.p1_u),
            (&mut self.p1_p, o.p1_p),
            (&mut self.m, o.m),
        ];
        for (slot, v) in pairs {
            if let Some(v) = v {
                *slot = v;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.e1, self.e2, self.b, self.c, self.p0_u, self.p0_p, self.p1_u, self.p1_p, self.m,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid("loss weights must be finite and non-negative"))
        }
    }
}

/// Weighted value of every term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pde: f64,
    pub boundary: f64,
    pub coupling: f64,
    pub periodic0: f64,
    pub periodic1: f64,
    pub data: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Forward,
    Inverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Pde,
    Boundary,
    Coupling,
    Periodic0,
    Periodic1,
    Data,
}

impl Term {
    pub const ALL: [Term; 6] = [
        Term::Pde,
        Term::Boundary,
        Term::Coupling,
        Term::Periodic0,
        Term::Periodic1,
        Term::Data,
    ];

    pub fn for_mode(mode: Mode) -> &'static [Term] {
        match mode {
            Mode::Forward => &Self::ALL[..5],
            Mode::Inverse => &Self::ALL,
        }
    }
}

fn mean_square_weight(weight: f64, n: usize) -> f64 {
    weight / n as f64
}

/// Both transmission-line residuals at each point.
pub fn pde_residuals(
    f: &FieldDerivatives,
    area: &[f64],
    radius: &[f64],
    consts: &PhysicalConstants,
    losses: LossConstants,
) -> (Vec<f64>, Vec<f64>) {
    let n = f.p.len();
    let mut r1 = Vec::with_capacity(n);
    let mut r2 = Vec::with_capacity(n);
    for i in 0..n {
        let g = radius[i] * losses.gc;
        let r = losses.rc / radius[i].powi(3);
        r1.push(f.du_dx[i] + g * f.p[i] + area[i] / consts.bulk_modulus * f.dp_dt[i]);
        r2.push(f.dp_dx[i] + r * f.u[i] + consts.rho / area[i] * f.du_dt[i]);
    }
    (r1, r2)
}

/// PDE term with adjoints; `d_gc`, `d_rc` are derivatives with respect to
/// the loss constants themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeTerm {
    pub value: f64,
    pub adjoint: FieldDerivatives,
    pub d_gc: f64,
    pub d_rc: f64,
}

pub fn pde_term(
    f: &FieldDerivatives,
    area: &[f64],
    radius: &[f64],
    consts: &PhysicalConstants,
    losses: LossConstants,
    w: &LossWeights,
) -> PdeTerm {
    let n = f.p.len();
    let (r1, r2) = pde_residuals(f, area, radius, consts, losses);
    let (c1, c2) = (mean_square_weight(w.e1, n), mean_square_weight(w.e2, n));
    let mut value = 0.0;
    let mut adj = FieldDerivatives {
        p: vec![0.0; n],
        u: vec![0.0; n],
        dp_dx: vec![0.0; n],
        du_dx: vec![0.0; n],
        dp_dt: vec![0.0; n],
        du_dt: vec![0.0; n],
    };
    let (mut d_gc, mut d_rc) = (0.0, 0.0);
    for i in 0..n {
        value += c1 * r1[i] * r1[i] + c2 * r2[i] * r2[i];
        let a1 = 2.0 * c1 * r1[i];
        let a2 = 2.0 * c2 * r2[i];
        let g = radius[i] * losses.gc;
        let r = losses.rc / radius[i].powi(3);
        adj.du_dx[i] = a1;
        adj.p[i] = a1 * g;
        adj.dp_dt[i] = a1 * area[i] / consts.bulk_modulus;
        adj.dp_dx[i] = a2;
        adj.u[i] = a2 * r;
        adj.du_dt[i] = a2 * consts.rho / area[i];
        d_gc += a1 * radius[i] * f.p[i];
        d_rc += a2 * f.u[i] / radius[i].powi(3);
    }
    PdeTerm {
        value,
        adjoint: adj,
        d_gc,
        d_rc,
    }
}

/// Inlet term: weighted mean of `(U / A(0) - v)^2`. Returns the value and `dL/dU`.
pub fn boundary_term(u: &[f64], inlet_area: f64, velocity: &[f64], weight: f64) -> (f64, Vec<f64>) {
    let c = mean_square_weight(weight, u.len());
    let mut value = 0.0;
    let adj = u
        .iter()
        .zip(velocity)
        .map(|(u, v)| {
            let r = u / inlet_area - v;
            value += c * r * r;
            2.0 * c * r / inlet_area
        })
        .collect();
    (value, adj)
}

/// Outlet coupling term and its adjoints.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingTerm {
    pub value: f64,
    pub adj_p: Vec<f64>,
    pub adj_u: Vec<f64>,
    pub adj_ur: Vec<f64>,
    pub adj_dur_dt: Vec<f64>,
}

/// Residuals `(U - U_r) R_r - L_r dU_r/dt` and `p - (U - U_r) R_r` at the outlet.
pub fn coupling_term(
    p: &[f64],
    u: &[f64],
    ur: &[f64],
    dur_dt: &[f64],
    rad: &RadiationParams,
    weight: f64,
) -> CouplingTerm {
    let n = p.len();
    let c = mean_square_weight(weight, n);
    let mut out = CouplingTerm {
        value: 0.0,
        adj_p: vec![0.0; n],
        adj_u: vec![0.0; n],
        adj_ur: vec![0.0; n],
        adj_dur_dt: vec![0.0; n],
    };
    for i in 0..n {
        let drop = (u[i] - ur[i]) * rad.resistance;
        let r1 = drop - rad.inertance * dur_dt[i];
        let r2 = p[i] - drop;
        out.value += c * (r1 * r1 + r2 * r2);
        let (a1, a2) = (2.0 * c * r1, 2.0 * c * r2);
        let d_drop = a1 - a2;
        out.adj_p[i] = a2;
        out.adj_u[i] = d_drop * rad.resistance;
        out.adj_ur[i] = -d_drop * rad.resistance;
        out.adj_dur_dt[i] = -a1 * rad.inertance;
    }
    out
}

/// Fields sampled at one end of the period.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimeFields {
    pub p: Vec<f64>,
    pub u: Vec<f64>,
    pub dp_dt: Vec<f64>,
    pub du_dt: Vec<f64>,
}

/// Periodicity terms: `(value-matching, derivative-matching)` and the
/// adjoints with respect to the fields at `t = 0` (the adjoints at `t = T`
/// are their negatives).
pub fn periodicity_term(start: &TimeFields, end: &TimeFields, w: &LossWeights) -> (f64, f64, TimeFields) {
    let n = start.p.len();
    let sq = |a: &[f64], b: &[f64], weight: f64, adj: &mut Vec<f64>| -> f64 {
        let c = mean_square_weight(weight, n);
        let mut v = 0.0;
        adj.clear();
        for (x, y) in a.iter().zip(b) {
            let d = x - y;
            v += c * d * d;
            adj.push(2.0 * c * d);
        }
        v
    };
    let mut adj = TimeFields::default();
    let l0 = sq(&start.u, &end.u, w.p0_u, &mut adj.u) + sq(&start.p, &end.p, w.p0_p, &mut adj.p);
    let l1 = sq(&start.du_dt, &end.du_dt, w.p1_u, &mut adj.du_dt) + sq(&start.dp_dt, &end.dp_dt, w.p1_p, &mut adj.dp_dt);
    (l0, l1, adj)
}

/// Data term: weighted mean of `(p - p_measured)^2`, and `dL/dp`.
pub fn data_term(p: &[f64], measured: &[f64], weight: f64) -> (f64, Vec<f64>) {
    let c = mean_square_weight(weight, p.len());
    let mut value = 0.0;
    let adj = p
        .iter()
        .zip(measured)
        .map(|(p, m)| {
            let d = p - m;
            value += c * d * d;
            2.0 * c * d
        })
        .collect();
    (value, adj)
}

/// Everything besides the network needed to evaluate the loss.
#[derive(Debug, Clone)]
pub struct LossContext {
    sets: CollocationSets,
    weights: LossWeights,
    consts: PhysicalConstants,
    radiation: RadiationParams,
    inlet_area: f64,
    interior_area: Vec<f64>,
    interior_radius: Vec<f64>,
    inlet_velocity: Vec<f64>,
    interior_input: Array2<f64>,
    boundary_input: Array2<f64>,
    coupling_input: Array2<f64>,
    coupling_lower_input: Array2<f64>,
    periodic_input: Array2<f64>,
    measurement_input: Array2<f64>,
}

impl LossContext {
    pub fn new(
        sets: CollocationSets,
        weights: LossWeights,
        profile: &TubeProfile,
        consts: &PhysicalConstants,
        excitation: &PeriodicWaveform,
    ) -> Result<Self> {
        weights.validate()?;
        if (profile.length() - sets.length).abs() > 1e-12 * sets.length {
            return Err(Error::invalid("collocation domain length differs from the tube length"));
        }
        if (excitation.period() - sets.period).abs() > 1e-9 * sets.period {
            return Err(Error::invalid("excitation period differs from the domain period"));
        }
        let (l, t) = (sets.length, sets.period);
        let interior_area = sets
            .interior_x
            .iter()
            .map(|&x| profile.area_at(x))
            .collect::<Result<Vec<_>>>()?;
        let interior_radius = sets
            .interior_x
            .iter()
            .map(|&x| profile.radius_at(x))
            .collect::<Result<Vec<_>>>()?;
        let inlet_velocity = sets.boundary_t.iter().map(|&t| excitation.sample(t)).collect();

        let norm = |v: &[f64], s: f64| v.iter().map(|x| x / s).collect::<Vec<_>>();
        let ex = norm(&sets.interior_x, l);
        let et = norm(&sets.interior_t, t);
        let bt = norm(&sets.boundary_t, t);
        let ct = norm(&sets.coupling_t, t);
        let mt = norm(&sets.measurement_t, t);
        let px = norm(&sets.periodic_x, l);
        let np = px.len();
        let mut pxx = px.clone();
        pxx.extend_from_slice(&px);
        let mut ptt = vec![0.0; np];
        ptt.extend(std::iter::repeat_n(1.0, np));

        Ok(Self {
            interior_input: stack_inputs(&[&ex, &et], &[0, 1]),
            boundary_input: stack_inputs(&[&vec![0.0; bt.len()], &bt], &[]),
            coupling_input: stack_inputs(&[&vec![1.0; ct.len()], &ct], &[]),
            coupling_lower_input: stack_inputs(&[&ct], &[0]),
            periodic_input: stack_inputs(&[&pxx, &ptt], &[1]),
            measurement_input: stack_inputs(&[&vec![1.0; mt.len()], &mt], &[]),
            radiation: RadiationParams::for_outlet(profile.outlet_area(), consts)?,
            inlet_area: profile.inlet_area(),
            consts: *consts,
            sets,
            weights,
            interior_area,
            interior_radius,
            inlet_velocity,
        })
    }

    pub fn sets(&self) -> &CollocationSets {
        &self.sets
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: LossWeights) -> Result<()> {
        weights.validate()?;
        self.weights = weights;
        Ok(())
    }

    pub fn radiation(&self) -> &RadiationParams {
        &self.radiation
    }

    pub fn inlet_area(&self) -> f64 {
        self.inlet_area
    }

    pub fn inlet_velocity(&self) -> &[f64] {
        &self.inlet_velocity
    }

    /// Weighted loss of the given mode.
    pub fn total(&self, model: &ResoNetModel, mode: Mode) -> Result<LossBreakdown> {
        Ok(self.evaluate(model, Term::for_mode(mode), false)?.0)
    }

    /// Weighted loss of the given mode and its gradient over all parameters,
    /// including the two log loss-constant slots.
    pub fn total_with_gradient(&self, model: &ResoNetModel, mode: Mode) -> Result<(LossBreakdown, Vec<f64>)> {
        let (b, g) = self.evaluate(model, Term::for_mode(mode), true)?;
        Ok((b, g.expect("gradient requested")))
    }

    /// Evaluate a subset of terms, optionally with the parameter gradient of their sum.
    pub fn evaluate(
        &self,
        model: &ResoNetModel,
        terms: &[Term],
        want_grad: bool,
    ) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
        let s = *model.scaling();
        if (s.x_scale - self.sets.length).abs() > 1e-12 * s.x_scale
            || (s.t_scale - self.sets.period).abs() > 1e-12 * s.t_scale
        {
            return Err(Error::invalid("model input scaling does not match the collocation domain"));
        }
        if terms.contains(&Term::Data) && !self.sets.has_measurements() {
            return Err(Error::invalid("inverse mode requires measurement data"));
        }
        let params = model.params().values();
        let mut grad = want_grad.then(|| vec![0.0; params.len()]);
        let mut out = LossBreakdown::default();
        let w = &self.weights;

        if terms.contains(&Term::Pde) {
            let n = self.sets.interior_x.len();
            let mut tape = Tape::new(params, n, 2)?;
            let node = model.upper().record(&mut tape, self.interior_input.clone())?;
            let y = tape.value(node);
            let col = |c: usize, b: usize, k: f64| (0..n).map(|i| y[[b * n + i, c]] * k).collect::<Vec<_>>();
            let f = FieldDerivatives {
                p: col(0, 0, s.p_scale),
                u: col(1, 0, s.u_scale),
                dp_dx: col(0, 1, s.p_scale / s.x_scale),
                du_dx: col(1, 1, s.u_scale / s.x_scale),
                dp_dt: col(0, 2, s.p_scale / s.t_scale),
                du_dt: col(1, 2, s.u_scale / s.t_scale),
            };
            let losses = model.loss_constants();
            let term = pde_term(&f, &self.interior_area, &self.interior_radius, &self.consts, losses, w);
            out.pde = term.value;
            if let Some(g) = grad.as_mut() {
                let a = &term.adjoint;
                let mut seed = Array2::zeros(y.raw_dim());
                for i in 0..n {
                    seed[[i, 0]] = a.p[i] * s.p_scale;
                    seed[[i, 1]] = a.u[i] * s.u_scale;
                    seed[[n + i, 0]] = a.dp_dx[i] * s.p_scale / s.x_scale;
                    seed[[n + i, 1]] = a.du_dx[i] * s.u_scale / s.x_scale;
                    seed[[2 * n + i, 0]] = a.dp_dt[i] * s.p_scale / s.t_scale;
                    seed[[2 * n + i, 1]] = a.du_dt[i] * s.u_scale / s.t_scale;
                }
                tape.backward(vec![(node, seed)], g)?;
                let [sg, sr] = model.loss_constant_slots();
                g[sg] += term.d_gc * losses.gc;
                g[sr] += term.d_rc * losses.rc;
            }
        }

        if terms.contains(&Term::Boundary) {
            let n = self.sets.boundary_t.len();
            let mut tape = Tape::new(params, n, 0)?;
            let node = model.upper().record(&mut tape, self.boundary_input.clone())?;
            let u: Vec<f64> = tape.primal(node).column(1).iter().map(|v| v * s.u_scale).collect();
            let (value, adj) = boundary_term(&u, self.inlet_area, &self.inlet_velocity, w.b);
            out.boundary = value;
            if let Some(g) = grad.as_mut() {
                let mut seed = Array2::zeros((n, 2));
                for i in 0..n {
                    seed[[i, 1]] = adj[i] * s.u_scale;
                }
                tape.backward(vec![(node, seed)], g)?;
            }
        }

        if terms.contains(&Term::Coupling) {
            let n = self.sets.coupling_t.len();
            let mut up = Tape::new(params, n, 0)?;
            let un = model.upper().record(&mut up, self.coupling_input.clone())?;
            let mut lo = Tape::new(params, n, 1)?;
            let ln = model.lower().record(&mut lo, self.coupling_lower_input.clone())?;
            let yu = up.primal(un);
            let yl = lo.value(ln);
            let p: Vec<f64> = yu.column(0).iter().map(|v| v * s.p_scale).collect();
            let u: Vec<f64> = yu.column(1).iter().map(|v| v * s.u_scale).collect();
            let ur: Vec<f64> = (0..n).map(|i| yl[[i, 0]] * s.u_scale).collect();
            let dur: Vec<f64> = (0..n).map(|i| yl[[n + i, 0]] * s.u_scale / s.t_scale).collect();
            let term = coupling_term(&p, &u, &ur, &dur, &self.radiation, w.c);
            out.coupling = term.value;
            if let Some(g) = grad.as_mut() {
                let mut su = Array2::zeros((n, 2));
                let mut sl = Array2::zeros((2 * n, 1));
                for i in 0..n {
                    su[[i, 0]] = term.adj_p[i] * s.p_scale;
                    su[[i, 1]] = term.adj_u[i] * s.u_scale;
                    sl[[i, 0]] = term.adj_ur[i] * s.u_scale;
                    sl[[n + i, 0]] = term.adj_dur_dt[i] * s.u_scale / s.t_scale;
                }
                up.backward(vec![(un, su)], g)?;
                lo.backward(vec![(ln, sl)], g)?;
            }
        }

        let want0 = terms.contains(&Term::Periodic0);
        let want1 = terms.contains(&Term::Periodic1);
        if want0 || want1 {
            let n = self.sets.periodic_x.len();
            let mut tape = Tape::new(params, 2 * n, 1)?;
            let node = model.upper().record(&mut tape, self.periodic_input.clone())?;
            let y = tape.value(node);
            let m = 2 * n;
            let fields = |off: usize| TimeFields {
                p: (0..n).map(|i| y[[off + i, 0]] * s.p_scale).collect(),
                u: (0..n).map(|i| y[[off + i, 1]] * s.u_scale).collect(),
                dp_dt: (0..n).map(|i| y[[m + off + i, 0]] * s.p_scale / s.t_scale).collect(),
                du_dt: (0..n).map(|i| y[[m + off + i, 1]] * s.u_scale / s.t_scale).collect(),
            };
            let (start, end) = (fields(0), fields(n));
            let mut wp = *w;
            if !want0 {
                wp.p0_p = 0.0;
                wp.p0_u = 0.0;
            }
            if !want1 {
                wp.p1_p = 0.0;
                wp.p1_u = 0.0;
            }
            let (l0, l1, adj) = periodicity_term(&start, &end, &wp);
            out.periodic0 = l0;
            out.periodic1 = l1;
            if let Some(g) = grad.as_mut() {
                let mut seed = Array2::zeros(y.raw_dim());
                for i in 0..n {
                    for (off, sign) in [(0, 1.0), (n, -1.0)] {
                        seed[[off + i, 0]] = sign * adj.p[i] * s.p_scale;
                        seed[[off + i, 1]] = sign * adj.u[i] * s.u_scale;
                        seed[[m + off + i, 0]] = sign * adj.dp_dt[i] * s.p_scale / s.t_scale;
                        seed[[m + off + i, 1]] = sign * adj.du_dt[i] * s.u_scale / s.t_scale;
                    }
                }
                tape.backward(vec![(node, seed)], g)?;
            }
        }

        if terms.contains(&Term::Data) {
            let n = self.sets.measurement_t.len();
            let mut tape = Tape::new(params, n, 0)?;
            let node = model.upper().record(&mut tape, self.measurement_input.clone())?;
            let p: Vec<f64> = tape.primal(node).column(0).iter().map(|v| v * s.p_scale).collect();
            let (value, adj) = data_term(&p, &self.sets.measurement_p, w.m);
            out.data = value;
            if let Some(g) = grad.as_mut() {
                let mut seed = Array2::zeros((n, 2));
                for i in 0..n {
                    seed[[i, 0]] = adj[i] * s.p_scale;
                }
                tape.backward(vec![(node, seed)], g)?;
            }
        }

        out.total = out.pde + out.boundary + out.coupling + out.periodic0 + out.periodic1 + out.data;
        Ok((out, grad))
    }
}
