//! Air properties, wall-loss constants and the baffled-piston radiation load.
//!
//! The distributed loss coefficients of the transmission-line equations are
//! split into a radius-dependent factor and a radius-independent constant:
//! `G = r * G_c` and `R = R_c / r^3`. Only `G_c` and `R_c` are identified;
//! the radius comes from the tube profile.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Properties of air and the fixed loss angular frequency. All values SI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalConstants {
    /// Density (kg/m^3).
    pub rho: f64,
    /// Bulk modulus (Pa).
    pub bulk_modulus: f64,
    /// Speed of sound (m/s).
    pub c: f64,
    /// Dynamic viscosity (Pa s).
    pub mu: f64,
    /// Heat-capacity ratio.
    pub eta: f64,
    /// Thermal conductivity (W/(m K)).
    pub lambda_th: f64,
    /// Specific heat at constant pressure (J/(kg K)).
    pub c_p: f64,
    /// Angular frequency at which the wall losses are evaluated (rad/s).
    pub omega_c: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            rho: 1.20,
            bulk_modulus: 1.39e5,
            c: 340.0,
            mu: 19.0e-6,
            eta: 1.40,
            lambda_th: 2.41e-2,
            c_p: 1.01e3,
            omega_c: 1.64e3,
        }
    }
}

impl PhysicalConstants {
    /// Same constants with `c_p` entered as its numeric value in kJ/(kg K).
    ///
    /// This is the unit reading under which the heat-conduction constant
    /// evaluates to the published reference value of about 7.3e-5; the
    /// strict-SI reading gives about 2.3e-6.
    pub fn with_cp_in_kilojoules(self) -> Self {
        Self {
            c_p: self.c_p / 1.0e3,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("rho", self.rho),
            ("bulk_modulus", self.bulk_modulus),
            ("c", self.c),
            ("mu", self.mu),
            ("eta", self.eta),
            ("lambda_th", self.lambda_th),
            ("c_p", self.c_p),
            ("omega_c", self.omega_c),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::invalid(format!("constant {name} must be positive, got {value}")));
            }
        }
        if self.eta <= 1.0 {
            return Err(Error::invalid(format!("eta must exceed 1, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Radius-independent wall-loss constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConstants {
    /// Heat-conduction constant, `G = r * gc`.
    pub gc: f64,
    /// Viscous constant, `R = rc / r^3`.
    pub rc: f64,
}

impl LossConstants {
    /// Reference values used as injected ground truth for identification runs.
    pub const REFERENCE: LossConstants = LossConstants {
        gc: 7.29e-5,
        rc: 8.73e-2,
    };

    pub fn new(gc: f64, rc: f64) -> Result<Self> {
        let lc = Self { gc, rc };
        lc.validate()?;
        Ok(lc)
    }

    /// Theoretical constants for a rigid, isothermal wall.
    pub fn theoretical(consts: &PhysicalConstants) -> Self {
        Self {
            gc: theoretical_gc(consts),
            rc: theoretical_rc(consts),
        }
    }

    /// Accepts zero, which gives the lossless tube.
    pub fn validate(&self) -> Result<()> {
        if !(self.gc.is_finite() && self.gc >= 0.0 && self.rc.is_finite() && self.rc >= 0.0) {
            return Err(Error::invalid(format!(
                "loss constants must be finite and nonnegative, got gc={} rc={}",
                self.gc, self.rc
            )));
        }
        Ok(())
    }
}

impl Default for LossConstants {
    fn default() -> Self {
        Self::REFERENCE
    }
}

/// `G_c = 2 pi (eta - 1) / (rho c^2) * sqrt(lambda omega_c / (2 c_p rho))`.
pub fn theoretical_gc(consts: &PhysicalConstants) -> f64 {
    let PhysicalConstants {
        rho,
        c,
        eta,
        lambda_th,
        c_p,
        omega_c,
        ..
    } = *consts;
    2.0 * PI * (eta - 1.0) / (rho * c * c) * (lambda_th * omega_c / (2.0 * c_p * rho)).sqrt()
}

/// `R_c = (2 / pi) sqrt(omega_c rho mu / 2)`.
pub fn theoretical_rc(consts: &PhysicalConstants) -> f64 {
    2.0 / PI * (consts.omega_c * consts.rho * consts.mu / 2.0).sqrt()
}

/// Heat-conduction loss coefficient at radius `r`.
pub fn g_at(r: f64, gc: f64) -> Result<f64> {
    check_radius(r)?;
    Ok(r * gc)
}

/// Viscous loss coefficient at radius `r`.
pub fn r_at(r: f64, rc: f64) -> Result<f64> {
    check_radius(r)?;
    Ok(rc / (r * r * r))
}

fn check_radius(r: f64) -> Result<()> {
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::invalid(format!("tube radius must be positive, got {r}")));
    }
    Ok(())
}

/// Radiation resistance and inertance of a circular opening in an infinite baffle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiationParams {
    /// Resistance (Pa s/m^3).
    pub resistance: f64,
    /// Inertance (Pa s^2/m^3).
    pub inertance: f64,
}

impl RadiationParams {
    /// Load for an outlet of area `outlet_area` (m^2).
    pub fn for_outlet(outlet_area: f64, consts: &PhysicalConstants) -> Result<Self> {
        if !(outlet_area.is_finite() && outlet_area > 0.0) {
            return Err(Error::invalid(format!("outlet area must be positive, got {outlet_area}")));
        }
        let resistance = 128.0 * consts.rho * consts.c / (9.0 * PI * PI * outlet_area);
        let inertance = 8.0 * consts.rho / (3.0 * PI * (PI * outlet_area).sqrt());
        Ok(Self {
            resistance,
            inertance,
        })
    }
}
