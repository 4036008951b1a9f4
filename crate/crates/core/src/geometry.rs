//! Tube shape: diameter as a function of axial position.
//!
//! Diameters between knots are interpolated with monotone piecewise cubic
//! Hermite polynomials (Fritsch-Carlson slopes), so a step between two
//! constant sections becomes a smooth transition without overshoot.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position tolerance, relative to the tube length, for range checks.
const RANGE_EPS: f64 = 1e-12;

/// Fritsch-Carlson slopes for the knot sequence `(xs, ys)`.
pub fn pchip_slopes(xs: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
    let n = xs.len();
    if n != ys.len() {
        return Err(Error::invalid("knot abscissae and ordinates differ in length"));
    }
    if n < 2 {
        return Err(Error::invalid("at least two knots are required"));
    }
    let mut h = Vec::with_capacity(n - 1);
    let mut delta = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let step = xs[i + 1] - xs[i];
        if !(step > 0.0) {
            return Err(Error::invalid(format!(
                "knot positions must be strictly increasing (x[{i}]={}, x[{}]={})",
                xs[i],
                i + 1,
                xs[i + 1]
            )));
        }
        h.push(step);
        delta.push((ys[i + 1] - ys[i]) / step);
    }
    if n == 2 {
        return Ok(vec![delta[0]; 2]);
    }

    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        let (d0, d1) = (delta[k - 1], delta[k]);
        if d0 * d1 <= 0.0 {
            continue;
        }
        let w1 = 2.0 * h[k] + h[k - 1];
        let w2 = h[k] + 2.0 * h[k - 1];
        d[k] = (w1 + w2) / (w1 / d0 + w2 / d1);
    }
    d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    Ok(d)
}

/// One-sided three-point slope, limited to keep the end interval monotone.
fn end_slope(h0: f64, h1: f64, del0: f64, del1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * del0 - h0 * del1) / (h0 + h1);
    if d.signum() != del0.signum() || del0 == 0.0 {
        0.0
    } else if del0.signum() != del1.signum() && d.abs() > 3.0 * del0.abs() {
        3.0 * del0
    } else {
        d
    }
}

/// Serializable description of a tube, as found in run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TubeSpec {
    /// Tube length (m).
    pub length: f64,
    /// Inlet-side diameter (m).
    pub d1: f64,
    /// Outlet-side diameter (m).
    pub d2: f64,
    /// Start of the transition as a fraction of the length.
    pub transition_start: f64,
    /// End of the transition as a fraction of the length.
    pub transition_end: f64,
    /// Explicit `[x, d]` knots; overrides the two-section layout when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knots: Option<Vec<[f64; 2]>>,
}

impl Default for TubeSpec {
    fn default() -> Self {
        Self {
            length: 0.1,
            d1: 0.01,
            d2: 0.02,
            transition_start: 0.4,
            transition_end: 0.6,
            knots: None,
        }
    }
}

impl TubeSpec {
    pub fn build(&self) -> Result<TubeProfile> {
        match &self.knots {
            Some(knots) => TubeProfile::from_knots(knots.iter().map(|k| (k[0], k[1])).collect()),
            None => TubeProfile::two_section(
                self.length,
                self.d1,
                self.d2,
                self.transition_start,
                self.transition_end,
            ),
        }
    }
}

/// Diameter profile of a circular tube.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeProfile {
    xs: Vec<f64>,
    ds: Vec<f64>,
    slopes: Vec<f64>,
}

impl TubeProfile {
    /// Knots must start at `x = 0`; the last knot sets the tube length.
    pub fn from_knots(knots: Vec<(f64, f64)>) -> Result<Self> {
        let (xs, ds): (Vec<f64>, Vec<f64>) = knots.into_iter().unzip();
        if xs.first().copied() != Some(0.0) {
            return Err(Error::invalid("first knot must be at x = 0"));
        }
        if let Some(d) = ds.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(Error::invalid(format!("diameters must be positive, got {d}")));
        }
        let slopes = pchip_slopes(&xs, &ds)?;
        Ok(Self { xs, ds, slopes })
    }

    /// Constant `d1` up to `start * length`, constant `d2` from `end * length`,
    /// with a monotone cubic transition in between.
    pub fn two_section(length: f64, d1: f64, d2: f64, start: f64, end: f64) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::invalid(format!("tube length must be positive, got {length}")));
        }
        if !(0.0 < start && start < end && end < 1.0) {
            return Err(Error::invalid(format!(
                "transition fractions must satisfy 0 < start < end < 1, got {start}, {end}"
            )));
        }
        Self::from_knots(vec![
            (0.0, d1),
            (start * length, d1),
            (end * length, d2),
            (length, d2),
        ])
    }

    pub fn length(&self) -> f64 {
        *self.xs.last().expect("profile has knots")
    }

    pub fn knots(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.xs.iter().copied().zip(self.ds.iter().copied())
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    /// Diameter at `x` (m).
    pub fn diameter_at(&self, x: f64) -> Result<f64> {
        let l = self.length();
        if !(x.is_finite() && x >= -RANGE_EPS * l && x <= l * (1.0 + RANGE_EPS)) {
            return Err(Error::invalid(format!("position {x} outside tube [0, {l}]")));
        }
        let x = x.clamp(0.0, l);
        // index of the interval [xs[k], xs[k+1]] containing x
        let k = match self.xs.partition_point(|&xk| xk <= x) {
            0 => 0,
            i => (i - 1).min(self.xs.len() - 2),
        };
        let h = self.xs[k + 1] - self.xs[k];
        let s = (x - self.xs[k]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        Ok(h00 * self.ds[k]
            + h10 * h * self.slopes[k]
            + h01 * self.ds[k + 1]
            + h11 * h * self.slopes[k + 1])
    }

    pub fn radius_at(&self, x: f64) -> Result<f64> {
        Ok(0.5 * self.diameter_at(x)?)
    }

    /// Cross-sectional area (m^2).
    pub fn area_at(&self, x: f64) -> Result<f64> {
        let d = self.diameter_at(x)?;
        Ok(0.25 * PI * d * d)
    }

    /// Circumference (m).
    pub fn circumference_at(&self, x: f64) -> Result<f64> {
        Ok(PI * self.diameter_at(x)?)
    }

    pub fn inlet_area(&self) -> f64 {
        self.area_at(0.0).expect("inlet in range")
    }

    pub fn outlet_area(&self) -> f64 {
        self.area_at(self.length()).expect("outlet in range")
    }
}
