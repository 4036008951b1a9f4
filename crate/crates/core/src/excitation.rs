//! Rosenberg glottal-pulse excitation and periodic waveforms.
//!
//! The inlet boundary is driven by one period of a Rosenberg pulse, band
//! limited by truncating its harmonic series. A band-limited waveform keeps
//! its harmonic coefficients so that it can be evaluated at arbitrary times,
//! which lets the finite-difference solver and the network losses see exactly
//! the same continuous-time signal.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RosenbergParams {
    /// Fundamental frequency (Hz).
    pub f0: f64,
    /// Peak particle velocity of the raw pulse (m/s).
    pub amplitude: f64,
    /// Opening phase duration as a fraction of the period.
    pub oq: f64,
    /// Closing phase duration as a fraction of the period.
    pub cq: f64,
    /// Low-pass cutoff (Hz).
    pub cutoff: f64,
    /// Samples per period of the generated waveform.
    pub samples: usize,
}

impl Default for RosenbergParams {
    fn default() -> Self {
        Self {
            f0: 261.6,
            amplitude: 1.0,
            oq: 0.40,
            cq: 0.16,
            cutoff: 2000.0,
            samples: 8192,
        }
    }
}

impl RosenbergParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.f0.is_finite()
            && self.f0 > 0.0
            && self.amplitude.is_finite()
            && self.amplitude > 0.0
            && self.oq > 0.0
            && self.cq > 0.0
            && self.oq + self.cq <= 1.0
            && self.cutoff.is_finite()
            && self.cutoff > self.f0
            && self.samples >= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid Rosenberg parameters: {self:?}")))
        }
    }

    pub fn period(&self) -> f64 {
        1.0 / self.f0
    }

    /// Raw (not band-limited) pulse value at time `t`.
    pub fn pulse(&self, t: f64) -> f64 {
        let period = self.period();
        let tau = t.rem_euclid(period);
        let t_open = self.oq * period;
        let t_close = self.cq * period;
        if tau < t_open {
            self.amplitude * 0.5 * (1.0 - (PI * tau / t_open).cos())
        } else if tau < t_open + t_close {
            self.amplitude * (PI * (tau - t_open) / (2.0 * t_close)).cos()
        } else {
            0.0
        }
    }

    /// One sampled period of the raw pulse.
    pub fn raw_waveform(&self) -> Result<PeriodicWaveform> {
        self.validate()?;
        let dt = self.period() / self.samples as f64;
        let samples = (0..self.samples).map(|i| self.pulse(i as f64 * dt)).collect();
        PeriodicWaveform::from_samples(self.f0, samples)
    }

    /// The band-limited excitation used as the inlet particle velocity.
    pub fn waveform(&self) -> Result<PeriodicWaveform> {
        self.raw_waveform()?.bandlimit(self.cutoff)
    }
}

/// One period of a uniformly sampled periodic signal.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicWaveform {
    f0: f64,
    samples: Vec<f64>,
    /// Complex Fourier coefficients `c_0..=c_K` (already divided by the
    /// sample count) when the signal is known to be band limited.
    harmonics: Option<Vec<Complex64>>,
}

impl PeriodicWaveform {
    pub fn from_samples(f0: f64, samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform has no samples"));
        }
        if !(f0.is_finite() && f0 > 0.0) {
            return Err(Error::invalid(format!("fundamental frequency must be positive, got {f0}")));
        }
        Ok(Self {
            f0,
            samples,
            harmonics: None,
        })
    }

    pub fn f0(&self) -> f64 {
        self.f0
    }

    pub fn period(&self) -> f64 {
        1.0 / self.f0
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_interval(&self) -> f64 {
        self.period() / self.samples.len() as f64
    }

    /// Time stamps of the stored samples.
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        let dt = self.sample_interval();
        (0..self.samples.len()).map(move |i| i as f64 * dt)
    }

    /// Highest retained harmonic index, if the waveform is band limited.
    pub fn harmonic_count(&self) -> Option<usize> {
        self.harmonics.as_ref().map(|h| h.len() - 1)
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Population standard deviation of the samples.
    pub fn std_dev(&self) -> f64 {
        let mean = self.mean();
        let var = self.samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / self.samples.len() as f64;
        var.sqrt()
    }

    /// Zero every harmonic above `cutoff` Hz. The mean is kept.
    pub fn bandlimit(&self, cutoff: f64) -> Result<PeriodicWaveform> {
        if !(cutoff >= 0.0) {
            return Err(Error::invalid(format!("cutoff must be nonnegative, got {cutoff}")));
        }
        let n = self.samples.len();
        let mut spectrum: Vec<Complex64> =
            self.samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let mut planner = FftPlanner::<f64>::new();
        planner.plan_fft_forward(n).process(&mut spectrum);

        let nyquist = n / 2;
        let kept = ((cutoff / self.f0).floor() as usize).min(nyquist);
        for k in kept + 1..=nyquist {
            spectrum[k] = Complex64::new(0.0, 0.0);
            spectrum[(n - k) % n] = Complex64::new(0.0, 0.0);
        }
        let scale = 1.0 / n as f64;
        let harmonics: Vec<Complex64> = spectrum[..=kept].iter().map(|c| c * scale).collect();

        planner.plan_fft_inverse(n).process(&mut spectrum);
        let samples = spectrum.iter().map(|c| c.re * scale).collect();
        Ok(Self {
            f0: self.f0,
            samples,
            harmonics: Some(harmonics),
        })
    }

    /// Value at time `t`, periodically extended.
    ///
    /// Band-limited waveforms are summed from their harmonics; others are
    /// linearly interpolated between samples.
    pub fn sample(&self, t: f64) -> f64 {
        let phase = (t * self.f0).rem_euclid(1.0);
        match &self.harmonics {
            Some(h) => {
                let n = self.samples.len();
                let mut acc = h[0].re;
                for (k, c) in h.iter().enumerate().skip(1) {
                    let (s, co) = (2.0 * PI * k as f64 * phase).sin_cos();
                    if 2 * k == n {
                        acc += c.re * co;
                    } else {
                        acc += 2.0 * (c.re * co - c.im * s);
                    }
                }
                acc
            }
            None => {
                let n = self.samples.len();
                let pos = phase * n as f64;
                let i = (pos.floor() as usize).min(n - 1);
                let frac = pos - i as f64;
                let a = self.samples[i];
                let b = self.samples[(i + 1) % n];
                a + frac * (b - a)
            }
        }
    }

    /// Time derivative at `t`; only available for band-limited waveforms.
    pub fn derivative(&self, t: f64) -> Option<f64> {
        let h = self.harmonics.as_ref()?;
        let n = self.samples.len();
        let phase = (t * self.f0).rem_euclid(1.0);
        let mut acc = 0.0;
        for (k, c) in h.iter().enumerate().skip(1) {
            let w = 2.0 * PI * k as f64 * self.f0;
            let (s, co) = (2.0 * PI * k as f64 * phase).sin_cos();
            if 2 * k == n {
                acc -= c.re * w * s;
            } else {
                acc -= 2.0 * w * (c.re * s + c.im * co);
            }
        }
        Some(acc)
    }

    /// Multiply every sample (and harmonic) by `factor`.
    pub fn scaled(&self, factor: f64) -> PeriodicWaveform {
        Self {
            f0: self.f0,
            samples: self.samples.iter().map(|v| v * factor).collect(),
            harmonics: self
                .harmonics
                .as_ref()
                .map(|h| h.iter().map(|c| c * factor).collect()),
        }
    }
}
