//! Laser ON/OFF normalization and galvanometer low-pass filtering.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum LaserState {
    Off = 0,
    On = 1,
}

impl LaserState {
    pub fn is_on(self) -> bool {
        self == LaserState::On
    }
}

/// Laser channel quantized to ON/OFF, one state per source sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryLaserSignal {
    pub states: Vec<LaserState>,
}

impl BinaryLaserSignal {
    pub fn new(states: Vec<LaserState>) -> Self {
        Self { states }
    }

    pub fn from_bools(on: impl IntoIterator<Item = bool>) -> Self {
        on.into_iter()
            .map(|b| if b { LaserState::On } else { LaserState::Off })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn is_on(&self, i: usize) -> bool {
        self.states[i].is_on()
    }

    pub fn count_on(&self) -> usize {
        self.states.iter().filter(|s| s.is_on()).count()
    }
}

impl FromIterator<LaserState> for BinaryLaserSignal {
    fn from_iter<I: IntoIterator<Item = LaserState>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HysteresisThresholds {
    pub threshold_on: f64,
    pub threshold_off: f64,
}

impl HysteresisThresholds {
    pub fn new(threshold_on: f64, threshold_off: f64) -> Result<Self> {
        let th = Self {
            threshold_on,
            threshold_off,
        };
        th.validate()?;
        Ok(th)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_on > self.threshold_off) {
            return Err(Error::Config(format!(
                "threshold_on ({}) must be greater than threshold_off ({})",
                self.threshold_on, self.threshold_off
            )));
        }
        Ok(())
    }
}

impl Default for HysteresisThresholds {
    fn default() -> Self {
        Self {
            threshold_on: 2.2,
            threshold_off: 1.1,
        }
    }
}

/// Two-threshold normalization. The state only changes when a sample breaks
/// the threshold of the opposite state; in between the previous state is
/// held. The signal starts OFF.
pub fn normalize_laser(raw: &[f64], th: &HysteresisThresholds) -> Result<BinaryLaserSignal> {
    th.validate()?;
    let mut state = LaserState::Off;
    Ok(raw
        .iter()
        .map(|&v| {
            if v >= th.threshold_on {
                state = LaserState::On;
            } else if v <= th.threshold_off {
                state = LaserState::Off;
            }
            state
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub order: usize,
    pub cutoff_hz: f64,
    pub sample_rate_hz: f64,
}

impl FilterSpec {
    pub fn new(order: usize, cutoff_hz: f64, sample_rate_hz: f64) -> Result<Self> {
        let spec = Self {
            order,
            cutoff_hz,
            sample_rate_hz,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::Config("filter order must be at least 1".into()));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Config(format!(
                "sample rate must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        if !(self.cutoff_hz > 0.0 && self.cutoff_hz < self.sample_rate_hz / 2.0) {
            return Err(Error::Config(format!(
                "cutoff {} Hz must lie in (0, {}) Hz (Nyquist)",
                self.cutoff_hz,
                self.sample_rate_hz / 2.0
            )));
        }
        Ok(())
    }
}

/// One biquad in transposed direct form II; `a0` is normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// Complex frequency response at `omega` radians/sample.
    fn response(&self, omega: f64) -> (f64, f64) {
        // H = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)
        let (c1, s1) = (omega.cos(), -omega.sin());
        let (c2, s2) = ((2.0 * omega).cos(), -(2.0 * omega).sin());
        let num = (
            self.b[0] + self.b[1] * c1 + self.b[2] * c2,
            self.b[1] * s1 + self.b[2] * s2,
        );
        let den = (
            1.0 + self.a[0] * c1 + self.a[1] * c2,
            self.a[0] * s1 + self.a[1] * s2,
        );
        let d = den.0 * den.0 + den.1 * den.1;
        (
            (num.0 * den.0 + num.1 * den.1) / d,
            (num.1 * den.0 - num.0 * den.1) / d,
        )
    }
}

/// Digital Butterworth low-pass as a cascade of second-order sections,
/// designed by the bilinear transform with cutoff pre-warping.
#[derive(Debug, Clone, PartialEq)]
pub struct Butterworth {
    sections: Vec<Biquad>,
}

impl Butterworth {
    pub fn lowpass(spec: &FilterSpec) -> Result<Self> {
        spec.validate()?;
        let fs = spec.sample_rate_hz;
        let k = 2.0 * fs;
        let warped = k * (PI * spec.cutoff_hz / fs).tan();
        let n = spec.order;
        let mut sections = Vec::with_capacity(n.div_ceil(2));

        // Conjugate pole pairs: s = wc * exp(j*theta), theta = pi*(2m+n+1)/(2n)
        for m in 0..n / 2 {
            let theta = PI * (2 * m + n + 1) as f64 / (2 * n) as f64;
            // analog section wc^2 / (s^2 + 2*zeta*wc*s + wc^2), zeta = -cos(theta)
            let two_zeta_wc = -2.0 * theta.cos() * warped;
            let wc2 = warped * warped;
            let a0 = k * k + two_zeta_wc * k + wc2;
            let a1 = 2.0 * (wc2 - k * k);
            let a2 = k * k - two_zeta_wc * k + wc2;
            sections.push(Biquad {
                b: [wc2 / a0, 2.0 * wc2 / a0, wc2 / a0],
                a: [a1 / a0, a2 / a0],
            });
        }
        if n % 2 == 1 {
            // real pole: wc / (s + wc)
            let a0 = k + warped;
            sections.push(Biquad {
                b: [warped / a0, warped / a0, 0.0],
                a: [(warped - k) / a0, 0.0],
            });
        }
        Ok(Self { sections })
    }

    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    /// |H| at `freq_hz` for the design sample rate `sample_rate_hz`.
    pub fn magnitude(&self, freq_hz: f64, sample_rate_hz: f64) -> f64 {
        let omega = 2.0 * PI * freq_hz / sample_rate_hz;
        self.sections
            .iter()
            .map(|s| {
                let (re, im) = s.response(omega);
                (re * re + im * im).sqrt()
            })
            .product()
    }

    /// Causal single-pass filtering. Section states start in the steady
    /// state of a constant input equal to the first sample.
    pub fn filter(&self, input: &[f64]) -> Vec<f64> {
        let Some(&first) = input.first() else {
            return Vec::new();
        };
        // DC gain is exactly 1 per section, so every section sees `first`
        let mut state: Vec<[f64; 2]> = self
            .sections
            .iter()
            .map(|s| {
                let z2 = s.b[2] * first - s.a[1] * first;
                let z1 = s.b[1] * first - s.a[0] * first + z2;
                [z1, z2]
            })
            .collect();

        input
            .iter()
            .map(|&x| {
                let mut v = x;
                for (s, z) in self.sections.iter().zip(state.iter_mut()) {
                    let y = s.b[0] * v + z[0];
                    z[0] = s.b[1] * v - s.a[0] * y + z[1];
                    z[1] = s.b[2] * v - s.a[1] * y;
                    v = y;
                }
                v
            })
            .collect()
    }
}

/// Butterworth low-pass applied causally to one channel.
pub fn lowpass_filter(raw: &[f64], spec: &FilterSpec) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::EmptyInput("cannot filter an empty channel".into()));
    }
    Ok(Butterworth::lowpass(spec)?.filter(raw))
}
