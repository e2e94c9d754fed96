//! Streaming spike detector.
//!
//! Each raw sample passes through a first-order exponential smoother, the
//! nonlinear energy operator (NEO) `psi[n] = y[n]^2 - y[n-1] * y[n+1]`, and a
//! second exponential smoother. The smoothed energy is compared against an
//! adaptive threshold `C * mean(energy)` that is only updated while the caller
//! enables it. The NEO needs one sample of lookahead; the detector realises
//! it as one tick of latency, so the energy produced at tick `n` belongs to
//! sample `n - 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Smoothing coefficient applied to the raw samples.
    pub alpha_signal: f64,
    /// Smoothing coefficient applied to the NEO output.
    pub alpha_neo: f64,
    /// Threshold gain `C`.
    pub threshold_gain: f64,
    /// EMA coefficient of the running NEO mean.
    pub alpha_thresh: f64,
    /// Largest per-tick relative threshold change counted as stable.
    pub convergence_epsilon: f64,
    /// Consecutive stable ticks required before the converged flag is set.
    pub convergence_window: u32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            alpha_signal: 0.5,
            alpha_neo: 0.125,
            threshold_gain: 8.0,
            alpha_thresh: 1.0 / 1024.0,
            convergence_epsilon: 0.01,
            convergence_window: 4096,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("alpha_signal", self.alpha_signal),
            ("alpha_neo", self.alpha_neo),
            ("alpha_thresh", self.alpha_thresh),
        ] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {a}")));
            }
        }
        if !(self.threshold_gain > 0.0 && self.threshold_gain.is_finite()) {
            return Err(Error::Config("threshold_gain must be positive".into()));
        }
        if !(self.convergence_epsilon > 0.0 && self.convergence_epsilon.is_finite()) {
            return Err(Error::Config("convergence_epsilon must be positive".into()));
        }
        if self.convergence_window == 0 {
            return Err(Error::Config("convergence_window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Complete state of the detector between two ticks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DetectorState {
    /// Newest smoothed sample `y[n]`.
    pub y_signal: f64,
    /// `y[n-1]`, the centre of the NEO window.
    pub x_prev: f64,
    /// `y[n-2]`.
    pub x_prev2: f64,
    /// Unsmoothed NEO value of the last tick (`psi[n-1]`).
    pub neo_raw: f64,
    /// Smoothed NEO value.
    pub y_neo: f64,
    pub neo_mean: f64,
    pub threshold: f64,
    pub converged: bool,
    /// Consecutive ticks whose relative threshold change was below epsilon.
    pub stable_ticks: u32,
    pub ticks: u64,
}

impl DetectorState {
    /// Clears the convergence flag so the threshold is recalculated.
    /// The running mean is kept as the starting point.
    pub fn request_reconvergence(&mut self) {
        self.converged = false;
        self.stable_ticks = 0;
    }
}

/// One step of `y[n] = alpha * x[n] + (1 - alpha) * y[n-1]`.
#[inline]
pub fn iir_step(prev: f64, x: f64, alpha: f64) -> f64 {
    alpha * x + (1.0 - alpha) * prev
}

/// Nonlinear energy operator on three consecutive samples.
#[inline]
pub fn neo(x_prev: f64, x: f64, x_next: f64) -> f64 {
    x * x - x_prev * x_next
}

/// Feeds one smoothed-NEO value into the running mean and convergence test.
pub fn threshold_update(state: DetectorState, cfg: &DetectorConfig, neo_value: f64) -> DetectorState {
    let mut next = state;
    next.neo_mean = iir_step(state.neo_mean, neo_value, cfg.alpha_thresh);
    next.threshold = cfg.threshold_gain * next.neo_mean;

    let stable = next.threshold > 0.0
        && ((next.threshold - state.threshold).abs() / next.threshold) < cfg.convergence_epsilon;
    next.stable_ticks = if stable {
        next.stable_ticks.saturating_add(1)
    } else {
        0
    };
    if next.stable_ticks >= cfg.convergence_window {
        next.converged = true;
    }
    next
}

/// Advances the detector by one raw sample.
///
/// Returns the new state and whether a spike is detected at this tick, which
/// requires a converged threshold and `y_neo > threshold`.
pub fn detector_step(
    state: DetectorState,
    cfg: &DetectorConfig,
    x: f64,
    update_threshold: bool,
) -> (DetectorState, bool) {
    let mut next = state;
    next.x_prev2 = state.x_prev;
    next.x_prev = state.y_signal;
    next.y_signal = iir_step(state.y_signal, x, cfg.alpha_signal);
    next.neo_raw = neo(next.x_prev2, next.x_prev, next.y_signal);
    next.y_neo = iir_step(state.y_neo, next.neo_raw, cfg.alpha_neo);
    if update_threshold {
        next = threshold_update(next, cfg, next.y_neo);
    }
    next.ticks += 1;
    let detected = next.converged && next.y_neo > next.threshold;
    (next, detected)
}

/// Detector instance owning its configuration and state.
#[derive(Debug, Clone)]
pub struct Detector {
    cfg: DetectorConfig,
    state: DetectorState,
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: DetectorState::default(),
        })
    }

    pub fn step(&mut self, x: f64, update_threshold: bool) -> bool {
        let (state, detected) = detector_step(self.state, &self.cfg, x, update_threshold);
        self.state = state;
        detected
    }

    pub fn state(&self) -> &DetectorState {
        &self.state
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn request_reconvergence(&mut self) {
        self.state.request_reconvergence();
    }
}
