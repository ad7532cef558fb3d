//! Advantage shaping: `Ã_t = η_k·A_t + ξ_k·(Ā_k·U_t)`, GAE, and the
//! schedules that move `(η_k, ξ_k)` from their initial values to `(1, 0)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapingError {
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    LengthMismatch { what: &'static str, got: usize, expected: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("{name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
}

/// Default floor on the batch advantage scale `Ā_k`.
pub const DEFAULT_ADV_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Decay {
    /// `η` and the ξ decay factor move linearly and reach `(1, 0)` at the
    /// horizon.
    Linear,
    /// `ξ` decays as `rate^k`; `η` ramps linearly over `eta_ramp`.
    Exponential { rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapingSchedule {
    pub eta0: f64,
    /// Piecewise-constant ξ levels before decay; the first is `ξ_0`.
    pub xi_levels: Vec<f64>,
    pub delta: f64,
    pub decay: Decay,
    /// Iteration from which `(η, ξ) = (1, 0)` exactly.
    pub horizon: u64,
    /// Iterations for `η` to reach 1 under exponential decay.
    pub eta_ramp: u64,
    /// Iterations spent on each ξ level.
    pub level_span: u64,
}

impl ShapingSchedule {
    /// The unshaped schedule: `(1, 0)` everywhere.
    pub fn unshaped() -> Self {
        ShapingSchedule {
            eta0: 1.0,
            xi_levels: vec![0.0],
            delta: 0.0,
            decay: Decay::Linear,
            horizon: 0,
            eta_ramp: 0,
            level_span: 1,
        }
    }

    pub fn linear(eta0: f64, xi0: f64, delta: f64, horizon: u64) -> Self {
        ShapingSchedule {
            eta0,
            xi_levels: vec![xi0],
            delta,
            decay: Decay::Linear,
            horizon,
            eta_ramp: horizon,
            level_span: horizon.max(1),
        }
    }

    pub fn exponential(eta0: f64, xi0: f64, delta: f64, rate: f64, eta_ramp: u64, horizon: u64) -> Self {
        ShapingSchedule {
            eta0,
            xi_levels: vec![xi0],
            delta,
            decay: Decay::Exponential { rate },
            horizon,
            eta_ramp,
            level_span: horizon.max(1),
        }
    }

    pub fn xi0(&self) -> f64 {
        self.xi_levels.first().copied().unwrap_or(0.0)
    }

    pub fn is_unshaped(&self) -> bool {
        self.eta0 == 1.0 && self.xi_levels.iter().all(|&x| x == 0.0)
    }

    pub fn validate(&self) -> Result<(), ShapingError> {
        let bad = |m: String| Err(ShapingError::InvalidSchedule(m));
        if !(self.eta0 > 0.0 && self.eta0 <= 1.0) {
            return bad(format!("eta0 = {} must lie in (0, 1]", self.eta0));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return bad(format!("delta = {} must lie in [0, 1)", self.delta));
        }
        if self.xi_levels.is_empty() {
            return bad("xi needs at least one level".into());
        }
        if self.xi_levels.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return bad("xi levels must be finite and nonnegative".into());
        }
        if self.xi_levels.windows(2).any(|w| w[1] > w[0]) {
            return bad("xi levels must be nonincreasing".into());
        }
        if self.xi0() > self.delta * self.eta0 + 1e-12 {
            return bad(format!(
                "xi0 = {} exceeds delta * eta0 = {}",
                self.xi0(),
                self.delta * self.eta0
            ));
        }
        if let Decay::Exponential { rate } = self.decay {
            if !(rate > 0.0 && rate <= 1.0) {
                return bad(format!("exponential rate = {rate} must lie in (0, 1]"));
            }
        }
        if self.level_span == 0 {
            return bad("level_span must be positive".into());
        }
        Ok(())
    }

    /// `(η_k, ξ_k)` at iteration `k`.
    pub fn at(&self, k: u64) -> Result<(f64, f64), ShapingError> {
        self.validate()?;
        if k >= self.horizon {
            return Ok((1.0, 0.0));
        }
        let ramp = |len: u64| {
            if len == 0 || k >= len {
                1.0
            } else {
                self.eta0 + (1.0 - self.eta0) * k as f64 / len as f64
            }
        };
        let level_idx = ((k / self.level_span) as usize).min(self.xi_levels.len() - 1);
        let level = self.xi_levels[level_idx];
        let (eta, factor) = match self.decay {
            Decay::Linear => (ramp(self.horizon), 1.0 - k as f64 / self.horizon as f64),
            Decay::Exponential { rate } => (ramp(self.eta_ramp), rate.powf(k as f64)),
        };
        Ok((eta.min(1.0), level * factor))
    }
}

/// Rate whose half-life is `half_life` iterations.
pub fn rate_for_half_life(half_life: f64) -> f64 {
    0.5f64.powf(1.0 / half_life.max(1e-9))
}

/// GAE over one episode. `values` carries one bootstrap entry beyond
/// `rewards` (0 for a terminal state).
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>, ShapingError> {
    if values.len() != rewards.len() + 1 {
        return Err(ShapingError::LengthMismatch { what: "values", got: values.len(), expected: rewards.len() + 1 });
    }
    for (name, value) in [("gamma", gamma), ("lambda", lambda)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(ShapingError::OutOfRange { name, value });
        }
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut running = 0.0;
    for t in (0..rewards.len()).rev() {
        let td = rewards[t] + gamma * values[t + 1] - values[t];
        running = td + gamma * lambda * running;
        adv[t] = running;
    }
    Ok(adv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    pub advantages: Vec<f64>,
    pub utilities: Vec<f64>,
    pub shaped: Vec<f64>,
    pub eta: f64,
    pub xi: f64,
    /// `Ā_k`: batch mean |A| with the floor applied.
    pub adv_scale: f64,
}

pub fn mean_abs(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().map(|a| a.abs()).sum::<f64>() / values.len() as f64
    }
}

/// Shaped advantages with the utility rescaled by `max(mean|A|, floor)`.
pub fn shaped_advantage(
    advantages: &[f64],
    utilities: &[f64],
    eta: f64,
    xi: f64,
    floor: f64,
) -> Result<AdvantageBatch, ShapingError> {
    if utilities.len() != advantages.len() {
        return Err(ShapingError::LengthMismatch {
            what: "utilities",
            got: utilities.len(),
            expected: advantages.len(),
        });
    }
    let adv_scale = mean_abs(advantages).max(floor);
    let shaped = if xi == 0.0 {
        advantages.iter().map(|a| eta * a).collect()
    } else {
        advantages.iter().zip(utilities).map(|(a, u)| eta * a + xi * (adv_scale * u)).collect()
    };
    Ok(AdvantageBatch {
        advantages: advantages.to_vec(),
        utilities: utilities.to_vec(),
        shaped,
        eta,
        xi,
        adv_scale,
    })
}
