//! Timestep weights `w̄(t)`, adaptive weights `w(Δ)`, and pseudo-Huber.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepKind {
    Uniform,
    InvT,
    InvDt,
    InvTPlusInvSigma,
    Snr,
    SnrPlus1,
    SnrPlusInvVar,
    SoftMinSnr,
}

impl TimestepKind {
    pub const ALL: [TimestepKind; 8] = [
        TimestepKind::Uniform,
        TimestepKind::InvT,
        TimestepKind::InvDt,
        TimestepKind::InvTPlusInvSigma,
        TimestepKind::Snr,
        TimestepKind::SnrPlus1,
        TimestepKind::SnrPlusInvVar,
        TimestepKind::SoftMinSnr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TimestepKind::Uniform => "uniform",
            TimestepKind::InvT => "inv_t",
            TimestepKind::InvDt => "inv_dt",
            TimestepKind::InvTPlusInvSigma => "inv_t_plus_inv_sigma",
            TimestepKind::Snr => "snr",
            TimestepKind::SnrPlus1 => "snr_plus_1",
            TimestepKind::SnrPlusInvVar => "snr_plus_inv_var",
            TimestepKind::SoftMinSnr => "soft_min_snr",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptiveKind {
    None,
    InvL2,
    InvL1,
}

impl AdaptiveKind {
    pub fn name(self) -> &'static str {
        match self {
            AdaptiveKind::None => "none",
            AdaptiveKind::InvL2 => "inv_l2",
            AdaptiveKind::InvL1 => "inv_l1",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightingConfig {
    pub timestep_kind: TimestepKind,
    pub adaptive_kind: AdaptiveKind,
    /// Smoothing `c` (the `ε = c²` of the pseudo-Huber form).
    pub c: f64,
    /// Exponent of the `inv_l2` adaptive weight.
    pub p: f64,
    pub sigma_data: f64,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self::cifar_style(0.5)
    }
}

impl WeightingConfig {
    /// `w̄ = 1/(t−r)`, `w(Δ) = 1/‖Δ‖₂` with `c = 0`.
    pub fn cifar_style(sigma_data: f64) -> Self {
        Self {
            timestep_kind: TimestepKind::InvDt,
            adaptive_kind: AdaptiveKind::InvL2,
            c: 0.0,
            p: 0.5,
            sigma_data,
        }
    }

    /// `w̄ = 1/t² + 1/σ_d²`, `w(Δ) = 1/√(‖Δ‖² + 0.06²)`.
    pub fn imagenet_style(sigma_data: f64) -> Self {
        Self {
            timestep_kind: TimestepKind::SnrPlusInvVar,
            adaptive_kind: AdaptiveKind::InvL2,
            c: 0.06,
            p: 0.5,
            sigma_data,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.c >= 0.0 && self.c.is_finite()) {
            p.push(format!("c must be >= 0, got {}", self.c));
        }
        if !(0.0..=1.0).contains(&self.p) {
            p.push(format!("p must be in [0, 1], got {}", self.p));
        }
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            p.push(format!("sigma_data must be > 0, got {}", self.sigma_data));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Per-sample diagnostic record of one loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `½‖Δ‖²`
    pub raw_sq_l2: f64,
    pub timestep_weight: f64,
    pub adaptive_weight: f64,
    /// `timestep_weight · adaptive_weight · raw_sq_l2`
    pub weighted_loss: f64,
}

pub fn timestep_weight(kind: TimestepKind, t: f64, r: f64, sigma_data: f64) -> Result<f64> {
    let need_t = |t: f64| {
        if t > 0.0 {
            Ok(t)
        } else {
            Err(Error::Numeric(format!(
                "{} weighting needs t > 0, got {t}",
                kind.name()
            )))
        }
    };
    let w = match kind {
        TimestepKind::Uniform => 1.0,
        TimestepKind::InvT => 1.0 / need_t(t)?,
        TimestepKind::InvDt => {
            if !(t > r) {
                return Err(Error::Numeric(format!(
                    "inv_dt weighting needs t > r, got t={t} r={r}"
                )));
            }
            1.0 / (t - r)
        }
        TimestepKind::InvTPlusInvSigma => 1.0 / need_t(t)? + 1.0 / sigma_data,
        TimestepKind::Snr => 1.0 / need_t(t)?.powi(2),
        TimestepKind::SnrPlus1 => 1.0 / need_t(t)?.powi(2) + 1.0,
        TimestepKind::SnrPlusInvVar => 1.0 / need_t(t)?.powi(2) + 1.0 / (sigma_data * sigma_data),
        TimestepKind::SoftMinSnr => 1.0 / (t * t + sigma_data * sigma_data),
    };
    if w.is_finite() {
        Ok(w)
    } else {
        Err(Error::Numeric(format!("{} weight overflowed at t={t}", kind.name())))
    }
}

/// Per-sample gradient-normalizing weight. Callers treat it as a constant.
pub fn adaptive_weight(delta: &[f64], c: f64, p: f64, kind: AdaptiveKind) -> Result<f64> {
    let w = match kind {
        AdaptiveKind::None => return Ok(1.0),
        AdaptiveKind::InvL2 => {
            if p == 0.0 {
                return Ok(1.0);
            }
            let base = delta.iter().map(|d| d * d).sum::<f64>() + c * c;
            if base == 0.0 {
                return Err(Error::Numeric("adaptive weight with c = 0 and Δ = 0".into()));
            }
            base.powf(-p)
        }
        AdaptiveKind::InvL1 => {
            let base = delta.iter().map(|d| d.abs()).sum::<f64>() + c;
            if base == 0.0 {
                return Err(Error::Numeric("adaptive weight with c = 0 and Δ = 0".into()));
            }
            1.0 / base
        }
    };
    if w.is_finite() {
        Ok(w)
    } else {
        Err(Error::Numeric(format!("adaptive weight {w}")))
    }
}

/// `√(‖Δ‖² + c²) − c²`. The constant offset does not affect the gradient.
pub fn pseudo_huber(delta: &[f64], c: f64) -> f64 {
    let sq: f64 = delta.iter().map(|d| d * d).sum();
    (sq + c * c).sqrt() - c * c
}

/// `∇_Δ pseudo_huber = Δ / √(‖Δ‖² + c²)`.
pub fn pseudo_huber_grad(delta: &[f64], c: f64) -> Vec<f64> {
    let sq: f64 = delta.iter().map(|d| d * d).sum();
    let denom = (sq + c * c).sqrt();
    if denom == 0.0 {
        return vec![0.0; delta.len()];
    }
    delta.iter().map(|d| d / denom).collect()
}
