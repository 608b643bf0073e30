//! Noise-level sampling and the continuous-time mapping `r = m(t, iters)`,
//! plus the discrete iCT curriculum and Karras grid used as baselines.

use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub q: f64,
    pub d: u64,
    pub k: f64,
    pub b: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub total_iters: u64,
    /// Exponent uses `⌈iters/d⌉` instead of `⌊iters/d⌋`.
    pub ceil_mode: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            q: 2.0,
            d: 1000,
            k: 8.0,
            b: 1.0,
            p_mean: -1.1,
            p_std: 2.0,
            t_min: 0.002,
            t_max: 80.0,
            total_iters: 8000,
            ceil_mode: false,
        }
    }
}

impl ScheduleConfig {
    /// `q = 2`, `d = total_iters // 8`, `k = 8`, `b = 1`, lognormal(−1.1, 2.0).
    pub fn cifar_style(total_iters: u64) -> Self {
        Self {
            d: (total_iters / 8).max(1),
            total_iters,
            ..Self::default()
        }
    }

    /// Fixed `r/t ≈ 0.99` from the first tuning step.
    pub fn fast(total_iters: u64) -> Self {
        Self {
            q: 256.0,
            d: total_iters.max(1),
            total_iters,
            ceil_mode: true,
            ..Self::default()
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.q > 1.0) {
            p.push(format!("q must be > 1, got {}", self.q));
        }
        if self.d == 0 {
            p.push("d must be >= 1".into());
        }
        if !(self.p_std > 0.0) {
            p.push(format!("p_std must be > 0, got {}", self.p_std));
        }
        if !(self.t_min >= 0.0 && self.t_min < self.t_max) {
            p.push(format!(
                "need 0 <= t_min < t_max, got t_min={} t_max={}",
                self.t_min, self.t_max
            ));
        }
        if !self.k.is_finite() || !self.b.is_finite() || !self.p_mean.is_finite() {
            p.push("k, b and p_mean must be finite".into());
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

    /// Shrink exponent `a` at a given iteration.
    pub fn stage(&self, iters: u64) -> u64 {
        let d = self.d.max(1);
        if self.ceil_mode {
            iters.div_ceil(d)
        } else {
            iters / d
        }
    }
}

/// One training draw: noise levels, shared noise direction, shared dropout seed.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePair {
    pub t: f64,
    pub r: f64,
    pub epsilon: Vec<f64>,
    pub dropout_seed: u64,
}

impl NoisePair {
    pub fn check(&self, dim: usize) -> Result<()> {
        if !(self.r >= 0.0 && self.r < self.t) {
            return Err(Error::Contract(format!(
                "noise pair needs 0 <= r < t, got t={} r={}",
                self.t, self.r
            )));
        }
        if self.epsilon.len() != dim {
            return Err(Error::Shape(format!(
                "noise direction has dim {}, data has {dim}",
                self.epsilon.len()
            )));
        }
        Ok(())
    }
}

/// Lognormal draw clamped to `[t_min, t_max]`.
pub fn sample_t<R: rand::Rng + ?Sized>(cfg: &ScheduleConfig, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (cfg.p_mean + cfg.p_std * z).exp().clamp(cfg.t_min, cfg.t_max)
}

/// `n(t) = 1 + k·σ(−b·t)`.
pub fn n_of_t(t: f64, k: f64, b: f64) -> f64 {
    1.0 + k / (1.0 + (b * t).exp())
}

/// `r = max(0, t·(1 − n(t)/q^a))`, kept strictly below `t`.
pub fn map_r(t: f64, iters: u64, cfg: &ScheduleConfig) -> f64 {
    let a = cfg.stage(iters);
    let a = i32::try_from(a).unwrap_or(i32::MAX);
    let ratio = 1.0 - n_of_t(t, cfg.k, cfg.b) / cfg.q.powi(a);
    let r = (t * ratio).max(0.0);
    if r >= t {
        t.next_down().max(0.0)
    } else {
        r
    }
}

/// iCT discretization curriculum `N(m)`.
pub fn ict_num_intervals(m: u64, total: u64, s0: u64, s1: u64) -> Result<u64> {
    if s0 == 0 || s0 > s1 {
        return Err(Error::Config(format!("need 1 <= s0 <= s1, got s0={s0} s1={s1}")));
    }
    if total == 0 {
        return Err(Error::Config("total iterations must be > 0".into()));
    }
    let stages = ((s1 / s0) as f64).log2() + 1.0;
    let per_stage = ((total as f64 / stages).floor() as u64).max(1);
    let doublings = m / per_stage;
    let n = if doublings >= 64 {
        s1
    } else {
        s0.checked_mul(1u64 << doublings).map_or(s1, |v| v.min(s1))
    };
    Ok(n + 1)
}

/// `t_i = (t_max^{1/ρ} + i/(N−1)·(t_min^{1/ρ} − t_max^{1/ρ}))^ρ`, decreasing from `t_max` to `t_min`.
pub fn karras_grid(n: usize, t_min: f64, t_max: f64, rho: f64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Config(format!("karras grid needs N >= 2, got {n}")));
    }
    if !(t_min > 0.0 && t_min < t_max && rho > 0.0) {
        return Err(Error::Config(format!(
            "karras grid needs 0 < t_min < t_max and rho > 0 (t_min={t_min}, t_max={t_max}, rho={rho})"
        )));
    }
    let hi = t_max.powf(1.0 / rho);
    let lo = t_min.powf(1.0 / rho);
    let mut grid: Vec<f64> = (0..n)
        .map(|i| (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(rho))
        .collect();
    grid[0] = t_max;
    grid[n - 1] = t_min;
    Ok(grid)
}

/// Discrete lognormal over the intervals `[grid_i, grid_{i+1}]` (either orientation).
pub fn ict_interval_pmf(grid: &[f64], p_mean: f64, p_std: f64) -> Result<Vec<f64>> {
    if grid.len() < 2 {
        return Err(Error::Config("interval pmf needs at least two grid points".into()));
    }
    if !(p_std > 0.0) {
        return Err(Error::Config(format!("p_std must be > 0, got {p_std}")));
    }
    let increasing = grid[1] > grid[0];
    let monotone = grid
        .windows(2)
        .all(|w| if increasing { w[1] > w[0] } else { w[1] < w[0] });
    if !monotone || grid.iter().any(|&t| !(t >= 0.0)) {
        return Err(Error::Config("interval pmf needs a strictly monotone nonnegative grid".into()));
    }
    let cdf = |t: f64| libm::erf((t.ln() - p_mean) / (std::f64::consts::SQRT_2 * p_std));
    let mut pmf: Vec<f64> = grid
        .windows(2)
        .map(|w| (cdf(w[1]) - cdf(w[0])).abs())
        .collect();
    let total: f64 = pmf.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numeric("interval pmf has zero total mass".into()));
    }
    pmf.iter_mut().for_each(|p| *p /= total);
    Ok(pmf)
}
