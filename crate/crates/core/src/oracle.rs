//! Analytic Gaussian world: `x₀ ~ N(μ, s²I)` diffused by `x_t = x₀ + t·ε`.
//!
//! Every quantity the training methods estimate has a closed form here:
//!
//! - score `−(x − μ)/(s² + t²)`
//! - denoiser `μ + s²(x − μ)/(s² + t²)`
//! - PF-ODE trajectory `μ + (x − μ)·√((s² + τ²)/(s² + t²))`
//! - consistency map `μ + (x − μ)·s/√(s² + t²)`

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::cmodel::{ConsistencyMap, Denoiser};
use crate::error::{Error, Result};
use crate::nnkit::ForwardCtx;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianWorld {
    pub mu: Vec<f64>,
    pub s: f64,
}

/// Source of clean samples `x₀`.
pub trait X0Source {
    fn dim(&self) -> usize;
    fn sample(&self, n: usize, rng: &mut Rng) -> Result<Batch>;
}

impl GaussianWorld {
    pub fn new(mu: Vec<f64>, s: f64) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("data scale must be > 0, got {s}")));
        }
        if mu.is_empty() {
            return Err(Error::Config("mean vector must be non-empty".into()));
        }
        Ok(Self { mu, s })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            s: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn var(&self, t: f64) -> f64 {
        self.s * self.s + t * t
    }

    pub fn score(&self, x: &[f64], t: f64) -> Vec<f64> {
        let v = self.var(t);
        x.iter().zip(&self.mu).map(|(x, m)| -(x - m) / v).collect()
    }

    pub fn log_density(&self, x: &[f64], t: f64) -> f64 {
        let v = self.var(t);
        let sq: f64 = x.iter().zip(&self.mu).map(|(x, m)| (x - m) * (x - m)).sum();
        -0.5 * sq / v - 0.5 * self.dim() as f64 * (2.0 * std::f64::consts::PI * v).ln()
    }

    pub fn denoise_point(&self, x: &[f64], t: f64) -> Vec<f64> {
        let shrink = self.s * self.s / self.var(t);
        x.iter().zip(&self.mu).map(|(x, m)| m + shrink * (x - m)).collect()
    }

    pub fn consistency_point(&self, x: &[f64], t: f64) -> Vec<f64> {
        let shrink = self.s / self.var(t).sqrt();
        x.iter().zip(&self.mu).map(|(x, m)| m + shrink * (x - m)).collect()
    }

    /// Exact PF-ODE solution carried from noise level `t` to `tau`.
    pub fn trajectory_point(&self, x: &[f64], t: f64, tau: f64) -> Vec<f64> {
        let ratio = (self.var(tau) / self.var(t)).sqrt();
        x.iter().zip(&self.mu).map(|(x, m)| m + ratio * (x - m)).collect()
    }

    /// Standard deviation of the 1-step pushforward `f(x_T, T)`, `x_T ~ N(0, T²)` per coordinate around μ.
    pub fn pushforward_std(&self, t_start: f64) -> f64 {
        self.s * t_start / self.var(t_start).sqrt()
    }

    fn map_rows(&self, x: &Batch, t: &[f64], f: impl Fn(&[f64], f64) -> Vec<f64>) -> Result<Batch> {
        if x.dim() != self.dim() || t.len() != x.rows() {
            return Err(Error::Shape(format!(
                "batch {}x{} with {} noise levels for a {}-dim world",
                x.rows(),
                x.dim(),
                t.len(),
                self.dim()
            )));
        }
        let mut data = Vec::with_capacity(x.as_slice().len());
        for (row, &ti) in x.iter_rows().zip(t) {
            data.extend(f(row, ti));
        }
        Batch::new(x.rows(), x.dim(), data)
    }
}

impl X0Source for GaussianWorld {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn sample(&self, n: usize, rng: &mut Rng) -> Result<Batch> {
        let mut data = Vec::with_capacity(n * self.dim());
        for _ in 0..n {
            for m in &self.mu {
                let z: f64 = StandardNormal.sample(rng);
                data.push(m + self.s * z);
            }
        }
        Batch::new(n, self.dim(), data)
    }
}

impl ConsistencyMap for GaussianWorld {
    fn consistency(&self, x: &Batch, t: &[f64], _ctx: &ForwardCtx) -> Result<Batch> {
        self.map_rows(x, t, |row, ti| self.consistency_point(row, ti))
    }
}

impl Denoiser for GaussianWorld {
    fn denoise(&self, x: &Batch, t: &[f64]) -> Result<Batch> {
        self.map_rows(x, t, |row, ti| self.denoise_point(row, ti))
    }
}

pub fn gaussian_score(x: &[f64], t: f64, world: &GaussianWorld) -> Vec<f64> {
    world.score(x, t)
}

pub fn gaussian_denoiser(x: &[f64], t: f64, world: &GaussianWorld) -> Vec<f64> {
    world.denoise_point(x, t)
}

pub fn gaussian_consistency(x: &[f64], t: f64, world: &GaussianWorld) -> Vec<f64> {
    world.consistency_point(x, t)
}

/// Self-normalized importance estimate of `E[−(x_t − x₀)/t² | x_t]` from `n` prior draws.
pub fn mc_score<S: X0Source + ?Sized>(
    x_t: &[f64],
    t: f64,
    source: &S,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(Error::Config("mc_score needs at least one sample".into()));
    }
    if !(t > 0.0) {
        return Err(Error::Config(format!("mc_score needs t > 0, got {t}")));
    }
    let x0 = source.sample(n_samples, rng)?;
    mc_score_from(x_t, t, &x0)
}

/// [`mc_score`] over a fixed set of clean samples.
pub fn mc_score_from(x_t: &[f64], t: f64, x0: &Batch) -> Result<Vec<f64>> {
    if x0.dim() != x_t.len() {
        return Err(Error::Shape(format!(
            "x_t has dim {}, samples have dim {}",
            x_t.len(),
            x0.dim()
        )));
    }
    if x0.is_empty() {
        return Err(Error::Config("mc_score needs at least one sample".into()));
    }
    let inv = 1.0 / (2.0 * t * t);
    let logw: Vec<f64> = x0
        .iter_rows()
        .map(|row| -row.iter().zip(x_t).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() * inv)
        .collect();
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numeric(format!(
            "all importance weights vanished (max log-weight {max}, t={t}, {} samples)",
            x0.rows()
        )));
    }
    let mut total = 0.0;
    let mut acc = vec![0.0; x_t.len()];
    for (row, lw) in x0.iter_rows().zip(&logw) {
        let w = (lw - max).exp();
        total += w;
        for (a, (xt, x0v)) in acc.iter_mut().zip(x_t.iter().zip(row)) {
            *a += w * -(xt - x0v);
        }
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Numeric(format!(
            "importance weights sum to {total} (t={t}, {} samples)",
            x0.rows()
        )));
    }
    Ok(acc.into_iter().map(|a| a / (total * t * t)).collect())
}

/// Outcome of one invariant in [`invariant_suite`].
#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn at_most(name: &'static str, value: f64, threshold: f64) -> Self {
        Self {
            name,
            value,
            threshold,
            passed: value <= threshold,
        }
    }
}

/// Classical RK4 on `dx/dτ = (x − D(x, τ))/τ` from `t` down to 0 with `steps` uniform steps.
pub fn integrate_pf_ode<D: Fn(&[f64], f64) -> Vec<f64>>(x: &[f64], t: f64, steps: usize, denoise: D) -> Vec<f64> {
    let field = |x: &[f64], tau: f64| -> Vec<f64> {
        if tau == 0.0 {
            // the Gaussian field vanishes linearly at τ = 0
            return vec![0.0; x.len()];
        }
        let d = denoise(x, tau);
        x.iter().zip(&d).map(|(a, b)| (a - b) / tau).collect()
    };
    let h = -t / steps as f64;
    let mut x = x.to_vec();
    let mut tau = t;
    let axpy = |x: &[f64], k: &[f64], a: f64| -> Vec<f64> { x.iter().zip(k).map(|(x, k)| x + a * k).collect() };
    for i in 0..steps {
        let k1 = field(&x, tau);
        let k2 = field(&axpy(&x, &k1, h / 2.0), tau + h / 2.0);
        let k3 = field(&axpy(&x, &k2, h / 2.0), tau + h / 2.0);
        let next = if i + 1 == steps { 0.0 } else { tau + h };
        let k4 = field(&axpy(&x, &k3, h), next);
        for j in 0..x.len() {
            x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        tau = next;
    }
    x
}

/// Closed-form identities of the Gaussian world, checked numerically.
pub fn invariant_suite(world: &GaussianWorld, rng: &mut Rng) -> Result<Vec<CheckOutcome>> {
    let dim = world.dim();
    let ts = [0.0, 0.01, 0.1, 0.5, 1.0, 3.0, 10.0, 80.0];
    let xs = world.sample(16, rng)?;
    let mut tweedie: f64 = 0.0;
    let mut ode: f64 = 0.0;
    let mut residual: f64 = 0.0;
    let mut idem: f64 = 0.0;
    let mut along: f64 = 0.0;
    for x in xs.iter_rows() {
        let x: Vec<f64> = x.iter().map(|v| v * 3.0).collect();
        for &t in &ts {
            let score = world.score(&x, t);
            let den = world.denoise_point(&x, t);
            for j in 0..dim {
                tweedie = tweedie.max((x[j] + t * t * score[j] - den[j]).abs());
            }
            let f = world.consistency_point(&x, t);
            if t > 0.0 {
                let num = integrate_pf_ode(&x, t, 4000, |y, tau| world.denoise_point(y, tau));
                ode = ode.max(f.iter().zip(&num).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
                // five-point derivative of the closed-form trajectory against the ODE field
                let h = 1e-3 * t.max(1e-2);
                for &tau in &[0.3 * t, 0.7 * t] {
                    let p = |dt: f64| world.trajectory_point(&x, t, tau + dt);
                    let (a, b, c, d) = (p(-2.0 * h), p(-h), p(h), p(2.0 * h));
                    let xt = world.trajectory_point(&x, t, tau);
                    let dn = world.denoise_point(&xt, tau);
                    for j in 0..dim {
                        let deriv = (a[j] - 8.0 * b[j] + 8.0 * c[j] - d[j]) / (12.0 * h);
                        let rhs = (xt[j] - dn[j]) / tau;
                        residual = residual.max((deriv - rhs).abs());
                    }
                    let g = world.consistency_point(&xt, tau);
                    along = along.max(g.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
                }
            }
            let ff = world.consistency_point(&f, 0.0);
            idem = idem.max(ff.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    let mut mc_rel: f64 = 0.0;
    let std0 = world.s;
    for &t in &[0.5, 1.0, 2.0, 5.0] {
        let sd = (std0 * std0 + t * t).sqrt();
        for k in [1.0, -2.0] {
            let x: Vec<f64> = world.mu.iter().map(|m| m + k * sd / (dim as f64).sqrt()).collect();
            let est = mc_score(&x, t, world, 100_000, rng)?;
            let exact = world.score(&x, t);
            let num: f64 = est.iter().zip(&exact).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let den: f64 = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
            mc_rel = mc_rel.max(num / den);
        }
    }
    Ok(vec![
        CheckOutcome::at_most("tweedie identity", tweedie, 1e-12),
        CheckOutcome::at_most("consistency map vs RK4 PF-ODE", ode, 1e-6),
        CheckOutcome::at_most("PF-ODE residual of closed-form trajectory", residual, 1e-9),
        CheckOutcome::at_most("consistency constant along trajectory", along, 1e-10),
        CheckOutcome::at_most("consistency map idempotence", idem, 0.0),
        CheckOutcome::at_most("mc_score relative error (n=1e5)", mc_rel, 0.02),
    ])
}
