//! Few-step consistency sampling and a deterministic PF-ODE baseline sampler.
//!
//! Every noise draw is keyed by `(seed, stage, row)`, so changing the batch
//! size or step count never perturbs the draws of other rows.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::cmodel::{ConsistencyMap, Denoiser};
use crate::distill::{ode_step_with, Solver};
use crate::error::{Error, Result};
use crate::nnkit::ForwardCtx;
use crate::rng::{self, stage};

/// Intermediate level used for CIFAR-10 2-step sampling.
pub const CIFAR10_INTERMEDIATE: f64 = 0.821;
/// Intermediate level used for ImageNet 64×64 2-step sampling.
pub const IMAGENET64_INTERMEDIATE: f64 = 1.526;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub steps: usize,
    pub t_start: f64,
    /// Renoise levels, strictly decreasing, length `steps − 1`.
    #[serde(default)]
    pub intermediates: Vec<f64>,
    /// Fresh noise at each renoise; otherwise the initial direction is reused.
    #[serde(default = "yes")]
    pub stochastic: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

/// `t_start^0.3 · t_min^0.7`.
pub fn default_intermediate(t_start: f64, t_min: f64) -> f64 {
    t_start.powf(0.3) * t_min.powf(0.7)
}

impl SamplePlan {
    pub fn one_step(t_start: f64, seed: u64) -> Self {
        Self {
            steps: 1,
            t_start,
            intermediates: Vec::new(),
            stochastic: true,
            seed,
        }
    }

    pub fn two_step(t_start: f64, tau: f64, seed: u64) -> Self {
        Self {
            steps: 2,
            t_start,
            intermediates: vec![tau],
            stochastic: true,
            seed,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.steps == 0 {
            p.push("steps must be >= 1".into());
        }
        if !(self.t_start > 0.0 && self.t_start.is_finite()) {
            p.push(format!("t_start must be > 0, got {}", self.t_start));
        }
        if self.intermediates.len() + 1 != self.steps {
            p.push(format!(
                "{} steps need {} intermediates, got {}",
                self.steps,
                self.steps.saturating_sub(1),
                self.intermediates.len()
            ));
        }
        let mut prev = self.t_start;
        for &tau in &self.intermediates {
            if !(tau > 0.0 && tau < prev) {
                p.push(format!("intermediates must be positive and strictly decreasing below t_start, got {tau}"));
                break;
            }
            prev = tau;
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

/// `n × dim` standard normals scaled by `scale`; row `i` depends only on `(seed, stage, i)`.
pub fn keyed_normals(seed: u64, stage: u64, n: usize, dim: usize, scale: f64) -> Batch {
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        let mut rng = rng::stream(seed, stage, i as u64);
        data.extend((0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)));
    }
    Batch::new(n, dim, data).expect("length is n * dim")
}

/// Sample with a consistency map: `x̂₀ = f(t_start·ε, t_start)`, then renoise and re-map at each intermediate.
pub fn cm_sample<M: ConsistencyMap + ?Sized>(
    model: &M,
    plan: &SamplePlan,
    n: usize,
    dim: usize,
) -> Result<Batch> {
    plan.validate()?;
    let init = keyed_normals(plan.seed, stage::SAMPLE_INIT, n, dim, 1.0);
    let ctx = ForwardCtx::eval();
    let mut x = init.clone();
    x.as_mut_slice().iter_mut().for_each(|v| *v *= plan.t_start);
    let mut x0 = model.consistency(&x, &vec![plan.t_start; n], &ctx)?;
    for (k, &tau) in plan.intermediates.iter().enumerate() {
        let eps = if plan.stochastic {
            let stage_seed = rng::derive_seed(plan.seed, stage::SAMPLE_RENOISE, k as u64);
            keyed_normals(stage_seed, stage::SAMPLE_RENOISE, n, dim, 1.0)
        } else {
            init.clone()
        };
        let mut xt = x0.clone();
        for (v, e) in xt.as_mut_slice().iter_mut().zip(eps.as_slice()) {
            *v += tau * e;
        }
        x0 = model.consistency(&xt, &vec![tau; n], &ctx)?;
    }
    Ok(x0)
}

/// Integrate the PF-ODE along `grid` from `grid[0]·ε`.
pub fn diffusion_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    grid: &[f64],
    n: usize,
    dim: usize,
    seed: u64,
    solver: Solver,
    final_denoise: bool,
) -> Result<Batch> {
    if grid.is_empty() {
        return Err(Error::Config("empty sampling grid".into()));
    }
    if grid.windows(2).any(|w| !(w[0] > w[1])) || !(grid[grid.len() - 1] > 0.0) {
        return Err(Error::Config(
            "sampling grid must be strictly decreasing and end above 0".into(),
        ));
    }
    let mut x = keyed_normals(seed, stage::SAMPLE_INIT, n, dim, grid[0]);
    for w in grid.windows(2) {
        x = ode_step_with(denoiser, solver, &x, &vec![w[0]; n], &vec![w[1]; n])?;
    }
    if final_denoise {
        x = denoiser.denoise(&x, &vec![grid[grid.len() - 1]; n])?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::GaussianWorld;

    #[test]
    fn plan_validation() {
        assert!(SamplePlan::one_step(80.0, 0).validate().is_ok());
        assert!(SamplePlan::two_step(80.0, 0.8, 0).validate().is_ok());
        assert!(SamplePlan::two_step(80.0, 90.0, 0).validate().is_err());
        let empty = SamplePlan {
            steps: 0,
            ..SamplePlan::one_step(80.0, 0)
        };
        assert!(matches!(cm_sample(&GaussianWorld::standard(1), &empty, 4, 1), Err(Error::Config(_))));
    }

    #[test]
    fn default_intermediate_value() {
        let tau = default_intermediate(80.0, 0.002);
        assert!((tau - 80f64.powf(0.3) * 0.002f64.powf(0.7)).abs() < 1e-15);
        assert!(tau > 0.002 && tau < 80.0);
    }

    #[test]
    fn rows_do_not_depend_on_batch_size() {
        let a = keyed_normals(5, stage::SAMPLE_INIT, 10, 3, 1.0);
        let b = keyed_normals(5, stage::SAMPLE_INIT, 4, 3, 1.0);
        assert_eq!(a.slice_rows(0, 4), b);
    }

    #[test]
    fn two_step_variance_matches_composition() {
        let w = GaussianWorld::standard(1);
        let (t, tau) = (80.0, 1.0);
        let x = cm_sample(&w, &SamplePlan::two_step(t, tau, 9), 100_000, 1).unwrap();
        let v1 = t * t / (1.0 + t * t);
        // x̂ + τε has variance v1 + τ², mapped by the factor 1/√(1 + τ²)
        let expect = (v1 + tau * tau) / (1.0 + tau * tau);
        let got = x.variance()[0];
        assert!((got / expect - 1.0).abs() < 0.02, "{got} vs {expect}");
    }

    #[test]
    fn diffusion_grid_errors() {
        let w = GaussianWorld::standard(1);
        assert!(diffusion_sample(&w, &[1.0, 2.0], 3, 1, 0, Solver::Heun, false).is_err());
        assert!(diffusion_sample(&w, &[1.0, 0.0], 3, 1, 0, Solver::Heun, false).is_err());
    }

    #[test]
    fn two_point_euler_matches_truncation() {
        let w = GaussianWorld::standard(1);
        let (t, r) = (2.0, 1.5);
        let x = diffusion_sample(&w, &[t, r], 3, 1, 4, Solver::Euler, false).unwrap();
        let init = keyed_normals(4, stage::SAMPLE_INIT, 3, 1, t);
        for (got, x0) in x.as_slice().iter().zip(init.as_slice()) {
            let exact = w.trajectory_point(&[*x0], t, r)[0];
            let euler = x0 + (r - t) * (x0 - w.denoise_point(&[*x0], t)[0]) / t;
            assert!((got - euler).abs() < 1e-14);
            assert!((got - exact).abs() > 0.0);
        }
    }
}
