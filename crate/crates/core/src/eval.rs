//! Sample-quality metrics, power-law fitting, the fixed-N error-accumulation
//! experiment and the weighted flow-matching toy.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::cmodel::{ConsistencyMap, ConsistencyModel};
use crate::error::{Error, Result};
use crate::nnkit::{ForwardCtx, Mlp, NetSpec, ParamVector};
use crate::oracle::{GaussianWorld, X0Source};
use crate::rng::{self, stage};
use crate::schedule::{ict_interval_pmf, karras_grid};
use crate::store::{make_dataset, DatasetKind, DatasetSpec, SourceStream};
use crate::trainer::{adam_apply, PairRule, TrainConfig, Trainer};

/// Exact 1D Wasserstein-1 between two empirical distributions (sorted in place).
pub fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    // integrate |F_a⁻¹(u) − F_b⁻¹(u)| over the merged quantile breakpoints
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut u, mut total) = (0, 0, 0.0, 0.0);
    while i < a.len() && j < b.len() {
        let next_a = (i + 1) as f64 / na;
        let next_b = (j + 1) as f64 / nb;
        let next = next_a.min(next_b);
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total
}

/// Mean 1D W₁ over `n_proj` random unit directions drawn from `seed`.
pub fn sliced_wasserstein(a: &Batch, b: &Batch, n_proj: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Shape("sliced Wasserstein of an empty batch".into()));
    }
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("dims {} and {}", a.dim(), b.dim())));
    }
    if n_proj == 0 {
        return Err(Error::Config("n_proj must be >= 1".into()));
    }
    let dim = a.dim();
    let project = |x: &Batch, dir: &[f64]| -> Vec<f64> {
        x.iter_rows().map(|r| r.iter().zip(dir).map(|(u, v)| u * v).sum()).collect()
    };
    let mut total = 0.0;
    for k in 0..n_proj {
        let mut rng = rng::stream(seed, stage::PROJECTIONS, k as u64);
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        total += wasserstein_1d(&mut project(a, &dir), &mut project(b, &dir));
    }
    Ok(total / n_proj as f64)
}

fn rbf(x: &[f64], y: &[f64], inv_two_h2: f64) -> f64 {
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-sq * inv_two_h2).exp()
}

fn mean_offdiag(x: &[&[f64]], inv: f64) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += rbf(x[i], x[j], inv);
        }
    }
    2.0 * s / (n * (n - 1)) as f64
}

fn mmd_rows(a: &[&[f64]], b: &[&[f64]], bandwidth: f64) -> f64 {
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    // equal sizes: paired U-statistic, which drops the i = j cross terms and is exactly 0 for A = B
    let paired = a.len() == b.len();
    let mut cross = 0.0;
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            if !(paired && i == j) {
                cross += rbf(x, y, inv);
            }
        }
    }
    let pairs = if paired { a.len() * (a.len() - 1) } else { a.len() * b.len() };
    mean_offdiag(a, inv) + mean_offdiag(b, inv) - 2.0 * cross / pairs as f64
}

/// Unbiased MMD² with the Gaussian kernel `exp(−‖x−y‖²/(2h²))`.
pub fn mmd_rbf(a: &Batch, b: &Batch, bandwidth: f64) -> Result<f64> {
    if !(bandwidth > 0.0) {
        return Err(Error::Config(format!("bandwidth must be > 0, got {bandwidth}")));
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::Shape("unbiased MMD needs at least 2 rows per sample".into()));
    }
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("dims {} and {}", a.dim(), b.dim())));
    }
    let ra: Vec<&[f64]> = a.iter_rows().collect();
    let rb: Vec<&[f64]> = b.iter_rows().collect();
    Ok(mmd_rows(&ra, &rb, bandwidth))
}

/// MMD² values under random relabelings of the pooled sample.
pub fn mmd_permutation_null(
    a: &Batch,
    b: &Batch,
    bandwidth: f64,
    n_perm: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    mmd_rbf(a, b, bandwidth)?;
    let mut pooled: Vec<&[f64]> = a.iter_rows().chain(b.iter_rows()).collect();
    let mut out = Vec::with_capacity(n_perm);
    for k in 0..n_perm {
        let mut rng = rng::stream(seed, stage::PERMUTATION, k as u64);
        pooled.shuffle(&mut rng);
        let (x, y) = pooled.split_at(a.rows());
        out.push(mmd_rows(x, y, bandwidth));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub k: f64,
    pub alpha: f64,
    pub pearson_loglog: f64,
    /// False when either log series is constant.
    pub pearson_defined: bool,
}

/// Least squares on `(ln C, ln y)`: `y ≈ K·C^α`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(Error::Config(format!("need at least 3 points, got {}", points.len())));
    }
    if let Some(p) = points.iter().find(|(c, y)| !(*c > 0.0 && *y > 0.0 && c.is_finite() && y.is_finite())) {
        return Err(Error::Config(format!("power-law fit needs positive values, got {p:?}")));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in lx.iter().zip(&ly) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::Config("power-law fit needs at least two distinct compute values".into()));
    }
    let alpha = sxy / sxx;
    let intercept = my - alpha * mx;
    let defined = syy > 0.0;
    let pearson = if defined {
        (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Ok(PowerLawFit {
        k: intercept.exp(),
        alpha,
        pearson_loglog: pearson,
        pearson_defined: defined,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurseRow {
    pub n: usize,
    /// Mean over chains of `‖f(x_T, T) − x₀‖`.
    pub endpoint_error: f64,
    /// Mean over chains of `Σᵢ ‖f(x_{tᵢ}) − f(x_{rᵢ})‖`.
    pub bound_rhs: f64,
    /// Largest per-chain `lhs − rhs`; never positive beyond rounding.
    pub max_violation: f64,
    pub chains: usize,
}

/// Ascending levels `0 = r₁ < t₁ = r₂ < … < t_N = T` for `N` intervals.
pub fn interval_levels(n: usize, t_min: f64, t_max: f64, rho: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Config("interval count must be >= 1".into()));
    }
    let mut levels = if n == 1 {
        vec![t_max]
    } else {
        karras_grid(n, t_min, t_max, rho)?
    };
    levels.push(0.0);
    levels.reverse();
    Ok(levels)
}

/// Per-chain telescoping check on shared-noise chains through `levels`.
pub fn chain_errors<M: ConsistencyMap + ?Sized>(
    model: &M,
    levels: &[f64],
    x0: &Batch,
    eps: &Batch,
) -> Result<Vec<(f64, f64)>> {
    x0.check_same_shape(eps)?;
    let n = x0.rows();
    let ctx = ForwardCtx::eval();
    let mut outs = Vec::with_capacity(levels.len());
    for &l in levels {
        let mut x = x0.clone();
        for (v, e) in x.as_mut_slice().iter_mut().zip(eps.as_slice()) {
            *v += l * e;
        }
        outs.push(model.consistency(&x, &vec![l; n], &ctx)?);
    }
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let top = outs.last().expect("at least two levels");
    Ok((0..n)
        .map(|i| {
            let lhs = dist(top.row(i), x0.row(i));
            let rhs = outs.windows(2).map(|w| dist(w[1].row(i), w[0].row(i))).sum();
            (lhs, rhs)
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct CurseConfig {
    pub train: TrainConfig,
    pub world: GaussianWorld,
    pub n_values: Vec<usize>,
    pub chains: usize,
    pub rho: f64,
    pub eval_seed: u64,
}

/// Train one model per interval count on its fixed grid and measure the error bound.
pub fn curse_experiment(cfg: &CurseConfig) -> Result<Vec<CurseRow>> {
    let s = &cfg.train.schedule;
    let mut rows = Vec::with_capacity(cfg.n_values.len());
    for &n in &cfg.n_values {
        let levels = interval_levels(n, s.t_min, s.t_max, cfg.rho)?;
        let descending: Vec<f64> = levels.iter().rev().copied().collect();
        let mut pmf = ict_interval_pmf(&descending, s.p_mean, s.p_std)?;
        pmf.reverse();
        if pmf.iter().all(|&p| p == 0.0) {
            pmf = vec![1.0; n];
        }
        let mut trainer = Trainer::new(cfg.train.clone())?.with_rule(PairRule::Grid {
            levels: levels.clone(),
            pmf,
        });
        let mut data = SourceStream::new(&cfg.world, cfg.train.seed);
        trainer.run(&mut data, |_, _| {})?;
        let model = trainer.model();
        let params = &trainer.state().ema_params;
        let mut rng = rng::stream(cfg.eval_seed, stage::EVAL, n as u64);
        let x0 = cfg.world.sample(cfg.chains, &mut rng)?;
        let eps = cfg.world.sample(cfg.chains, &mut rng).map(|b| {
            let mu = &cfg.world.mu;
            let mut b = b;
            for row in b.as_mut_slice().chunks_exact_mut(mu.len()) {
                for (v, m) in row.iter_mut().zip(mu) {
                    *v = (*v - m) / cfg.world.s;
                }
            }
            b
        })?;
        let errs = chain_errors(&model.bind(params), &levels, &x0, &eps)?;
        let k = errs.len() as f64;
        rows.push(CurseRow {
            n,
            endpoint_error: errs.iter().map(|e| e.0).sum::<f64>() / k,
            bound_rhs: errs.iter().map(|e| e.1).sum::<f64>() / k,
            max_violation: errs.iter().map(|e| e.0 - e.1).fold(f64::NEG_INFINITY, f64::max),
            chains: errs.len(),
        });
    }
    Ok(rows)
}

/// Weighted flow matching on the Swiss roll.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowToyConfig {
    pub p: f64,
    pub epsilon: f64,
    pub steps_budget: u64,
    pub seed: u64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    /// False runs plain unweighted flow matching and ignores `p`.
    pub weighted: bool,
    pub eval_samples: usize,
    pub n_proj: usize,
}

impl FlowToyConfig {
    pub fn new(p: f64, steps_budget: u64, seed: u64) -> Self {
        Self {
            p,
            epsilon: 1e-6,
            steps_budget,
            seed,
            batch_size: 256,
            hidden: vec![64, 64],
            lr: 2e-3,
            weighted: true,
            eval_samples: 4000,
            n_proj: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowToyMetrics {
    pub p: f64,
    /// `(euler steps, sliced Wasserstein to data)` for 1, 2, 4, 8 steps.
    pub sw: Vec<(usize, f64)>,
    /// Mean SW over the evaluated step counts.
    pub few_step_sw: f64,
    pub losses: Vec<f64>,
}

pub const FLOW_EVAL_STEPS: [usize; 4] = [1, 2, 4, 8];

/// Euler from `t = 1` (noise) to `t = 0` (data) with a velocity network.
pub fn flow_euler(net: &Mlp, params: &ParamVector, x1: &Batch, steps: usize) -> Result<Batch> {
    let n = x1.rows();
    let mut x = x1.clone();
    let h = 1.0 / steps as f64;
    for k in 0..steps {
        let t = 1.0 - k as f64 * h;
        let v = net.forward(params, &x, &vec![t; n], &ForwardCtx::eval())?;
        for (xv, vv) in x.as_mut_slice().iter_mut().zip(v.as_slice()) {
            *xv -= h * vv;
        }
    }
    Ok(x)
}

pub fn flow_toy_experiment(cfg: &FlowToyConfig) -> Result<FlowToyMetrics> {
    if !(0.0..=1.0).contains(&cfg.p) {
        return Err(Error::Config(format!("p must be in [0, 1], got {}", cfg.p)));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(Error::Config("epsilon must be > 0".into()));
    }
    let data = make_dataset(&DatasetSpec::new(DatasetKind::SwissRoll).normalized(0.5), cfg.seed)?;
    let net = Mlp::new(NetSpec::new(2, &cfg.hidden, 2))?;
    let mut params = net.init(cfg.seed);
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut losses = Vec::with_capacity(cfg.steps_budget as usize);
    let b = cfg.batch_size;
    for it in 0..cfg.steps_budget {
        let mut rng = rng::stream(cfg.seed, stage::DATA, it);
        let x0 = data.draw(b, &mut rng);
        let mut rng = rng::stream(cfg.seed, stage::TRAIN_NOISE, it);
        let t: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
        let x1: Vec<f64> = (0..2 * b).map(|_| rng.sample(StandardNormal)).collect();
        let mut xt = Vec::with_capacity(2 * b);
        let mut target = Vec::with_capacity(2 * b);
        for i in 0..b {
            for j in 0..2 {
                let (a, z) = (x0.row(i)[j], x1[2 * i + j]);
                xt.push((1.0 - t[i]) * a + t[i] * z);
                target.push(z - a);
            }
        }
        let xt = Batch::new(b, 2, xt)?;
        let (out, cache) = net.forward_cached(&params, &xt, &t, &ForwardCtx::eval())?;
        let mut loss = 0.0;
        let mut d = Vec::with_capacity(2 * b);
        for i in 0..b {
            let delta = [out.row(i)[0] - target[2 * i], out.row(i)[1] - target[2 * i + 1]];
            let sq = delta[0] * delta[0] + delta[1] * delta[1];
            let w = if cfg.weighted {
                (sq + cfg.epsilon).powf(-cfg.p)
            } else {
                1.0
            };
            loss += w * sq;
            d.extend(delta.iter().map(|dv| 2.0 * w * dv / b as f64));
        }
        let loss = loss / b as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iter: it,
                msg: format!("flow loss {loss}"),
            });
        }
        losses.push(loss);
        let grad = net.backward(&params, &cache, &Batch::new(b, 2, d)?)?;
        adam_apply(
            params.values_mut(),
            &mut m,
            &mut v,
            grad.values(),
            it + 1,
            [cfg.lr, 0.9, 0.999, 1e-8],
        );
    }
    let reference = data.reference(cfg.eval_samples, 0);
    let mut rng = rng::stream(cfg.seed, stage::SAMPLE_INIT, 0);
    let noise: Vec<f64> = (0..2 * cfg.eval_samples).map(|_| rng.sample(StandardNormal)).collect();
    let noise = Batch::new(cfg.eval_samples, 2, noise)?;
    let mut sw = Vec::new();
    for steps in FLOW_EVAL_STEPS {
        let x = flow_euler(&net, &params, &noise, steps)?;
        if !x.all_finite() {
            return Err(Error::Numeric(format!("non-finite samples at {steps} steps")));
        }
        sw.push((steps, sliced_wasserstein(&x, &reference, cfg.n_proj, cfg.seed)?));
    }
    let few_step_sw = sw.iter().map(|s| s.1).sum::<f64>() / sw.len() as f64;
    Ok(FlowToyMetrics {
        p: cfg.p,
        sw,
        few_step_sw,
        losses,
    })
}

/// Mean absolute error of a consistency map against the Gaussian oracle over a `(t, x)` grid.
pub fn map_error_vs_oracle(
    model: &ConsistencyModel,
    params: &ParamVector,
    world: &GaussianWorld,
    t_grid: &[f64],
    x_grid: &[f64],
) -> Result<f64> {
    if world.dim() != 1 {
        return Err(Error::Shape("grid comparison is defined for 1D worlds".into()));
    }
    let mut xs = Vec::new();
    let mut ts = Vec::new();
    for &t in t_grid {
        for &x in x_grid {
            xs.push(x);
            ts.push(t);
        }
    }
    let got = model.apply(params, &Batch::column(&xs), &ts, &ForwardCtx::eval())?;
    let total: f64 = xs
        .iter()
        .zip(&ts)
        .zip(got.as_slice())
        .map(|((x, t), g)| (g - world.consistency_point(&[*x], *t)[0]).abs())
        .sum();
    Ok(total / xs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn w1_unequal_sizes() {
        // {0, 1} vs {0}: half the mass moves by 1
        assert!((wasserstein_1d(&mut [0.0, 1.0], &mut [0.0]) - 0.5).abs() < 1e-15);
        let mut a = [0.0, 1.0, 2.0];
        let mut b = [0.0, 2.0];
        let w = wasserstein_1d(&mut a, &mut b);
        let w2 = wasserstein_1d(&mut b, &mut a);
        assert!((w - w2).abs() < 1e-15);
        assert!((w - 1.0 / 3.0).abs() < 1e-12, "{w}");
    }

    #[test]
    fn sw_identity_symmetry_translation() {
        let a = Batch::from_rows(&[[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]]).unwrap();
        let b = Batch::from_rows(&[[1.0, 1.0], [0.0, 3.0]]).unwrap();
        assert_eq!(sliced_wasserstein(&a, &a, 16, 1).unwrap(), 0.0);
        let ab = sliced_wasserstein(&a, &b, 16, 1).unwrap();
        assert!((ab - sliced_wasserstein(&b, &a, 16, 1).unwrap()).abs() < 1e-15);
        let shift = |x: &Batch| {
            let mut y = x.clone();
            for r in y.as_mut_slice().chunks_exact_mut(2) {
                r[0] += 3.0;
                r[1] -= 7.0;
            }
            y
        };
        let shifted = sliced_wasserstein(&shift(&a), &shift(&b), 16, 1).unwrap();
        assert!((ab - shifted).abs() < 1e-12);
        assert!(sliced_wasserstein(&a, &Batch::zeros(0, 2), 4, 0).is_err());
    }

    #[test]
    fn mmd_far_clusters() {
        let a = Batch::from_rows(&[[0.0], [0.01], [0.02]]).unwrap();
        let b = Batch::from_rows(&[[100.0], [100.01]]).unwrap();
        let m = mmd_rbf(&a, &b, 1.0).unwrap();
        assert!((m - 2.0).abs() < 1e-3, "{m}");
        assert!((m - mmd_rbf(&b, &a, 1.0).unwrap()).abs() < 1e-15);
        assert!(mmd_rbf(&a, &Batch::column(&[1.0]), 1.0).is_err());
        assert!(mmd_rbf(&a, &b, 0.0).is_err());
    }

    #[test]
    fn mmd_same_distribution_within_permutation_null() {
        let n = 10_000;
        let draw = |seed| {
            let mut r = rng::stream(seed, stage::EVAL, 0);
            Batch::column(&(0..n).map(|_| r.sample(StandardNormal)).collect::<Vec<f64>>())
        };
        let (a, b) = (draw(1), draw(2));
        let m = mmd_rbf(&a, &b, 1.0).unwrap();
        let null = mmd_permutation_null(&a, &b, 1.0, 20, 0).unwrap();
        let mean = null.iter().sum::<f64>() / null.len() as f64;
        let sd = (null.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (null.len() - 1) as f64).sqrt();
        assert!(m.abs() <= 3.0 * sd, "mmd {m} null sd {sd}");
    }

    #[test]
    fn power_law_recovery_and_degenerate() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0]
            .iter()
            .map(|&c| (c, 263.0 * f64::powf(c, -0.060)))
            .collect();
        let f = fit_power_law(&pts).unwrap();
        assert!((f.k - 263.0).abs() < 1e-6);
        assert!((f.alpha + 0.060).abs() < 1e-9);
        assert!((f.pearson_loglog + 1.0).abs() < 1e-12);
        let flat = fit_power_law(&[(1.0, 5.0), (2.0, 5.0), (3.0, 5.0)]).unwrap();
        assert_eq!(flat.alpha, 0.0);
        assert_eq!(flat.pearson_loglog, 0.0);
        assert!(!flat.pearson_defined);
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, -1.0), (3.0, 1.0)]).is_err());
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, 1.0)]).is_err());
    }

    #[test]
    fn levels_for_small_n() {
        assert_eq!(interval_levels(1, 0.002, 80.0, 7.0).unwrap(), vec![0.0, 80.0]);
        let l = interval_levels(3, 0.002, 80.0, 7.0).unwrap();
        assert_eq!(l.len(), 4);
        assert_eq!((l[0], l[1], l[3]), (0.0, 0.002, 80.0));
    }

    #[test]
    fn exact_map_has_zero_chain_error() {
        let w = GaussianWorld::standard(1);
        let levels = interval_levels(6, 0.002, 80.0, 7.0).unwrap();
        let x0 = Batch::column(&[0.3, -1.0]);
        let eps = Batch::column(&[1.1, 0.2]);
        // the oracle map sends every point of an exact trajectory to one endpoint,
        // but shared-noise chains are not trajectories, so only the inequality is exact
        for (lhs, rhs) in chain_errors(&w, &levels, &x0, &eps).unwrap() {
            assert!(lhs <= rhs + 1e-12);
        }
    }
}
