//! `f(x, t) = c_skip(t)·x + c_out(t)·F(c_in(t)·x, t)` around a raw network.
//!
//! `c_skip(0) = 1` and `c_out(0) = 0`, so `f(x, 0) = x` holds for any
//! parameters. `c_in = 1/√(t² + σ_d²)` is the usual EDM input scaling.

use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::nnkit::{ForwardCache, ForwardCtx, Mlp, NetSpec, ParamVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmConfig {
    pub sigma_data: f64,
    pub net: NetSpec,
}

pub fn skip_out_scales(t: f64, sigma_data: f64) -> (f64, f64) {
    let sd2 = sigma_data * sigma_data;
    let denom = t * t + sd2;
    (sd2 / denom, t * sigma_data / denom.sqrt())
}

pub fn input_scale(t: f64, sigma_data: f64) -> f64 {
    1.0 / (t * t + sigma_data * sigma_data).sqrt()
}

/// Anything that maps `(x_t, t)` to a clean-sample estimate along a trajectory.
pub trait ConsistencyMap {
    fn consistency(&self, x: &Batch, t: &[f64], ctx: &ForwardCtx) -> Result<Batch>;
}

/// Posterior-mean estimate `D(x, t) ≈ E[x₀ | x_t]`.
pub trait Denoiser {
    fn denoise(&self, x: &Batch, t: &[f64]) -> Result<Batch>;
}

#[derive(Clone, Debug)]
pub struct ConsistencyModel {
    net: Mlp,
    sigma_data: f64,
}

#[derive(Clone, Debug)]
pub struct CmCache {
    net: ForwardCache,
    c_out: Vec<f64>,
}

impl CmCache {
    pub fn net(&self) -> &ForwardCache {
        &self.net
    }
}

impl ConsistencyModel {
    pub fn new(cfg: &CmConfig) -> Result<Self> {
        if !(cfg.sigma_data > 0.0 && cfg.sigma_data.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_data must be > 0, got {}",
                cfg.sigma_data
            )));
        }
        if cfg.net.input_dim != cfg.net.output_dim {
            return Err(Error::Config(format!(
                "consistency model needs input_dim == output_dim, got {} and {}",
                cfg.net.input_dim, cfg.net.output_dim
            )));
        }
        Ok(Self {
            net: Mlp::new(cfg.net.clone())?,
            sigma_data: cfg.sigma_data,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn dim(&self) -> usize {
        self.net.spec().input_dim
    }

    pub fn init(&self, seed: u64) -> ParamVector {
        self.net.init(seed)
    }

    pub fn apply(
        &self,
        params: &ParamVector,
        x: &Batch,
        t: &[f64],
        ctx: &ForwardCtx,
    ) -> Result<Batch> {
        self.apply_cached(params, x, t, ctx).map(|(f, _)| f)
    }

    pub fn apply_cached(
        &self,
        params: &ParamVector,
        x: &Batch,
        t: &[f64],
        ctx: &ForwardCtx,
    ) -> Result<(Batch, CmCache)> {
        if t.len() != x.rows() {
            return Err(Error::Shape(format!(
                "{} noise levels for {} rows",
                t.len(),
                x.rows()
            )));
        }
        let mut scaled = x.clone();
        for (i, row) in scaled.as_mut_slice().chunks_exact_mut(x.dim().max(1)).enumerate() {
            let c_in = input_scale(t[i], self.sigma_data);
            row.iter_mut().for_each(|v| *v *= c_in);
        }
        let (raw, cache) = self.net.forward_cached(params, &scaled, t, ctx)?;
        let mut out = raw;
        let mut c_outs = Vec::with_capacity(t.len());
        let dim = x.dim();
        for (i, (orow, xrow)) in out
            .as_mut_slice()
            .chunks_exact_mut(dim.max(1))
            .zip(x.iter_rows())
            .enumerate()
        {
            let (c_skip, c_out) = skip_out_scales(t[i], self.sigma_data);
            for (o, xv) in orow.iter_mut().zip(xrow) {
                *o = c_skip * xv + c_out * *o;
            }
            c_outs.push(c_out);
        }
        Ok((out, CmCache { net: cache, c_out: c_outs }))
    }

    /// Parameter gradient of `Σ d_f ⊙ f`.
    pub fn backward(
        &self,
        params: &ParamVector,
        cache: &CmCache,
        d_f: &Batch,
    ) -> Result<ParamVector> {
        if d_f.rows() != cache.c_out.len() {
            return Err(Error::Shape("output gradient rows do not match cache".into()));
        }
        let mut d_raw = d_f.clone();
        let dim = d_raw.dim().max(1);
        for (row, c_out) in d_raw.as_mut_slice().chunks_exact_mut(dim).zip(&cache.c_out) {
            row.iter_mut().for_each(|v| *v *= c_out);
        }
        self.net.backward(params, &cache.net, &d_raw)
    }

    pub fn bind<'a>(&'a self, params: &'a ParamVector) -> BoundModel<'a> {
        BoundModel {
            model: self,
            params,
        }
    }
}

/// A model together with a fixed parameter vector.
#[derive(Clone, Copy)]
pub struct BoundModel<'a> {
    pub model: &'a ConsistencyModel,
    pub params: &'a ParamVector,
}

impl ConsistencyMap for BoundModel<'_> {
    fn consistency(&self, x: &Batch, t: &[f64], ctx: &ForwardCtx) -> Result<Batch> {
        self.model.apply(self.params, x, t, ctx)
    }
}

/// A model pretrained with `r = 0` is a denoiser.
impl Denoiser for BoundModel<'_> {
    fn denoise(&self, x: &Batch, t: &[f64]) -> Result<Batch> {
        self.model.apply(self.params, x, t, &ForwardCtx::eval())
    }
}

pub fn consistency_fn(
    params: &ParamVector,
    x: &Batch,
    t: &[f64],
    ctx: &ForwardCtx,
    cfg: &CmConfig,
) -> Result<Batch> {
    ConsistencyModel::new(cfg)?.apply(params, x, t, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::{finite_diff_grad, value_and_grad, Objective};

    fn cfg() -> CmConfig {
        CmConfig {
            sigma_data: 0.5f64.sqrt(),
            net: NetSpec {
                dropout_rate: 0.2,
                ..NetSpec::new(2, &[8, 8], 2)
            },
        }
    }

    #[test]
    fn scales_at_reference_points() {
        assert_eq!(skip_out_scales(0.0, 0.5), (1.0, 0.0));
        let (s, o) = skip_out_scales(1.0, 0.5f64.sqrt());
        assert!((s - 1.0 / 3.0).abs() < 1e-15);
        assert!((o - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let (s, o) = skip_out_scales(1e9, 0.5);
        assert!(s < 1e-15 && (o - 0.5).abs() < 1e-12);
    }

    #[test]
    fn boundary_is_exact_for_any_params() {
        let m = ConsistencyModel::new(&cfg()).unwrap();
        let x = Batch::from_rows(&[[1.5, -2.25], [1e3, 3e-7], [0.0, -0.0]]).unwrap();
        for seed in 0..5 {
            let p = m.init(seed);
            let f = m.apply(&p, &x, &[0.0; 3], &ForwardCtx::train(seed)).unwrap();
            assert_eq!(f, x);
        }
    }

    #[test]
    fn zero_net_is_pure_skip() {
        let m = ConsistencyModel::new(&cfg()).unwrap();
        let x = Batch::from_rows(&[[3.0, 0.0]]).unwrap();
        let f = m.apply(&m.net().zeros(), &x, &[1.0], &ForwardCtx::eval()).unwrap();
        assert!((f.row(0)[0] - 1.0).abs() < 1e-15 && f.row(0)[1] == 0.0);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = cfg();
        c.sigma_data = 0.0;
        assert!(ConsistencyModel::new(&c).is_err());
        let mut c = cfg();
        c.net.output_dim = 3;
        assert!(ConsistencyModel::new(&c).is_err());
    }

    struct SqNorm<'a> {
        m: &'a ConsistencyModel,
        x: Batch,
        t: Vec<f64>,
        ctx: ForwardCtx,
    }

    impl Objective for SqNorm<'_> {
        fn value(&self, p: &ParamVector) -> Result<f64> {
            let f = self.m.apply(p, &self.x, &self.t, &self.ctx)?;
            Ok(f.as_slice().iter().map(|v| v * v).sum())
        }

        fn value_and_grad(&self, p: &ParamVector) -> Result<(f64, ParamVector)> {
            let (f, cache) = self.m.apply_cached(p, &self.x, &self.t, &self.ctx)?;
            let value = f.as_slice().iter().map(|v| v * v).sum();
            let d = Batch::new(f.rows(), f.dim(), f.as_slice().iter().map(|v| 2.0 * v).collect())?;
            Ok((value, self.m.backward(p, &cache, &d)?))
        }
    }

    #[test]
    fn gradient_of_squared_output_matches_finite_differences() {
        let m = ConsistencyModel::new(&cfg()).unwrap();
        let obj = SqNorm {
            m: &m,
            x: Batch::from_rows(&[[0.4, -1.2], [2.0, 0.3], [-0.5, 0.9]]).unwrap(),
            t: vec![0.3, 1.0, 12.0],
            ctx: ForwardCtx::train(11),
        };
        let p = m.init(4);
        let (_, g) = value_and_grad(&p, &obj).unwrap();
        let fd = finite_diff_grad(&p, &obj, 1e-4).unwrap();
        for (a, b) in g.values().iter().zip(fd.values()) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-5);
            assert!(rel <= 1e-3, "{a} vs {b}");
        }
    }
}
