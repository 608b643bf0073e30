//! Consistency distillation: `x_r` comes from one solver step of a frozen
//! teacher's PF-ODE `dx/dt = (x − D(x,t))/t` instead of the shared-noise pair.

use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::cmodel::{ConsistencyModel, Denoiser};
use crate::error::{Error, Result};
use crate::nnkit::{ForwardCtx, ParamVector};
use crate::oracle::GaussianWorld;
use crate::rng::{self, stage, Rng};
use crate::schedule::NoisePair;
use crate::store;
use crate::trainer::{PairTarget, RunRecord, TrainConfig, TrainState, Trainer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Euler,
    #[default]
    Heun,
}

#[derive(Clone, Debug)]
pub enum TeacherDenoiser {
    Analytic(GaussianWorld),
    /// A frozen consistency model used as `D(x, t)`, evaluated without dropout.
    Model {
        model: ConsistencyModel,
        params: ParamVector,
    },
}

impl Denoiser for TeacherDenoiser {
    fn denoise(&self, x: &Batch, t: &[f64]) -> Result<Batch> {
        match self {
            TeacherDenoiser::Analytic(w) => w.denoise(x, t),
            TeacherDenoiser::Model { model, params } => {
                model.apply(params, x, t, &ForwardCtx::eval())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Teacher {
    pub denoiser: TeacherDenoiser,
    pub solver: Solver,
}

impl Teacher {
    pub fn analytic(world: GaussianWorld, solver: Solver) -> Self {
        Self {
            denoiser: TeacherDenoiser::Analytic(world),
            solver,
        }
    }

    /// Teacher from the EMA parameters of a checkpoint.
    pub fn from_checkpoint(path: &Path, solver: Solver) -> Result<Self> {
        let ckpt = store::load_checkpoint(path)?;
        let model = ckpt.model()?;
        let params = ckpt.section_params(&model, "ema")?;
        Ok(Self {
            denoiser: TeacherDenoiser::Model { model, params },
            solver,
        })
    }

    pub fn step(&self, x: &Batch, t: &[f64], r: &[f64]) -> Result<Batch> {
        ode_step_with(&self.denoiser, self.solver, x, t, r)
    }
}

impl PairTarget for Teacher {
    fn x_r(&self, _x0: &Batch, x_t: &Batch, pairs: &[NoisePair]) -> Result<Batch> {
        let t: Vec<f64> = pairs.iter().map(|p| p.t).collect();
        let r: Vec<f64> = pairs.iter().map(|p| p.r).collect();
        self.step(x_t, &t, &r)
    }
}

fn drift<D: Denoiser + ?Sized>(den: &D, x: &Batch, t: &[f64]) -> Result<Batch> {
    if let Some(bad) = t.iter().find(|&&t| !(t > 0.0)) {
        return Err(Error::Contract(format!(
            "PF-ODE vector field evaluated at t={bad}"
        )));
    }
    let d = den.denoise(x, t)?;
    x.check_same_shape(&d)?;
    let mut out = x.clone();
    for (i, row) in out.as_mut_slice().chunks_exact_mut(x.dim().max(1)).enumerate() {
        for (o, dv) in row.iter_mut().zip(d.row(i)) {
            *o = (*o - dv) / t[i];
        }
    }
    Ok(out)
}

/// One solver step per row from `t[i]` down to `r[i]`.
///
/// Heun rows with `r = 0` take the Euler step, since the field is singular there.
pub fn ode_step_with<D: Denoiser + ?Sized>(
    den: &D,
    solver: Solver,
    x: &Batch,
    t: &[f64],
    r: &[f64],
) -> Result<Batch> {
    if t.len() != x.rows() || r.len() != x.rows() {
        return Err(Error::Shape(format!(
            "{} rows with {} t and {} r levels",
            x.rows(),
            t.len(),
            r.len()
        )));
    }
    if let Some((ti, ri)) = t.iter().zip(r).find(|(t, r)| !(**t > **r && **r >= 0.0)) {
        return Err(Error::Contract(format!("solver step needs t > r >= 0, got t={ti} r={ri}")));
    }
    let d1 = drift(den, x, t)?;
    let dim = x.dim().max(1);
    let mut euler = x.clone();
    for (i, row) in euler.as_mut_slice().chunks_exact_mut(dim).enumerate() {
        let h = r[i] - t[i];
        for (o, d) in row.iter_mut().zip(d1.row(i)) {
            *o += h * d;
        }
    }
    if solver == Solver::Euler || r.iter().all(|&r| r == 0.0) {
        return Ok(euler);
    }
    // evaluate the corrector only where r > 0; placeholders elsewhere are discarded
    let r_safe: Vec<f64> = r.iter().zip(t).map(|(&r, &t)| if r > 0.0 { r } else { t }).collect();
    let d2 = drift(den, &euler, &r_safe)?;
    let mut out = euler;
    for (i, row) in out.as_mut_slice().chunks_exact_mut(dim).enumerate() {
        if r[i] == 0.0 {
            continue;
        }
        let h = r[i] - t[i];
        for (j, o) in row.iter_mut().enumerate() {
            *o = x.row(i)[j] + 0.5 * h * (d1.row(i)[j] + d2.row(i)[j]);
        }
    }
    Ok(out)
}

/// Scalar-level convenience over [`ode_step_with`].
pub fn ode_step(x: &Batch, t: f64, r: f64, teacher: &Teacher) -> Result<Batch> {
    let n = x.rows();
    teacher.step(x, &vec![t; n], &vec![r; n])
}

/// One distillation step on a snapshot state.
pub fn ecd_step(
    state: &TrainState,
    x0: &Batch,
    teacher: &Teacher,
    cfg: &TrainConfig,
) -> Result<(TrainState, RunRecord)> {
    let mut trainer = Trainer::from_state(cfg.clone(), state.clone())?;
    let rec = trainer.step_with(x0, teacher)?;
    Ok((trainer.into_state(), rec))
}

/// One-step student samples `f(T·ε′, T)` used as synthetic clean data.
pub fn datafree_x0(
    model: &ConsistencyModel,
    params: &ParamVector,
    t_max: f64,
    n: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    if !(t_max > 0.0) {
        return Err(Error::Config(format!("data-free noise level must be > 0, got {t_max}")));
    }
    let dim = model.dim();
    let data = (0..n * dim)
        .map(|_| t_max * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let x_t = Batch::new(n, dim, data)?;
    model.apply(params, &x_t, &vec![t_max; n], &ForwardCtx::eval())
}

/// Data-free distillation step: synthesize `x₀` from the current student, then distill.
pub fn datafree_step(trainer: &mut Trainer, teacher: &Teacher) -> Result<RunRecord> {
    let cfg = trainer.config();
    let mut rng = rng::stream(cfg.seed, stage::DATAFREE, trainer.state().iters);
    let x0 = datafree_x0(
        trainer.model(),
        &trainer.state().params,
        cfg.schedule.t_max,
        cfg.batch_size,
        &mut rng,
    )?;
    trainer.step_with(&x0, teacher)
}
