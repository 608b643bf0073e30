//! The tuning loop: draw `(x₀, ε, t, r)`, build the shared-noise pair,
//! regress `f_θ(x_t)` onto the stop-gradient target `f(x_r)`, step Adam,
//! update the EMA, and let the mapping function shrink `Δt` as `iters` grows.
//!
//! Pretraining is the same loop with `r = 0`, where the target collapses to
//! `x₀` and the objective is plain denoising regression.

use std::path::PathBuf;

use rand::distr::weighted::WeightedIndex;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::cmodel::{CmConfig, ConsistencyMap, ConsistencyModel};
use crate::error::{Error, Result};
use crate::nnkit::{ForwardCtx, Objective, ParamVector};
use crate::rng::{self, stage, Rng};
use crate::schedule::{map_r, sample_t, NoisePair, ScheduleConfig};
use crate::store::BatchSource;
use crate::weighting::{adaptive_weight, timestep_weight, LossBreakdown, WeightingConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// `r = 0` for every draw.
    Pretrain,
    /// `r = map_r(t, iters)`.
    #[default]
    Tune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub weighting: WeightingConfig,
    pub cm: CmConfig,
    pub batch_size: usize,
    pub total_iters: u64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_beta: f64,
    pub seed: u64,
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub phase: Phase,
    /// Inverse-square-root decay reference; `None` keeps the rate constant.
    #[serde(default)]
    pub lr_decay_ref: Option<u64>,
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        p.extend(self.schedule.problems().into_iter().map(|s| format!("schedule: {s}")));
        p.extend(self.weighting.problems().into_iter().map(|s| format!("weighting: {s}")));
        if let Err(e) = self.cm.net.validate() {
            p.push(format!("net: {e}"));
        }
        if !(self.cm.sigma_data > 0.0) {
            p.push(format!("sigma_data must be > 0, got {}", self.cm.sigma_data));
        }
        if self.batch_size == 0 {
            p.push("batch_size must be >= 1".into());
        }
        if self.total_iters == 0 {
            p.push("total_iters must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            p.push(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            p.push("adam betas must be in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            p.push("adam_eps must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            p.push(format!("ema_beta must be in [0, 1), got {}", self.ema_beta));
        }
        if self.lr_decay_ref == Some(0) {
            p.push("lr_decay_ref must be >= 1 when set".into());
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

    pub fn lr_at(&self, iter: u64) -> f64 {
        match self.lr_decay_ref {
            Some(t_ref) => self.lr / (iter as f64 / t_ref as f64).max(1.0).sqrt(),
            None => self.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamVector,
    pub ema_params: ParamVector,
    pub adam_m: ParamVector,
    pub adam_v: ParamVector,
    pub iters: u64,
}

impl TrainState {
    /// Fresh optimizer state around initial parameters.
    pub fn fresh(params: ParamVector) -> Self {
        Self {
            ema_params: params.clone(),
            adam_m: params.zeros_like(),
            adam_v: params.zeros_like(),
            params,
            iters: 0,
        }
    }

    pub fn check(&self) -> Result<()> {
        self.params.check_layout(&self.ema_params)?;
        self.params.check_layout(&self.adam_m)?;
        self.params.check_layout(&self.adam_v)
    }
}

/// One training step's log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iter: u64,
    pub t_mean: f64,
    pub r_mean: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// How `r` is paired with `t`.
#[derive(Clone, Debug, PartialEq)]
pub enum PairRule {
    /// `r = 0`.
    Zero,
    /// `r = map_r(t, iters)`.
    Mapping,
    /// Adjacent levels of a fixed ascending grid starting at 0; interval `i` is `[levels[i], levels[i+1]]`.
    Grid { levels: Vec<f64>, pmf: Vec<f64> },
}

impl PairRule {
    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Pretrain => PairRule::Zero,
            Phase::Tune => PairRule::Mapping,
        }
    }
}

/// Draw one noise pair per row, all sharing the batch dropout seed.
pub fn draw_pairs(
    schedule: &ScheduleConfig,
    rule: &PairRule,
    iters: u64,
    rows: usize,
    dim: usize,
    dropout_seed: u64,
    rng: &mut Rng,
) -> Result<Vec<NoisePair>> {
    let grid_index = match rule {
        PairRule::Grid { pmf, .. } => Some(
            WeightedIndex::new(pmf)
                .map_err(|e| Error::Config(format!("interval distribution: {e}")))?,
        ),
        _ => None,
    };
    let mut pairs = Vec::with_capacity(rows);
    for _ in 0..rows {
        let (t, r) = match (rule, &grid_index) {
            (PairRule::Grid { levels, .. }, Some(idx)) => {
                let i = idx.sample(rng);
                (levels[i + 1], levels[i])
            }
            (PairRule::Zero, _) => (sample_t(schedule, rng), 0.0),
            _ => {
                let t = sample_t(schedule, rng);
                (t, map_r(t, iters, schedule))
            }
        };
        let epsilon = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        pairs.push(NoisePair {
            t,
            r,
            epsilon,
            dropout_seed,
        });
    }
    Ok(pairs)
}

/// `x₀ + σ·ε` row-wise.
pub fn perturb(x0: &Batch, pairs: &[NoisePair], level: impl Fn(&NoisePair) -> f64) -> Result<Batch> {
    if pairs.len() != x0.rows() {
        return Err(Error::Shape(format!("{} pairs for {} rows", pairs.len(), x0.rows())));
    }
    let mut out = x0.clone();
    for (i, p) in pairs.iter().enumerate() {
        p.check(x0.dim())?;
        let s = level(p);
        for (o, e) in out.row_mut(i).iter_mut().zip(&p.epsilon) {
            *o += s * e;
        }
    }
    Ok(out)
}

/// Weighted squared-L2 terms between a student output and a constant target.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub value: f64,
    pub breakdown: Vec<LossBreakdown>,
    /// `∂ value / ∂ student_output`
    pub d_student: Batch,
}

pub fn loss_terms(
    student: &Batch,
    target: &Batch,
    pairs: &[NoisePair],
    w: &WeightingConfig,
) -> Result<LossTerms> {
    student.check_same_shape(target)?;
    let n = student.rows();
    if n == 0 || pairs.len() != n {
        return Err(Error::Shape(format!("{} pairs for {n} rows", pairs.len())));
    }
    let mut breakdown = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(student.as_slice().len());
    let mut value = 0.0;
    let mut delta = vec![0.0; student.dim()];
    for (i, pair) in pairs.iter().enumerate() {
        for ((dv, a), b) in delta.iter_mut().zip(student.row(i)).zip(target.row(i)) {
            *dv = a - b;
        }
        let raw = 0.5 * delta.iter().map(|v| v * v).sum::<f64>();
        let tw = timestep_weight(w.timestep_kind, pair.t, pair.r, w.sigma_data)?;
        let aw = adaptive_weight(&delta, w.c, w.p, w.adaptive_kind)?;
        let weighted = tw * aw * raw;
        value += weighted;
        let scale = tw * aw / n as f64;
        d.extend(delta.iter().map(|v| scale * v));
        breakdown.push(LossBreakdown {
            raw_sq_l2: raw,
            timestep_weight: tw,
            adaptive_weight: aw,
            weighted_loss: weighted,
        });
    }
    Ok(LossTerms {
        value: value / n as f64,
        breakdown,
        d_student: Batch::new(n, student.dim(), d)?,
    })
}

/// Loss value for any consistency map; the target branch is evaluated as a constant.
pub fn ect_loss<M: ConsistencyMap + ?Sized>(
    model: &M,
    x0: &Batch,
    pairs: &[NoisePair],
    weighting: &WeightingConfig,
    ctx: &ForwardCtx,
) -> Result<(f64, Vec<LossBreakdown>)> {
    let x_t = perturb(x0, pairs, |p| p.t)?;
    let x_r = perturb(x0, pairs, |p| p.r)?;
    let t: Vec<f64> = pairs.iter().map(|p| p.t).collect();
    let r: Vec<f64> = pairs.iter().map(|p| p.r).collect();
    let target = model.consistency(&x_r, &r, ctx)?;
    let student = model.consistency(&x_t, &t, ctx)?;
    let terms = loss_terms(&student, &target, pairs, weighting)?;
    Ok((terms.value, terms.breakdown))
}

/// Consistency objective on a fixed batch.
///
/// `value(θ)` is the true loss with the target computed at `θ`;
/// `value_and_grad(θ)` differentiates only the student branch.
pub struct EctObjective<'a> {
    pub model: &'a ConsistencyModel,
    pub x_t: Batch,
    pub x_r: Batch,
    pub t: Vec<f64>,
    pub r: Vec<f64>,
    pub pairs: &'a [NoisePair],
    pub weighting: &'a WeightingConfig,
    pub ctx: ForwardCtx,
}

impl<'a> EctObjective<'a> {
    /// Shared-noise pair `x_t = x₀ + tε`, `x_r = x₀ + rε`.
    pub fn shared_noise(
        model: &'a ConsistencyModel,
        x0: &Batch,
        pairs: &'a [NoisePair],
        weighting: &'a WeightingConfig,
        ctx: ForwardCtx,
    ) -> Result<Self> {
        let x_t = perturb(x0, pairs, |p| p.t)?;
        let x_r = perturb(x0, pairs, |p| p.r)?;
        Ok(Self::with_endpoints(model, x_t, x_r, pairs, weighting, ctx))
    }

    pub fn with_endpoints(
        model: &'a ConsistencyModel,
        x_t: Batch,
        x_r: Batch,
        pairs: &'a [NoisePair],
        weighting: &'a WeightingConfig,
        ctx: ForwardCtx,
    ) -> Self {
        Self {
            model,
            x_t,
            x_r,
            t: pairs.iter().map(|p| p.t).collect(),
            r: pairs.iter().map(|p| p.r).collect(),
            pairs,
            weighting,
            ctx,
        }
    }

    pub fn target(&self, teacher_params: &ParamVector) -> Result<Batch> {
        self.model.apply(teacher_params, &self.x_r, &self.r, &self.ctx)
    }

    /// Student gradient given an already computed target.
    pub fn grad_with_target(
        &self,
        params: &ParamVector,
        target: &Batch,
    ) -> Result<(LossTerms, ParamVector)> {
        let (student, cache) = self.model.apply_cached(params, &self.x_t, &self.t, &self.ctx)?;
        let terms = loss_terms(&student, target, self.pairs, self.weighting)?;
        let grad = self.model.backward(params, &cache, &terms.d_student)?;
        Ok((terms, grad))
    }

    /// Objective with the target and adaptive weights frozen at `anchor`.
    pub fn frozen_at(&self, anchor: &ParamVector) -> Result<FrozenObjective<'_>> {
        let target = self.target(anchor)?;
        let student = self.model.apply(anchor, &self.x_t, &self.t, &self.ctx)?;
        let terms = loss_terms(&student, &target, self.pairs, self.weighting)?;
        Ok(FrozenObjective {
            model: self.model,
            x_t: &self.x_t,
            t: &self.t,
            ctx: self.ctx,
            target,
            weights: terms
                .breakdown
                .iter()
                .map(|b| b.timestep_weight * b.adaptive_weight)
                .collect(),
        })
    }
}

impl Objective for EctObjective<'_> {
    fn value(&self, params: &ParamVector) -> Result<f64> {
        let target = self.target(params)?;
        let student = self.model.apply(params, &self.x_t, &self.t, &self.ctx)?;
        Ok(loss_terms(&student, &target, self.pairs, self.weighting)?.value)
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        let target = self.target(params)?;
        let (terms, grad) = self.grad_with_target(params, &target)?;
        Ok((terms.value, grad))
    }
}

/// `mean_i w_i · ½‖f_θ(x_t,i) − target_i‖²` with constant `w_i` and targets.
pub struct FrozenObjective<'a> {
    model: &'a ConsistencyModel,
    x_t: &'a Batch,
    t: &'a [f64],
    ctx: ForwardCtx,
    target: Batch,
    weights: Vec<f64>,
}

impl FrozenObjective<'_> {
    fn terms(&self, student: &Batch) -> (f64, Batch) {
        let n = student.rows() as f64;
        let mut value = 0.0;
        let mut d = Vec::with_capacity(student.as_slice().len());
        for (i, w) in self.weights.iter().enumerate() {
            let scale = w / n;
            for (a, b) in student.row(i).iter().zip(self.target.row(i)) {
                value += w * 0.5 * (a - b) * (a - b);
                d.push(scale * (a - b));
            }
        }
        let d = Batch::new(student.rows(), student.dim(), d).expect("shape checked by caller");
        (value / n, d)
    }
}

impl Objective for FrozenObjective<'_> {
    fn value(&self, params: &ParamVector) -> Result<f64> {
        let student = self.model.apply(params, self.x_t, self.t, &self.ctx)?;
        student.check_same_shape(&self.target)?;
        Ok(self.terms(&student).0)
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        let (student, cache) = self.model.apply_cached(params, self.x_t, self.t, &self.ctx)?;
        student.check_same_shape(&self.target)?;
        let (value, d) = self.terms(&student);
        Ok((value, self.model.backward(params, &cache, &d)?))
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_update(state: &mut TrainState, grad: &ParamVector, cfg: &TrainConfig) -> Result<()> {
    state.params.check_layout(grad)?;
    if !grad.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite gradient at iteration {}",
            state.iters
        )));
    }
    let lr = cfg.lr_at(state.iters);
    adam_apply(
        state.params.values_mut(),
        state.adam_m.values_mut(),
        state.adam_v.values_mut(),
        grad.values(),
        state.iters + 1,
        [lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps],
    );
    Ok(())
}

/// Adam on raw slices; `hyper` is `[lr, beta1, beta2, eps]` and `step` counts from 1.
pub fn adam_apply(p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], step: u64, hyper: [f64; 4]) {
    let [lr, b1, b2, eps] = hyper;
    let bc1 = 1.0 - b1.powf(step as f64);
    let bc2 = 1.0 - b2.powf(step as f64);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
    }
}

pub fn adam_step(state: &TrainState, grad: &ParamVector, cfg: &TrainConfig) -> Result<TrainState> {
    let mut next = state.clone();
    adam_update(&mut next, grad, cfg)?;
    Ok(next)
}

/// `ema' = β·ema + (1 − β)·params`.
pub fn ema_update(ema: &ParamVector, params: &ParamVector, beta: f64) -> Result<ParamVector> {
    let mut out = ema.clone();
    ema_update_in_place(&mut out, params, beta)?;
    Ok(out)
}

pub fn ema_update_in_place(ema: &mut ParamVector, params: &ParamVector, beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Config(format!("ema beta must be in [0, 1), got {beta}")));
    }
    ema.check_layout(params)?;
    for (e, p) in ema.values_mut().iter_mut().zip(params.values()) {
        *e = beta * *e + (1.0 - beta) * p;
    }
    Ok(())
}

/// Produces `x_r` for a batch of pairs.
pub trait PairTarget {
    fn x_r(&self, x0: &Batch, x_t: &Batch, pairs: &[NoisePair]) -> Result<Batch>;
}

/// `x_r = x₀ + r·ε` with the pair's own noise direction.
pub struct SharedNoise;

impl PairTarget for SharedNoise {
    fn x_r(&self, x0: &Batch, _x_t: &Batch, pairs: &[NoisePair]) -> Result<Batch> {
        perturb(x0, pairs, |p| p.r)
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    model: ConsistencyModel,
    state: TrainState,
    rule: PairRule,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ConsistencyModel::new(&cfg.cm)?;
        let params = model.init(cfg.seed);
        Self::from_state(cfg, TrainState::fresh(params))
    }

    /// Start from existing parameters with fresh optimizer state and `iters = 0`.
    pub fn from_params(cfg: TrainConfig, params: ParamVector) -> Result<Self> {
        Self::from_state(cfg, TrainState::fresh(params))
    }

    pub fn from_state(cfg: TrainConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        let model = ConsistencyModel::new(&cfg.cm)?;
        state.check()?;
        if state.params.len() != model.net().layout().len() {
            return Err(Error::Shape(format!(
                "state has {} parameters, network needs {}",
                state.params.len(),
                model.net().layout().len()
            )));
        }
        // rebind so the model's layout check passes by pointer
        let rebind = |p: ParamVector| ParamVector::new(p.into_values(), model.net().layout().clone());
        let state = TrainState {
            params: rebind(state.params)?,
            ema_params: rebind(state.ema_params)?,
            adam_m: rebind(state.adam_m)?,
            adam_v: rebind(state.adam_v)?,
            iters: state.iters,
        };
        let rule = PairRule::for_phase(cfg.phase);
        Ok(Self {
            cfg,
            model,
            state,
            rule,
        })
    }

    pub fn with_rule(mut self, rule: PairRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &ConsistencyModel {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.iters >= self.cfg.total_iters
    }

    /// Draws for the current iteration, reproducible from `(seed, iters)`.
    pub fn current_pairs(&self, rows: usize) -> Result<(Vec<NoisePair>, ForwardCtx)> {
        let iters = self.state.iters;
        let mut rng = rng::stream(self.cfg.seed, stage::TRAIN_NOISE, iters);
        let dropout_seed = rng::derive_seed(self.cfg.seed, stage::DROPOUT, iters);
        let pairs = draw_pairs(
            &self.cfg.schedule,
            &self.rule,
            iters,
            rows,
            self.model.dim(),
            dropout_seed,
            &mut rng,
        )?;
        Ok((pairs, ForwardCtx::train(dropout_seed)))
    }

    /// One step of the shared-noise loop.
    pub fn step(&mut self, x0: &Batch) -> Result<RunRecord> {
        self.step_with(x0, &SharedNoise)
    }

    /// One step with `x_r` supplied by `target`; the teacher branch uses the current parameters.
    pub fn step_with<T: PairTarget + ?Sized>(&mut self, x0: &Batch, target: &T) -> Result<RunRecord> {
        if x0.dim() != self.model.dim() {
            return Err(Error::Shape(format!(
                "data dim {} but model dim {}",
                x0.dim(),
                self.model.dim()
            )));
        }
        let iter = self.state.iters;
        let (pairs, ctx) = self.current_pairs(x0.rows())?;
        let x_t = perturb(x0, &pairs, |p| p.t)?;
        let x_r = target.x_r(x0, &x_t, &pairs)?;
        let objective =
            EctObjective::with_endpoints(&self.model, x_t, x_r, &pairs, &self.cfg.weighting, ctx);
        let diverged = |msg: String| Error::Diverged { iter, msg };
        let teacher = objective.target(&self.state.params).map_err(|e| diverged(e.to_string()))?;
        let (terms, grad) = objective
            .grad_with_target(&self.state.params, &teacher)
            .map_err(|e| diverged(e.to_string()))?;
        if !terms.value.is_finite() || !grad.all_finite() {
            return Err(diverged(format!("loss {}", terms.value)));
        }
        adam_update(&mut self.state, &grad, &self.cfg).map_err(|e| diverged(e.to_string()))?;
        if !self.state.params.all_finite() {
            return Err(diverged("parameters became non-finite".into()));
        }
        ema_update_in_place(&mut self.state.ema_params, &self.state.params, self.cfg.ema_beta)?;
        self.state.iters += 1;
        let n = pairs.len() as f64;
        Ok(RunRecord {
            iter,
            t_mean: pairs.iter().map(|p| p.t).sum::<f64>() / n,
            r_mean: pairs.iter().map(|p| p.r).sum::<f64>() / n,
            loss: terms.value,
            grad_norm: grad.norm(),
        })
    }

    /// Run until `total_iters`, pulling batches from `data`.
    pub fn run<S: BatchSource + ?Sized>(
        &mut self,
        data: &mut S,
        mut on_record: impl FnMut(&RunRecord, &TrainState),
    ) -> Result<()> {
        while !self.is_done() {
            let x0 = data.next_batch(self.cfg.batch_size)?;
            let rec = self.step(&x0)?;
            on_record(&rec, &self.state);
        }
        Ok(())
    }
}

/// Full loop from a fresh initialization.
pub fn train<S: BatchSource + ?Sized>(
    cfg: TrainConfig,
    data: &mut S,
) -> Result<(TrainState, Vec<RunRecord>)> {
    let mut trainer = Trainer::new(cfg)?;
    let mut records = Vec::new();
    trainer.run(data, |r, _| records.push(r.clone()))?;
    Ok((trainer.into_state(), records))
}
