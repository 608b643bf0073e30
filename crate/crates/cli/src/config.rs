//! Run configuration: one TOML document per run.
//!
//! Parsing collects every unknown key (with its dotted path) and every
//! semantic problem before anything touches the filesystem.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ect_core::cmodel::CmConfig;
use ect_core::distill::Solver;
use ect_core::nnkit::{Activation, NetSpec};
use ect_core::oracle::GaussianWorld;
use ect_core::sampling::{default_intermediate, SamplePlan};
use ect_core::schedule::ScheduleConfig;
use ect_core::store::{DatasetKind, DatasetSpec};
use ect_core::trainer::{Phase, TrainConfig};
use ect_core::weighting::{AdaptiveKind, TimestepKind, WeightingConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Root for run directories; falls back to `ECT_RUNS_DIR`, then `runs`.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub net: NetSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub weighting: WeightingSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct NetSection {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub time_embed_dim: usize,
    pub dropout_rate: f64,
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            hidden_dims: vec![128, 128, 128],
            activation: Activation::Silu,
            time_embed_dim: 16,
            dropout_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    pub q: f64,
    /// Stage length in iterations; overrides `d_divisor`.
    pub d: Option<u64>,
    /// `d = tune_iters / d_divisor` when `d` is unset.
    pub d_divisor: u64,
    pub k: f64,
    pub b: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub rho: f64,
    /// Defaults to true when tuning starts from a pretrained checkpoint.
    pub ceil_mode: Option<bool>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = ScheduleConfig::default();
        Self {
            q: s.q,
            d: None,
            d_divisor: 8,
            k: s.k,
            b: s.b,
            p_mean: s.p_mean,
            p_std: s.p_std,
            t_min: s.t_min,
            t_max: s.t_max,
            rho: 7.0,
            ceil_mode: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightingSection {
    pub timestep_kind: TimestepKind,
    pub adaptive_kind: AdaptiveKind,
    pub c: f64,
    pub p: f64,
}

impl Default for WeightingSection {
    fn default() -> Self {
        let w = WeightingConfig::cifar_style(0.5);
        Self {
            timestep_kind: w.timestep_kind,
            adaptive_kind: w.adaptive_kind,
            c: w.c,
            p: w.p,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub pretrain_iters: u64,
    pub tune_iters: u64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_beta: f64,
    pub lr_decay_ref: Option<u64>,
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 256,
            pretrain_iters: 10_000,
            tune_iters: 10_000,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ema_beta: 0.999,
            lr_decay_ref: None,
            checkpoint_every: 5_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    /// Closed-form Gaussian denoiser; needs a gaussian dataset.
    Analytic,
    Checkpoint,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillSection {
    pub solver: Solver,
    pub teacher: TeacherKind,
    /// Defaults to this run's pretraining checkpoint.
    pub teacher_checkpoint: Option<PathBuf>,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            solver: Solver::Heun,
            teacher: TeacherKind::Checkpoint,
            teacher_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleSection {
    pub steps: usize,
    /// Defaults to `schedule.t_max`.
    pub t_start: Option<f64>,
    /// Defaults to one geometric intermediate per extra step.
    pub intermediates: Option<Vec<f64>>,
    pub stochastic: bool,
    pub n: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            steps: 2,
            t_start: None,
            intermediates: None,
            stochastic: true,
            n: 5_000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub n_samples: usize,
    pub n_proj: usize,
    pub mmd_samples: usize,
    pub mmd_bandwidth: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_samples: 5_000,
            n_proj: 128,
            mmd_samples: 1_000,
            mmd_bandwidth: 0.2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub tune_iters: u64,
    pub timestep_kinds: Vec<TimestepKind>,
    pub adaptive_kinds: Vec<AdaptiveKind>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            tune_iters: 500,
            timestep_kinds: TimestepKind::ALL.to_vec(),
            adaptive_kinds: vec![AdaptiveKind::InvL2, AdaptiveKind::None],
        }
    }
}

#[derive(Debug)]
pub struct ConfigErrors(pub Vec<String>);

impl std::fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.0 {
            writeln!(f, "{p}")?;
        }
        Ok(())
    }
}

pub fn parse(text: &str) -> Result<RunConfig, ConfigErrors> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigErrors(vec![e.to_string()]))?;
    let mut unknown = Vec::new();
    let cfg: RunConfig = serde_ignored::deserialize(de, |path| {
        unknown.push(format!("{path}: unknown key"));
    })
    .map_err(|e| {
        let mut all = unknown.clone();
        all.push(e.to_string());
        ConfigErrors(all)
    })?;
    let mut problems = unknown;
    problems.extend(cfg.problems());
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigErrors(problems))
    }
}

pub fn load(path: &Path) -> Result<RunConfig, ConfigErrors> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigErrors(vec![format!("{}: {e}", path.display())]))?;
    parse(&text)
}

impl RunConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            p.push(format!("name: {:?} is not a valid run directory name", self.name));
        }
        p.extend(self.dataset.problems());
        if !(self.dataset.sigma_data > 0.0) {
            p.push("dataset.sigma_data: must be > 0".into());
        }
        let prefixed = |section: &str, list: Vec<String>| -> Vec<String> {
            list.into_iter().map(|s| format!("{section}: {s}")).collect()
        };
        if let Err(e) = self.net_spec(self.dataset.dim()).validate() {
            p.push(format!("net: {e}"));
        }
        if self.schedule.d == Some(0) {
            p.push("schedule.d: must be >= 1".into());
        }
        if self.schedule.d_divisor == 0 {
            p.push("schedule.d_divisor: must be >= 1".into());
        }
        if !(self.schedule.rho > 0.0) {
            p.push("schedule.rho: must be > 0".into());
        }
        p.extend(prefixed("schedule", self.schedule_config(self.train.tune_iters.max(1), false).problems()));
        p.extend(prefixed("weighting", self.weighting_config().problems()));
        let t = &self.train;
        if t.batch_size == 0 {
            p.push("train.batch_size: must be >= 1".into());
        }
        if t.pretrain_iters == 0 {
            p.push("train.pretrain_iters: must be >= 1".into());
        }
        if t.tune_iters == 0 {
            p.push("train.tune_iters: must be >= 1".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            p.push(format!("train.lr: must be > 0, got {}", t.lr));
        }
        if !(0.0..1.0).contains(&t.adam_beta1) {
            p.push("train.adam_beta1: must be in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&t.adam_beta2) {
            p.push("train.adam_beta2: must be in [0, 1)".into());
        }
        if !(t.adam_eps > 0.0) {
            p.push("train.adam_eps: must be > 0".into());
        }
        if !(0.0..1.0).contains(&t.ema_beta) {
            p.push(format!("train.ema_beta: must be in [0, 1), got {}", t.ema_beta));
        }
        if t.lr_decay_ref == Some(0) {
            p.push("train.lr_decay_ref: must be >= 1".into());
        }
        if t.checkpoint_every == 0 {
            p.push("train.checkpoint_every: must be >= 1".into());
        }
        if self.distill.teacher == TeacherKind::Analytic && self.dataset.kind != DatasetKind::Gaussian {
            p.push("distill.teacher: analytic teacher needs a gaussian dataset".into());
        }
        if self.distill.teacher == TeacherKind::Analytic && self.distill.teacher_checkpoint.is_some() {
            p.push("distill.teacher_checkpoint: only used with teacher = \"checkpoint\"".into());
        }
        if self.sample.n == 0 {
            p.push("sample.n: must be >= 1".into());
        }
        p.extend(prefixed("sample", self.sample_plan(0).problems()));
        let e = &self.eval;
        if e.n_samples == 0 || e.n_proj == 0 {
            p.push("eval: n_samples and n_proj must be >= 1".into());
        }
        if e.mmd_samples < 2 {
            p.push("eval.mmd_samples: must be >= 2".into());
        }
        if !(e.mmd_bandwidth > 0.0) {
            p.push("eval.mmd_bandwidth: must be > 0".into());
        }
        if self.sweep.tune_iters == 0 {
            p.push("sweep.tune_iters: must be >= 1".into());
        }
        if self.sweep.timestep_kinds.is_empty() || self.sweep.adaptive_kinds.is_empty() {
            p.push("sweep: kind lists must be non-empty".into());
        }
        p
    }

    pub fn runs_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os("ECT_RUNS_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.runs_root().join(&self.name)
    }

    pub fn net_spec(&self, dim: usize) -> NetSpec {
        NetSpec {
            input_dim: dim,
            hidden_dims: self.net.hidden_dims.clone(),
            output_dim: dim,
            activation: self.net.activation,
            time_embed_dim: self.net.time_embed_dim,
            dropout_rate: self.net.dropout_rate,
        }
    }

    pub fn cm_config(&self, dim: usize) -> CmConfig {
        CmConfig {
            sigma_data: self.dataset.sigma_data,
            net: self.net_spec(dim),
        }
    }

    pub fn schedule_config(&self, total_iters: u64, from_pretrained: bool) -> ScheduleConfig {
        let s = &self.schedule;
        ScheduleConfig {
            q: s.q,
            d: s.d.unwrap_or((total_iters / s.d_divisor.max(1)).max(1)),
            k: s.k,
            b: s.b,
            p_mean: s.p_mean,
            p_std: s.p_std,
            t_min: s.t_min,
            t_max: s.t_max,
            total_iters,
            ceil_mode: s.ceil_mode.unwrap_or(from_pretrained),
        }
    }

    pub fn weighting_config(&self) -> WeightingConfig {
        WeightingConfig {
            timestep_kind: self.weighting.timestep_kind,
            adaptive_kind: self.weighting.adaptive_kind,
            c: self.weighting.c,
            p: self.weighting.p,
            sigma_data: self.dataset.sigma_data,
        }
    }

    pub fn train_config(&self, dim: usize, phase: Phase, from_pretrained: bool) -> TrainConfig {
        let t = &self.train;
        let total = match phase {
            Phase::Pretrain => t.pretrain_iters,
            Phase::Tune => t.tune_iters,
        };
        TrainConfig {
            schedule: self.schedule_config(total, from_pretrained),
            weighting: self.weighting_config(),
            cm: self.cm_config(dim),
            batch_size: t.batch_size,
            total_iters: total,
            lr: t.lr,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            ema_beta: t.ema_beta,
            seed: self.seed,
            init_checkpoint: None,
            phase,
            lr_decay_ref: t.lr_decay_ref,
        }
    }

    pub fn sample_plan(&self, seed: u64) -> SamplePlan {
        let t_start = self.sample.t_start.unwrap_or(self.schedule.t_max);
        let intermediates = self.sample.intermediates.clone().unwrap_or_else(|| {
            let tau = default_intermediate(t_start, self.schedule.t_min);
            // successive geometric points between t_start and t_min
            let mut v = Vec::new();
            let mut prev = t_start;
            for _ in 1..self.sample.steps {
                let next = default_intermediate(prev, self.schedule.t_min).min(tau);
                v.push(next);
                prev = next;
            }
            v
        });
        SamplePlan {
            steps: self.sample.steps,
            t_start,
            intermediates,
            stochastic: self.sample.stochastic,
            seed,
        }
    }

    /// The Gaussian world implied by a gaussian dataset section.
    pub fn gaussian_world(&self) -> Option<GaussianWorld> {
        if self.dataset.kind != DatasetKind::Gaussian {
            return None;
        }
        let dim = self.dataset.dim();
        if self.dataset.normalize {
            return GaussianWorld::new(vec![0.0; dim], self.dataset.sigma_data).ok();
        }
        let mean = self.dataset.params.get("mean").copied().unwrap_or(0.0);
        let std = self.dataset.params.get("std").copied().unwrap_or(1.0);
        GaussianWorld::new(vec![mean; dim], std).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
[dataset]
kind = "swiss_roll"
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.train.batch_size, 256);
        assert_eq!(cfg.schedule_config(8000, false).d, 1000);
        assert!(cfg.schedule_config(8000, true).ceil_mode);
        assert_eq!(cfg.sample_plan(0).intermediates.len(), 1);
    }

    #[test]
    fn unknown_keys_are_listed_with_paths() {
        let text = format!("{MINIMAL}bogus = 1\n[train]\nbatchsize = 3\n[net]\nwidth = 2\n");
        let err = parse(&text).unwrap_err();
        let joined = err.0.join("\n");
        assert!(joined.contains("train.batchsize"), "{joined}");
        assert!(joined.contains("net.width"), "{joined}");
        assert!(joined.contains("bogus"), "{joined}");
    }

    #[test]
    fn semantic_problems_are_exhaustive() {
        let text = format!("{MINIMAL}[train]\nlr = -1.0\nema_beta = 1.5\nbatch_size = 0\n[schedule]\nq = 0.5\n");
        let err = parse(&text).unwrap_err();
        assert!(err.0.len() >= 4, "{:?}", err.0);
    }

    #[test]
    fn analytic_teacher_needs_gaussian() {
        let text = format!("{MINIMAL}[distill]\nteacher = \"analytic\"\n");
        assert!(parse(&text).is_err());
    }
}
