use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use ect_core::distill::{datafree_step, Teacher};
use ect_core::eval::{fit_power_law, mmd_rbf, sliced_wasserstein};
use ect_core::oracle::{invariant_suite, GaussianWorld};
use ect_core::rng;
use ect_core::sampling::{cm_sample, SamplePlan};
use ect_core::store::{
    load_checkpoint, make_dataset, read_csv, save_checkpoint, write_atomic, write_csv,
    write_tensor, BatchSource, JsonlWriter,
};
use ect_core::trainer::{Phase, RunRecord, TrainState, Trainer};
use ect_core::weighting::WeightingConfig;
use ect_core::Error;

use crate::config::{self, RunConfig, TeacherKind};
use crate::Mode;

pub enum CliError {
    Config(Vec<String>),
    Runtime(String),
    Diverged { iter: u64, msg: String },
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            _ => 2,
        }
    }

    /// One JSON object describing the failure.
    pub fn record(&self) -> String {
        self.record_value().to_string()
    }

    fn record_value(&self) -> serde_json::Value {
        match self {
            CliError::Config(p) => json!({"error": "config", "problems": p}),
            CliError::Runtime(m) => json!({"error": "runtime", "message": m}),
            CliError::Diverged { iter, msg } => {
                json!({"error": "diverged", "iter": iter, "message": msg})
            }
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { iter, msg } => CliError::Diverged { iter, msg },
            e if e.is_config() => CliError::Config(vec![e.to_string()]),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<config::ConfigErrors> for CliError {
    fn from(e: config::ConfigErrors) -> Self {
        CliError::Config(e.0)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = config::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn ckpt_path(cfg: &RunConfig, stem: &str) -> PathBuf {
    cfg.run_dir().join("checkpoints").join(format!("{stem}.ckpt"))
}

fn require(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("missing checkpoint {}", path.display())))
    }
}

#[derive(Serialize)]
struct MetricLine<'a> {
    mode: &'a str,
    #[serde(flatten)]
    record: &'a RunRecord,
}

enum Step {
    Data,
    Teacher(Teacher),
    DataFree(Teacher),
}

pub fn train(path: &Path, mode: Mode, resume: bool, seed: Option<u64>) -> CliResult {
    let cfg = load_config(path, seed)?;
    let mut data = make_dataset(&cfg.dataset, cfg.seed)?;
    let dim = data.dim();
    let from_pretrained = resume && mode != Mode::Pretrain;
    let phase = if mode == Mode::Pretrain {
        Phase::Pretrain
    } else {
        Phase::Tune
    };
    let tcfg = cfg.train_config(dim, phase, from_pretrained);
    tcfg.validate()?;

    // everything that can fail on input is checked before the run directory exists
    let pretrain_ckpt = if mode == Mode::Pretrain {
        latest_pretrain(&cfg)
    } else {
        ckpt_path(&cfg, "pretrain")
    };
    let mut trainer = if resume {
        require(&pretrain_ckpt)?;
        let ckpt = load_checkpoint(&pretrain_ckpt)?;
        if ckpt.header.net != tcfg.cm.net {
            return Err(CliError::Config(vec![
                "net: checkpoint network does not match the config".into(),
            ]));
        }
        let model = ckpt.model()?;
        if mode == Mode::Pretrain {
            Trainer::from_state(tcfg.clone(), ckpt.state(&model)?)?
        } else {
            Trainer::from_params(tcfg.clone(), ckpt.section_params(&model, "ema")?)?
        }
    } else {
        Trainer::new(tcfg.clone())?
    };
    // tuning continues the data stream where pretraining stopped
    data.seek(match mode {
        Mode::Pretrain => trainer.state().iters,
        _ => cfg.train.pretrain_iters,
    });
    let step_kind = match mode {
        Mode::Pretrain | Mode::Ect => Step::Data,
        Mode::Ecd | Mode::EcdDatafree => {
            let teacher = make_teacher(&cfg)?;
            if mode == Mode::Ecd {
                Step::Teacher(teacher)
            } else {
                Step::DataFree(teacher)
            }
        }
    };

    let run_dir = cfg.run_dir();
    let snapshot = toml::to_string(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_atomic(&run_dir.join("config.toml"), snapshot.as_bytes())?;
    let mut metrics = JsonlWriter::append(&run_dir.join("metrics.jsonl"))?;
    let name = mode.name();
    let every = cfg.train.checkpoint_every;
    let save = |state: &TrainState, stem: &str| {
        save_checkpoint(&ckpt_path(&cfg, stem), state, &tcfg.cm, &tcfg.schedule, cfg.seed)
    };

    while !trainer.is_done() {
        let last_good = trainer.state().clone();
        let step = match &step_kind {
            Step::Data => data.next_batch(tcfg.batch_size).and_then(|x0| trainer.step(&x0)),
            Step::Teacher(t) => data
                .next_batch(tcfg.batch_size)
                .and_then(|x0| trainer.step_with(&x0, t)),
            Step::DataFree(t) => datafree_step(&mut trainer, t),
        };
        match step {
            Ok(rec) => {
                metrics.write(&MetricLine {
                    mode: name,
                    record: &rec,
                })?;
                let done = trainer.state().iters;
                if done % every == 0 && done < tcfg.total_iters {
                    save(trainer.state(), &format!("{name}-{done:08}"))?;
                }
            }
            Err(e) => {
                save(&last_good, &format!("{name}-diverged"))?;
                let err = CliError::from(e);
                metrics.write(&err.record_value())?;
                return Err(err);
            }
        }
    }
    metrics.flush()?;
    let checksum = save(trainer.state(), name)?;
    println!(
        "{}",
        json!({
            "mode": name,
            "iters": trainer.state().iters,
            "checkpoint": ckpt_path(&cfg, name),
            "checksum": format!("{checksum:016x}"),
        })
    );
    Ok(())
}

/// The final pretraining checkpoint, else the newest periodic one.
fn latest_pretrain(cfg: &RunConfig) -> PathBuf {
    let fin = ckpt_path(cfg, "pretrain");
    if fin.is_file() {
        return fin;
    }
    let dir = cfg.run_dir().join("checkpoints");
    let newest = std::fs::read_dir(&dir).ok().and_then(|entries| {
        entries
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter_map(|n| {
                let iter = n.strip_prefix("pretrain-")?.strip_suffix(".ckpt")?;
                Some((iter.parse::<u64>().ok()?, n))
            })
            .max()
    });
    newest.map_or(fin, |(_, n)| dir.join(n))
}

fn make_teacher(cfg: &RunConfig) -> CliResult<Teacher> {
    match cfg.distill.teacher {
        TeacherKind::Analytic => {
            let world = cfg.gaussian_world().ok_or_else(|| {
                CliError::Config(vec!["distill.teacher: analytic teacher needs a gaussian dataset".into()])
            })?;
            Ok(Teacher::analytic(world, cfg.distill.solver))
        }
        TeacherKind::Checkpoint => {
            let path = cfg
                .distill
                .teacher_checkpoint
                .clone()
                .unwrap_or_else(|| ckpt_path(cfg, "pretrain"));
            require(&path)?;
            Ok(Teacher::from_checkpoint(&path, cfg.distill.solver)?)
        }
    }
}

/// The newest final checkpoint of the run, preferring tuned models.
fn default_checkpoint(cfg: &RunConfig) -> CliResult<PathBuf> {
    ["ect", "ecd", "ecd-datafree", "pretrain"]
        .iter()
        .map(|s| ckpt_path(cfg, s))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            CliError::Runtime(format!(
                "missing checkpoint: no final checkpoint under {}",
                cfg.run_dir().join("checkpoints").display()
            ))
        })
}

fn load_sampler(path: &Path) -> CliResult<(ect_core::cmodel::ConsistencyModel, ect_core::nnkit::ParamVector)> {
    require(path)?;
    let ckpt = load_checkpoint(path)?;
    let model = ckpt.model()?;
    let params = ckpt.section_params(&model, "ema")?;
    Ok((model, params))
}

pub fn sample(
    path: &Path,
    checkpoint: Option<&Path>,
    steps: Option<usize>,
    n: Option<usize>,
    seed: Option<u64>,
) -> CliResult {
    let mut cfg = load_config(path, seed)?;
    if let Some(s) = steps {
        cfg.sample.steps = s;
        cfg.sample.intermediates = None;
    }
    let n = n.unwrap_or(cfg.sample.n);
    let plan = cfg.sample_plan(rng::derive_seed(cfg.seed, rng::stage::SAMPLE_INIT, 0));
    plan.validate()?;
    let ckpt = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => default_checkpoint(&cfg)?,
    };
    let (model, params) = load_sampler(&ckpt)?;
    let x = cm_sample(&model.bind(&params), &plan, n, model.dim())?;
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("samples");
    let out = cfg.run_dir().join("samples").join(format!("{stem}-{}step", plan.steps));
    let bin = out.with_extension("bin");
    write_tensor(&bin, &x)?;
    let mut written = vec![bin];
    if x.dim() <= 3 {
        let csv = out.with_extension("csv");
        write_csv(&csv, &x)?;
        written.push(csv);
    }
    println!("{}", json!({"samples": n, "steps": plan.steps, "files": written}));
    Ok(())
}

pub fn eval(path: &Path, checkpoint: Option<&Path>) -> CliResult {
    let cfg = load_config(path, None)?;
    let data = make_dataset(&cfg.dataset, cfg.seed)?;
    let ckpt = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => default_checkpoint(&cfg)?,
    };
    let (model, params) = load_sampler(&ckpt)?;
    let e = &cfg.eval;
    let truth = data.reference(e.n_samples, 0);
    let seed = rng::derive_seed(cfg.seed, rng::stage::EVAL, 1);
    let plan = cfg.sample_plan(seed);
    let mut writer = JsonlWriter::append(&cfg.run_dir().join("eval.jsonl"))?;
    let mut plans = vec![SamplePlan::one_step(plan.t_start, seed)];
    if plan.steps > 1 {
        plans.push(plan);
    }
    for p in &plans {
        let x = cm_sample(&model.bind(&params), p, e.n_samples, model.dim())?;
        let sw = sliced_wasserstein(&x, &truth, e.n_proj, cfg.seed)?;
        let m = e.mmd_samples.min(e.n_samples);
        let mmd = mmd_rbf(&x.slice_rows(0, m), &truth.slice_rows(0, m), e.mmd_bandwidth)?;
        let rec = json!({
            "checkpoint": ckpt,
            "steps": p.steps,
            "intermediates": p.intermediates,
            "sliced_wasserstein": sw,
            "mmd2": mmd,
        });
        writer.write(&rec)?;
        println!("{rec}");
    }
    Ok(())
}

pub fn fit_scaling(points: &Path) -> CliResult {
    let table = read_csv(points)?;
    if table.dim() != 2 {
        return Err(CliError::Config(vec![format!(
            "{}: expected 2 columns (compute, metric), found {}",
            points.display(),
            table.dim()
        )]));
    }
    let pts: Vec<(f64, f64)> = table.iter_rows().map(|r| (r[0], r[1])).collect();
    let fit = fit_power_law(&pts)?;
    println!(
        "K={:.6} alpha={:.6} pearson={:.6}{}",
        fit.k,
        fit.alpha,
        fit.pearson_loglog,
        if fit.pearson_defined { "" } else { " (undefined)" }
    );
    Ok(())
}

pub fn oracle_check(seed: u64) -> CliResult {
    let worlds = [
        GaussianWorld::standard(1),
        GaussianWorld::new(vec![0.5, -1.0], 0.7)?,
    ];
    let mut failed = 0;
    for (i, w) in worlds.iter().enumerate() {
        let mut r = rng::stream(seed, rng::stage::EVAL, i as u64);
        for c in invariant_suite(w, &mut r)? {
            println!(
                "{} dim={} {}: {:.3e} (limit {:.1e})",
                if c.passed { "PASS" } else { "FAIL" },
                w.dim(),
                c.name,
                c.value,
                c.threshold
            );
            failed += usize::from(!c.passed);
        }
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} oracle checks failed")));
    }
    Ok(())
}

pub fn sweep(path: &Path, seed: Option<u64>) -> CliResult {
    let cfg = load_config(path, seed)?;
    let data = make_dataset(&cfg.dataset, cfg.seed)?;
    let dim = data.dim();
    let truth = data.reference(cfg.eval.n_samples, 0);
    let pretrain_ckpt = ckpt_path(&cfg, "pretrain");
    let init = if pretrain_ckpt.is_file() {
        let ckpt = load_checkpoint(&pretrain_ckpt)?;
        let model = ckpt.model()?;
        Some(ckpt.section_params(&model, "ema")?)
    } else {
        None
    };
    let mut rows = vec!["timestep_kind,adaptive_kind,final_loss,sw_1step".to_string()];
    let mut jsonl = Vec::new();
    for &tk in &cfg.sweep.timestep_kinds {
        for &ak in &cfg.sweep.adaptive_kinds {
            let mut tcfg = cfg.train_config(dim, Phase::Tune, init.is_some());
            tcfg.total_iters = cfg.sweep.tune_iters;
            tcfg.schedule = cfg.schedule_config(cfg.sweep.tune_iters, init.is_some());
            tcfg.weighting = WeightingConfig {
                timestep_kind: tk,
                adaptive_kind: ak,
                ..tcfg.weighting
            };
            let mut trainer = match &init {
                Some(p) => Trainer::from_params(tcfg.clone(), p.clone())?,
                None => Trainer::new(tcfg.clone())?,
            };
            let mut stream = make_dataset(&cfg.dataset, cfg.seed)?;
            let mut last = f64::NAN;
            trainer.run(&mut stream, |r, _| last = r.loss)?;
            let plan = SamplePlan::one_step(tcfg.schedule.t_max, cfg.seed);
            let x = cm_sample(
                &trainer.model().bind(&trainer.state().ema_params),
                &plan,
                cfg.eval.n_samples,
                dim,
            )?;
            let sw = sliced_wasserstein(&x, &truth, cfg.eval.n_proj, cfg.seed)?;
            rows.push(format!("{},{},{last},{sw}", tk.name(), ak.name()));
            jsonl.push(json!({
                "timestep_kind": tk.name(),
                "adaptive_kind": ak.name(),
                "final_loss": last,
                "sw_1step": sw,
            }));
        }
    }
    let dir = cfg.run_dir();
    write_atomic(&dir.join("sweep.csv"), (rows.join("\n") + "\n").as_bytes())?;
    let mut w = JsonlWriter::create(&dir.join("sweep.jsonl"))?;
    for r in &jsonl {
        w.write(r)?;
    }
    println!("{}", rows.join("\n"));
    Ok(())
}
