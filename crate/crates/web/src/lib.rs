//! Browser bindings for three small demos: the `r/t` mapping curves, exact
//! few-step sampling in a Gaussian world, and live ECT on a Swiss roll.
//!
//! Every function returns flat `Float64Array`s; the page draws them.

use wasm_bindgen::prelude::*;

use ect_core::cmodel::{CmConfig, ConsistencyModel};
use ect_core::eval::sliced_wasserstein;
use ect_core::nnkit::{NetSpec, ParamVector};
use ect_core::oracle::GaussianWorld;
use ect_core::sampling::{cm_sample, SamplePlan};
use ect_core::schedule::{map_r, ScheduleConfig};
use ect_core::store::{make_dataset, BatchSource, Dataset, DatasetKind, DatasetSpec};
use ect_core::trainer::{Phase, TrainConfig, Trainer};
use ect_core::weighting::WeightingConfig;
use ect_core::Batch;

fn js_err(e: ect_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `r/t` against training iterations for each `t` in `ts`, concatenated row by row.
/// Each row has `points` values evenly spaced over `[0, total_iters]`.
#[wasm_bindgen]
pub fn mapping_curves(q: f64, divisor: u32, total_iters: u32, ceil: bool, ts: &[f64], points: u32) -> Result<Vec<f64>, JsError> {
    let total = u64::from(total_iters.max(1));
    let cfg = ScheduleConfig {
        q,
        d: (total / u64::from(divisor.max(1))).max(1),
        ceil_mode: ceil,
        ..ScheduleConfig::cifar_style(total)
    };
    cfg.validate().map_err(js_err)?;
    let points = points.max(2) as usize;
    let mut out = Vec::with_capacity(ts.len() * points);
    for &t in ts {
        for i in 0..points {
            let it = (i as f64 / (points - 1) as f64 * total as f64).round() as u64;
            out.push(map_r(t, it, &cfg) / t);
        }
    }
    Ok(out)
}

/// Samples from the exact consistency map of a 2D isotropic Gaussian, `n` rows
/// of `(x, y)` flattened. `tau <= 0` gives 1-step samples.
#[wasm_bindgen]
pub fn gaussian_samples(mean_x: f64, mean_y: f64, std: f64, n: u32, tau: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    let world = GaussianWorld::new(vec![mean_x, mean_y], std).map_err(js_err)?;
    let plan = if tau > 0.0 {
        SamplePlan::two_step(80.0, tau, u64::from(seed))
    } else {
        SamplePlan::one_step(80.0, u64::from(seed))
    };
    let x = cm_sample(&world, &plan, n as usize, 2).map_err(js_err)?;
    Ok(x.into_vec())
}

/// A small consistency model trained in steps on the normalized Swiss roll:
/// pretraining first, then tuning from the pretrained EMA weights.
#[wasm_bindgen]
pub struct SwissRollDemo {
    trainer: Trainer,
    data: Dataset,
    reference: Batch,
    pretrain_iters: u64,
    tune_iters: u64,
    tuning: bool,
    last_loss: f64,
}

fn demo_config(phase: Phase, iters: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        schedule: ScheduleConfig::cifar_style(iters),
        weighting: WeightingConfig::imagenet_style(0.5),
        cm: CmConfig {
            sigma_data: 0.5,
            net: NetSpec::new(2, &[64, 64], 2),
        },
        batch_size: 128,
        total_iters: iters,
        lr: 2e-3,
        adam_beta1: 0.9,
        adam_beta2: 0.999,
        adam_eps: 1e-8,
        ema_beta: 0.995,
        seed,
        init_checkpoint: None,
        phase,
        lr_decay_ref: None,
    }
}

#[wasm_bindgen]
impl SwissRollDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(pretrain_iters: u32, tune_iters: u32, seed: u32) -> Result<SwissRollDemo, JsError> {
        let seed = u64::from(seed);
        let data = make_dataset(&DatasetSpec::new(DatasetKind::SwissRoll).normalized(0.5), seed).map_err(js_err)?;
        let pretrain_iters = u64::from(pretrain_iters.max(1));
        let trainer = Trainer::new(demo_config(Phase::Pretrain, pretrain_iters, seed)).map_err(js_err)?;
        Ok(Self {
            reference: data.reference(1000, 0),
            trainer,
            data,
            pretrain_iters,
            tune_iters: u64::from(tune_iters.max(1)),
            tuning: false,
            last_loss: f64::NAN,
        })
    }

    /// Run up to `n` optimizer steps; switches from pretraining to tuning on the way.
    pub fn train(&mut self, n: u32) -> Result<(), JsError> {
        for _ in 0..n {
            if self.trainer.is_done() {
                if self.tuning {
                    return Ok(());
                }
                let cfg = self.trainer.config();
                let tune = demo_config(Phase::Tune, self.tune_iters, cfg.seed);
                let ema = self.trainer.state().ema_params.clone();
                self.trainer = Trainer::from_params(tune, ema).map_err(js_err)?;
                self.tuning = true;
            }
            let x0 = self.data.next_batch(self.trainer.config().batch_size).map_err(js_err)?;
            self.last_loss = self.trainer.step(&x0).map_err(js_err)?.loss;
        }
        Ok(())
    }

    pub fn phase(&self) -> String {
        match (self.tuning, self.trainer.is_done()) {
            (false, _) => "pretrain",
            (true, false) => "tune",
            (true, true) => "done",
        }
        .into()
    }

    pub fn iters(&self) -> f64 {
        let done = self.trainer.state().iters;
        (if self.tuning { self.pretrain_iters + done } else { done }) as f64
    }

    pub fn total_iters(&self) -> f64 {
        (self.pretrain_iters + self.tune_iters) as f64
    }

    pub fn loss(&self) -> f64 {
        self.last_loss
    }

    /// `n` EMA-model samples with `steps` ∈ {1, 2}; flattened `(x, y)` rows.
    pub fn sample(&self, n: u32, steps: u32, tau: f64, seed: u32) -> Result<Vec<f64>, JsError> {
        Ok(self.draw(n, steps, tau, seed)?.into_vec())
    }

    /// Sliced Wasserstein of 1000 samples against held-out data.
    pub fn score(&self, steps: u32, tau: f64) -> Result<f64, JsError> {
        let x = self.draw(1000, steps, tau, 7)?;
        sliced_wasserstein(&x, &self.reference, 32, 0).map_err(js_err)
    }

    /// Held-out data points, flattened.
    pub fn data(&self) -> Vec<f64> {
        self.reference.as_slice().to_vec()
    }
}

impl SwissRollDemo {
    fn draw(&self, n: u32, steps: u32, tau: f64, seed: u32) -> Result<Batch, JsError> {
        let model: &ConsistencyModel = self.trainer.model();
        let params: &ParamVector = &self.trainer.state().ema_params;
        let plan = if steps >= 2 {
            SamplePlan::two_step(80.0, tau, u64::from(seed))
        } else {
            SamplePlan::one_step(80.0, u64::from(seed))
        };
        cm_sample(&model.bind(params), &plan, n as usize, 2).map_err(js_err)
    }
}
