//! Smoothed-NLL training with Adam and early stopping.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{GssmError, Result};
use crate::features::{InteractionSample, HISTORY_CHANNELS};
use crate::model::{Inputs, LossBatch, Model, ModelConfig, NormStats, CHECKPOINT_VERSION};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.dim())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub version: u32,
    pub model: Model,
    pub best: Model,
    pub adam: Adam,
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stale_epochs: usize,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    /// Fresh state: normalisation fitted on `train`, output biases set to the
    /// marginal lognormal MLE of the training spacings.
    pub fn new(config: ModelConfig, train: &[InteractionSample]) -> Result<Self> {
        if train.is_empty() {
            return Err(GssmError::Training { epoch: 0, message: "empty training set".into() });
        }
        let mut model = Model::new(config)?;
        model.norm = NormStats::from_samples(train, model.config.include_accel);
        let ln_s = log_spacings(train, 0)?;
        let n = ln_s.len() as f64;
        let mean = ln_s.iter().sum::<f64>() / n;
        let var = ln_s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        model.set_output_bias(mean, var.max(1e-4).ln());
        let adam = Adam::new(&model.params.values);
        Ok(Self {
            version: CHECKPOINT_VERSION,
            best: model.clone(),
            model,
            adam,
            epoch: 0,
            best_epoch: 0,
            best_val: f64::INFINITY,
            stale_epochs: 0,
            log: Vec::new(),
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.model.config.max_epochs || self.stale_epochs >= self.model.config.patience
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let state: TrainState = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if state.version != CHECKPOINT_VERSION {
            return Err(GssmError::Config(format!("train state version {} is not supported", state.version)));
        }
        Ok(state)
    }
}

fn log_spacings(samples: &[InteractionSample], epoch: usize) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            if s.s > 0.0 && s.s.is_finite() {
                Ok(s.s.ln())
            } else {
                Err(GssmError::Training {
                    epoch,
                    message: format!("sample {}@{}: non-positive spacing {}", s.event_id, s.time, s.s),
                })
            }
        })
        .collect()
}

/// Seeded Gaussian noise of `frac` × range on the continuous inputs (standardised units).
pub fn perturb(inputs: &Inputs, norm: &NormStats, frac: f64, seed: u64) -> Inputs {
    let mut out = inputs.clone();
    if frac == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for mut row in out.current.rows_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += frac * norm.current_range[k] * z;
        }
    }
    for mut row in out.history.rows_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += frac * norm.history_range[k % HISTORY_CHANNELS] * z;
        }
    }
    out
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Mean inference-mode NLL.
pub fn mean_nll(model: &Model, inputs: &Inputs, ln_s: &[f64]) -> f64 {
    let params = model.predict_inputs(inputs);
    let total: f64 = params
        .iter()
        .zip(ln_s)
        .map(|(p, &x)| crate::lognormal::nll_loss(*p, x.exp()).unwrap_or(f64::INFINITY))
        .sum();
    total / ln_s.len() as f64
}

/// Mean divergence between predictions on `inputs` and on a perturbed copy.
pub fn mean_perturbation_js(model: &Model, inputs: &Inputs, seed: u64) -> f64 {
    let pert = perturb(inputs, &model.norm, model.config.perturb_frac, seed);
    let a = model.predict_inputs(inputs);
    let b = model.predict_inputs(&pert);
    a.iter().zip(&b).map(|(p, q)| crate::lognormal::js_divergence_lognormal(*p, *q)).sum::<f64>() / a.len() as f64
}

/// Prepared data for repeated epochs.
pub struct Dataset {
    pub inputs: Inputs,
    pub ln_s: Vec<f64>,
}

impl Dataset {
    pub fn new(model: &Model, samples: &[InteractionSample]) -> Result<Self> {
        Ok(Self { inputs: model.inputs(samples)?, ln_s: log_spacings(samples, 0)? })
    }
}

/// Runs one epoch; returns the log entry.
pub fn run_epoch(state: &mut TrainState, train: &Dataset, val: &Dataset) -> Result<EpochLog> {
    let started = Instant::now();
    let epoch = state.epoch + 1;
    let config = state.model.config.clone();
    let n = train.ln_s.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64, 0)));
    let mut total = 0.0;
    for (b, rows) in order.chunks(config.batch.max(1)).enumerate() {
        let inputs = train.inputs.select(rows);
        let ln_s: Vec<f64> = rows.iter().map(|&r| train.ln_s[r]).collect();
        let perturbed = (config.beta > 0.0)
            .then(|| perturb(&inputs, &state.model.norm, config.perturb_frac, mix_seed(config.seed, epoch as u64, b as u64 + 1)));
        let out = state.model.loss_and_grad(&LossBatch { inputs: &inputs, ln_s: &ln_s, perturbed: perturbed.as_ref() }, config.beta);
        if !out.loss.is_finite() || out.grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(GssmError::Training { epoch, message: format!("non-finite loss {} in batch {b}", out.loss) });
        }
        total += out.loss * rows.len() as f64;
        state.adam.update(&mut state.model.params.values, &out.grads, config.lr);
        if let Some(stats) = out.bn_stats {
            let m = config.bn_momentum;
            let rows = (inputs.len() * if perturbed.is_some() { 2 } else { 1 } * config.n_tokens()) as f64;
            let unbias = if rows > 1.0 { rows / (rows - 1.0) } else { 1.0 };
            state.model.bn_running_mean = &state.model.bn_running_mean * (1.0 - m) + &stats.mean * m;
            state.model.bn_running_var = &state.model.bn_running_var * (1.0 - m) + &stats.var * (m * unbias);
        }
    }
    let val_loss = mean_nll(&state.model, &val.inputs, &val.ln_s);
    if !val_loss.is_finite() {
        return Err(GssmError::Training { epoch, message: format!("non-finite validation loss {val_loss}") });
    }
    state.epoch = epoch;
    if val_loss < state.best_val {
        state.best_val = val_loss;
        state.best_epoch = epoch;
        state.best = state.model.clone();
        state.stale_epochs = 0;
    } else {
        state.stale_epochs += 1;
    }
    let entry = EpochLog { epoch, train_loss: total / n as f64, val_loss, lr: config.lr, seconds: started.elapsed().as_secs_f64() };
    state.log.push(entry.clone());
    Ok(entry)
}

/// Trains until `max_epochs` or early stopping and returns the final state;
/// `state.best` holds the best-validation model.
pub fn train(config: ModelConfig, train: &[InteractionSample], val: &[InteractionSample]) -> Result<TrainState> {
    if val.is_empty() {
        return Err(GssmError::Training { epoch: 0, message: "empty validation set".into() });
    }
    let mut state = TrainState::new(config, train)?;
    resume(&mut state, train, val, |_| {})?;
    Ok(state)
}

/// Continues training `state`, calling `on_epoch` after every epoch.
pub fn resume(
    state: &mut TrainState,
    train: &[InteractionSample],
    val: &[InteractionSample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<()> {
    let train_data = Dataset::new(&state.model, train)?;
    let val_data = Dataset::new(&state.model, val)?;
    while !state.finished() {
        let entry = run_epoch(state, &train_data, &val_data)?;
        on_epoch(&entry);
    }
    Ok(())
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,train_loss,val_loss,lr,seconds")?;
    for e in log {
        writeln!(out, "{},{},{},{},{:.3}", e.epoch, e.train_loss, e.val_loss, e.lr, e.seconds)?;
    }
    out.flush()?;
    Ok(())
}
