//! Conditional density network `g_W(X) → (μ̂, log σ̂²)`.
//!
//! Every `X_C` scalar and every `X_E` chunk has its own MLP encoder; the
//! reversed `X_T` sequence runs through an LSTM whose outputs after 5, 10,
//! 15, 20 and 25 steps become the history tokens. Fixed orthogonal random
//! tokens are appended. The decoder applies batch normalisation,
//! post-norm self-attention blocks, two kernel-3 convolutions along the token
//! axis and two MLP heads.

use std::f64::consts::{LN_2, PI};

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Tensor, Var, NORM_EPS};
use crate::error::{GssmError, Result};
use crate::features::{
    InteractionSample, CURRENT_NAMES, ENV_CHUNKS, ENV_DIM, ENV_NAMES, HISTORY_CHANNELS, HISTORY_NAMES, HISTORY_STEPS,
};
use crate::lognormal::{js_rule, LognormalParams, JS_HALF_WIDTH, LOG_VAR_MAX, LOG_VAR_MIN};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub repr_dim: usize,
    pub current_layers: usize,
    pub env_layers: usize,
    pub attention_blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub conv_layers: usize,
    pub head_layers: usize,
    pub random_tokens: usize,
    pub include_accel: bool,
    pub use_environment: bool,
    pub use_history: bool,
    pub beta: f64,
    pub dropout: f64,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Perturbation standard deviation as a fraction of each feature's range.
    pub perturb_frac: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            repr_dim: 64,
            current_layers: 5,
            env_layers: 4,
            attention_blocks: 6,
            heads: 4,
            ffn_mult: 2,
            conv_layers: 2,
            head_layers: 3,
            random_tokens: 4,
            include_accel: false,
            use_environment: true,
            use_history: true,
            beta: 5.0,
            dropout: 0.2,
            lr: 1e-4,
            batch: 512,
            max_epochs: 150,
            patience: 10,
            seed: 131,
            perturb_frac: 0.01,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.repr_dim,
            self.current_layers,
            self.env_layers,
            self.heads,
            self.ffn_mult,
            self.head_layers,
            self.batch,
            self.max_epochs,
        ];
        if counts.contains(&0) {
            return Err(GssmError::Config("layer counts, widths and batch size must be at least 1".into()));
        }
        if !self.repr_dim.is_multiple_of(self.heads) {
            return Err(GssmError::Config(format!(
                "repr_dim {} is not divisible by heads {}",
                self.repr_dim, self.heads
            )));
        }
        if !(self.beta >= 0.0) || !(0.0..1.0).contains(&self.dropout) || !(self.lr > 0.0) {
            return Err(GssmError::Config("beta must be ≥ 0, dropout in [0, 1) and lr > 0".into()));
        }
        Ok(())
    }

    pub fn n_current(&self) -> usize {
        if self.include_accel {
            13
        } else {
            12
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_current()
            + if self.use_environment { ENV_CHUNKS.len() } else { 0 }
            + if self.use_history { HISTORY_NAMES.len() } else { 0 }
            + self.random_tokens
    }

    pub fn token_names(&self) -> Vec<String> {
        let mut names: Vec<String> = CURRENT_NAMES[..self.n_current()].iter().map(|s| s.to_string()).collect();
        if self.use_environment {
            names.extend(ENV_NAMES.iter().map(|s| s.to_string()));
        }
        if self.use_history {
            names.extend(HISTORY_NAMES.iter().map(|s| s.to_string()));
        }
        names.extend((0..self.random_tokens).map(|k| format!("random_{k}")));
        names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
}

impl ParamStore {
    fn add(&mut self, name: String, value: Tensor) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm1: Norm,
    ff1: Linear,
    ff2: Linear,
    norm2: Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layout {
    current: Vec<Vec<Linear>>,
    env: Vec<Vec<Linear>>,
    lstm_x: usize,
    lstm_h: usize,
    lstm_b: usize,
    batch_norm: Norm,
    blocks: Vec<Block>,
    conv: Vec<Linear>,
    mu_head: Vec<Linear>,
    log_var_head: Vec<Linear>,
}

/// Standardisation statistics of the continuous inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub current_mean: Vec<f64>,
    pub current_std: Vec<f64>,
    pub history_mean: Vec<f64>,
    pub history_std: Vec<f64>,
    /// Feature ranges in standardised units.
    pub current_range: Vec<f64>,
    pub history_range: Vec<f64>,
}

impl NormStats {
    fn identity(n_current: usize) -> Self {
        Self {
            current_mean: vec![0.0; n_current],
            current_std: vec![1.0; n_current],
            history_mean: vec![0.0; HISTORY_CHANNELS],
            history_std: vec![1.0; HISTORY_CHANNELS],
            current_range: vec![1.0; n_current],
            history_range: vec![1.0; HISTORY_CHANNELS],
        }
    }

    pub fn from_samples(samples: &[InteractionSample], include_accel: bool) -> Self {
        let n_current = if include_accel { 13 } else { 12 };
        let columns = |get: &dyn Fn(&InteractionSample) -> Vec<f64>, width: usize| {
            let mut sum = vec![0.0; width];
            let mut sq = vec![0.0; width];
            let mut lo = vec![f64::INFINITY; width];
            let mut hi = vec![f64::NEG_INFINITY; width];
            let mut n = 0.0;
            for s in samples {
                for chunk in get(s).chunks(width) {
                    n += 1.0;
                    for (k, &v) in chunk.iter().enumerate() {
                        sum[k] += v;
                        sq[k] += v * v;
                        lo[k] = lo[k].min(v);
                        hi[k] = hi[k].max(v);
                    }
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let std: Vec<f64> = sq
                .iter()
                .zip(&mean)
                .map(|(q, m)| {
                    let var = (q / n - m * m).max(0.0);
                    if var > 1e-12 {
                        var.sqrt()
                    } else {
                        1.0
                    }
                })
                .collect();
            let range: Vec<f64> = (0..width).map(|k| (hi[k] - lo[k]) / std[k]).collect();
            (mean, std, range)
        };
        let (current_mean, current_std, current_range) =
            columns(&|s| s.current.to_vec(include_accel), n_current);
        let (history_mean, history_std, history_range) = columns(&|s| s.history.flat(), HISTORY_CHANNELS);
        Self { current_mean, current_std, history_mean, history_std, current_range, history_range }
    }
}

/// Standardised model inputs for a batch.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub current: Tensor,
    pub env: Tensor,
    /// `[B, 25·4]`, oldest step first, channel-minor.
    pub history: Tensor,
}

impl Inputs {
    pub fn len(&self) -> usize {
        self.current.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Inputs {
        Inputs {
            current: self.current.select(Axis(0), rows),
            env: self.env.select(Axis(0), rows),
            history: self.history.select(Axis(0), rows),
        }
    }

    pub fn stack(&self, other: &Inputs) -> Inputs {
        let cat = |a: &Tensor, b: &Tensor| ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("widths agree");
        Inputs {
            current: cat(&self.current, &other.current),
            env: cat(&self.env, &other.env),
            history: cat(&self.history, &other.history),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub version: u32,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub norm: NormStats,
    pub random_tokens: Tensor,
    pub bn_running_mean: Tensor,
    pub bn_running_var: Tensor,
    layout: Layout,
}

/// Binds parameter-store entries to graph leaves on first use.
struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    fn new(store: &'a ParamStore) -> Self {
        Self { store, vars: vec![None; store.values.len()] }
    }

    fn get(&mut self, g: &mut Graph, index: usize) -> Var {
        *self.vars[index].get_or_insert_with(|| g.param(index, self.store.values[index].clone()))
    }

    fn linear(&mut self, g: &mut Graph, x: Var, layer: Linear) -> Var {
        let w = self.get(g, layer.w);
        let b = self.get(g, layer.b);
        g.linear(x, w, b)
    }

    fn mlp(&mut self, g: &mut Graph, mut x: Var, layers: &[Linear]) -> Var {
        for (k, layer) in layers.iter().enumerate() {
            x = self.linear(g, x, *layer);
            if k + 1 < layers.len() {
                x = g.gelu(x);
            }
        }
        x
    }
}

/// Output of a forward pass.
pub struct Forward {
    pub mu: Var,
    pub log_var: Var,
    pub tokens: Var,
    pub bn_stats: Option<BatchStats>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), bound: f64) -> Tensor {
    Array2::from_shape_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Gram–Schmidt orthonormalisation of the rows (rows ≤ cols) or columns.
fn orthonormal_rows(mut m: Tensor) -> Tensor {
    let transpose = m.nrows() > m.ncols();
    if transpose {
        m = m.t().to_owned();
    }
    for i in 0..m.nrows() {
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j));
            let rj = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &rj);
        }
        let n = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / n);
    }
    if transpose {
        m.t().to_owned()
    } else {
        m
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Tensor {
    Array2::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

fn new_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, fan_in: usize, fan_out: usize) -> Linear {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = store.add(format!("{name}.w"), uniform(rng, (fan_in, fan_out), bound));
    let b = store.add(format!("{name}.b"), Tensor::zeros((1, fan_out)));
    Linear { w, b }
}

fn new_mlp(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, width: usize, depth: usize) -> Vec<Linear> {
    (0..depth)
        .map(|k| new_linear(store, rng, format!("{name}.{k}"), if k == 0 { input } else { width }, width))
        .collect()
}

impl Model {
    /// A freshly initialised model with identity normalisation.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.repr_dim;
        let mut store = ParamStore { names: Vec::new(), values: Vec::new() };
        let current = (0..config.n_current())
            .map(|k| new_mlp(&mut store, &mut rng, &format!("enc.{}", CURRENT_NAMES[k]), 1, d, config.current_layers))
            .collect();
        let env = if config.use_environment {
            ENV_CHUNKS
                .iter()
                .enumerate()
                .map(|(k, &n)| new_mlp(&mut store, &mut rng, &format!("enc.{}", ENV_NAMES[k]), n, d, config.env_layers))
                .collect()
        } else {
            Vec::new()
        };
        let lstm_x = store.add("lstm.wx".into(), uniform(&mut rng, (HISTORY_CHANNELS, 4 * d), 1.0 / (d as f64).sqrt()));
        let mut wh = Tensor::zeros((d, 4 * d));
        for gate in 0..4 {
            let block = orthonormal_rows(gaussian(&mut rng, (d, d)));
            wh.slice_mut(s![.., gate * d..(gate + 1) * d]).assign(&block);
        }
        let lstm_h = store.add("lstm.wh".into(), wh);
        let mut lstm_bias = Tensor::zeros((1, 4 * d));
        lstm_bias.slice_mut(s![.., d..2 * d]).fill(1.0);
        let lstm_b = store.add("lstm.b".into(), lstm_bias);
        let norm = |store: &mut ParamStore, name: &str| Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones((1, d))),
            beta: store.add(format!("{name}.beta"), Tensor::zeros((1, d))),
        };
        let batch_norm = norm(&mut store, "bn");
        let blocks = (0..config.attention_blocks)
            .map(|k| {
                let name = format!("block.{k}");
                let q = new_linear(&mut store, &mut rng, format!("{name}.q"), d, d);
                let kk = new_linear(&mut store, &mut rng, format!("{name}.k"), d, d);
                let v = new_linear(&mut store, &mut rng, format!("{name}.v"), d, d);
                let o = new_linear(&mut store, &mut rng, format!("{name}.o"), d, d);
                let norm1 = norm(&mut store, &format!("{name}.norm1"));
                let ff1 = new_linear(&mut store, &mut rng, format!("{name}.ff1"), d, config.ffn_mult * d);
                let ff2 = new_linear(&mut store, &mut rng, format!("{name}.ff2"), config.ffn_mult * d, d);
                let norm2 = norm(&mut store, &format!("{name}.norm2"));
                Block { q, k: kk, v, o, norm1, ff1, ff2, norm2 }
            })
            .collect();
        let conv = (0..config.conv_layers)
            .map(|k| new_linear(&mut store, &mut rng, format!("conv.{k}"), 3 * d, d))
            .collect();
        let flat = config.n_tokens() * d;
        let head = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
            (0..config.head_layers)
                .map(|k| {
                    let fan_in = if k == 0 { flat } else { d };
                    let fan_out = if k + 1 == config.head_layers { 1 } else { d };
                    new_linear(store, rng, format!("{name}.{k}"), fan_in, fan_out)
                })
                .collect::<Vec<_>>()
        };
        let mu_head = head(&mut store, &mut rng, "head.mu");
        let log_var_head = head(&mut store, &mut rng, "head.log_var");
        let random_tokens = if config.random_tokens > 0 {
            orthonormal_rows(gaussian(&mut rng, (config.random_tokens, d))) * (d as f64).sqrt()
        } else {
            Tensor::zeros((0, d))
        };
        Ok(Self {
            version: CHECKPOINT_VERSION,
            norm: NormStats::identity(config.n_current()),
            params: store,
            random_tokens,
            bn_running_mean: Tensor::zeros((1, d)),
            bn_running_var: Tensor::ones((1, d)),
            layout: Layout { current, env, lstm_x, lstm_h, lstm_b, batch_norm, blocks, conv, mu_head, log_var_head },
            config,
        })
    }

    pub fn token_names(&self) -> Vec<String> {
        self.config.token_names()
    }

    /// Sets the final bias of the `μ̂` and `log σ̂²` heads.
    pub fn set_output_bias(&mut self, mu: f64, log_var: f64) {
        let mu_b = self.layout.mu_head.last().expect("head layers ≥ 1").b;
        let lv_b = self.layout.log_var_head.last().expect("head layers ≥ 1").b;
        self.params.values[mu_b].fill(mu);
        self.params.values[lv_b].fill(log_var);
    }

    /// Standardised inputs for `samples` (history values taken as given).
    pub fn inputs(&self, samples: &[InteractionSample]) -> Result<Inputs> {
        let nc = self.config.n_current();
        let n = samples.len();
        let mut current = Tensor::zeros((n, nc));
        let mut env = Tensor::zeros((n, ENV_DIM));
        let mut history = Tensor::zeros((n, HISTORY_STEPS * HISTORY_CHANNELS));
        for (i, sample) in samples.iter().enumerate() {
            let c = sample.current.to_vec(self.config.include_accel);
            for k in 0..nc {
                current[[i, k]] = (c[k] - self.norm.current_mean[k]) / self.norm.current_std[k];
            }
            let e = sample.environment.flat();
            if e.len() != ENV_DIM {
                return Err(GssmError::Config(format!("environment width {} != {ENV_DIM}", e.len())));
            }
            env.row_mut(i).assign(&Array1::from(e));
            if sample.history.values.len() != HISTORY_STEPS {
                return Err(GssmError::Config(format!(
                    "history length {} != {HISTORY_STEPS}",
                    sample.history.values.len()
                )));
            }
            for (step, row) in sample.history.values.iter().enumerate() {
                for ch in 0..HISTORY_CHANNELS {
                    history[[i, step * HISTORY_CHANNELS + ch]] =
                        (row[ch] - self.norm.history_mean[ch]) / self.norm.history_std[ch];
                }
            }
        }
        Ok(Inputs { current, env, history })
    }

    fn encode(&self, g: &mut Graph, p: &mut Binder, inputs: &Inputs) -> Var {
        let d = self.config.repr_dim;
        let b = inputs.len();
        let mut tokens = Vec::with_capacity(self.config.n_tokens());
        for (k, layers) in self.layout.current.iter().enumerate() {
            let x = g.constant(inputs.current.slice(s![.., k..k + 1]).to_owned());
            tokens.push(p.mlp(g, x, layers));
        }
        let mut offset = 0;
        for (k, layers) in self.layout.env.iter().enumerate() {
            let width = ENV_CHUNKS[k];
            let x = g.constant(inputs.env.slice(s![.., offset..offset + width]).to_owned());
            offset += width;
            tokens.push(p.mlp(g, x, layers));
        }
        if self.config.use_history {
            let wx = p.get(g, self.layout.lstm_x);
            let wh = p.get(g, self.layout.lstm_h);
            let bias = p.get(g, self.layout.lstm_b);
            let mut h: Option<Var> = None;
            let mut c: Option<Var> = None;
            for step in 0..HISTORY_STEPS {
                let source = HISTORY_STEPS - 1 - step;
                let cols = source * HISTORY_CHANNELS..(source + 1) * HISTORY_CHANNELS;
                let x = g.constant(inputs.history.slice(s![.., cols]).to_owned());
                let mut gates = g.linear(x, wx, bias);
                if let Some(h) = h {
                    let hh = g.matmul(h, wh);
                    gates = g.add(gates, hh);
                }
                let i_gate = g.slice_cols(gates, 0, d);
                let f_gate = g.slice_cols(gates, d, 2 * d);
                let c_gate = g.slice_cols(gates, 2 * d, 3 * d);
                let o_gate = g.slice_cols(gates, 3 * d, 4 * d);
                let i_gate = g.sigmoid(i_gate);
                let f_gate = g.sigmoid(f_gate);
                let c_gate = g.tanh(c_gate);
                let o_gate = g.sigmoid(o_gate);
                let ic = g.mul(i_gate, c_gate);
                let c_new = match c {
                    Some(c) => {
                        let fc = g.mul(f_gate, c);
                        g.add(fc, ic)
                    }
                    None => ic,
                };
                let tc = g.tanh(c_new);
                let h_new = g.mul(o_gate, tc);
                c = Some(c_new);
                h = Some(h_new);
                if (step + 1) % 5 == 0 {
                    tokens.push(h_new);
                }
            }
        }
        for r in 0..self.config.random_tokens {
            let row = self.random_tokens.row(r);
            let value = row.broadcast((b, d)).expect("broadcast").to_owned();
            tokens.push(g.constant(value));
        }
        g.stack_tokens(&tokens)
    }

    fn decode(&self, g: &mut Graph, p: &mut Binder, tokens: Var, batch: usize, train: bool) -> (Var, Var, Option<BatchStats>) {
        let t = self.config.n_tokens();
        let d = self.config.repr_dim;
        let gamma = p.get(g, self.layout.batch_norm.gamma);
        let beta = p.get(g, self.layout.batch_norm.beta);
        let (mut x, stats) = if train {
            let (x, stats) = g.batch_norm(tokens, gamma, beta);
            (x, Some(stats))
        } else {
            let mean = g.constant(self.bn_running_mean.clone());
            let inv = g.constant(self.bn_running_var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt()));
            let centred = g.sub(tokens, mean);
            let scaled = g.mul(centred, inv);
            let scaled = g.mul(scaled, gamma);
            (g.add(scaled, beta), None)
        };
        for block in &self.layout.blocks {
            let q = p.linear(g, x, block.q);
            let k = p.linear(g, x, block.k);
            let v = p.linear(g, x, block.v);
            let a = g.attention(q, k, v, batch, t, self.config.heads);
            let a = p.linear(g, a, block.o);
            let r = g.add(x, a);
            let (g1, b1) = (p.get(g, block.norm1.gamma), p.get(g, block.norm1.beta));
            x = g.layer_norm(r, g1, b1);
            let f = p.linear(g, x, block.ff1);
            let f = g.gelu(f);
            let f = p.linear(g, f, block.ff2);
            let r = g.add(x, f);
            let (g2, b2) = (p.get(g, block.norm2.gamma), p.get(g, block.norm2.beta));
            x = g.layer_norm(r, g2, b2);
        }
        for layer in &self.layout.conv {
            let cols = g.im2col3(x, t);
            let y = p.linear(g, cols, *layer);
            x = g.gelu(y);
        }
        let flat = g.reshape(x, batch, t * d);
        let mu = p.mlp(g, flat, &self.layout.mu_head);
        let lv = p.mlp(g, flat, &self.layout.log_var_head);
        let lv = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
        (mu, lv, stats)
    }

    /// Full forward pass. `train` selects batch statistics in the batch normalisation.
    pub fn forward(&self, g: &mut Graph, inputs: &Inputs, train: bool) -> Forward {
        let mut p = Binder::new(&self.params);
        self.forward_bound(g, &mut p, inputs, train)
    }

    fn forward_bound(&self, g: &mut Graph, p: &mut Binder, inputs: &Inputs, train: bool) -> Forward {
        let tokens = self.encode(g, p, inputs);
        let (mu, log_var, bn_stats) = self.decode(g, p, tokens, inputs.len(), train);
        Forward { mu, log_var, tokens, bn_stats }
    }

    /// Inference-mode parameters for each sample.
    pub fn predict_inputs(&self, inputs: &Inputs) -> Vec<LognormalParams> {
        const CHUNK: usize = 1024;
        let mut out = Vec::with_capacity(inputs.len());
        let n = inputs.len();
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let part = inputs.select(&rows);
            let mut g = Graph::new();
            let f = self.forward(&mut g, &part, false);
            let (mu, lv) = (g.value(f.mu), g.value(f.log_var));
            out.extend((0..part.len()).map(|i| LognormalParams::new(mu[[i, 0]], lv[[i, 0]])));
            start = end;
        }
        out
    }

    pub fn predict(&self, samples: &[InteractionSample]) -> Result<Vec<LognormalParams>> {
        Ok(self.predict_inputs(&self.inputs(samples)?))
    }

    pub fn forward_params(&self, sample: &InteractionSample) -> Result<LognormalParams> {
        Ok(self.predict(std::slice::from_ref(sample))?[0])
    }

    /// Encoded token matrices `[T, d]`, one per sample (inference mode).
    pub fn encode_tokens(&self, samples: &[InteractionSample]) -> Result<Vec<Tensor>> {
        let inputs = self.inputs(samples)?;
        let mut g = Graph::new();
        let mut p = Binder::new(&self.params);
        let tokens = self.encode(&mut g, &mut p, &inputs);
        let t = self.config.n_tokens();
        let all = g.value(tokens);
        Ok((0..samples.len()).map(|i| all.slice(s![i * t..(i + 1) * t, ..]).to_owned()).collect())
    }

    /// GSSM level of each `[T, d]` token matrix at spacing `s`, and its
    /// gradient w.r.t. the tokens (inference-mode decoder).
    pub fn level_and_grad(&self, thetas: &[Tensor], spacings: &[f64]) -> (Vec<f64>, Vec<Tensor>) {
        let t = self.config.n_tokens();
        let d = self.config.repr_dim;
        let n = thetas.len();
        let mut stacked = Tensor::zeros((n * t, d));
        for (i, th) in thetas.iter().enumerate() {
            stacked.slice_mut(s![i * t..(i + 1) * t, ..]).assign(th);
        }
        let mut g = Graph::new();
        let mut p = Binder::new(&self.params);
        let tokens = g.variable(stacked);
        let (mu, lv, _) = self.decode(&mut g, &mut p, tokens, n, false);
        let ln_s = g.constant(Array2::from_shape_fn((n, 1), |(i, _)| spacings[i].ln()));
        let r = g.sub(ln_s, mu);
        let half = g.scale(lv, -0.5);
        let inv_sigma = g.exp(half);
        let z = g.mul(r, inv_sigma);
        let level = g.gssm_level(z);
        let total = g.sum_all(level);
        g.backward(total);
        let levels = g.value(level).column(0).to_vec();
        let grad = g.grad(tokens).cloned().unwrap_or_else(|| Tensor::zeros((n * t, d)));
        let grads = (0..n).map(|i| grad.slice(s![i * t..(i + 1) * t, ..]).to_owned()).collect();
        (levels, grads)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let model: Model = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if model.version != CHECKPOINT_VERSION {
            return Err(GssmError::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                model.version
            )));
        }
        Ok(model)
    }
}

/// NLL of each row as a graph node `[B, 1]`.
pub fn nll_node(g: &mut Graph, mu: Var, log_var: Var, ln_s: Var) -> Var {
    let r = g.sub(ln_s, mu);
    let r2 = g.square(r);
    let neg = g.neg(log_var);
    let inv_var = g.exp(neg);
    let quad = g.mul(r2, inv_var);
    let sum = g.add(log_var, quad);
    let sum = g.add_scalar(sum, (2.0 * PI).ln());
    let half = g.scale(sum, 0.5);
    g.add(half, ln_s)
}

/// Jensen–Shannon divergence between row-wise lognormals as a graph node `[B, 1]`.
///
/// The integration window depends on the parameters and is differentiated too.
pub fn js_node(g: &mut Graph, mu_p: Var, lv_p: Var, mu_q: Var, lv_q: Var) -> Var {
    let (nodes, weights) = js_rule();
    let n = nodes.len();
    let x = g.constant(Array2::from_shape_vec((1, n), nodes.clone()).expect("shape"));
    let w = g.constant(Array2::from_shape_vec((1, n), weights.clone()).expect("shape"));
    let var_p = g.exp(lv_p);
    let var_q = g.exp(lv_q);
    let mu_sum = g.add(mu_p, mu_q);
    let centre = g.scale(mu_sum, 0.5);
    let mu_diff = g.sub(mu_p, mu_q);
    let half_diff = g.scale(mu_diff, 0.5);
    let d2 = g.square(half_diff);
    let var_sum = g.add(var_p, var_q);
    let mean_var = g.scale(var_sum, 0.5);
    let mix_var = g.add(mean_var, d2);
    let sd = g.sqrt(mix_var);
    let h = g.scale(sd, JS_HALF_WIDTH);
    let offsets = g.mul(h, x);
    let grid = g.add(centre, offsets);
    let log_pdf = |g: &mut Graph, mu: Var, lv: Var, var: Var| {
        let r = g.sub(grid, mu);
        let r2 = g.square(r);
        let q = g.div(r2, var);
        let s = g.add(q, lv);
        let s = g.add_scalar(s, (2.0 * PI).ln());
        g.scale(s, -0.5)
    };
    let lp = log_pdf(g, mu_p, lv_p, var_p);
    let lq = log_pdf(g, mu_q, lv_q, var_q);
    let p = g.exp(lp);
    let q = g.exp(lq);
    let dq = g.sub(lq, lp);
    let dp = g.sub(lp, lq);
    let spq = g.softplus(dq);
    let spp = g.softplus(dp);
    let kp = g.neg(spq);
    let kp = g.add_scalar(kp, LN_2);
    let kq = g.neg(spp);
    let kq = g.add_scalar(kq, LN_2);
    let tp = g.mul(p, kp);
    let tq = g.mul(q, kq);
    let terms = g.add(tp, tq);
    let weighted = g.mul(terms, w);
    let integral = g.sum_cols(weighted);
    let scaled = g.mul(integral, h);
    g.scale(scaled, 0.5)
}

/// Per-batch training inputs for the smoothed loss.
pub struct LossBatch<'a> {
    pub inputs: &'a Inputs,
    /// `ln s` per row.
    pub ln_s: &'a [f64],
    /// Perturbed copy of `inputs` (continuous features only); `None` skips the divergence term.
    pub perturbed: Option<&'a Inputs>,
}

pub struct LossOutput {
    pub loss: f64,
    pub nll: f64,
    pub js: f64,
    pub grads: Vec<Tensor>,
    pub bn_stats: Option<BatchStats>,
}

impl Model {
    /// Smoothed NLL `mean(NLL) + β·mean(JS(g(X), g(X′)))` and its gradient
    /// w.r.t. every parameter. `X` and `X′` share one training-mode pass.
    pub fn loss_and_grad(&self, batch: &LossBatch, beta: f64) -> LossOutput {
        let b = batch.inputs.len();
        let use_js = beta > 0.0 && batch.perturbed.is_some();
        let inputs = match (use_js, batch.perturbed) {
            (true, Some(pert)) => batch.inputs.stack(pert),
            _ => batch.inputs.clone(),
        };
        let mut g = Graph::new();
        let mut p = Binder::new(&self.params);
        let f = self.forward_bound(&mut g, &mut p, &inputs, true);
        let ln_s = g.constant(Array2::from_shape_vec((b, 1), batch.ln_s.to_vec()).expect("shape"));
        let (mu, lv) = if use_js {
            (g.slice_rows(f.mu, 0, b), g.slice_rows(f.log_var, 0, b))
        } else {
            (f.mu, f.log_var)
        };
        let nll = nll_node(&mut g, mu, lv, ln_s);
        let nll_mean = g.mean_all(nll);
        let (loss, js_value) = if use_js {
            let mu_q = g.slice_rows(f.mu, b, 2 * b);
            let lv_q = g.slice_rows(f.log_var, b, 2 * b);
            let js = js_node(&mut g, mu, lv, mu_q, lv_q);
            let js_mean = g.mean_all(js);
            let weighted = g.scale(js_mean, beta);
            (g.add(nll_mean, weighted), g.scalar(js_mean))
        } else {
            (nll_mean, 0.0)
        };
        g.backward(loss);
        let mut grads: Vec<Tensor> = self.params.values.iter().map(|v| Tensor::zeros(v.dim())).collect();
        for (index, grad) in g.param_grads() {
            grads[index] += grad;
        }
        LossOutput { loss: g.scalar(loss), nll: g.scalar(nll_mean), js: js_value, grads, bn_stats: f.bn_stats }
    }
}
