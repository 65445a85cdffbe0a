//! Actor and critic networks.
//!
//! Both heads share the same encoder pattern: a first LSTM (shared weights
//! across jobs) runs over each job's task-feature sequence and keeps the
//! final hidden vector as the job embedding; a second LSTM runs over the job
//! embeddings in job-index order. The actor projects each second-stage
//! output to a scalar and applies a masked log-softmax over jobs. The critic
//! sums the second-stage outputs into a single vector and feeds it through a
//! three-hidden-layer feed-forward network (ReLU inside, linear output).
//!
//! The networks accept any number of jobs and any per-job sequence length
//! without reconfiguration; within one state the per-job encoder runs as a
//! single right-padded batch, which matches per-sequence evaluation exactly
//! because each padded column is read at its own true final step.

use crate::autodiff::{AutodiffError, Graph, Param, Tensor, Var};
use crate::env::{ActionMask, StateFeatures, FEATURE_WIDTH};
use crate::instances::Instance;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Network widths and feature scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden1: usize,
    pub hidden2: usize,
    pub ffn_widths: [usize; 3],
    pub feature_width: usize,
    /// Times are divided by `time_scale_mean * num_machines` when encoding.
    pub time_scale_mean: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden1: 110,
            hidden2: 220,
            ffn_widths: [1100, 550, 110],
            feature_width: FEATURE_WIDTH,
            time_scale_mean: 100.0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("state has {jobs} jobs but the mask has {mask_len} entries")]
    MaskMismatch { jobs: usize, mask_len: usize },
    #[error("state has no jobs")]
    EmptyState,
    #[error("sequence element has width {found}, layer expects {expected}")]
    InputWidth { expected: usize, found: usize },
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden1 == 0 || self.hidden2 == 0 || self.feature_width == 0 {
            return Err(ModelError::InvalidConfig("widths must be positive".into()));
        }
        if self.ffn_widths.contains(&0) {
            return Err(ModelError::InvalidConfig(
                "ffn widths must be positive".into(),
            ));
        }
        if !(self.ffn_widths[0] > self.ffn_widths[1] && self.ffn_widths[1] > self.ffn_widths[2]) {
            return Err(ModelError::InvalidConfig(
                "ffn hidden widths must be strictly decreasing".into(),
            ));
        }
        if self.time_scale_mean <= 0.0 || self.time_scale_mean.is_nan() {
            return Err(ModelError::InvalidConfig(
                "time_scale_mean must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Effective feature scale for an instance.
    pub fn feature_scale(&self, instance: &Instance) -> f64 {
        self.time_scale_mean * instance.num_machines() as f64
    }
}

fn uniform_tensor(rng: &mut ChaCha20Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let u: f64 = rng.random();
            -bound + 2.0 * bound * u
        })
        .collect();
    Tensor::new(shape, data).expect("shape/data constructed together")
}

/// One LSTM layer. Gate weights are fused along rows in the order
/// input, forget, candidate, output; the forget-gate bias starts at +1.
#[derive(Debug)]
pub struct LstmLayer {
    pub input_size: usize,
    pub hidden_size: usize,
    wx: Param,
    wh: Param,
    bias: Param,
}

impl LstmLayer {
    pub fn new(prefix: &str, input_size: usize, hidden_size: usize, rng: &mut ChaCha20Rng) -> Self {
        let wx = uniform_tensor(rng, vec![4 * hidden_size, input_size], input_size);
        let wh = uniform_tensor(rng, vec![4 * hidden_size, hidden_size], hidden_size);
        let mut bias = uniform_tensor(rng, vec![4 * hidden_size], hidden_size);
        for b in &mut bias.data_mut()[hidden_size..2 * hidden_size] {
            *b += 1.0;
        }
        Self {
            input_size,
            hidden_size,
            wx: Param::new(format!("{prefix}.wx"), wx),
            wh: Param::new(format!("{prefix}.wh"), wh),
            bias: Param::new(format!("{prefix}.bias"), bias),
        }
    }

    pub fn zeroed(prefix: &str, input_size: usize, hidden_size: usize) -> Self {
        Self {
            input_size,
            hidden_size,
            wx: Param::new(
                format!("{prefix}.wx"),
                Tensor::zeros(vec![4 * hidden_size, input_size]),
            ),
            wh: Param::new(
                format!("{prefix}.wh"),
                Tensor::zeros(vec![4 * hidden_size, hidden_size]),
            ),
            bias: Param::new(
                format!("{prefix}.bias"),
                Tensor::zeros(vec![4 * hidden_size]),
            ),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.wx, &self.wh, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.wx, &mut self.wh, &mut self.bias]
    }

    pub fn param_count(&self) -> usize {
        4 * self.hidden_size * (self.input_size + self.hidden_size + 1)
    }

    /// One recurrence step on a `[hidden, batch]` state (batch may be 1 with
    /// rank-1 tensors). Returns the new hidden and cell states.
    fn step(
        &self,
        g: &mut Graph,
        x: Var,
        h: Var,
        c: Var,
        batched: bool,
    ) -> Result<(Var, Var), ModelError> {
        let hs = self.hidden_size;
        let wx = g.param(&self.wx);
        let wh = g.param(&self.wh);
        let bias = g.param(&self.bias);
        let from_input = g.matmul(wx, x)?;
        let from_hidden = g.matmul(wh, h)?;
        let pre = g.add(from_input, from_hidden)?;
        let gates = if batched {
            g.add_bias(pre, bias)?
        } else {
            g.add(pre, bias)?
        };
        let input_gate = g.slice_rows(gates, 0, hs)?;
        let input_gate = g.sigmoid(input_gate);
        let forget_gate = g.slice_rows(gates, hs, hs)?;
        let forget_gate = g.sigmoid(forget_gate);
        let candidate = g.slice_rows(gates, 2 * hs, hs)?;
        let candidate = g.tanh(candidate);
        let output_gate = g.slice_rows(gates, 3 * hs, hs)?;
        let output_gate = g.sigmoid(output_gate);
        let keep = g.mul(forget_gate, c)?;
        let write = g.mul(input_gate, candidate)?;
        let c_new = g.add(keep, write)?;
        let c_act = g.tanh(c_new);
        let h_new = g.mul(output_gate, c_act)?;
        Ok((h_new, c_new))
    }
}

/// Runs a layer over one sequence from zero initial state, returning the
/// same-length sequence of hidden vectors.
pub fn lstm_forward(
    g: &mut Graph,
    layer: &LstmLayer,
    inputs: &[Var],
) -> Result<Vec<Var>, ModelError> {
    for &x in inputs {
        let shape = g.shape(x);
        if shape != [layer.input_size] {
            return Err(ModelError::InputWidth {
                expected: layer.input_size,
                found: shape.iter().product(),
            });
        }
    }
    let mut h = g.input(Tensor::zeros(vec![layer.hidden_size]));
    let mut c = g.input(Tensor::zeros(vec![layer.hidden_size]));
    let mut outputs = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let (h_new, c_new) = layer.step(g, x, h, c, false)?;
        h = h_new;
        c = c_new;
        outputs.push(h);
    }
    Ok(outputs)
}

/// Runs a layer over several sequences as one right-padded batch and
/// returns each sequence's final hidden vector (`None` for empty
/// sequences). Output `b` is read at that sequence's own last time step, so
/// padding never leaks into the result.
pub fn lstm_final_hidden_batch(
    g: &mut Graph,
    layer: &LstmLayer,
    sequences: &[Vec<Vec<f64>>],
) -> Result<Vec<Option<Var>>, ModelError> {
    let width = layer.input_size;
    for seq in sequences {
        for step in seq {
            if step.len() != width {
                return Err(ModelError::InputWidth {
                    expected: width,
                    found: step.len(),
                });
            }
        }
    }
    let batch = sequences.len();
    let max_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
    if batch == 0 || max_len == 0 {
        return Ok(vec![None; batch]);
    }
    let mut h = g.input(Tensor::zeros(vec![layer.hidden_size, batch]));
    let mut c = g.input(Tensor::zeros(vec![layer.hidden_size, batch]));
    let mut hidden_per_step = Vec::with_capacity(max_len);
    for t in 0..max_len {
        let mut x = vec![0.0; width * batch];
        for (b, seq) in sequences.iter().enumerate() {
            if let Some(step) = seq.get(t) {
                for (i, &v) in step.iter().enumerate() {
                    x[i * batch + b] = v;
                }
            }
        }
        let x = g.input(Tensor::new(vec![width, batch], x).expect("assembled in shape"));
        let (h_new, c_new) = layer.step(g, x, h, c, true)?;
        h = h_new;
        c = c_new;
        hidden_per_step.push(h);
    }
    sequences
        .iter()
        .enumerate()
        .map(|(b, seq)| {
            if seq.is_empty() {
                Ok(None)
            } else {
                Ok(Some(g.pick_col(hidden_per_step[seq.len() - 1], b)?))
            }
        })
        .collect()
}

/// The policy head: double LSTM, per-job scalar projection, masked softmax.
#[derive(Debug)]
pub struct ActorNet {
    pub config: ModelConfig,
    pub lstm1: LstmLayer,
    pub lstm2: LstmLayer,
    proj_w: Param,
    proj_b: Param,
}

/// The value head: double LSTM, summed embeddings, three-hidden-layer FFN.
#[derive(Debug)]
pub struct CriticNet {
    pub config: ModelConfig,
    pub lstm1: LstmLayer,
    pub lstm2: LstmLayer,
    ffn: Vec<Linear>,
}

#[derive(Debug)]
struct Linear {
    w: Param,
    b: Param,
}

impl Linear {
    fn new(prefix: &str, in_size: usize, out_size: usize, rng: &mut ChaCha20Rng) -> Self {
        Self {
            w: Param::new(
                format!("{prefix}.w"),
                uniform_tensor(rng, vec![out_size, in_size], in_size),
            ),
            b: Param::new(
                format!("{prefix}.b"),
                uniform_tensor(rng, vec![out_size], in_size),
            ),
        }
    }

    fn zeroed(prefix: &str, in_size: usize, out_size: usize) -> Self {
        Self {
            w: Param::new(
                format!("{prefix}.w"),
                Tensor::zeros(vec![out_size, in_size]),
            ),
            b: Param::new(format!("{prefix}.b"), Tensor::zeros(vec![out_size])),
        }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var, AutodiffError> {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        let y = g.matmul(w, x)?;
        g.add(y, b)
    }
}

impl ActorNet {
    pub fn new(config: ModelConfig, rng: &mut ChaCha20Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let lstm1 = LstmLayer::new("lstm1", config.feature_width, config.hidden1, rng);
        let lstm2 = LstmLayer::new("lstm2", config.hidden1, config.hidden2, rng);
        let proj_w = Param::new(
            "proj.w",
            uniform_tensor(rng, vec![1, config.hidden2], config.hidden2),
        );
        let proj_b = Param::new("proj.b", uniform_tensor(rng, vec![1], config.hidden2));
        Ok(Self {
            config,
            lstm1,
            lstm2,
            proj_w,
            proj_b,
        })
    }

    pub fn zeroed(config: ModelConfig) -> Self {
        Self {
            config,
            lstm1: LstmLayer::zeroed("lstm1", config.feature_width, config.hidden1),
            lstm2: LstmLayer::zeroed("lstm2", config.hidden1, config.hidden2),
            proj_w: Param::new("proj.w", Tensor::zeros(vec![1, config.hidden2])),
            proj_b: Param::new("proj.b", Tensor::zeros(vec![1])),
        }
    }

    /// Parameters in the stable checkpoint order.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.lstm1.params();
        out.extend(self.lstm2.params());
        out.push(&self.proj_w);
        out.push(&self.proj_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.lstm1.params_mut();
        out.extend(self.lstm2.params_mut());
        out.push(&mut self.proj_w);
        out.push(&mut self.proj_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value().len()).sum()
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| p.value().clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        for (param, saved) in self.params_mut().into_iter().zip(snapshot) {
            param.set_value(saved.clone());
        }
    }
}

impl CriticNet {
    pub fn new(config: ModelConfig, rng: &mut ChaCha20Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let lstm1 = LstmLayer::new("lstm1", config.feature_width, config.hidden1, rng);
        let lstm2 = LstmLayer::new("lstm2", config.hidden1, config.hidden2, rng);
        let widths = [
            config.hidden2,
            config.ffn_widths[0],
            config.ffn_widths[1],
            config.ffn_widths[2],
            1,
        ];
        let ffn = (0..4)
            .map(|i| Linear::new(&format!("ffn.{i}"), widths[i], widths[i + 1], rng))
            .collect();
        Ok(Self {
            config,
            lstm1,
            lstm2,
            ffn,
        })
    }

    pub fn zeroed(config: ModelConfig) -> Self {
        let widths = [
            config.hidden2,
            config.ffn_widths[0],
            config.ffn_widths[1],
            config.ffn_widths[2],
            1,
        ];
        Self {
            config,
            lstm1: LstmLayer::zeroed("lstm1", config.feature_width, config.hidden1),
            lstm2: LstmLayer::zeroed("lstm2", config.hidden1, config.hidden2),
            ffn: (0..4)
                .map(|i| Linear::zeroed(&format!("ffn.{i}"), widths[i], widths[i + 1]))
                .collect(),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.lstm1.params();
        out.extend(self.lstm2.params());
        for layer in &self.ffn {
            out.push(&layer.w);
            out.push(&layer.b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.lstm1.params_mut();
        out.extend(self.lstm2.params_mut());
        for layer in &mut self.ffn {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value().len()).sum()
    }
}

/// Deterministic parameter initialization for both heads.
pub fn init_params(config: ModelConfig, seed: u64) -> Result<(ActorNet, CriticNet), ModelError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let actor = ActorNet::new(config, &mut rng)?;
    let critic = CriticNet::new(config, &mut rng)?;
    Ok((actor, critic))
}

fn feature_sequences(features: &StateFeatures) -> Vec<Vec<Vec<f64>>> {
    features
        .jobs
        .iter()
        .map(|job| job.iter().map(|triple| triple.to_vec()).collect())
        .collect()
}

/// Job embeddings shared by both heads: final lstm1 hidden per job, with a
/// zero vector standing in for finished jobs.
fn job_embeddings(
    g: &mut Graph,
    lstm1: &LstmLayer,
    features: &StateFeatures,
) -> Result<Vec<Var>, ModelError> {
    let finals = lstm_final_hidden_batch(g, lstm1, &feature_sequences(features))?;
    Ok(finals
        .into_iter()
        .map(|f| f.unwrap_or_else(|| g.input(Tensor::zeros(vec![lstm1.hidden_size]))))
        .collect())
}

/// Log-probabilities over jobs, supported exactly on the mask.
pub fn actor_forward(
    g: &mut Graph,
    net: &ActorNet,
    features: &StateFeatures,
    mask: &ActionMask,
) -> Result<Var, ModelError> {
    let n = features.jobs.len();
    if n == 0 {
        return Err(ModelError::EmptyState);
    }
    if mask.allowed.len() != n {
        return Err(ModelError::MaskMismatch {
            jobs: n,
            mask_len: mask.allowed.len(),
        });
    }
    let embeddings = job_embeddings(g, &net.lstm1, features)?;
    let outputs = lstm_forward(g, &net.lstm2, &embeddings)?;
    let mut scores = Vec::with_capacity(n);
    for out in outputs {
        let proj_w = g.param(&net.proj_w);
        let proj_b = g.param(&net.proj_b);
        let y = g.matmul(proj_w, out)?;
        scores.push(g.add(y, proj_b)?);
    }
    let logits = g.concat(&scores)?;
    Ok(g.masked_log_softmax(logits, &mask.allowed)?)
}

/// Scalar state-value estimate.
pub fn critic_forward(
    g: &mut Graph,
    net: &CriticNet,
    features: &StateFeatures,
) -> Result<Var, ModelError> {
    if features.jobs.is_empty() {
        return Err(ModelError::EmptyState);
    }
    let embeddings = job_embeddings(g, &net.lstm1, features)?;
    let outputs = lstm_forward(g, &net.lstm2, &embeddings)?;
    let mut z = outputs[0];
    for &out in &outputs[1..] {
        z = g.add(z, out)?;
    }
    let mut x = z;
    for (i, layer) in net.ffn.iter().enumerate() {
        x = layer.apply(g, x)?;
        if i + 1 < net.ffn.len() {
            x = g.relu(x);
        }
    }
    Ok(x)
}
