//! Inference-only two-layer LSTM with windowed attention.
//!
//! Per step the previous symbol (one-hot) is concatenated with the previous
//! attention vector and linearly projected to the first layer's input. Each
//! layer runs a standard LSTM cell on `[h_{t-1}, x_t]`. The attention vector
//! mixes the last `att_window` top-layer outputs with a softmax over scores
//! from a one-hidden-layer tanh perceptron of each output and the current
//! top-layer cell state. The next-symbol logits are
//! `L_0 (E x_{t-1} + L_h h_t + L_z z_t)`.
//!
//! Probabilities are quantized to integer weights at 2^32 so the codec sees
//! the same [`Distribution`] shape as for the n-gram model. Results are only
//! reproducible within one build: the transcendental functions are not
//! guaranteed bit-identical across platforms.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::midi::{MelodyEvent, VOCAB_SIZE};
use crate::model::{ByteReader, ConditionalModel, Distribution, ModelError, ModelSession};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"AAGW";
pub const WEIGHTS_VERSION: u16 = 1;
const QUANTIZATION_SCALE: f64 = 4_294_967_296.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NeuralError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("attention history is empty")]
    EmptyHistory,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("bad magic: not a weight file")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    VersionMismatch(u16),
    #[error("weight file truncated")]
    TruncatedFile,
    #[error("corrupt weight file: {0}")]
    Corrupt(String),
}

impl From<NeuralError> for ModelError {
    fn from(e: NeuralError) -> Self {
        ModelError::Neural(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NeuralError> {
        if data.len() != rows * cols {
            return Err(NeuralError::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += self · x`
    fn mul_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), x);
        }
    }

    /// `out += self · [a; b]` without materializing the concatenation.
    fn mul_acc_concat(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        debug_assert_eq!(a.len() + b.len(), self.cols);
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.row(r);
            *o += dot(&row[..a.len()], a) + dot(&row[a.len()..], b);
        }
    }

    fn add_column(&self, c: usize, out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o += self.get(r, c);
        }
    }
}

/// Four interleaved partial sums, combined in a fixed order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let (a4, b4) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = a4.remainder().iter().zip(b4.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in a4.zip(b4) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NeuralConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Width of the attention perceptron's hidden layer.
    pub att_hidden: usize,
    /// Number of past top-layer outputs attended to.
    pub att_window: usize,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self { vocab: VOCAB_SIZE, hidden: 64, layers: 2, att_hidden: 40, att_window: 40 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    pub w_input: Matrix,
    pub w_forget: Matrix,
    pub w_cell: Matrix,
    pub w_output: Matrix,
    pub b_input: Vec<f64>,
    pub b_forget: Vec<f64>,
    pub b_cell: Vec<f64>,
    pub b_output: Vec<f64>,
}

impl LstmLayer {
    fn zeros(hidden: usize, input: usize) -> Self {
        let m = || Matrix::zeros(hidden, hidden + input);
        Self {
            w_input: m(),
            w_forget: m(),
            w_cell: m(),
            w_output: m(),
            b_input: vec![0.0; hidden],
            b_forget: vec![0.0; hidden],
            b_cell: vec![0.0; hidden],
            b_output: vec![0.0; hidden],
        }
    }

    fn matrices_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w_input, &mut self.w_forget, &mut self.w_cell, &mut self.w_output]
    }

    fn biases_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.b_input, &mut self.b_forget, &mut self.b_cell, &mut self.b_output]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmWeights {
    pub config: NeuralConfig,
    /// Projects `[one_hot(x_t); z_{t-1}]` to the first layer's input.
    pub input_proj: Matrix,
    pub input_bias: Vec<f64>,
    pub layers: Vec<LstmLayer>,
    pub att_hidden_proj: Matrix,
    pub att_cell_proj: Matrix,
    pub att_bias: Vec<f64>,
    pub att_score: Vec<f64>,
    /// `E`, hidden × vocab.
    pub embedding: Matrix,
    /// `L_h`
    pub out_hidden: Matrix,
    /// `L_z`
    pub out_attention: Matrix,
    /// `L_0`, vocab × hidden.
    pub out_proj: Matrix,
}

impl LstmWeights {
    pub fn zeros(config: NeuralConfig) -> Self {
        let NeuralConfig { vocab, hidden, layers, att_hidden, .. } = config;
        Self {
            config,
            input_proj: Matrix::zeros(hidden, vocab + hidden),
            input_bias: vec![0.0; hidden],
            layers: (0..layers).map(|_| LstmLayer::zeros(hidden, hidden)).collect(),
            att_hidden_proj: Matrix::zeros(att_hidden, hidden),
            att_cell_proj: Matrix::zeros(att_hidden, hidden),
            att_bias: vec![0.0; att_hidden],
            att_score: vec![0.0; att_hidden],
            embedding: Matrix::zeros(hidden, vocab),
            out_hidden: Matrix::zeros(hidden, hidden),
            out_attention: Matrix::zeros(hidden, hidden),
            out_proj: Matrix::zeros(vocab, hidden),
        }
    }

    /// Every parameter drawn uniformly from [-0.1, 0.1].
    pub fn random(config: NeuralConfig, seed: u64) -> Self {
        let mut w = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        w.for_each_param_mut(|v| *v = rng.gen_range(-0.1..=0.1));
        w
    }

    /// Visits every parameter in the canonical file order.
    fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        let mut visit = |values: &mut [f64]| values.iter_mut().for_each(&mut f);
        visit(&mut self.input_proj.data);
        visit(&mut self.input_bias);
        for layer in &mut self.layers {
            for m in layer.matrices_mut() {
                visit(&mut m.data);
            }
            for b in layer.biases_mut() {
                visit(b);
            }
        }
        visit(&mut self.att_hidden_proj.data);
        visit(&mut self.att_cell_proj.data);
        visit(&mut self.att_bias);
        visit(&mut self.att_score);
        visit(&mut self.embedding.data);
        visit(&mut self.out_hidden.data);
        visit(&mut self.out_attention.data);
        visit(&mut self.out_proj.data);
    }

    fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.clone().for_each_param_mut(|v| out.push(*v));
        out
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let NeuralConfig { vocab, hidden, layers, att_hidden, att_window } = self.config;
        let dim = |m: &Matrix, r: usize, c: usize, name: &str| {
            if m.rows != r || m.cols != c || m.data.len() != r * c {
                Err(NeuralError::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {r}x{c}",
                    m.rows, m.cols
                )))
            } else {
                Ok(())
            }
        };
        let len = |v: &[f64], n: usize, name: &str| {
            if v.len() != n {
                Err(NeuralError::DimensionMismatch(format!("{name} has {} entries, expected {n}", v.len())))
            } else {
                Ok(())
            }
        };
        if vocab == 0 || hidden == 0 || layers == 0 || att_hidden == 0 || att_window == 0 {
            return Err(NeuralError::DimensionMismatch("zero-sized dimension".into()));
        }
        if vocab > VOCAB_SIZE {
            return Err(NeuralError::DimensionMismatch(format!("vocabulary {vocab}")));
        }
        if self.layers.len() != layers {
            return Err(NeuralError::DimensionMismatch(format!(
                "{} layers, expected {layers}",
                self.layers.len()
            )));
        }
        dim(&self.input_proj, hidden, vocab + hidden, "input projection")?;
        len(&self.input_bias, hidden, "input bias")?;
        for layer in &self.layers {
            for m in [&layer.w_input, &layer.w_forget, &layer.w_cell, &layer.w_output] {
                dim(m, hidden, 2 * hidden, "gate matrix")?;
            }
            for b in [&layer.b_input, &layer.b_forget, &layer.b_cell, &layer.b_output] {
                len(b, hidden, "gate bias")?;
            }
        }
        dim(&self.att_hidden_proj, att_hidden, hidden, "attention hidden projection")?;
        dim(&self.att_cell_proj, att_hidden, hidden, "attention cell projection")?;
        len(&self.att_bias, att_hidden, "attention bias")?;
        len(&self.att_score, att_hidden, "attention score vector")?;
        dim(&self.embedding, hidden, vocab, "embedding")?;
        dim(&self.out_hidden, hidden, hidden, "L_h")?;
        dim(&self.out_attention, hidden, hidden, "L_z")?;
        dim(&self.out_proj, vocab, hidden, "L_0")?;
        if !self.params().iter().all(|v| v.is_finite()) {
            return Err(NeuralError::NonFinite("weights"));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.config;
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        for d in [c.vocab, c.hidden, c.layers, c.att_hidden, c.att_window] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NeuralError> {
        let mut r = ByteReader::new(bytes);
        if r.take(4).ok_or(NeuralError::TruncatedFile)? != WEIGHTS_MAGIC {
            return Err(NeuralError::BadMagic);
        }
        let version = r.u16().ok_or(NeuralError::TruncatedFile)?;
        if version != WEIGHTS_VERSION {
            return Err(NeuralError::VersionMismatch(version));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32().ok_or(NeuralError::TruncatedFile)? as usize;
        }
        let [vocab, hidden, layers, att_hidden, att_window] = dims;
        if dims.iter().any(|&d| d == 0 || d > 4096) || layers > 16 || vocab > VOCAB_SIZE {
            return Err(NeuralError::Corrupt(format!("dimensions {dims:?}")));
        }
        let config = NeuralConfig { vocab, hidden, layers, att_hidden, att_window };
        let mut w = Self::zeros(config);
        let mut truncated = false;
        w.for_each_param_mut(|v| match r.u64() {
            Some(bits) => *v = f64::from_bits(bits),
            None => truncated = true,
        });
        if truncated {
            return Err(NeuralError::TruncatedFile);
        }
        if !r.is_empty() {
            return Err(NeuralError::Corrupt("trailing bytes".into()));
        }
        w.validate()?;
        Ok(w)
    }
}

/// Recurrent state: per-layer hidden and cell vectors plus the window of
/// recent top-layer outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnState {
    pub hidden: Vec<Vec<f64>>,
    pub cell: Vec<Vec<f64>>,
    pub history: VecDeque<Vec<f64>>,
    /// Attention-projected history entries aligned with `history`.
    history_keys: VecDeque<Vec<f64>>,
}

impl RnnState {
    pub fn new(config: &NeuralConfig) -> Self {
        Self {
            hidden: vec![vec![0.0; config.hidden]; config.layers],
            cell: vec![vec![0.0; config.hidden]; config.layers],
            history: VecDeque::with_capacity(config.att_window),
            history_keys: VecDeque::with_capacity(config.att_window),
        }
    }

    pub fn top_hidden(&self) -> &[f64] {
        self.hidden.last().expect("at least one layer")
    }

    pub fn top_cell(&self) -> &[f64] {
        self.cell.last().expect("at least one layer")
    }
}

/// First-layer input for `symbol` given the previous attention vector.
pub fn input_vector(weights: &LstmWeights, symbol: MelodyEvent, z_prev: &[f64]) -> Result<Vec<f64>, NeuralError> {
    let h = weights.config.hidden;
    if symbol.index() >= weights.config.vocab {
        return Err(NeuralError::DimensionMismatch(format!("symbol {} outside vocabulary", symbol.symbol())));
    }
    if z_prev.len() != h {
        return Err(NeuralError::DimensionMismatch(format!("attention vector has {} entries", z_prev.len())));
    }
    let mut out = weights.input_bias.clone();
    weights.input_proj.add_column(symbol.index(), &mut out);
    let row_z = |r: usize| &weights.input_proj.row(r)[weights.config.vocab..];
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(row_z(r), z_prev);
    }
    Ok(out)
}

pub fn lstm_step_in_place(
    weights: &LstmWeights,
    input: &[f64],
    state: &mut RnnState,
) -> Result<(), NeuralError> {
    let h = weights.config.hidden;
    if input.len() != h {
        return Err(NeuralError::DimensionMismatch(format!("input has {} entries, expected {h}", input.len())));
    }
    if state.hidden.len() != weights.layers.len() || state.hidden.iter().chain(&state.cell).any(|v| v.len() != h) {
        return Err(NeuralError::DimensionMismatch("state does not match weights".into()));
    }
    let mut x = input.to_vec();
    let mut gi = vec![0.0; h];
    let mut gf = vec![0.0; h];
    let mut gc = vec![0.0; h];
    let mut go = vec![0.0; h];
    for (l, layer) in weights.layers.iter().enumerate() {
        let h_prev = &state.hidden[l];
        gi.copy_from_slice(&layer.b_input);
        gf.copy_from_slice(&layer.b_forget);
        gc.copy_from_slice(&layer.b_cell);
        go.copy_from_slice(&layer.b_output);
        layer.w_input.mul_acc_concat(h_prev, &x, &mut gi);
        layer.w_forget.mul_acc_concat(h_prev, &x, &mut gf);
        layer.w_cell.mul_acc_concat(h_prev, &x, &mut gc);
        layer.w_output.mul_acc_concat(h_prev, &x, &mut go);
        let cell = &mut state.cell[l];
        let hidden = &mut state.hidden[l];
        for k in 0..h {
            let i_t = sigmoid(gi[k]);
            let f_t = sigmoid(gf[k]);
            let o_t = sigmoid(go[k]);
            cell[k] = f_t * cell[k] + i_t * gc[k].tanh();
            hidden[k] = o_t * cell[k].tanh();
        }
        x.copy_from_slice(hidden);
    }
    if !x.iter().chain(state.top_cell()).all(|v| v.is_finite()) {
        return Err(NeuralError::NonFinite("recurrent state"));
    }
    let mut key = weights.att_bias.clone();
    weights.att_hidden_proj.mul_acc(&x, &mut key);
    if state.history.len() == weights.config.att_window {
        state.history.pop_front();
        state.history_keys.pop_front();
    }
    state.history.push_back(x);
    state.history_keys.push_back(key);
    Ok(())
}

/// Runs every layer once and appends the top-layer output to the history.
pub fn lstm_step(weights: &LstmWeights, input: &[f64], state: &RnnState) -> Result<RnnState, NeuralError> {
    let mut next = state.clone();
    lstm_step_in_place(weights, input, &mut next)?;
    Ok(next)
}

/// Attention weights over the history and the mixed vector `z_t`.
pub fn attention_weights(state: &RnnState, weights: &LstmWeights) -> Result<(Vec<f64>, Vec<f64>), NeuralError> {
    if state.history.is_empty() {
        return Err(NeuralError::EmptyHistory);
    }
    let mut cell_term = vec![0.0; weights.config.att_hidden];
    weights.att_cell_proj.mul_acc(state.top_cell(), &mut cell_term);
    let scores: Vec<f64> = state
        .history_keys
        .iter()
        .map(|key| {
            key.iter()
                .zip(&cell_term)
                .zip(&weights.att_score)
                .map(|((k, c), v)| v * (k + c).tanh())
                .sum()
        })
        .collect();
    let alpha = softmax(&scores);
    let mut z = vec![0.0; weights.config.hidden];
    for (a, h) in alpha.iter().zip(&state.history) {
        for (zi, hi) in z.iter_mut().zip(h) {
            *zi += a * hi;
        }
    }
    Ok((alpha, z))
}

pub fn attention_mix(state: &RnnState, weights: &LstmWeights) -> Result<Vec<f64>, NeuralError> {
    attention_weights(state, weights).map(|(_, z)| z)
}

/// Softmax over `L_0 (E x_{t-1} + L_h h_t + L_z z_t)`.
pub fn output_probabilities(
    weights: &LstmWeights,
    hidden: &[f64],
    z: &[f64],
    prev_symbol: Option<MelodyEvent>,
) -> Result<Vec<f64>, NeuralError> {
    let cfg = weights.config;
    if hidden.len() != cfg.hidden || z.len() != cfg.hidden {
        return Err(NeuralError::DimensionMismatch("output inputs do not match hidden size".into()));
    }
    let mut mixed = vec![0.0; cfg.hidden];
    if let Some(p) = prev_symbol {
        if p.index() >= cfg.vocab {
            return Err(NeuralError::DimensionMismatch(format!("symbol {} outside vocabulary", p.symbol())));
        }
        weights.embedding.add_column(p.index(), &mut mixed);
    }
    weights.out_hidden.mul_acc(hidden, &mut mixed);
    weights.out_attention.mul_acc(z, &mut mixed);
    let mut logits = vec![0.0; cfg.vocab];
    weights.out_proj.mul_acc(&mixed, &mut logits);
    let probs = softmax(&logits);
    if !probs.iter().all(|p| p.is_finite()) {
        return Err(NeuralError::NonFinite("output distribution"));
    }
    Ok(probs)
}

/// Integer weights `max(1, round(p · 2^32))`.
pub fn quantize(probs: &[f64]) -> Result<Distribution, NeuralError> {
    if probs.is_empty() || probs.len() > usize::from(u8::MAX) + 1 {
        return Err(NeuralError::DimensionMismatch(format!("{} probabilities", probs.len())));
    }
    if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(NeuralError::Corrupt(format!("probability {bad} outside [0, 1]")));
    }
    // Weights fit in 33 bits, so (descending weight, ascending symbol) packs
    // into a single ascending u64 key.
    const WEIGHT_MASK: u64 = (1 << 33) - 1;
    let mut keys: Vec<u64> = probs
        .iter()
        .enumerate()
        .map(|(s, p)| {
            let w = ((p * QUANTIZATION_SCALE).round() as u64).max(1);
            ((WEIGHT_MASK - w) << 8) | s as u64
        })
        .collect();
    keys.sort_unstable();
    let entries = keys.iter().map(|k| (MelodyEvent((k & 0xff) as u8), WEIGHT_MASK - (k >> 8))).collect();
    Ok(Distribution::from_canonical(entries))
}

pub fn next_distribution(
    weights: &LstmWeights,
    state: &RnnState,
    prev_symbol: Option<MelodyEvent>,
) -> Result<Distribution, NeuralError> {
    let z = attention_mix(state, weights)?;
    quantize(&output_probabilities(weights, state.top_hidden(), &z, prev_symbol)?)
}

/// [`ConditionalModel`] backed by [`LstmWeights`].
#[derive(Clone, Debug)]
pub struct NeuralModel {
    weights: LstmWeights,
    start_notes: Vec<MelodyEvent>,
}

impl NeuralModel {
    pub fn new(weights: LstmWeights) -> Result<Self, NeuralError> {
        weights.validate()?;
        if weights.config.vocab != VOCAB_SIZE {
            return Err(NeuralError::DimensionMismatch(format!(
                "model vocabulary {} differs from melody vocabulary {VOCAB_SIZE}",
                weights.config.vocab
            )));
        }
        // C4 through C5.
        let start_notes = (60..=72).filter_map(MelodyEvent::note_on).collect();
        Ok(Self { weights, start_notes })
    }

    pub fn weights(&self) -> &LstmWeights {
        &self.weights
    }
}

struct NeuralSession<'a> {
    weights: &'a LstmWeights,
    state: RnnState,
    z: Vec<f64>,
    last: Option<MelodyEvent>,
    before_last: Option<MelodyEvent>,
}

impl ModelSession for NeuralSession<'_> {
    fn observe(&mut self, event: MelodyEvent) -> Result<(), ModelError> {
        let input = input_vector(self.weights, event, &self.z)?;
        lstm_step_in_place(self.weights, &input, &mut self.state)?;
        self.z = attention_mix(&self.state, self.weights)?;
        self.before_last = self.last.replace(event);
        Ok(())
    }

    fn distribution(&mut self) -> Result<Distribution, ModelError> {
        if self.last.is_none() {
            return Err(ModelError::EmptyContext);
        }
        let probs = output_probabilities(self.weights, self.state.top_hidden(), &self.z, self.before_last)?;
        Ok(quantize(&probs)?)
    }
}

impl ConditionalModel for NeuralModel {
    fn vocab_size(&self) -> usize {
        self.weights.config.vocab
    }

    fn start_notes(&self) -> &[MelodyEvent] {
        &self.start_notes
    }

    fn session(&self) -> Box<dyn ModelSession + '_> {
        Box::new(NeuralSession {
            weights: &self.weights,
            state: RnnState::new(&self.weights.config),
            z: vec![0.0; self.weights.config.hidden],
            last: None,
            before_last: None,
        })
    }
}
