//! GRU encoder, dense coefficient head and threshold dropout.
//!
//! Each window of the batch tensor runs through a single-layer GRU from a zero
//! hidden state. The final hidden state feeds a one-hidden-layer MLP (ReLU
//! hidden, identity output) that emits `n_states * n_terms` raw coefficients
//! followed by `q` input shifts. Gradients are computed by hand from the
//! recorded activations.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, domain, Result};

/// Shape of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    /// GRU input channels (`n_states + n_inputs`).
    pub channels: usize,
    /// GRU hidden size `V`.
    pub hidden: usize,
    /// Width of the dense head's hidden layer.
    pub dense_hidden: usize,
    /// `n_states * n_terms`.
    pub n_coefficients: usize,
    /// Number of input-shift outputs `q`.
    pub n_shifts: usize,
}

impl NetShape {
    pub const DEFAULT_DENSE_HIDDEN: usize = 32;

    pub fn new(n_states: usize, n_inputs: usize, hidden: usize, term_count: usize, n_shifts: usize) -> Self {
        Self {
            channels: n_states + n_inputs,
            hidden,
            dense_hidden: Self::DEFAULT_DENSE_HIDDEN,
            n_coefficients: n_states * term_count,
            n_shifts,
        }
    }

    pub fn with_dense_hidden(mut self, width: usize) -> Self {
        self.dense_hidden = width;
        self
    }

    pub fn output_width(&self) -> usize {
        self.n_coefficients + self.n_shifts
    }

    fn tensor_lens(&self) -> [usize; 13] {
        let (i, v, h, o) = (self.channels, self.hidden, self.dense_hidden, self.output_width());
        [v * i, v * v, v, v * i, v * v, v, v * i, v * v, v, h * v, h, o * h, o]
    }
}

/// All trainable tensors. Also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct NetWeights {
    pub w_z: Vec<f64>,
    pub u_z: Vec<f64>,
    pub b_z: Vec<f64>,
    pub w_r: Vec<f64>,
    pub u_r: Vec<f64>,
    pub b_r: Vec<f64>,
    pub w_h: Vec<f64>,
    pub u_h: Vec<f64>,
    pub b_h: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl NetWeights {
    pub const NAMES: [&'static str; 13] = [
        "w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h", "w1", "b1", "w2", "b2",
    ];

    pub fn zeros(shape: &NetShape) -> Self {
        let l = shape.tensor_lens();
        Self {
            w_z: vec![0.0; l[0]],
            u_z: vec![0.0; l[1]],
            b_z: vec![0.0; l[2]],
            w_r: vec![0.0; l[3]],
            u_r: vec![0.0; l[4]],
            b_r: vec![0.0; l[5]],
            w_h: vec![0.0; l[6]],
            u_h: vec![0.0; l[7]],
            b_h: vec![0.0; l[8]],
            w1: vec![0.0; l[9]],
            b1: vec![0.0; l[10]],
            w2: vec![0.0; l[11]],
            b2: vec![0.0; l[12]],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 13] {
        [
            &self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_h, &self.u_h, &self.b_h,
            &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 13] {
        [
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_h,
            &mut self.u_h,
            &mut self.b_h,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, flat: usize) -> f64 {
        let mut i = flat;
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("parameter index {flat} out of range");
    }

    pub fn set(&mut self, flat: usize, value: f64) {
        let mut i = flat;
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = value;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index {flat} out of range");
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.iter().copied()).collect()
    }

    /// `self += other`, tensor by tensor in a fixed order.
    pub fn add_assign(&mut self, other: &NetWeights) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for x in t {
                h ^= x.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Trainable network state plus the dropout threshold and its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryNetParams {
    pub shape: NetShape,
    pub weights: NetWeights,
    pub tau: f64,
    pub seed: u64,
}

impl RecoveryNetParams {
    /// Builds parameters from existing weights, validating their shapes.
    pub fn from_weights(shape: NetShape, weights: NetWeights, tau: f64, seed: u64) -> Result<Self> {
        for (len, t) in shape.tensor_lens().iter().zip(weights.tensors()) {
            check_dim("weight tensor", *len, t.len())?;
        }
        Ok(Self {
            shape,
            weights,
            tau,
            seed,
        })
    }

    pub fn n_params(&self) -> usize {
        self.weights.len()
    }
}

/// Seeded initialisation: recurrent and dense weights uniform in
/// `[-1/sqrt(fan), 1/sqrt(fan)]` with `fan = V` for the GRU and first dense
/// layer and `fan = dense_hidden` for the output layer; biases zero.
pub fn init_params(shape: NetShape, tau: f64, seed: u64) -> Result<RecoveryNetParams> {
    if shape.hidden == 0 || shape.dense_hidden == 0 {
        return Err(domain("hidden sizes must be at least 1"));
    }
    if shape.channels == 0 || shape.n_coefficients == 0 {
        return Err(domain("network needs inputs and coefficient outputs"));
    }
    if !(tau >= 0.0) {
        return Err(domain("dropout threshold must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = NetWeights::zeros(&shape);
    let a_gru = 1.0 / libm::sqrt(shape.hidden as f64);
    let a_out = 1.0 / libm::sqrt(shape.dense_hidden as f64);
    {
        let [w_z, u_z, _, w_r, u_r, _, w_h, u_h, _, w1, _, w2, _] = w.tensors_mut();
        for t in [w_z, u_z, w_r, u_r, w_h, u_h, w1] {
            t.iter_mut().for_each(|x| *x = rng.random_range(-a_gru..=a_gru));
        }
        w2.iter_mut().for_each(|x| *x = rng.random_range(-a_out..=a_out));
    }
    Ok(RecoveryNetParams {
        shape,
        weights: w,
        tau,
        seed,
    })
}

/// Batch of windows laid out as `batch x channels x steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTensor {
    batch: usize,
    channels: usize,
    steps: usize,
    data: Vec<f64>,
}

impl BatchTensor {
    pub fn new(batch: usize, channels: usize, steps: usize, data: Vec<f64>) -> Result<Self> {
        if batch == 0 || channels == 0 || steps == 0 {
            return Err(domain("batch tensor dimensions must be positive"));
        }
        check_dim("batch tensor", batch * channels * steps, data.len())?;
        Ok(Self {
            batch,
            channels,
            steps,
            data,
        })
    }

    pub fn zeros(batch: usize, channels: usize, steps: usize) -> Self {
        Self {
            batch,
            channels,
            steps,
            data: vec![0.0; batch * channels * steps],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn get(&self, b: usize, c: usize, t: usize) -> f64 {
        self.data[(b * self.channels + c) * self.steps + t]
    }

    pub fn set(&mut self, b: usize, c: usize, t: usize, value: f64) {
        self.data[(b * self.channels + c) * self.steps + t] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Element `b` as a time-major `steps x channels` sequence.
    pub fn sequence(&self, b: usize) -> Vec<f64> {
        let mut seq = vec![0.0; self.steps * self.channels];
        for t in 0..self.steps {
            for c in 0..self.channels {
                seq[t * self.channels + c] = self.get(b, c, t);
            }
        }
        seq
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// `out += W x` for row-major `W` of shape `out.len() x x.len()`.
#[inline]
fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o += acc;
    }
}

/// `out += W^T y`.
#[inline]
fn matvec_t_acc(w: &[f64], y: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * yr;
        }
    }
}

/// `G += y x^T`.
#[inline]
fn outer_acc(g: &mut [f64], y: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        let row = &mut g[r * cols..(r + 1) * cols];
        for (o, a) in row.iter_mut().zip(x) {
            *o += yr * a;
        }
    }
}

/// Recorded GRU activations for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GruTrace {
    /// Time-major inputs, `steps x channels`.
    inputs: Vec<f64>,
    /// Hidden states `h_0..h_k`, `(steps + 1) x V`.
    hidden: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    candidate: Vec<f64>,
    size: usize,
}

impl GruTrace {
    pub fn final_hidden(&self) -> &[f64] {
        &self.hidden[self.hidden.len() - self.size..]
    }
}

/// Runs the GRU over one time-major sequence from `h_0 = 0`.
pub(crate) fn gru_sequence(params: &RecoveryNetParams, seq: &[f64]) -> GruTrace {
    let i_dim = params.shape.channels;
    let v = params.shape.hidden;
    let steps = seq.len() / i_dim;
    let w = &params.weights;
    let mut hidden = vec![0.0; (steps + 1) * v];
    let mut zs = vec![0.0; steps * v];
    let mut rs = vec![0.0; steps * v];
    let mut cs = vec![0.0; steps * v];
    let mut a = vec![0.0; v];
    let mut rh = vec![0.0; v];
    for t in 0..steps {
        let x = &seq[t * i_dim..(t + 1) * i_dim];
        let (prev_part, next_part) = hidden.split_at_mut((t + 1) * v);
        let h = &prev_part[t * v..];
        let z = &mut zs[t * v..(t + 1) * v];
        a.copy_from_slice(&w.b_z);
        matvec_acc(&w.w_z, x, &mut a);
        matvec_acc(&w.u_z, h, &mut a);
        for (zi, ai) in z.iter_mut().zip(&a) {
            *zi = sigmoid(*ai);
        }
        let r = &mut rs[t * v..(t + 1) * v];
        a.copy_from_slice(&w.b_r);
        matvec_acc(&w.w_r, x, &mut a);
        matvec_acc(&w.u_r, h, &mut a);
        for (ri, ai) in r.iter_mut().zip(&a) {
            *ri = sigmoid(*ai);
        }
        for j in 0..v {
            rh[j] = r[j] * h[j];
        }
        let c = &mut cs[t * v..(t + 1) * v];
        a.copy_from_slice(&w.b_h);
        matvec_acc(&w.w_h, x, &mut a);
        matvec_acc(&w.u_h, &rh, &mut a);
        for (ci, ai) in c.iter_mut().zip(&a) {
            *ci = libm::tanh(*ai);
        }
        let h_next = &mut next_part[..v];
        for j in 0..v {
            h_next[j] = (1.0 - z[j]) * h[j] + z[j] * c[j];
        }
    }
    GruTrace {
        inputs: seq.to_vec(),
        hidden,
        z: zs,
        r: rs,
        candidate: cs,
        size: v,
    }
}

/// Back-propagates `dh_final` through one recorded sequence into `grads`.
pub(crate) fn gru_sequence_backward(
    params: &RecoveryNetParams,
    trace: &GruTrace,
    dh_final: &[f64],
    grads: &mut NetWeights,
) {
    let i_dim = params.shape.channels;
    let v = params.shape.hidden;
    let steps = trace.z.len() / v;
    let w = &params.weights;
    let mut dh = dh_final.to_vec();
    let mut dh_prev = vec![0.0; v];
    let mut da_z = vec![0.0; v];
    let mut da_r = vec![0.0; v];
    let mut da_h = vec![0.0; v];
    let mut d_rh = vec![0.0; v];
    let mut rh = vec![0.0; v];
    for t in (0..steps).rev() {
        let x = &trace.inputs[t * i_dim..(t + 1) * i_dim];
        let h = &trace.hidden[t * v..(t + 1) * v];
        let z = &trace.z[t * v..(t + 1) * v];
        let r = &trace.r[t * v..(t + 1) * v];
        let c = &trace.candidate[t * v..(t + 1) * v];
        for j in 0..v {
            dh_prev[j] = dh[j] * (1.0 - z[j]);
            let dz = dh[j] * (c[j] - h[j]);
            let dc = dh[j] * z[j];
            da_z[j] = dz * z[j] * (1.0 - z[j]);
            da_h[j] = dc * (1.0 - c[j] * c[j]);
            rh[j] = r[j] * h[j];
        }
        // candidate path
        outer_acc(&mut grads.w_h, &da_h, x);
        outer_acc(&mut grads.u_h, &da_h, &rh);
        for (g, d) in grads.b_h.iter_mut().zip(&da_h) {
            *g += d;
        }
        d_rh.iter_mut().for_each(|x| *x = 0.0);
        matvec_t_acc(&w.u_h, &da_h, &mut d_rh);
        for j in 0..v {
            dh_prev[j] += d_rh[j] * r[j];
            let dr = d_rh[j] * h[j];
            da_r[j] = dr * r[j] * (1.0 - r[j]);
        }
        // update gate
        outer_acc(&mut grads.w_z, &da_z, x);
        outer_acc(&mut grads.u_z, &da_z, h);
        for (g, d) in grads.b_z.iter_mut().zip(&da_z) {
            *g += d;
        }
        matvec_t_acc(&w.u_z, &da_z, &mut dh_prev);
        // reset gate
        outer_acc(&mut grads.w_r, &da_r, x);
        outer_acc(&mut grads.u_r, &da_r, h);
        for (g, d) in grads.b_r.iter_mut().zip(&da_r) {
            *g += d;
        }
        matvec_t_acc(&w.u_r, &da_r, &mut dh_prev);
        core::mem::swap(&mut dh, &mut dh_prev);
    }
}

/// Recorded dense-head activations for one hidden vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTrace {
    input: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

pub(crate) fn dense_one(params: &RecoveryNetParams, hidden: &[f64]) -> (Vec<f64>, DenseTrace) {
    let w = &params.weights;
    let mut pre = w.b1.clone();
    matvec_acc(&w.w1, hidden, &mut pre);
    let act: Vec<f64> = pre.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
    let mut out = w.b2.clone();
    matvec_acc(&w.w2, &act, &mut out);
    (
        out,
        DenseTrace {
            input: hidden.to_vec(),
            pre,
            act,
        },
    )
}

/// Returns the gradient with respect to the dense input.
pub(crate) fn dense_one_backward(
    params: &RecoveryNetParams,
    trace: &DenseTrace,
    d_out: &[f64],
    grads: &mut NetWeights,
) -> Vec<f64> {
    let w = &params.weights;
    outer_acc(&mut grads.w2, d_out, &trace.act);
    for (g, d) in grads.b2.iter_mut().zip(d_out) {
        *g += d;
    }
    let mut d_act = vec![0.0; trace.act.len()];
    matvec_t_acc(&w.w2, d_out, &mut d_act);
    for (d, &p) in d_act.iter_mut().zip(&trace.pre) {
        if p <= 0.0 {
            *d = 0.0;
        }
    }
    outer_acc(&mut grads.w1, &d_act, &trace.input);
    for (g, d) in grads.b1.iter_mut().zip(&d_act) {
        *g += d;
    }
    let mut d_in = vec![0.0; trace.input.len()];
    matvec_t_acc(&w.w1, &d_act, &mut d_in);
    d_in
}

/// Activations of a whole batch, needed by [`net_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetTape {
    params_checksum: u64,
    gru: Vec<GruTrace>,
    dense: Vec<DenseTrace>,
}

impl NetTape {
    pub fn batch(&self) -> usize {
        self.gru.len()
    }

    /// Gradients are only valid for the parameters that produced the tape.
    pub fn matches(&self, params: &RecoveryNetParams) -> bool {
        self.params_checksum == params.weights.checksum()
    }
}

/// Final hidden state of every batch element (row-major `batch x V`).
pub fn gru_forward(params: &RecoveryNetParams, batch: &BatchTensor) -> Result<(Vec<f64>, NetTape)> {
    check_dim("batch channels", params.shape.channels, batch.channels())?;
    let v = params.shape.hidden;
    let mut hidden = Vec::with_capacity(batch.batch() * v);
    let mut traces = Vec::with_capacity(batch.batch());
    for b in 0..batch.batch() {
        let trace = gru_sequence(params, &batch.sequence(b));
        hidden.extend_from_slice(&trace.hidden[trace.hidden.len() - v..]);
        traces.push(trace);
    }
    Ok((
        hidden,
        NetTape {
            params_checksum: params.weights.checksum(),
            gru: traces,
            dense: Vec::new(),
        },
    ))
}

/// Raw head outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// Row-major `batch x n_coefficients`.
    pub coefficients: Vec<f64>,
    /// Row-major `batch x q`.
    pub shifts: Vec<f64>,
}

/// Applies the dense head to `hidden` (row-major `batch x V`), extending `tape`.
pub fn dense_forward(params: &RecoveryNetParams, hidden: &[f64], tape: &mut NetTape) -> Result<HeadOutput> {
    let v = params.shape.hidden;
    if !hidden.len().is_multiple_of(v) {
        return Err(domain("hidden matrix is not a whole number of rows"));
    }
    let nc = params.shape.n_coefficients;
    let q = params.shape.n_shifts;
    let batch = hidden.len() / v;
    let mut coefficients = Vec::with_capacity(batch * nc);
    let mut shifts = Vec::with_capacity(batch * q);
    tape.dense.clear();
    for b in 0..batch {
        let (out, trace) = dense_one(params, &hidden[b * v..(b + 1) * v]);
        coefficients.extend_from_slice(&out[..nc]);
        shifts.extend_from_slice(&out[nc..]);
        tape.dense.push(trace);
    }
    Ok(HeadOutput { coefficients, shifts })
}

/// GRU followed by the dense head.
pub fn forward(params: &RecoveryNetParams, batch: &BatchTensor) -> Result<(HeadOutput, NetTape)> {
    let (hidden, mut tape) = gru_forward(params, batch)?;
    let out = dense_forward(params, &hidden, &mut tape)?;
    Ok((out, tape))
}

/// Parameter gradients given upstream gradients on the raw head outputs
/// (`batch x n_coefficients` and `batch x q`). Batch elements are accumulated
/// in index order.
pub fn net_backward(
    params: &RecoveryNetParams,
    tape: &NetTape,
    d_coefficients: &[f64],
    d_shifts: &[f64],
) -> Result<NetWeights> {
    if !tape.matches(params) || tape.dense.len() != tape.gru.len() {
        return Err(crate::Error::TapeMismatch);
    }
    let nc = params.shape.n_coefficients;
    let q = params.shape.n_shifts;
    let batch = tape.batch();
    check_dim("coefficient gradient", batch * nc, d_coefficients.len())?;
    check_dim("shift gradient", batch * q, d_shifts.len())?;
    let mut grads = NetWeights::zeros(&params.shape);
    let mut d_out = vec![0.0; nc + q];
    for b in 0..batch {
        d_out[..nc].copy_from_slice(&d_coefficients[b * nc..(b + 1) * nc]);
        d_out[nc..].copy_from_slice(&d_shifts[b * q..(b + 1) * q]);
        let dh = dense_one_backward(params, &tape.dense[b], &d_out, &mut grads);
        gru_sequence_backward(params, &tape.gru[b], &dh, &mut grads);
    }
    Ok(grads)
}

/// Zeroes entries with `|c| < tau`; survivors pass through unchanged.
pub fn threshold_dropout(raw: &[f64], tau: f64) -> Vec<f64> {
    raw.iter().map(|&c| if c.abs() < tau { 0.0 } else { c }).collect()
}

/// Straight-through gradient on the surviving support.
pub fn threshold_dropout_backward(raw: &[f64], tau: f64, upstream: &[f64]) -> Vec<f64> {
    raw.iter()
        .zip(upstream)
        .map(|(&c, &g)| if c.abs() < tau { 0.0 } else { g })
        .collect()
}

/// Keeps the `p` largest-magnitude entries (lower index wins ties).
pub fn top_p_dropout(raw: &[f64], p: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        raw[b]
            .abs()
            .partial_cmp(&raw[a].abs())
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0; raw.len()];
    for &i in order.iter().take(p) {
        out[i] = raw[i];
    }
    out
}

/// A scalar loss of the network parameters with an analytic gradient.
pub trait Objective {
    fn loss(&self, params: &RecoveryNetParams) -> f64;
    fn loss_and_grad(&self, params: &RecoveryNetParams) -> (f64, NetWeights);
}

/// `0.5 * sum (head_output - target)^2` over a batch; exercises GRU and head.
#[derive(Debug, Clone)]
pub struct OutputProbe {
    pub batch: BatchTensor,
    /// Row-major `batch x output_width`.
    pub target: Vec<f64>,
}

impl Objective for OutputProbe {
    fn loss(&self, params: &RecoveryNetParams) -> f64 {
        let (out, _) = forward(params, &self.batch).expect("probe shapes");
        probe_residuals(params, &out, &self.target)
            .iter()
            .map(|r| 0.5 * r * r)
            .sum()
    }

    fn loss_and_grad(&self, params: &RecoveryNetParams) -> (f64, NetWeights) {
        let (out, tape) = forward(params, &self.batch).expect("probe shapes");
        let res = probe_residuals(params, &out, &self.target);
        let loss = res.iter().map(|r| 0.5 * r * r).sum();
        let (nc, q) = (params.shape.n_coefficients, params.shape.n_shifts);
        let mut dc = Vec::new();
        let mut ds = Vec::new();
        for row in res.chunks(nc + q) {
            dc.extend_from_slice(&row[..nc]);
            ds.extend_from_slice(&row[nc..]);
        }
        let g = net_backward(params, &tape, &dc, &ds).expect("tape from this forward pass");
        (loss, g)
    }
}

fn probe_residuals(params: &RecoveryNetParams, out: &HeadOutput, target: &[f64]) -> Vec<f64> {
    let (nc, q) = (params.shape.n_coefficients, params.shape.n_shifts);
    let batch = out.coefficients.len() / nc;
    let mut res = Vec::with_capacity(batch * (nc + q));
    for b in 0..batch {
        res.extend_from_slice(&out.coefficients[b * nc..(b + 1) * nc]);
        res.extend_from_slice(&out.shifts[b * q..(b + 1) * q]);
    }
    for (r, t) in res.iter_mut().zip(target) {
        *r -= t;
    }
    res
}

/// Linear functional of the head output for fixed hidden vectors; only the
/// dense parameters receive gradient.
#[derive(Debug, Clone)]
pub struct DenseProbe {
    /// Row-major `batch x V`.
    pub hidden: Vec<f64>,
    /// Row-major `batch x output_width`.
    pub weights: Vec<f64>,
}

impl DenseProbe {
    fn outputs(&self, params: &RecoveryNetParams) -> (Vec<f64>, NetTape) {
        let mut tape = NetTape {
            params_checksum: params.weights.checksum(),
            gru: Vec::new(),
            dense: Vec::new(),
        };
        let out = dense_forward(params, &self.hidden, &mut tape).expect("probe shapes");
        let (nc, q) = (params.shape.n_coefficients, params.shape.n_shifts);
        let batch = out.coefficients.len() / nc;
        let mut flat = Vec::new();
        for b in 0..batch {
            flat.extend_from_slice(&out.coefficients[b * nc..(b + 1) * nc]);
            flat.extend_from_slice(&out.shifts[b * q..(b + 1) * q]);
        }
        (flat, tape)
    }
}

impl Objective for DenseProbe {
    fn loss(&self, params: &RecoveryNetParams) -> f64 {
        let (flat, _) = self.outputs(params);
        flat.iter().zip(&self.weights).map(|(a, b)| a * b).sum()
    }

    fn loss_and_grad(&self, params: &RecoveryNetParams) -> (f64, NetWeights) {
        let (flat, tape) = self.outputs(params);
        let loss = flat.iter().zip(&self.weights).map(|(a, b)| a * b).sum();
        let width = params.shape.output_width();
        let mut grads = NetWeights::zeros(&params.shape);
        for (b, trace) in tape.dense.iter().enumerate() {
            dense_one_backward(params, trace, &self.weights[b * width..(b + 1) * width], &mut grads);
        }
        (loss, grads)
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|numeric|, 1e-8)` over parameters.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub n_params: usize,
}

/// Compares the analytic gradient with central differences of step `delta`.
pub fn grad_check(params: &RecoveryNetParams, objective: &dyn Objective, delta: f64) -> GradCheckReport {
    let (_, analytic) = objective.loss_and_grad(params);
    let n = params.n_params();
    let mut probe = params.clone();
    let mut worst = 0.0;
    let mut worst_index = None;
    for i in 0..n {
        let orig = params.weights.get(i);
        probe.weights.set(i, orig + delta);
        let lp = objective.loss(&probe);
        probe.weights.set(i, orig - delta);
        let lm = objective.loss(&probe);
        probe.weights.set(i, orig);
        let numeric = (lp - lm) / (2.0 * delta);
        let a = analytic.get(i);
        let denom = if numeric.abs() > 1e-8 { numeric.abs() } else { 1e-8 };
        let rel = (a - numeric).abs() / denom;
        if rel > worst || (rel.is_nan() && worst_index.is_none()) {
            worst = rel;
            worst_index = Some(i);
        }
    }
    GradCheckReport {
        max_rel_error: worst,
        worst_index,
        n_params: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv_shape() -> NetShape {
        NetShape::new(2, 1, 16, 6, 1)
    }

    #[test]
    fn head_width_for_predator_prey() {
        assert_eq!(lv_shape().output_width(), 13);
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(lv_shape(), 0.001, 7).unwrap();
        let b = init_params(lv_shape(), 0.001, 7).unwrap();
        let c = init_params(lv_shape(), 0.001, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights, c.weights);
        let bound = 1.0 / 4.0;
        assert!(a.weights.w_z.iter().all(|x| x.abs() <= bound));
        assert!(a.weights.b_z.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_weights_give_zero_hidden() {
        let shape = NetShape::new(2, 1, 4, 6, 1);
        let params = RecoveryNetParams::from_weights(shape, NetWeights::zeros(&shape), 0.0, 0).unwrap();
        let mut batch = BatchTensor::zeros(2, 3, 5);
        for t in 0..5 {
            batch.set(0, 0, t, 3.0 + t as f64);
            batch.set(1, 2, t, -1.0);
        }
        let (h, _) = gru_forward(&params, &batch).unwrap();
        assert!(h.iter().all(|&x| x == 0.0));
        let trace = gru_sequence(&params, &batch.sequence(0));
        assert!(trace.z.iter().all(|&z| z == 0.5));
    }

    #[test]
    fn single_step_window_is_bounded() {
        let params = init_params(lv_shape(), 0.0, 3).unwrap();
        let (h, _) = gru_forward(&params, &BatchTensor::zeros(1, 3, 1)).unwrap();
        assert!(h.iter().all(|x| x.is_finite() && x.abs() < 1.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let params = init_params(lv_shape(), 0.0, 11).unwrap();
        let data: Vec<f64> = (0..2 * 3 * 6).map(|i| libm::sin(i as f64)).collect();
        let batch = BatchTensor::new(2, 3, 6, data).unwrap();
        let a = forward(&params, &batch).unwrap().0;
        let b = forward(&params, &batch).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn zero_dense_weights_give_zero_output() {
        let shape = lv_shape();
        let mut params = init_params(shape, 0.0, 1).unwrap();
        for t in &mut params.weights.tensors_mut()[9..] {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        let (out, _) = forward(&params, &BatchTensor::zeros(1, 3, 4)).unwrap();
        assert!(out.coefficients.iter().chain(&out.shifts).all(|&x| x == 0.0));
    }

    #[test]
    fn hand_set_head_reproduces_target() {
        // hidden -> relu(identity) -> identity with bias picks out a target.
        let shape = NetShape::new(1, 0, 2, 2, 0).with_dense_hidden(2);
        let mut w = NetWeights::zeros(&shape);
        w.w1 = vec![1.0, 0.0, 0.0, 1.0];
        w.w2 = vec![2.0, 0.0, 0.0, -3.0];
        w.b2 = vec![0.5, 0.25];
        let params = RecoveryNetParams::from_weights(shape, w, 0.0, 0).unwrap();
        let mut tape = NetTape {
            params_checksum: params.weights.checksum(),
            gru: Vec::new(),
            dense: Vec::new(),
        };
        let out = dense_forward(&params, &[0.5, 0.25], &mut tape).unwrap();
        assert_eq!(out.coefficients, vec![1.5, -0.5]);
    }

    #[test]
    fn dropout_worked_example() {
        let raw = [
            0.0006, 0.55, 0.06, 0.0003, 0.005, -0.09, 0.8, 0.003, -0.7, 0.04, 0.06, 0.00005, 0.008,
        ];
        let expected = [
            0.0, 0.55, 0.06, 0.0, 0.005, -0.09, 0.8, 0.003, -0.7, 0.04, 0.06, 0.0, 0.008,
        ];
        assert_eq!(threshold_dropout(&raw, 0.001), expected);
        assert_eq!(threshold_dropout(&raw, 0.0), raw);
        assert_eq!(threshold_dropout(&[0.0; 4], 0.001), [0.0; 4]);
    }

    #[test]
    fn dropout_gradient_is_masked_identity() {
        let g = threshold_dropout_backward(&[0.0005, -0.2, 0.001], 0.001, &[1.0, 2.0, 3.0]);
        assert_eq!(g, vec![0.0, 2.0, 3.0]);
    }

    #[test]
    fn top_p_keeps_largest() {
        assert_eq!(top_p_dropout(&[0.1, -0.5, 0.3, 0.5], 2), vec![0.0, -0.5, 0.0, 0.5]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let params = init_params(lv_shape(), 0.0, 5).unwrap();
        let batch = BatchTensor::new(1, 3, 3, (0..9).map(|i| i as f64 * 0.1).collect()).unwrap();
        let (_, tape) = forward(&params, &batch).unwrap();
        let g = net_backward(&params, &tape, &[0.0; 12], &[0.0]).unwrap();
        assert!(g.flatten().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_rejects_foreign_tape() {
        let params = init_params(lv_shape(), 0.0, 5).unwrap();
        let other = init_params(lv_shape(), 0.0, 6).unwrap();
        let (_, tape) = forward(&params, &BatchTensor::zeros(1, 3, 2)).unwrap();
        assert!(net_backward(&other, &tape, &[0.0; 12], &[0.0]).is_err());
    }

    #[test]
    fn single_cell_gru_gradient() {
        let shape = NetShape::new(1, 1, 2, 2, 1).with_dense_hidden(3);
        let params = init_params(shape, 0.0, 21).unwrap();
        let batch = BatchTensor::new(1, 2, 1, vec![0.7, -0.4]).unwrap();
        let probe = OutputProbe {
            batch,
            target: vec![0.3, -0.2, 0.9],
        };
        let report = grad_check(&params, &probe, 1e-6);
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn dense_only_gradient() {
        let shape = NetShape::new(1, 1, 4, 2, 1).with_dense_hidden(4);
        let params = init_params(shape, 0.0, 4).unwrap();
        let probe = DenseProbe {
            hidden: vec![0.3, -0.8, 0.5, 0.1],
            weights: vec![1.0, -2.0, 0.5],
        };
        let report = grad_check(&params, &probe, 1e-6);
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn multistep_gru_gradient() {
        let shape = NetShape::new(2, 1, 5, 6, 1).with_dense_hidden(6);
        let params = init_params(shape, 0.0, 9).unwrap();
        let data: Vec<f64> = (0..2 * 3 * 7).map(|i| libm::cos(0.7 * i as f64)).collect();
        let batch = BatchTensor::new(2, 3, 7, data).unwrap();
        let target: Vec<f64> = (0..26).map(|i| 0.1 * i as f64 - 1.0).collect();
        let report = grad_check(&params, &OutputProbe { batch, target }, 1e-5);
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn zero_loss_probe_has_zero_error() {
        let shape = NetShape::new(1, 0, 2, 1, 0).with_dense_hidden(2);
        let params = init_params(shape, 0.0, 1).unwrap();
        let probe = DenseProbe {
            hidden: vec![0.5, 0.5],
            weights: vec![0.0],
        };
        assert_eq!(grad_check(&params, &probe, 1e-6).max_rel_error, 0.0);
    }
}
