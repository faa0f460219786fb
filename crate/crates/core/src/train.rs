//! Windowed batching, the ODE loss, the training loop and evaluation.
//!
//! One optimiser step runs GRU and dense head over every window of a batch,
//! averages the head outputs into a coefficient matrix, applies threshold
//! dropout, solves each window with RK4 from its measured start state and
//! back-propagates the mean-squared error through the solver and the network.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, domain, Error, Result};
use crate::library::{SparseOdeModel, TermLibrary};
use crate::net::{
    dense_one, dense_one_backward, gru_sequence, gru_sequence_backward, init_params, threshold_dropout,
    threshold_dropout_backward, BatchTensor, NetShape, NetWeights, Objective, RecoveryNetParams,
};
use crate::ode::{adjoint_grad, solve, SolveOptions, Trajectory};

/// Runs independent jobs and returns their results in index order.
pub trait Executor: Sync {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Serial;

impl Executor for Serial {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

/// Per-epoch progress.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub support_size: usize,
    pub segment: usize,
    pub tau: f64,
}

/// Receives training progress; also supplies the clock in hosted builds.
pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord) {}

    fn seconds(&self) -> Option<f64> {
        None
    }
}

/// Observer that ignores everything.
#[derive(Debug, Clone, Copy, Default)]
pub struct Quiet;

impl TrainObserver for Quiet {}

/// Windows whose head outputs are averaged into the coefficient matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaSource {
    /// The windows of the current mini-batch.
    Batch,
    /// A fixed set of encoder windows spanning the dataset.
    Dataset,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Window length `k` in samples.
    pub window: usize,
    /// Offset between consecutive window starts.
    pub stride: usize,
    /// GRU hidden size `V`.
    pub hidden: usize,
    pub dense_hidden: usize,
    /// Polynomial order `M`.
    pub order: u32,
    pub include_constant: bool,
    /// Dropout threshold applied from `tau_start` onwards and to the final model.
    pub tau: f64,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of the initial one (cosine decay).
    pub lr_floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// RK4 steps per sample interval.
    pub substeps: usize,
    /// Per-window loss cap; capped windows contribute no gradient.
    pub divergence_cap: f64,
    /// States beyond this magnitude count as divergence.
    pub state_bound: f64,
    /// Fraction of epochs trained on one-sample segments.
    pub segment_start: f64,
    /// Fraction of epochs after which segments span the whole window.
    pub segment_full: f64,
    /// Fraction of epochs before dropout is switched on.
    pub tau_start: f64,
    /// Apply the head's input shifts as additive offsets to the inputs.
    pub input_shifts: bool,
    /// Standardise GRU input channels by dataset mean and deviation.
    pub standardize: bool,
    /// Whiten the coefficient head against the feature Gram matrix.
    pub precondition: bool,
    /// Multiplier on the initial output-layer weights.
    pub output_init_scale: f64,
    /// Which windows the coefficient estimate is averaged over.
    pub theta_source: ThetaSource,
    /// Stride between encoder windows for [`ThetaSource::Dataset`]; 0 means the window length.
    pub encoder_stride: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            window: 50,
            stride: 1,
            hidden: 16,
            dense_hidden: NetShape::DEFAULT_DENSE_HIDDEN,
            order: 2,
            include_constant: false,
            tau: 0.001,
            learning_rate: 1e-2,
            lr_floor: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            substeps: 4,
            divergence_cap: 1e6,
            state_bound: 1e4,
            segment_start: 0.4,
            segment_full: 0.7,
            tau_start: 0.5,
            input_shifts: false,
            standardize: true,
            precondition: true,
            output_init_scale: 1.0,
            theta_source: ThetaSource::Dataset,
            encoder_stride: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.batch_size == 0 || self.hidden == 0 || self.dense_hidden == 0 || self.order == 0 {
            return Err(domain("batch size, hidden sizes and order must be positive"));
        }
        if self.window < 2 {
            return Err(domain("window length must be at least 2"));
        }
        if self.window > dataset_len {
            return Err(domain("window longer than the dataset"));
        }
        if self.stride == 0 || self.substeps == 0 {
            return Err(domain("stride and substeps must be positive"));
        }
        if !(self.tau >= 0.0) || !(self.learning_rate > 0.0) || !(self.divergence_cap > 0.0) {
            return Err(domain("tau must be non-negative; learning rate and cap positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(domain("learning-rate floor must lie in [0, 1]"));
        }
        let fracs = [self.segment_start, self.segment_full, self.tau_start];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || self.segment_full < self.segment_start {
            return Err(domain(
                "curriculum fractions must lie in [0, 1] with segment_start <= segment_full",
            ));
        }
        Ok(())
    }

    /// Segment length (samples between restarts from measured states) at `epoch`.
    pub fn segment_at(&self, epoch: usize) -> usize {
        let e = self.epochs as f64;
        let ep = epoch as f64;
        let k = self.window - 1;
        if ep < self.segment_start * e {
            return 1;
        }
        let span = e * (self.segment_full - self.segment_start);
        if span <= 0.0 {
            return k;
        }
        let s = libm::round(k as f64 * (ep - self.segment_start * e + 1.0) / span);
        (s.max(1.0) as usize).min(k)
    }

    /// Dropout threshold in effect at `epoch`.
    pub fn tau_at(&self, epoch: usize) -> f64 {
        if (epoch as f64) < self.tau_start * self.epochs as f64 {
            0.0
        } else {
            self.tau
        }
    }

    fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        let frac = if total == 0 {
            1.0
        } else {
            (step.min(total) as f64) / total as f64
        };
        let decay = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac));
        self.learning_rate * ((1.0 - self.lr_floor) * decay + self.lr_floor)
    }
}

/// Window start indices and their batch grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// First sample of each window in the source dataset.
    pub starts: Vec<usize>,
    /// Raw windows, `batch x (n + m) x k`.
    pub tensor: BatchTensor,
}

fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    (0..=len - window).step_by(stride).collect()
}

fn shuffled_batches(starts: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = starts.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn window_tensor(dataset: &Trajectory, starts: &[usize], window: usize) -> BatchTensor {
    let n = dataset.n_states();
    let m = dataset.n_inputs();
    let mut t = BatchTensor::zeros(starts.len(), n + m, window);
    for (b, &s) in starts.iter().enumerate() {
        for j in 0..window {
            let x = dataset.state(s + j);
            let u = dataset.input(s + j);
            for (c, v) in x.iter().chain(u).enumerate() {
                t.set(b, c, j, *v);
            }
        }
    }
    t
}

/// Non-overlapping windows of length `window`, shuffled by `seed`, grouped
/// into batches of `batch_size` (the last batch may be smaller).
pub fn make_batches(dataset: &Trajectory, batch_size: usize, window: usize, seed: u64) -> Result<Vec<Batch>> {
    make_batches_strided(dataset, batch_size, window, window, seed)
}

/// As [`make_batches`] with an explicit stride between window starts.
pub fn make_batches_strided(
    dataset: &Trajectory,
    batch_size: usize,
    window: usize,
    stride: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if window == 0 || batch_size == 0 || stride == 0 {
        return Err(domain("window, batch size and stride must be positive"));
    }
    if dataset.len() < window {
        return Err(domain("dataset shorter than the window length"));
    }
    let starts = window_starts(dataset.len(), window, stride);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(shuffled_batches(&starts, batch_size, &mut rng)
        .into_iter()
        .map(|starts| Batch {
            tensor: window_tensor(dataset, &starts, window),
            starts,
        })
        .collect())
}

/// Mean over samples and states of the squared difference. Non-finite
/// estimates, and losses above `cap`, score `cap`.
pub fn ode_loss(reference: &Trajectory, estimate: &Trajectory, cap: f64) -> Result<f64> {
    check_dim("trajectory states", reference.n_states(), estimate.n_states())?;
    check_dim("trajectory length", reference.len(), estimate.len())?;
    let count = reference.states().len();
    if count == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (a, b) in reference.states().iter().zip(estimate.states()) {
        let d = b - a;
        acc += d * d;
    }
    let loss = acc / count as f64;
    Ok(if loss.is_finite() { loss.min(cap) } else { cap })
}

/// Dataset-derived transforms applied around the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessing {
    /// Per GRU channel.
    pub channel_mean: Vec<f64>,
    pub channel_scale: Vec<f64>,
    /// `n_terms x n_terms`, row-major; maps head outputs to coefficients.
    pub precond: Vec<f64>,
    /// Per state equation.
    pub state_scale: Vec<f64>,
}

impl Preprocessing {
    pub fn identity(n_states: usize, n_inputs: usize, n_terms: usize) -> Self {
        let mut precond = vec![0.0; n_terms * n_terms];
        for i in 0..n_terms {
            precond[i * n_terms + i] = 1.0;
        }
        Self {
            channel_mean: vec![0.0; n_states + n_inputs],
            channel_scale: vec![1.0; n_states + n_inputs],
            precond,
            state_scale: vec![1.0; n_states],
        }
    }

    pub fn from_dataset(dataset: &Trajectory, library: &TermLibrary, config: &TrainConfig) -> Self {
        let n = dataset.n_states();
        let m = dataset.n_inputs();
        let t = library.len();
        let mut pre = Self::identity(n, m, t);
        let rows = dataset.len();
        if config.standardize {
            for c in 0..n + m {
                let value = |i: usize| {
                    if c < n {
                        dataset.state(i)[c]
                    } else {
                        dataset.input(i)[c - n]
                    }
                };
                let mean = (0..rows).map(value).sum::<f64>() / rows as f64;
                let var = (0..rows).map(|i| (value(i) - mean) * (value(i) - mean)).sum::<f64>() / rows as f64;
                let sd = libm::sqrt(var);
                pre.channel_mean[c] = mean;
                pre.channel_scale[c] = if sd > 1e-8 * mean.abs().max(1.0) { sd } else { 1.0 };
            }
        }
        if config.precondition {
            for (i, s) in pre.state_scale.iter_mut().enumerate() {
                let ms = (1..rows)
                    .map(|r| {
                        let d = dataset.state(r)[i] - dataset.state(r - 1)[i];
                        d * d
                    })
                    .sum::<f64>()
                    / (rows - 1).max(1) as f64;
                let rms = libm::sqrt(ms) / dataset.dt();
                *s = if rms > 0.0 && rms.is_finite() { rms } else { 1.0 };
            }
            let mut gram = DMatrix::<f64>::zeros(t, t);
            let mut phi = vec![0.0; t];
            for r in 0..rows {
                library.features_into(dataset.state(r), dataset.input(r), &mut phi);
                for a in 0..t {
                    for b in 0..t {
                        gram[(a, b)] += phi[a] * phi[b];
                    }
                }
            }
            gram /= rows as f64;
            if let Some(p) = whitening(&gram) {
                pre.precond = p;
            }
        }
        pre
    }

    /// Coefficients (before dropout) from averaged head outputs.
    pub fn coefficients(&self, raw: &[f64]) -> Vec<f64> {
        let n = self.state_scale.len();
        let t = raw.len() / n;
        let mut out = vec![0.0; n * t];
        for i in 0..n {
            for a in 0..t {
                let mut acc = 0.0;
                for b in 0..t {
                    acc += self.precond[a * t + b] * raw[i * t + b];
                }
                out[i * t + a] = self.state_scale[i] * acc;
            }
        }
        out
    }

    /// Transpose of [`Preprocessing::coefficients`].
    pub fn coefficients_vjp(&self, d_coeff: &[f64]) -> Vec<f64> {
        let n = self.state_scale.len();
        let t = d_coeff.len() / n;
        let mut out = vec![0.0; n * t];
        for i in 0..n {
            for a in 0..t {
                let g = self.state_scale[i] * d_coeff[i * t + a];
                if g == 0.0 {
                    continue;
                }
                for b in 0..t {
                    out[i * t + b] += self.precond[a * t + b] * g;
                }
            }
        }
        out
    }

    /// Time-major standardised GRU input for the window starting at `start`.
    pub fn sequence(&self, dataset: &Trajectory, start: usize, window: usize) -> Vec<f64> {
        let n = dataset.n_states();
        let m = dataset.n_inputs();
        let c = n + m;
        let mut seq = vec![0.0; window * c];
        for j in 0..window {
            let x = dataset.state(start + j);
            let u = dataset.input(start + j);
            for ch in 0..c {
                let v = if ch < n { x[ch] } else { u[ch - n] };
                seq[j * c + ch] = (v - self.channel_mean[ch]) / self.channel_scale[ch];
            }
        }
        seq
    }
}

/// `L^{-T}` for the Cholesky factor of `gram`, with growing diagonal jitter
/// when the matrix is singular.
fn whitening(gram: &DMatrix<f64>) -> Option<Vec<f64>> {
    let t = gram.nrows();
    let scale = (0..t).map(|i| gram[(i, i)]).sum::<f64>() / t as f64;
    let mut jitter = 0.0;
    for _ in 0..8 {
        let mut g = gram.clone();
        for i in 0..t {
            g[(i, i)] += jitter;
        }
        if let Some(ch) = g.cholesky() {
            let l = ch.l();
            if let Some(inv) = l.try_inverse() {
                let p = inv.transpose();
                if p.iter().all(|v| v.is_finite()) {
                    let mut out = vec![0.0; t * t];
                    for a in 0..t {
                        for b in 0..t {
                            out[a * t + b] = p[(a, b)];
                        }
                    }
                    return Some(out);
                }
            }
        }
        jitter = if jitter == 0.0 {
            1e-10 * scale.max(1e-300)
        } else {
            jitter * 100.0
        };
    }
    None
}

/// Term-support comparison against a reference model, by term name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportReport {
    /// Per equation.
    pub true_positives: Vec<Vec<String>>,
    pub false_positives: Vec<Vec<String>>,
    pub false_negatives: Vec<Vec<String>>,
}

impl SupportReport {
    pub fn compare(recovered: &SparseOdeModel, truth: &SparseOdeModel) -> Self {
        let rec = recovered.support_names();
        let tru = truth.support_names();
        let n = rec.len().max(tru.len());
        let empty = Vec::new();
        let mut tp = Vec::with_capacity(n);
        let mut fp = Vec::with_capacity(n);
        let mut fnn = Vec::with_capacity(n);
        for eq in 0..n {
            let r = rec.get(eq).unwrap_or(&empty);
            let t = tru.get(eq).unwrap_or(&empty);
            tp.push(r.iter().filter(|x| t.contains(x)).cloned().collect());
            fp.push(r.iter().filter(|x| !t.contains(x)).cloned().collect());
            fnn.push(t.iter().filter(|x| !r.contains(x)).cloned().collect());
        }
        Self {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fnn,
        }
    }

    pub fn n_false_positives(&self) -> usize {
        self.false_positives.iter().map(Vec::len).sum()
    }

    pub fn n_false_negatives(&self) -> usize {
        self.false_negatives.iter().map(Vec::len).sum()
    }

    pub fn exact(&self) -> bool {
        self.n_false_positives() == 0 && self.n_false_negatives() == 0
    }
}

/// Outcome of [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Infinite when the re-solve diverged.
    pub mse: f64,
    /// Sample index at which the re-solve diverged.
    pub diverged_at: Option<usize>,
    pub support: Vec<Vec<String>>,
}

/// RK4 steps per sample interval used by [`evaluate`] and data generation.
pub const FINE_SUBSTEPS: usize = 100;

/// Solves `model` from `x0` over `samples - 1` intervals of `dt`, holding
/// `inputs` row `j` over interval `j`, with `substeps` RK4 steps per interval.
pub fn simulate(
    model: &SparseOdeModel,
    x0: &[f64],
    inputs: &[f64],
    t0: f64,
    dt: f64,
    samples: usize,
    substeps: usize,
) -> Result<(Trajectory, Option<usize>)> {
    let m = model.n_inputs();
    check_dim("input rows", samples * m, inputs.len())?;
    if samples == 0 || substeps == 0 {
        return Err(domain("need at least one sample and one substep"));
    }
    let steps = (samples - 1) * substeps;
    let fine = expand_inputs(inputs, m, samples - 1, substeps);
    let out = solve(
        model,
        x0,
        &fine,
        t0,
        dt / substeps as f64,
        steps,
        SolveOptions::default(),
    )?;
    let n = model.n_states();
    let rows = out.trajectory.len();
    let kept = (rows - 1) / substeps + 1;
    let mut states = Vec::with_capacity(kept * n);
    for j in 0..kept {
        states.extend_from_slice(out.trajectory.state(j * substeps));
    }
    let traj = Trajectory::new(t0, dt, n, m, states, inputs[..kept * m].to_vec())?;
    Ok((traj, out.divergence.map(|d| d.step / substeps + 1)))
}

/// Repeats each of `intervals` input rows `substeps` times and appends the
/// last row once more (the solver wants one row per step plus one).
fn expand_inputs(inputs: &[f64], m: usize, intervals: usize, substeps: usize) -> Vec<f64> {
    let mut fine = Vec::with_capacity((intervals * substeps + 1) * m);
    for j in 0..intervals {
        for _ in 0..substeps {
            fine.extend_from_slice(&inputs[j * m..(j + 1) * m]);
        }
    }
    fine.extend_from_slice(&inputs[intervals * m..(intervals + 1) * m]);
    fine
}

/// Re-solves `model` from the dataset's first sample over its full span and
/// reports the mean-squared reconstruction error.
pub fn evaluate(model: &SparseOdeModel, dataset: &Trajectory) -> Result<Evaluation> {
    evaluate_with(model, dataset, FINE_SUBSTEPS)
}

pub fn evaluate_with(model: &SparseOdeModel, dataset: &Trajectory, substeps: usize) -> Result<Evaluation> {
    check_dim("model states", dataset.n_states(), model.n_states())?;
    check_dim("model inputs", dataset.n_inputs(), model.n_inputs())?;
    let (traj, diverged_at) = simulate(
        model,
        dataset.state(0),
        dataset.inputs(),
        dataset.t0(),
        dataset.dt(),
        dataset.len(),
        substeps,
    )?;
    let mse = if diverged_at.is_some() {
        f64::INFINITY
    } else {
        ode_loss(dataset, &traj, f64::INFINITY)?
    };
    Ok(Evaluation {
        mse,
        diverged_at,
        support: model.support_names(),
    })
}

/// Everything [`train`] produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryResult {
    pub model: SparseOdeModel,
    /// Equals `evaluate(&model, dataset).mse`.
    pub mse: f64,
    pub diverged_at: Option<usize>,
    /// Mean batch loss per epoch.
    pub loss_history: Vec<f64>,
    pub support: Option<SupportReport>,
    pub wall_seconds: Option<f64>,
    pub params: RecoveryNetParams,
    /// Averaged input shifts (zero unless shifts are enabled).
    pub shifts: Vec<f64>,
    pub preprocessing: Preprocessing,
}

/// The differentiable map from network parameters to the batch loss.
#[derive(Debug, Clone)]
pub struct Pipeline<'a> {
    dataset: &'a Trajectory,
    library: TermLibrary,
    config: TrainConfig,
    pre: Preprocessing,
}

/// Loss and gradients of one batch.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub loss: f64,
    pub grads: NetWeights,
    /// Coefficients used by the solves (after dropout).
    pub theta: Vec<f64>,
}

struct WindowEval {
    loss: f64,
    d_theta: Vec<f64>,
    d_shift: Vec<f64>,
}

impl<'a> Pipeline<'a> {
    pub fn new(dataset: &'a Trajectory, config: &TrainConfig) -> Result<Self> {
        config.validate(dataset.len())?;
        let library = TermLibrary::new(
            dataset.n_states(),
            dataset.n_inputs(),
            config.order,
            config.include_constant,
        )?;
        let pre = Preprocessing::from_dataset(dataset, &library, config);
        Ok(Self {
            dataset,
            library,
            config: config.clone(),
            pre,
        })
    }

    pub fn library(&self) -> &TermLibrary {
        &self.library
    }

    pub fn preprocessing(&self) -> &Preprocessing {
        &self.pre
    }

    pub fn shape(&self) -> NetShape {
        NetShape::new(
            self.dataset.n_states(),
            self.dataset.n_inputs(),
            self.config.hidden,
            self.library.len(),
            self.dataset.n_inputs(),
        )
        .with_dense_hidden(self.config.dense_hidden)
    }

    pub fn window_starts(&self) -> Vec<usize> {
        window_starts(self.dataset.len(), self.config.window, self.config.stride)
    }

    /// Windows averaged into the coefficient estimate for a given loss batch.
    pub fn encoder_starts(&self, batch: &[usize]) -> Vec<usize> {
        match self.config.theta_source {
            ThetaSource::Batch => batch.to_vec(),
            ThetaSource::Dataset => {
                let stride = match self.config.encoder_stride {
                    0 => self.config.window,
                    s => s,
                };
                window_starts(self.dataset.len(), self.config.window, stride)
            }
        }
    }

    /// Averaged head outputs over the given windows: coefficients then shifts.
    fn mean_outputs<E: Executor>(&self, params: &RecoveryNetParams, starts: &[usize], exec: &E) -> Vec<f64> {
        let outs = exec.map(starts.len(), |i| {
            let trace = gru_sequence(params, &self.pre.sequence(self.dataset, starts[i], self.config.window));
            dense_one(params, trace.final_hidden()).0
        });
        let mut mean = vec![0.0; params.shape.output_width()];
        for o in &outs {
            for (a, b) in mean.iter_mut().zip(o) {
                *a += b;
            }
        }
        mean.iter_mut().for_each(|v| *v /= starts.len() as f64);
        mean
    }

    fn model_from_mean(&self, mean: &[f64], tau: f64) -> Result<(SparseOdeModel, Vec<f64>, Vec<f64>)> {
        let nc = self.dataset.n_states() * self.library.len();
        let pre_theta = self.pre.coefficients(&mean[..nc]);
        let theta = threshold_dropout(&pre_theta, tau);
        let model = SparseOdeModel::new(self.library.clone(), theta, tau)?;
        Ok((model, pre_theta, mean[nc..].to_vec()))
    }

    /// Coefficient model from the head averaged over every window.
    pub fn aggregate_model(&self, params: &RecoveryNetParams, tau: f64) -> Result<(SparseOdeModel, Vec<f64>)> {
        self.aggregate_model_with(params, tau, &Serial)
    }

    pub fn aggregate_model_with<E: Executor>(
        &self,
        params: &RecoveryNetParams,
        tau: f64,
        exec: &E,
    ) -> Result<(SparseOdeModel, Vec<f64>)> {
        let all = self.window_starts();
        let mean = self.mean_outputs(params, &self.encoder_starts(&all), exec);
        let (model, _, shifts) = self.model_from_mean(&mean, tau)?;
        Ok((model, shifts))
    }

    fn window_eval(
        &self,
        model: &SparseOdeModel,
        shift: &[f64],
        start: usize,
        segment: usize,
        with_grad: bool,
    ) -> Result<WindowEval> {
        let ds = self.dataset;
        let n = ds.n_states();
        let m = ds.n_inputs();
        let k = self.config.window;
        let sub = self.config.substeps;
        let h = ds.dt() / sub as f64;
        let cap = self.config.divergence_cap;
        let norm = ((k - 1) * n) as f64;
        let apply_shift = self.config.input_shifts && m > 0;
        let mut loss = 0.0;
        let mut d_theta = vec![0.0; model.coefficients().len()];
        let mut d_shift = vec![0.0; m];
        let capped = |d_theta: Vec<f64>, d_shift: Vec<f64>| WindowEval {
            loss: cap,
            d_theta: d_theta.iter().map(|_| 0.0).collect(),
            d_shift: d_shift.iter().map(|_| 0.0).collect(),
        };
        let options = SolveOptions {
            record: with_grad,
            state_bound: self.config.state_bound,
        };
        let mut seg_start = 0;
        while seg_start < k - 1 {
            let len = segment.min(k - 1 - seg_start);
            let s0 = start + seg_start;
            let mut coarse = Vec::with_capacity((len + 1) * m);
            for j in 0..=len {
                let u = ds.input(s0 + j);
                for c in 0..m {
                    coarse.push(if apply_shift { u[c] + shift[c] } else { u[c] });
                }
            }
            let fine = expand_inputs(&coarse, m, len, sub);
            let steps = len * sub;
            let out = solve(model, ds.state(s0), &fine, 0.0, h, steps, options)?;
            if out.divergence.is_some() {
                return Ok(capped(d_theta, d_shift));
            }
            let traj = &out.trajectory;
            let mut dl = if with_grad {
                vec![0.0; (steps + 1) * n]
            } else {
                Vec::new()
            };
            for j in 1..=len {
                let est = traj.state(j * sub);
                let refx = ds.state(s0 + j);
                for i in 0..n {
                    let d = est[i] - refx[i];
                    loss += d * d / norm;
                    if with_grad {
                        dl[j * sub * n + i] = 2.0 * d / norm;
                    }
                }
            }
            if with_grad {
                let tape = out.tape.as_ref().expect("recorded solve");
                let g = adjoint_grad(tape, model, &dl)?;
                for (a, b) in d_theta.iter_mut().zip(&g.theta) {
                    *a += b;
                }
                if apply_shift {
                    for row in g.inputs.chunks(m) {
                        for (a, b) in d_shift.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                }
            }
            seg_start += len;
        }
        if !loss.is_finite() || loss > cap {
            return Ok(capped(d_theta, d_shift));
        }
        Ok(WindowEval { loss, d_theta, d_shift })
    }

    /// Mean window loss over `starts` and its gradient with respect to every
    /// network parameter.
    pub fn batch_loss_grad<E: Executor>(
        &self,
        params: &RecoveryNetParams,
        starts: &[usize],
        segment: usize,
        tau: f64,
        exec: &E,
    ) -> Result<BatchEval> {
        let b = starts.len();
        let k = self.config.window;
        let encoders = self.encoder_starts(starts);
        let ne = encoders.len();
        let traces = exec.map(ne, |i| {
            let g = gru_sequence(params, &self.pre.sequence(self.dataset, encoders[i], k));
            let (out, d) = dense_one(params, g.final_hidden());
            (out, g, d)
        });
        let width = params.shape.output_width();
        let mut mean = vec![0.0; width];
        for (o, _, _) in &traces {
            for (a, v) in mean.iter_mut().zip(o) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= ne as f64);
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(domain("network produced non-finite outputs"));
        }
        let (model, pre_theta, shift) = self.model_from_mean(&mean, tau)?;
        let evals = exec.map(b, |i| self.window_eval(&model, &shift, starts[i], segment, true));
        let mut loss = 0.0;
        let nc = model.coefficients().len();
        let mut d_theta = vec![0.0; nc];
        let mut d_shift = vec![0.0; shift.len()];
        for e in evals {
            let e = e?;
            loss += e.loss;
            for (a, v) in d_theta.iter_mut().zip(&e.d_theta) {
                *a += v;
            }
            for (a, v) in d_shift.iter_mut().zip(&e.d_shift) {
                *a += v;
            }
        }
        loss /= b as f64;
        let d_pre = threshold_dropout_backward(&pre_theta, tau, &d_theta);
        let mut d_out = self.pre.coefficients_vjp(&d_pre);
        d_out.extend_from_slice(&d_shift);
        d_out.iter_mut().for_each(|v| *v /= (b * ne) as f64);
        let parts = exec.map(ne, |i| {
            let mut g = NetWeights::zeros(&params.shape);
            let dh = dense_one_backward(params, &traces[i].2, &d_out, &mut g);
            gru_sequence_backward(params, &traces[i].1, &dh, &mut g);
            g
        });
        let mut grads = NetWeights::zeros(&params.shape);
        for p in &parts {
            grads.add_assign(p);
        }
        Ok(BatchEval {
            loss,
            grads,
            theta: model.coefficients().to_vec(),
        })
    }

    /// Mean window loss only.
    pub fn batch_loss<E: Executor>(
        &self,
        params: &RecoveryNetParams,
        starts: &[usize],
        segment: usize,
        tau: f64,
        exec: &E,
    ) -> Result<f64> {
        let mean = self.mean_outputs(params, &self.encoder_starts(starts), exec);
        let (model, _, shift) = self.model_from_mean(&mean, tau)?;
        let evals = exec.map(starts.len(), |i| {
            self.window_eval(&model, &shift, starts[i], segment, false)
        });
        let mut loss = 0.0;
        for e in evals {
            loss += e?.loss;
        }
        Ok(loss / starts.len() as f64)
    }
}

/// Adaptive-moment optimiser state.
#[derive(Debug, Clone)]
pub struct Adam {
    m: NetWeights,
    v: NetWeights,
    t: i32,
}

impl Adam {
    pub fn new(shape: &NetShape) -> Self {
        Self {
            m: NetWeights::zeros(shape),
            v: NetWeights::zeros(shape),
            t: 0,
        }
    }

    pub fn step(&mut self, weights: &mut NetWeights, grads: &NetWeights, lr: f64, b1: f64, b2: f64, eps: f64) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(b1, self.t as f64);
        let c2 = 1.0 - libm::pow(b2, self.t as f64);
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((w, g), m), v) in weights.tensors_mut().into_iter().zip(grads.tensors()).zip(ms).zip(vs) {
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= lr * mh / (libm::sqrt(vh) + eps);
            }
        }
    }
}

/// Trains on the calling thread without progress output.
pub fn train(dataset: &Trajectory, config: &TrainConfig, truth: Option<&SparseOdeModel>) -> Result<RecoveryResult> {
    train_with(dataset, config, truth, &Serial, &mut Quiet)
}

pub fn train_with<E: Executor, O: TrainObserver>(
    dataset: &Trajectory,
    config: &TrainConfig,
    truth: Option<&SparseOdeModel>,
    exec: &E,
    observer: &mut O,
) -> Result<RecoveryResult> {
    let started = observer.seconds();
    let pipeline = Pipeline::new(dataset, config)?;
    let shape = pipeline.shape();
    let mut params = init_params(shape, config.tau, config.seed)?;
    params
        .weights
        .w2
        .iter_mut()
        .for_each(|w| *w *= config.output_init_scale);
    let starts = pipeline.window_starts();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x05ee_dba7_c4e5_u64);
    let n_batches = starts.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * n_batches;
    let mut adam = Adam::new(&shape);
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let segment = config.segment_at(epoch);
        let tau = config.tau_at(epoch);
        let mut epoch_loss = 0.0;
        for (bi, batch) in shuffled_batches(&starts, config.batch_size, &mut rng)
            .iter()
            .enumerate()
        {
            let abort = |reason: &str| Error::TrainingAborted {
                epoch,
                batch: bi,
                reason: reason.to_string(),
            };
            let eval = pipeline
                .batch_loss_grad(&params, batch, segment, tau, exec)
                .map_err(|e| abort(&alloc::format!("{e}")))?;
            if !eval.loss.is_finite() {
                return Err(abort("non-finite loss"));
            }
            if !eval.grads.all_finite() {
                return Err(abort("non-finite gradient"));
            }
            let lr = config.learning_rate_at(step, total_steps);
            adam.step(
                &mut params.weights,
                &eval.grads,
                lr,
                config.beta1,
                config.beta2,
                config.adam_eps,
            );
            step += 1;
            epoch_loss += eval.loss;
        }
        let loss = epoch_loss / n_batches as f64;
        history.push(loss);
        let support_size = if observer_wants_support(epoch, config.epochs) {
            pipeline.aggregate_model_with(&params, tau, exec)?.0.support_size()
        } else {
            0
        };
        observer.on_epoch(&EpochRecord {
            epoch,
            loss,
            support_size,
            segment,
            tau,
        });
    }
    let (model, shifts) = pipeline.aggregate_model_with(&params, config.tau, exec)?;
    let eval = evaluate(&model, dataset)?;
    let support = truth.map(|t| SupportReport::compare(&model, t));
    let wall_seconds = match (started, observer.seconds()) {
        (Some(a), Some(b)) => Some(b - a),
        _ => None,
    };
    Ok(RecoveryResult {
        model,
        mse: eval.mse,
        diverged_at: eval.diverged_at,
        loss_history: history,
        support,
        wall_seconds,
        params,
        shifts,
        preprocessing: pipeline.pre.clone(),
    })
}

fn observer_wants_support(epoch: usize, epochs: usize) -> bool {
    let every = (epochs / 10).max(1);
    epoch.is_multiple_of(every) || epoch + 1 == epochs
}

/// End-to-end objective for gradient checking: one batch through GRU, head,
/// dropout, RK4 and the window loss.
pub struct PipelineObjective<'a> {
    pub pipeline: Pipeline<'a>,
    pub starts: Vec<usize>,
    pub segment: usize,
    pub tau: f64,
}

impl Objective for PipelineObjective<'_> {
    fn loss(&self, params: &RecoveryNetParams) -> f64 {
        self.pipeline
            .batch_loss(params, &self.starts, self.segment, self.tau, &Serial)
            .unwrap_or(f64::NAN)
    }

    fn loss_and_grad(&self, params: &RecoveryNetParams) -> (f64, NetWeights) {
        match self
            .pipeline
            .batch_loss_grad(params, &self.starts, self.segment, self.tau, &Serial)
        {
            Ok(e) => (e.loss, e.grads),
            Err(_) => (f64::NAN, NetWeights::zeros(&params.shape)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::lotka_volterra_reference;
    use crate::net::grad_check;

    fn ramp(len: usize) -> Trajectory {
        let states: Vec<f64> = (0..len).flat_map(|i| [i as f64, 1.0]).collect();
        let inputs: Vec<f64> = (0..len).map(|i| (i % 3) as f64).collect();
        Trajectory::new(0.0, 1.0, 2, 1, states, inputs).unwrap()
    }

    fn lv_data(samples: usize) -> Trajectory {
        let model = lotka_volterra_reference();
        let inputs = vec![1.0; samples];
        simulate(&model, &[30.0, 4.0], &inputs, 0.0, 1.0, samples, FINE_SUBSTEPS)
            .unwrap()
            .0
    }

    #[test]
    fn batches_of_two_windows() {
        let ds = ramp(200);
        let batches = make_batches(&ds, 2, 50, 0).unwrap();
        assert_eq!(batches.len(), 2);
        for b in &batches {
            assert_eq!((b.tensor.batch(), b.tensor.channels(), b.tensor.steps()), (2, 3, 50));
            for (i, &s) in b.starts.iter().enumerate() {
                assert_eq!(s % 50, 0);
                assert_eq!(b.tensor.get(i, 0, 0), s as f64);
                assert_eq!(b.tensor.get(i, 2, 4), ((s + 4) % 3) as f64);
            }
        }
        let mut all: Vec<usize> = batches.iter().flat_map(|b| b.starts.clone()).collect();
        all.sort();
        assert_eq!(all, vec![0, 50, 100, 150]);
    }

    #[test]
    fn whole_dataset_window() {
        let ds = ramp(37);
        let batches = make_batches(&ds, 4, 37, 1).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].starts, vec![0]);
        assert!(make_batches(&ds, 4, 38, 1).is_err());
    }

    #[test]
    fn batch_order_is_seeded() {
        let ds = ramp(300);
        let a = make_batches_strided(&ds, 3, 10, 7, 5).unwrap();
        let b = make_batches_strided(&ds, 3, 10, 7, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_examples() {
        let t = |v: Vec<f64>| Trajectory::new(0.0, 1.0, 1, 0, v, vec![]).unwrap();
        assert_eq!(ode_loss(&t(vec![0.0, 0.0]), &t(vec![1.0, 3.0]), 1e6).unwrap(), 5.0);
        assert_eq!(ode_loss(&t(vec![2.0, 5.0]), &t(vec![2.0, 5.0]), 1e6).unwrap(), 0.0);
        assert_eq!(ode_loss(&t(vec![2.0, 5.0]), &t(vec![3.0, 6.0]), 1e6).unwrap(), 1.0);
        assert_eq!(ode_loss(&t(vec![0.0]), &t(vec![f64::NAN]), 1e6).unwrap(), 1e6);
        assert!(ode_loss(&t(vec![0.0]), &t(vec![0.0, 1.0]), 1e6).is_err());
    }

    #[test]
    fn truth_reproduces_its_own_data() {
        let ds = lv_data(201);
        let e = evaluate(&lotka_volterra_reference(), &ds).unwrap();
        assert!(e.mse <= 1e-6, "{}", e.mse);
        assert!(e.diverged_at.is_none());
    }

    #[test]
    fn zero_model_scores_spread_around_start() {
        let ds = lv_data(201);
        let zero = SparseOdeModel::zeros(TermLibrary::new(2, 1, 2, false).unwrap());
        let x0 = ds.state(0).to_vec();
        let expected = ds
            .states()
            .chunks(2)
            .map(|r| (r[0] - x0[0]).powi(2) + (r[1] - x0[1]).powi(2))
            .sum::<f64>()
            / (2.0 * ds.len() as f64);
        let got = evaluate(&zero, &ds).unwrap().mse;
        assert!((got - expected).abs() <= 1e-9 * expected);
    }

    #[test]
    fn curriculum_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.segment_at(0), 1);
        assert_eq!(c.segment_at(79), 1);
        assert!(c.segment_at(100) > 1);
        assert_eq!(c.segment_at(140), 49);
        assert_eq!(c.segment_at(199), 49);
        assert_eq!(c.tau_at(99), 0.0);
        assert_eq!(c.tau_at(100), 0.001);
    }

    #[test]
    fn whitening_maps_gram_to_identity() {
        let ds = lv_data(201);
        let lib = TermLibrary::new(2, 1, 2, false).unwrap();
        let pre = Preprocessing::from_dataset(&ds, &lib, &TrainConfig::default());
        let t = lib.len();
        // P^T G P = I
        let mut phi = vec![0.0; t];
        let mut g = vec![0.0; t * t];
        for r in 0..ds.len() {
            lib.features_into(ds.state(r), ds.input(r), &mut phi);
            for a in 0..t {
                for b in 0..t {
                    g[a * t + b] += phi[a] * phi[b] / ds.len() as f64;
                }
            }
        }
        let p = &pre.precond;
        for a in 0..t {
            for b in 0..t {
                let mut v = 0.0;
                for i in 0..t {
                    for j in 0..t {
                        v += p[i * t + a] * g[i * t + j] * p[j * t + b];
                    }
                }
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-8, "{a} {b} {v}");
            }
        }
    }

    #[test]
    fn coefficient_map_adjoint() {
        let pre = Preprocessing {
            channel_mean: vec![],
            channel_scale: vec![],
            precond: vec![1.0, 2.0, 0.0, 3.0],
            state_scale: vec![2.0, 0.5],
        };
        let r = [0.3, -0.7, 1.1, 0.4];
        let g = [0.9, 0.2, -0.5, 1.7];
        let lhs: f64 = pre.coefficients(&r).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = r.iter().zip(pre.coefficients_vjp(&g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-14);
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            window: 12,
            stride: 6,
            hidden: 4,
            dense_hidden: 6,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let ds = lv_data(60);
        let cfg = TrainConfig {
            epochs: 0,
            ..small_config()
        };
        let r = train(&ds, &cfg, None).unwrap();
        assert!(r.loss_history.is_empty());
        let init = init_params(r.params.shape, cfg.tau, cfg.seed).unwrap();
        assert_eq!(r.params, init);
        assert!(r.model.coefficients().iter().all(|c| *c == 0.0 || c.abs() >= cfg.tau));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = lv_data(60);
        let a = train(&ds, &small_config(), None).unwrap();
        let b = train(&ds, &small_config(), None).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.params, b.params);
        assert_eq!(a.mse.to_bits(), b.mse.to_bits());
    }

    #[test]
    fn reported_mse_matches_evaluate() {
        let ds = lv_data(60);
        let r = train(&ds, &small_config(), Some(&lotka_volterra_reference())).unwrap();
        let e = evaluate(&r.model, &ds).unwrap();
        assert_eq!(r.mse.to_bits(), e.mse.to_bits());
        assert!(r.support.is_some());
    }

    #[test]
    fn pipeline_gradient_matches_differences() {
        let ds = lv_data(60);
        let cfg = TrainConfig {
            window: 10,
            hidden: 3,
            dense_hidden: 4,
            ..TrainConfig::default()
        };
        let pipeline = Pipeline::new(&ds, &cfg).unwrap();
        let params = init_params(pipeline.shape(), cfg.tau, 2).unwrap();
        let objective = PipelineObjective {
            pipeline,
            starts: vec![0, 17, 33],
            segment: 3,
            tau: 0.0,
        };
        let report = grad_check(&params, &objective, 1e-6);
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
