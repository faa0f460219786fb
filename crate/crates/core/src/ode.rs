//! Fixed-step classical RK4 and its discrete adjoint.
//!
//! Inputs are held constant over each step (zero-order hold). The adjoint is
//! the exact reverse-mode derivative of the unrolled RK4 recursion, so it
//! agrees with finite differences of the computed loss rather than with the
//! continuous adjoint ODE.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_dim, domain, Error, Result};
use crate::library::SparseOdeModel;

/// Uniformly sampled states and inputs; also the dataset representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    t0: f64,
    dt: f64,
    n_states: usize,
    n_inputs: usize,
    /// Row-major `len x n_states`.
    states: Vec<f64>,
    /// Row-major `len x n_inputs`.
    inputs: Vec<f64>,
}

/// Datasets and solver output share one representation.
pub type TimeSeriesDataset = Trajectory;

impl Trajectory {
    pub fn new(t0: f64, dt: f64, n_states: usize, n_inputs: usize, states: Vec<f64>, inputs: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(domain("sample interval must be positive"));
        }
        if n_states == 0 {
            return Err(domain("trajectory needs at least one state"));
        }
        if !states.len().is_multiple_of(n_states) {
            return Err(domain("state buffer is not a whole number of rows"));
        }
        let len = states.len() / n_states;
        check_dim("input rows", len * n_inputs, inputs.len())?;
        Ok(Self {
            t0,
            dt,
            n_states,
            n_inputs,
            states,
            inputs,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.n_states
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.n_states..(i + 1) * self.n_states]
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.n_inputs..(i + 1) * self.n_inputs]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [f64] {
        &mut self.states
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    /// Rows `start..end` as a new trajectory.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(domain("slice out of range"));
        }
        Ok(Self {
            t0: self.time(start),
            dt: self.dt,
            n_states: self.n_states,
            n_inputs: self.n_inputs,
            states: self.states[start * self.n_states..end * self.n_states].to_vec(),
            inputs: self.inputs[start * self.n_inputs..end * self.n_inputs].to_vec(),
        })
    }

    /// Every `factor`-th row starting at row 0.
    pub fn downsample(&self, factor: usize) -> Self {
        let rows: Vec<usize> = (0..self.len()).step_by(factor.max(1)).collect();
        let mut states = Vec::with_capacity(rows.len() * self.n_states);
        let mut inputs = Vec::with_capacity(rows.len() * self.n_inputs);
        for &r in &rows {
            states.extend_from_slice(self.state(r));
            inputs.extend_from_slice(self.input(r));
        }
        Self {
            t0: self.t0,
            dt: self.dt * factor.max(1) as f64,
            n_states: self.n_states,
            n_inputs: self.n_inputs,
            states,
            inputs,
        }
    }
}

/// The four stage states of one RK4 step; `stages[0]` is the step's start.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stages: [Vec<f64>; 4],
    pub input: Vec<f64>,
}

/// Per-step stage states, sufficient to run the step in reverse.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveTape {
    dt: f64,
    model_checksum: u64,
    steps: Vec<StageRecord>,
}

impl SolveTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> &[StageRecord] {
        &self.steps
    }

    /// Re-runs the recorded steps from their start states.
    pub fn replay(&self, model: &SparseOdeModel) -> Result<Vec<Vec<f64>>> {
        if model.checksum() != self.model_checksum {
            return Err(Error::TapeMismatch);
        }
        let mut ws = Workspace::new(model);
        let mut out = Vec::with_capacity(self.steps.len());
        for rec in &self.steps {
            let mut next = vec![0.0; model.n_states()];
            ws.step(model, &rec.stages[0], &rec.input, self.dt, &mut next, None);
            out.push(next);
        }
        Ok(out)
    }
}

/// Where a solve stopped producing finite states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Divergence {
    /// Index of the first step whose output was non-finite or out of bounds.
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutput {
    /// Rows `0..=steps completed`; shorter than requested on divergence.
    pub trajectory: Trajectory,
    pub tape: Option<SolveTape>,
    pub divergence: Option<Divergence>,
}

/// Scratch buffers for RK4 on one model.
pub(crate) struct Workspace {
    phi: Vec<f64>,
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(model: &SparseOdeModel) -> Self {
        let n = model.n_states();
        Self {
            phi: vec![0.0; model.n_terms()],
            k: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            tmp: vec![0.0; n],
        }
    }

    /// One RK4 step; optionally records the stage states.
    pub(crate) fn step(
        &mut self,
        model: &SparseOdeModel,
        x: &[f64],
        u: &[f64],
        dt: f64,
        out: &mut [f64],
        record: Option<&mut [Vec<f64>; 4]>,
    ) {
        let n = x.len();
        let keep = record.is_some();
        let [k1, k2, k3, k4] = &mut self.k;
        model.rhs_into(x, u, &mut self.phi, k1);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        let stage2 = if keep { self.tmp.clone() } else { Vec::new() };
        model.rhs_into(&self.tmp, u, &mut self.phi, k2);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        let stage3 = if keep { self.tmp.clone() } else { Vec::new() };
        model.rhs_into(&self.tmp, u, &mut self.phi, k3);
        for i in 0..n {
            self.tmp[i] = x[i] + dt * k3[i];
        }
        model.rhs_into(&self.tmp, u, &mut self.phi, k4);
        for i in 0..n {
            out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if let Some(rec) = record {
            *rec = [x.to_vec(), stage2, stage3, self.tmp.clone()];
        }
    }
}

fn check_step_args(model: &SparseOdeModel, x: &[f64], u: &[f64], dt: f64) -> Result<()> {
    check_dim("state vector", model.n_states(), x.len())?;
    check_dim("input vector", model.n_inputs(), u.len())?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(domain("step must be positive and finite"));
    }
    Ok(())
}

/// One classical RK4 step with `u` held over the step.
///
/// A non-finite result is reported as [`Error::Diverged`] with step 0.
pub fn rk4_step(model: &SparseOdeModel, x: &[f64], u: &[f64], dt: f64) -> Result<(Vec<f64>, StageRecord)> {
    check_step_args(model, x, u, dt)?;
    let mut ws = Workspace::new(model);
    let mut out = vec![0.0; x.len()];
    let mut stages: [Vec<f64>; 4] = Default::default();
    ws.step(model, x, u, dt, &mut out, Some(&mut stages));
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged { step: 0 });
    }
    Ok((
        out,
        StageRecord {
            stages,
            input: u.to_vec(),
        },
    ))
}

/// Solver settings beyond the step itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub record: bool,
    /// States with magnitude above this count as divergence.
    pub state_bound: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            record: false,
            state_bound: f64::INFINITY,
        }
    }
}

impl SolveOptions {
    pub fn recording() -> Self {
        Self {
            record: true,
            ..Self::default()
        }
    }
}

/// Integrates `n_steps` RK4 steps from `x0`.
///
/// `inputs` is row-major with `n_steps + 1` rows; row `i` is held over step
/// `i`. On divergence the partial trajectory is returned together with the
/// failing step index.
pub fn solve(
    model: &SparseOdeModel,
    x0: &[f64],
    inputs: &[f64],
    t0: f64,
    dt: f64,
    n_steps: usize,
    options: SolveOptions,
) -> Result<SolveOutput> {
    let n = model.n_states();
    let m = model.n_inputs();
    check_dim("initial state", n, x0.len())?;
    check_dim("input rows", (n_steps + 1) * m, inputs.len())?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(domain("step must be positive and finite"));
    }
    let mut ws = Workspace::new(model);
    let mut states = Vec::with_capacity((n_steps + 1) * n);
    states.extend_from_slice(x0);
    let mut tape_steps = Vec::with_capacity(if options.record { n_steps } else { 0 });
    let mut divergence = None;
    let mut next = vec![0.0; n];
    for step in 0..n_steps {
        let x = &states[step * n..(step + 1) * n];
        let u = &inputs[step * m..(step + 1) * m];
        if options.record {
            let mut stages: [Vec<f64>; 4] = Default::default();
            ws.step(model, x, u, dt, &mut next, Some(&mut stages));
            tape_steps.push(StageRecord {
                stages,
                input: u.to_vec(),
            });
        } else {
            ws.step(model, x, u, dt, &mut next, None);
        }
        if next.iter().any(|v| !v.is_finite() || v.abs() > options.state_bound) {
            divergence = Some(Divergence { step });
            if options.record {
                tape_steps.pop();
            }
            break;
        }
        states.extend_from_slice(&next);
    }
    let rows = states.len() / n;
    let trajectory = Trajectory {
        t0,
        dt,
        n_states: n,
        n_inputs: m,
        states,
        inputs: inputs[..rows * m].to_vec(),
    };
    let tape = options.record.then(|| SolveTape {
        dt,
        model_checksum: model.checksum(),
        steps: tape_steps,
    });
    Ok(SolveOutput {
        trajectory,
        tape,
        divergence,
    })
}

/// Gradients produced by [`adjoint_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointGradients {
    /// Same layout as the model coefficients.
    pub theta: Vec<f64>,
    pub x0: Vec<f64>,
    /// Row-major `steps x n_inputs`: gradient w.r.t. the input held on each step.
    pub inputs: Vec<f64>,
}

/// Reverse pass through a recorded solve.
///
/// `dl_dtraj` is row-major with one row per trajectory sample (tape length
/// plus one); row 0 is the direct gradient with respect to `x0`.
pub fn adjoint_grad(tape: &SolveTape, model: &SparseOdeModel, dl_dtraj: &[f64]) -> Result<AdjointGradients> {
    if tape.model_checksum != model.checksum() {
        return Err(Error::TapeMismatch);
    }
    let n = model.n_states();
    let t = model.n_terms();
    let m = model.n_inputs();
    let steps = tape.steps.len();
    check_dim("trajectory gradient", (steps + 1) * n, dl_dtraj.len())?;

    let dt = tape.dt;
    let lib = model.library();
    let theta = model.coefficients();
    let mut g_theta = vec![0.0; n * t];
    let mut g_inputs = vec![0.0; steps * m];
    let mut lambda: Vec<f64> = dl_dtraj[steps * n..].to_vec();
    let mut phi = vec![0.0; t];
    let mut w = vec![0.0; t];
    let mut gs = vec![0.0; n];
    let mut gk = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    // stage s+1 input = x + c[s] * dt * k_s
    const C: [f64; 3] = [0.5, 0.5, 1.0];

    for step in (0..steps).rev() {
        let rec = &tape.steps[step];
        let u = &rec.input;
        let mut gx = lambda.clone();
        for i in 0..n {
            gk[0][i] = dt / 6.0 * lambda[i];
            gk[1][i] = dt / 3.0 * lambda[i];
            gk[2][i] = dt / 3.0 * lambda[i];
            gk[3][i] = dt / 6.0 * lambda[i];
        }
        for s in (0..4).rev() {
            let xs = &rec.stages[s];
            lib.features_into(xs, u, &mut phi);
            // theta gradient and w = theta^T gk
            w.iter_mut().for_each(|v| *v = 0.0);
            for eq in 0..n {
                let g = gk[s][eq];
                if g == 0.0 {
                    continue;
                }
                let row = &theta[eq * t..(eq + 1) * t];
                let grow = &mut g_theta[eq * t..(eq + 1) * t];
                for j in 0..t {
                    grow[j] += g * phi[j];
                    w[j] += g * row[j];
                }
            }
            gs.iter_mut().for_each(|v| *v = 0.0);
            lib.features_vjp_state(xs, &w, &mut gs);
            lib.features_vjp_input(&w, &mut g_inputs[step * m..(step + 1) * m]);
            for i in 0..n {
                gx[i] += gs[i];
            }
            if s > 0 {
                let c = C[s - 1] * dt;
                for i in 0..n {
                    gk[s - 1][i] += c * gs[i];
                }
            }
        }
        for i in 0..n {
            lambda[i] = gx[i] + dl_dtraj[step * n + i];
        }
    }
    Ok(AdjointGradients {
        theta: g_theta,
        x0: lambda,
        inputs: g_inputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::{lotka_volterra_reference, TermLibrary};

    fn decay(rate: f64) -> SparseOdeModel {
        SparseOdeModel::new(TermLibrary::new(1, 0, 1, false).unwrap(), vec![rate], 0.0).unwrap()
    }

    #[test]
    fn zero_model_is_stationary() {
        let m = SparseOdeModel::zeros(TermLibrary::new(2, 1, 2, false).unwrap());
        let (x, _) = rk4_step(&m, &[3.0, -1.0], &[2.0], 0.3).unwrap();
        assert_eq!(x, vec![3.0, -1.0]);
    }

    #[test]
    fn single_step_matches_taylor_polynomial() {
        let (x, rec) = rk4_step(&decay(-1.0), &[1.0], &[], 0.1).unwrap();
        let h: f64 = 0.1;
        let expected = 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
        assert!((x[0] - expected).abs() < 1e-15);
        assert!((x[0] - 0.904_837_5).abs() < 1e-15);
        assert_eq!(rec.stages[0], vec![1.0]);
        assert!((rec.stages[1][0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let out = solve(&decay(-1.0), &[2.0], &[], 0.0, 0.1, 0, SolveOptions::recording()).unwrap();
        assert_eq!(out.trajectory.states(), &[2.0]);
        assert!(out.tape.unwrap().is_empty());
    }

    #[test]
    fn linear_decay_reaches_exponential() {
        let out = solve(&decay(-1.0), &[1.0], &[], 0.0, 0.1, 10, SolveOptions::default()).unwrap();
        let last = out.trajectory.state(10)[0];
        assert!((last - libm::exp(-1.0)).abs() < 1e-6);
    }

    #[test]
    fn divergence_is_marked_not_raised() {
        let blowup = SparseOdeModel::new(TermLibrary::new(1, 0, 2, false).unwrap(), vec![0.0, 1.0], 0.0).unwrap();
        let out = solve(&blowup, &[1.0], &[], 0.0, 0.5, 40, SolveOptions::default()).unwrap();
        let d = out.divergence.expect("x' = x^2 blows up at t = 1");
        assert_eq!(out.trajectory.len(), d.step + 1);
    }

    fn max_error_oscillator(dt: f64) -> f64 {
        let lib = TermLibrary::new(2, 0, 1, false).unwrap();
        let m = SparseOdeModel::new(lib, vec![-0.5, 1.0, -1.0, -0.5], 0.0).unwrap();
        let steps = libm::round(2.0 / dt) as usize;
        let out = solve(&m, &[1.0, 0.0], &[], 0.0, dt, steps, SolveOptions::default()).unwrap();
        (0..=steps)
            .map(|i| {
                let t = i as f64 * dt;
                let decay = libm::exp(-0.5 * t);
                let x = out.trajectory.state(i);
                libm::fabs(x[0] - decay * libm::cos(t)).max(libm::fabs(x[1] + decay * libm::sin(t)))
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn step_halving_shows_fourth_order() {
        let ratio = max_error_oscillator(0.1) / max_error_oscillator(0.05);
        assert!((12.0..=20.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn replay_is_bit_exact() {
        let m = lotka_volterra_reference();
        let inputs = vec![1.0; 21];
        let out = solve(&m, &[30.0, 4.0], &inputs, 0.0, 0.25, 20, SolveOptions::recording()).unwrap();
        let tape = out.tape.unwrap();
        let replayed = tape.replay(&m).unwrap();
        for (i, row) in replayed.iter().enumerate() {
            assert_eq!(row.as_slice(), out.trajectory.state(i + 1));
        }
    }

    #[test]
    fn tape_rejects_other_model() {
        let m = lotka_volterra_reference();
        let out = solve(&m, &[30.0, 4.0], &[1.0; 3], 0.0, 0.25, 2, SolveOptions::recording()).unwrap();
        let mut other = m.clone();
        other.set(0, 1, 0.6);
        let g = vec![0.0; 6];
        assert_eq!(
            adjoint_grad(out.tape.as_ref().unwrap(), &other, &g),
            Err(Error::TapeMismatch)
        );
    }

    #[test]
    fn scalar_single_step_gradient_matches_polynomial() {
        // x1 = x0 * (1 + a + a^2/2 + a^3/6 + a^4/24), a = theta * h
        let theta = -0.7;
        let h = 0.2;
        let x0 = 1.5;
        let m = decay(theta);
        let out = solve(&m, &[x0], &[], 0.0, h, 1, SolveOptions::recording()).unwrap();
        let g = adjoint_grad(out.tape.as_ref().unwrap(), &m, &[0.0, 1.0]).unwrap();
        let a = theta * h;
        let dpoly = 1.0 + a + a * a / 2.0 + a * a * a / 6.0;
        assert!((g.theta[0] - x0 * h * dpoly).abs() < 1e-14);
        let poly = 1.0 + a + a * a / 2.0 + a * a * a / 6.0 + a * a * a * a / 24.0;
        assert!((g.x0[0] - poly).abs() < 1e-14);
    }
}
