//! Surrogate-driven choice of platform, task and training hyperparameters.
//!
//! Ridge-regression surrogates predict error, time, energy and memory from
//! `(platform, task, hi, e, N)`. The discrete space is small enough to
//! enumerate exhaustively; a bounded quasi-Newton search then refines the
//! continuous error budget.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, domain, Error, Result};

pub const PLATFORMS: [u8; 2] = [0, 1];
pub const TASKS: [u8; 3] = [0, 1, 2];
pub const HIDDEN_SIZES: [u32; 4] = [16, 32, 64, 128];
pub const EPOCHS: [u32; 4] = [16, 32, 64, 128];
pub const SEQ_LENGTHS: [u32; 3] = [50, 100, 200];

/// One measured configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementRow {
    /// 0 = FPGA, 1 = GPU.
    pub platform: u8,
    /// 0 = ML, 1 = ML + PG, 2 = MR.
    pub task: u8,
    pub hi: f64,
    pub e: f64,
    pub n: f64,
    pub error: f64,
    pub time_s: f64,
    pub energy_j: f64,
    pub dram_mb: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementTable {
    pub rows: Vec<MeasurementRow>,
}

/// Epoch count attached to the bundled rows, which do not record one.
pub const BUNDLED_EPOCHS: f64 = 64.0;
/// Sequence length attached to the bundled rows.
pub const BUNDLED_SEQ_LEN: f64 = 100.0;

// (platform, task, hi, error, time, energy, dram)
const BUNDLED: [(u8, u8, f64, f64, f64, f64, f64); 24] = [
    (0, 0, 16.0, 7.33, 37.37, 177.13, 210.46),
    (0, 0, 32.0, 7.872, 39.62, 193.23, 210.94),
    (0, 0, 64.0, 7.769, 42.16, 208.52, 209.55),
    (0, 0, 128.0, 7.37, 66.74, 327.36, 214.45),
    (1, 0, 16.0, 8.5603, 30.83, 5457.24, 4399.70),
    (1, 0, 32.0, 7.2366, 29.98, 5438.65, 4399.61),
    (1, 0, 64.0, 7.772, 29.78, 5477.22, 4404.27),
    (1, 0, 128.0, 7.5498, 29.41, 5560.32, 4433.51),
    (0, 1, 16.0, 6.79, 32.2, 152.63, 225.07),
    (0, 1, 32.0, 8.29, 33.36, 162.70, 225.11),
    (0, 1, 64.0, 6.478, 42.04, 207.93, 226.61),
    (0, 1, 128.0, 8.02, 66.74, 327.36, 229.14),
    (1, 1, 16.0, 7.309, 30.31, 5488.00, 4344.71),
    (1, 1, 32.0, 7.257, 29.21, 5437.39, 4351.26),
    (1, 1, 64.0, 7.762, 30.45, 5459.41, 4363.09),
    (1, 1, 128.0, 6.931, 29.78, 6236.72, 4377.54),
    (0, 2, 16.0, 5.3678, 55.23, 261.79, 211.29),
    (0, 2, 32.0, 4.91, 54.7, 266.77, 210.63),
    (0, 2, 64.0, 5.77, 63.69, 315.01, 211.72),
    (0, 2, 128.0, 4.6, 88.5, 434.09, 214.23),
    (1, 2, 16.0, 3.179, 163.51, 29943.68, 5862.32),
    (1, 2, 32.0, 3.54, 145.87, 27403.20, 5881.50),
    (1, 2, 64.0, 3.1157, 152.55, 29206.32, 5947.67),
    (1, 2, 128.0, 3.2965, 149.14, 27375.12, 6118.36),
];

impl MeasurementTable {
    pub fn new(rows: Vec<MeasurementRow>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r.platform > 1 || r.task > 2 {
                return Err(domain(alloc::format!("row {i}: platform must be 0/1 and task 0/1/2")));
            }
            let metrics = [r.hi, r.e, r.n, r.time_s, r.energy_j, r.dram_mb];
            if metrics.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || !r.error.is_finite() {
                return Err(domain(alloc::format!(
                    "row {i}: hyperparameters and metrics must be positive"
                )));
            }
        }
        Ok(Self { rows })
    }

    /// FPGA / GPU measurements for ML, ML + PG and MR at four hidden sizes.
    pub fn bundled() -> Self {
        let rows = BUNDLED
            .iter()
            .map(
                |&(platform, task, hi, error, time_s, energy_j, dram_mb)| MeasurementRow {
                    platform,
                    task,
                    hi,
                    e: BUNDLED_EPOCHS,
                    n: BUNDLED_SEQ_LEN,
                    error,
                    time_s,
                    energy_j,
                    dram_mb,
                },
            )
            .collect();
        Self { rows }
    }
}

/// Column of the measurement table a surrogate predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Error,
    Time,
    Energy,
    Memory,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Error => "error",
            Target::Time => "time_s",
            Target::Energy => "energy_J",
            Target::Memory => "dram_MB",
        }
    }

    fn of(self, r: &MeasurementRow) -> f64 {
        match self {
            Target::Error => r.error,
            Target::Time => r.time_s,
            Target::Energy => r.energy_j,
            Target::Memory => r.dram_mb,
        }
    }
}

/// A point of the design space, optionally with an error budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignPoint {
    pub platform: u8,
    pub task: u8,
    pub hi: f64,
    pub e: f64,
    pub n: f64,
    pub eps: f64,
}

/// Polynomial features over `(hi, e, N)` with optional error-budget and
/// platform/task terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureSpec {
    pub degree: u32,
    /// Offsets subtracted from `(hi, e, N)`; [`fit_surrogate`] fills in the
    /// training means when absent, so variables the data never varies carry
    /// no weight.
    pub center: Option<[f64; 3]>,
    /// Divisors for `(hi, e, N)` after centring.
    pub scale: [f64; 3],
    /// Adds `eps / scale` as a linear feature when set.
    pub eps_scale: Option<f64>,
    /// Adds one indicator per (platform, task) cell and its products with
    /// the linear `(hi, e, N)` terms.
    pub categorical: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            degree: 3,
            center: None,
            scale: [128.0, 128.0, 200.0],
            eps_scale: None,
            categorical: true,
        }
    }
}

impl FeatureSpec {
    /// Monomial exponent triples of degree 1..=degree, graded.
    fn exponents(&self) -> Vec<[u32; 3]> {
        let mut out = Vec::new();
        for d in 1..=self.degree {
            for a in (0..=d).rev() {
                for b in (0..=d - a).rev() {
                    out.push([a, b, d - a - b]);
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.exponents().len() + usize::from(self.eps_scale.is_some()) + if self.categorical { 6 * 4 } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self, p: &DesignPoint) -> Vec<f64> {
        let c = self.center.unwrap_or([0.0; 3]);
        let v = [
            (p.hi - c[0]) / self.scale[0],
            (p.e - c[1]) / self.scale[1],
            (p.n - c[2]) / self.scale[2],
        ];
        let mut out: Vec<f64> = self
            .exponents()
            .iter()
            .map(|ex| (0..3).map(|i| libm::pow(v[i], ex[i] as f64)).product())
            .collect();
        if let Some(s) = self.eps_scale {
            out.push(p.eps / s);
        }
        if self.categorical {
            let cell = (p.platform as usize) * 3 + p.task as usize;
            for c in 0..6 {
                let ind = if c == cell { 1.0 } else { 0.0 };
                out.push(ind);
                out.extend(v.iter().map(|x| ind * x));
            }
        }
        out
    }
}

/// Fitted linear predictor `bias + weights . features`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub features: Option<FeatureSpec>,
    pub bias: f64,
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub target: String,
}

impl SurrogateModel {
    pub fn predict_raw(&self, x: &[f64]) -> Result<f64> {
        check_dim("feature vector", self.weights.len(), x.len())?;
        let mut acc = self.bias;
        for (w, v) in self.weights.iter().zip(x) {
            acc += w * v;
        }
        Ok(acc)
    }
}

/// Evaluates a surrogate at a design point.
pub fn predict(surrogate: &SurrogateModel, point: &DesignPoint) -> Result<f64> {
    let spec = surrogate
        .features
        .ok_or_else(|| domain("surrogate has no feature descriptor"))?;
    surrogate.predict_raw(&spec.features(point))
}

/// Ridge regression with an unpenalised bias, solved by QR of the stacked
/// system `[1 A; 0 sqrt(λ) I] w = [y; 0]`.
pub fn ridge_fit(samples: &[(Vec<f64>, f64)], lambda: f64) -> Result<SurrogateModel> {
    if samples.is_empty() {
        return Err(domain("ridge fit needs at least one sample"));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(domain("ridge strength must be finite and non-negative"));
    }
    let p = samples[0].0.len();
    for (x, y) in samples {
        check_dim("feature vector", p, x.len())?;
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(domain("non-finite sample"));
        }
    }
    let n = samples.len();
    let extra = if lambda > 0.0 { p } else { 0 };
    let rows = n + extra;
    if rows < p + 1 {
        return Err(Error::RankDeficient(alloc::format!(
            "{n} samples for {} unknowns without regularisation",
            p + 1
        )));
    }
    let mut a = DMatrix::<f64>::zeros(rows, p + 1);
    let mut b = DVector::<f64>::zeros(rows);
    for (i, (x, y)) in samples.iter().enumerate() {
        a[(i, 0)] = 1.0;
        for j in 0..p {
            a[(i, j + 1)] = x[j];
        }
        b[i] = *y;
    }
    let s = libm::sqrt(lambda);
    for j in 0..extra {
        a[(n + j, j + 1)] = s;
    }
    let qr = a.qr();
    let r = qr.r();
    let diag_max = (0..=p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..=p).any(|i| r[(i, i)].abs() <= 1e-12 * diag_max.max(f64::MIN_POSITIVE)) {
        return Err(Error::RankDeficient("design matrix has dependent columns".into()));
    }
    let qtb = qr.q().transpose() * b;
    let w = r
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::RankDeficient("singular triangular factor".into()))?;
    Ok(SurrogateModel {
        features: None,
        bias: w[0],
        weights: w.iter().skip(1).copied().collect(),
        lambda,
        target: String::new(),
    })
}

/// Fits one surrogate on a measurement table. When the spec carries an
/// error-budget feature, the measured error fills it. The ridge penalty acts
/// on standardised feature columns; the returned weights apply to the raw
/// features.
pub fn fit_surrogate(
    table: &MeasurementTable,
    target: Target,
    mut spec: FeatureSpec,
    lambda: f64,
) -> Result<SurrogateModel> {
    if table.rows.is_empty() {
        return Err(domain("measurement table is empty"));
    }
    if spec.center.is_none() {
        let k = table.rows.len() as f64;
        let mean = |f: fn(&MeasurementRow) -> f64| table.rows.iter().map(f).sum::<f64>() / k;
        spec.center = Some([mean(|r| r.hi), mean(|r| r.e), mean(|r| r.n)]);
    }
    let mut samples: Vec<(Vec<f64>, f64)> = table
        .rows
        .iter()
        .map(|r| {
            let p = DesignPoint {
                platform: r.platform,
                task: r.task,
                hi: r.hi,
                e: r.e,
                n: r.n,
                eps: r.error,
            };
            (spec.features(&p), target.of(r))
        })
        .collect();
    // Penalise every column on the same footing: divide by its standard
    // deviation for the solve and fold the factor back into the weights.
    let k = samples.len() as f64;
    // Columns constant over the data are indistinguishable from the
    // unpenalised bias, so their exact ridge weight is zero.
    let scale: Vec<Option<f64>> = (0..spec.len())
        .map(|j| {
            let mean = samples.iter().map(|(x, _)| x[j]).sum::<f64>() / k;
            let var = samples.iter().map(|(x, _)| (x[j] - mean) * (x[j] - mean)).sum::<f64>() / k;
            (var > 1e-24 * (1.0 + mean * mean)).then(|| libm::sqrt(var))
        })
        .collect();
    for (x, _) in &mut samples {
        x.iter_mut()
            .zip(&scale)
            .for_each(|(v, s)| *v = s.map_or(0.0, |s| *v / s));
    }
    let mut s = ridge_fit(&samples, lambda)?;
    s.weights
        .iter_mut()
        .zip(&scale)
        .for_each(|(w, sc)| *w = sc.map_or(0.0, |sc| *w / sc));
    s.features = Some(spec);
    s.target = target.name().into();
    Ok(s)
}

/// The four predictors used by the selector.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogates {
    pub error: SurrogateModel,
    pub time: SurrogateModel,
    /// Energy (J) or power, whichever column it was fitted on.
    pub power: SurrogateModel,
    pub memory: SurrogateModel,
}

impl Surrogates {
    /// Error and time from `(a, h, hi, e, N)`; energy and memory also take the
    /// error budget as a linear term.
    pub fn fit(table: &MeasurementTable, degree: u32, lambda: f64) -> Result<Self> {
        let base = FeatureSpec {
            degree,
            ..FeatureSpec::default()
        };
        let with_eps = FeatureSpec {
            eps_scale: Some(10.0),
            ..base
        };
        Ok(Self {
            error: fit_surrogate(table, Target::Error, base, lambda)?,
            time: fit_surrogate(table, Target::Time, base, lambda)?,
            power: fit_surrogate(table, Target::Energy, with_eps, lambda)?,
            memory: fit_surrogate(table, Target::Memory, with_eps, lambda)?,
        })
    }

    fn evaluate(&self, cfg: Config, eps_override: Option<f64>) -> Result<Prediction> {
        let mut p = cfg.point(0.0);
        let error = predict(&self.error, &p)?;
        let time = predict(&self.time, &p)?;
        p.eps = eps_override.unwrap_or(error);
        let power = predict(&self.power, &p)?;
        let memory = predict(&self.memory, &p)?;
        Ok(Prediction {
            error,
            time,
            power,
            memory,
        })
    }
}

/// Discrete configuration `(a, h, hi, e, N)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Config {
    pub platform: u8,
    pub task: u8,
    pub hi: u32,
    pub e: u32,
    pub n: u32,
}

impl Config {
    fn point(&self, eps: f64) -> DesignPoint {
        DesignPoint {
            platform: self.platform,
            task: self.task,
            hi: self.hi as f64,
            e: self.e as f64,
            n: self.n as f64,
            eps,
        }
    }
}

/// All 288 configurations in `(a, h, hi, e, N)` lexicographic order.
pub fn design_space() -> Vec<Config> {
    let mut out = Vec::with_capacity(288);
    for platform in PLATFORMS {
        for task in TASKS {
            for hi in HIDDEN_SIZES {
                for e in EPOCHS {
                    for n in SEQ_LENGTHS {
                        out.push(Config {
                            platform,
                            task,
                            hi,
                            e,
                            n,
                        });
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub error: f64,
    pub time: f64,
    pub power: f64,
    pub memory: f64,
}

impl Prediction {
    /// Names of physical quantities predicted at or below zero.
    pub fn nonpositive(&self) -> Vec<&'static str> {
        [("time", self.time), ("power", self.power), ("memory", self.memory)]
            .iter()
            .filter(|(_, v)| *v <= 0.0)
            .map(|(n, _)| *n)
            .collect()
    }
}

/// Quantity minimised by the selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Criterion {
    /// `γ P + (1 - γ) M`.
    Weighted(f64),
    Error,
    Time,
}

impl Criterion {
    fn value(self, p: &Prediction) -> f64 {
        match self {
            Criterion::Weighted(g) => g * p.power + (1.0 - g) * p.memory,
            Criterion::Error => p.error,
            Criterion::Time => p.time,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub config: Config,
    pub prediction: Prediction,
    /// Value of the minimised criterion.
    pub objective: f64,
    pub feasible: bool,
    pub error_ok: bool,
    pub time_ok: bool,
    /// Sum of positive constraint violations (0 when feasible).
    pub violation: f64,
    pub candidates: usize,
    pub refined_eps: Option<f64>,
    /// Unit of the power term.
    pub power_unit: String,
}

fn violation(p: &Prediction, eps_max: f64, r: f64) -> f64 {
    (p.error - eps_max).max(0.0) + (p.time - r).max(0.0)
}

/// Tie-break order among equal objectives.
fn better(a: (f64, &Prediction, Config), b: (f64, &Prediction, Config)) -> bool {
    a.0.total_cmp(&b.0)
        .then(a.1.error.total_cmp(&b.1.error))
        .then(a.1.time.total_cmp(&b.1.time))
        .then(a.2.cmp(&b.2))
        == Ordering::Less
}

/// Minimises `γ P + (1 - γ) M` over the design space subject to
/// `error < eps_max` and `time < r`.
pub fn enumerate_select(s: &Surrogates, gamma: f64, eps_max: f64, r: f64) -> Result<SelectionResult> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(domain("gamma must lie in [0, 1]"));
    }
    enumerate_select_by(s, Criterion::Weighted(gamma), eps_max, r)
}

/// As [`enumerate_select`] with an arbitrary criterion.
pub fn enumerate_select_by(s: &Surrogates, criterion: Criterion, eps_max: f64, r: f64) -> Result<SelectionResult> {
    if eps_max.is_nan() || r.is_nan() {
        return Err(domain("constraint bounds must not be NaN"));
    }
    let space = design_space();
    let mut best: Option<(f64, Prediction, Config)> = None;
    let mut least_bad: Option<(f64, f64, Prediction, Config)> = None;
    for &cfg in &space {
        let p = s.evaluate(cfg, None)?;
        let obj = criterion.value(&p);
        if p.error < eps_max && p.time < r {
            if best.as_ref().is_none_or(|b| better((obj, &p, cfg), (b.0, &b.1, b.2))) {
                best = Some((obj, p, cfg));
            }
        } else {
            let v = violation(&p, eps_max, r);
            let replace = match &least_bad {
                None => true,
                Some(lb) => match v.total_cmp(&lb.0) {
                    Ordering::Less => true,
                    Ordering::Equal => better((obj, &p, cfg), (lb.1, &lb.2, lb.3)),
                    Ordering::Greater => false,
                },
            };
            if replace {
                least_bad = Some((v, obj, p, cfg));
            }
        }
    }
    let power_unit = s.power.target.clone();
    let (objective, prediction, config, feasible) = match best {
        Some((o, p, c)) => (o, p, c, true),
        None => {
            let (_, o, p, c) = least_bad.expect("design space is not empty");
            (o, p, c, false)
        }
    };
    Ok(SelectionResult {
        config,
        objective,
        feasible,
        error_ok: prediction.error < eps_max,
        time_ok: prediction.time < r,
        violation: violation(&prediction, eps_max, r),
        prediction,
        candidates: space.len(),
        refined_eps: None,
        power_unit,
    })
}

/// Minimises the selection's objective over the error budget on `[lo, hi]`
/// with the discrete configuration fixed, and records the result.
pub fn refine_selection(s: &Surrogates, sel: &mut SelectionResult, gamma: f64, lo: f64, hi: f64) -> Result<f64> {
    let cfg = sel.config;
    let f = |eps: f64| {
        s.evaluate(cfg, Some(eps))
            .map(|p| Criterion::Weighted(gamma).value(&p))
            .unwrap_or(f64::NAN)
    };
    let eps = refine_continuous(f, lo, hi)?;
    sel.refined_eps = Some(eps);
    Ok(eps)
}

/// Bounded one-dimensional quasi-Newton descent from the interval midpoint.
///
/// Gradients come from central differences; the curvature estimate is the
/// secant of successive gradients. Steps are projected onto the bounds and
/// accepted under an Armijo condition. Stops when the projected gradient is
/// at most 1e-6; otherwise returns the best point seen, bounds included.
pub fn refine_continuous<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64) -> Result<f64> {
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(domain("bounds must be finite with lo <= hi"));
    }
    let eval = |x: f64| {
        let v = f(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(x))
        }
    };
    if lo == hi {
        eval(lo)?;
        return Ok(lo);
    }
    let grad = |x: f64| -> Result<f64> {
        let h = 1e-6 * x.abs().max(1.0);
        let a = (x - h).max(lo);
        let b = (x + h).min(hi);
        Ok((eval(b)? - eval(a)?) / (b - a))
    };
    let projected = |x: f64, g: f64| {
        if (x <= lo && g > 0.0) || (x >= hi && g < 0.0) {
            0.0
        } else {
            g
        }
    };
    let mut x = 0.5 * (lo + hi);
    let mut fx = eval(x)?;
    let mut g = grad(x)?;
    let mut curvature: Option<f64> = None;
    for _ in 0..200 {
        if projected(x, g).abs() <= 1e-6 {
            return Ok(x);
        }
        let dir = match curvature {
            Some(c) if c > 0.0 => -g / c,
            _ => -g.signum() * (hi - lo),
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = (x + t * dir).clamp(lo, hi);
            let fxn = eval(xn)?;
            if fxn <= fx + 1e-4 * g * (xn - x) {
                accepted = Some((xn, fxn));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fxn)) = accepted else { break };
        if xn == x {
            break;
        }
        let gn = grad(xn)?;
        let s = xn - x;
        let y = gn - g;
        curvature = if s * y > 0.0 { Some(y / s) } else { None };
        x = xn;
        fx = fxn;
        g = gn;
    }
    let mut best = (fx, x);
    for b in [lo, hi] {
        let fb = eval(b)?;
        if fb < best.0 {
            best = (fb, b);
        }
    }
    Ok(best.1)
}

/// Coefficients of the reference DRAM regression for the ML + PG task,
/// as `(e, N, hi, eps, bias)`.
pub const DRAM_REGRESSION: [f64; 5] = [4.7316, -194.3639, 39.4598, -2.4789, 503.8408];

/// The reference DRAM regression as a surrogate over raw `(hi, e, N, eps)`.
pub fn dram_regression() -> SurrogateModel {
    let [ce, cn, chi, ceps, bias] = DRAM_REGRESSION;
    SurrogateModel {
        features: Some(FeatureSpec {
            degree: 1,
            center: None,
            scale: [1.0, 1.0, 1.0],
            eps_scale: Some(1.0),
            categorical: false,
        }),
        bias,
        weights: vec![chi, ce, cn, ceps],
        lambda: 0.0,
        target: Target::Memory.name().into(),
    }
}
