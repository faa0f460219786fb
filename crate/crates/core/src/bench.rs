//! Ground-truth benchmark systems and synthetic data generation.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{domain, Error, Result};
use crate::library::{lorenz_reference, lotka_volterra_reference, SparseOdeModel};
use crate::ode::Trajectory;
use crate::train::{simulate, TrainConfig, FINE_SUBSTEPS};

/// Benchmark systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum System {
    LotkaVolterra,
    Lorenz,
    F8Cruiser,
    Pathogen,
}

impl System {
    pub const ALL: [System; 4] = [
        System::LotkaVolterra,
        System::Lorenz,
        System::F8Cruiser,
        System::Pathogen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            System::LotkaVolterra => "lotka_volterra",
            System::Lorenz => "lorenz",
            System::F8Cruiser => "f8_cruiser",
            System::Pathogen => "pathogen",
        }
    }

    pub fn n_states(self) -> usize {
        match self {
            System::LotkaVolterra => 2,
            System::Lorenz | System::F8Cruiser => 3,
            System::Pathogen => 4,
        }
    }

    pub fn n_inputs(self) -> usize {
        match self {
            System::LotkaVolterra | System::F8Cruiser => 1,
            System::Lorenz => 0,
            System::Pathogen => 4,
        }
    }

    /// Ground truth in library form, where one exists.
    pub fn sparse_model(self) -> Option<SparseOdeModel> {
        match self {
            System::LotkaVolterra => Some(lotka_volterra_reference()),
            System::Lorenz => Some(lorenz_reference()),
            System::F8Cruiser | System::Pathogen => None,
        }
    }

    /// Training configuration tuned for the system's default dataset.
    ///
    /// Lorenz trajectories separate quickly, so it trains on one-step
    /// segments only, over shorter and sparser windows.
    pub fn train_config(self) -> TrainConfig {
        match self {
            System::Lorenz => TrainConfig {
                window: 40,
                stride: 20,
                segment_start: 1.0,
                segment_full: 1.0,
                ..TrainConfig::default()
            },
            System::F8Cruiser => TrainConfig {
                order: 3,
                ..TrainConfig::default()
            },
            _ => TrainConfig::default(),
        }
    }

    /// Right-hand side of the ground-truth dynamics.
    pub fn rhs(self, x: &[f64], u: &[f64], out: &mut [f64]) {
        match self {
            System::LotkaVolterra => {
                out[0] = 0.52 * x[0] - 0.026 * x[0] * x[1];
                out[1] = 0.999 * u[0] - 0.501 * x[1] + 0.005 * x[0] * x[1];
            }
            System::Lorenz => {
                let (s, r, b) = (10.0, 28.0, 8.0 / 3.0);
                out[0] = s * (x[1] - x[0]);
                out[1] = x[0] * (r - x[2]) - x[1];
                out[2] = x[0] * x[1] - b * x[2];
            }
            System::F8Cruiser => {
                // angle of attack, pitch angle, pitch rate; u = elevator deflection
                let (a, q, d) = (x[0], x[2], u[0]);
                out[0] = -0.877 * a + q - 0.088 * a * q + 0.47 * a * a - 0.019 * x[1] * x[1] - a * a * q
                    + 3.846 * a * a * a
                    - 0.215 * d
                    + 0.28 * a * a * d
                    + 0.47 * a * d * d
                    + 0.63 * d * d * d;
                out[1] = q;
                out[2] = -4.208 * a - 0.396 * q - 0.47 * a * a - 3.564 * a * a * a - 20.967 * d
                    + 6.265 * a * a * d
                    + 46.0 * a * d * d
                    + 61.4 * d * d * d;
            }
            System::Pathogen => {
                // pathogen, plasma cells, antibodies, organ health
                let a21 = if (0.0..=0.5).contains(&x[3]) {
                    libm::cos(core::f64::consts::PI * x[3])
                } else {
                    0.0
                };
                out[0] = (1.0 - x[2]) * x[0] + u[0];
                out[1] = 3.0 * a21 * x[0] * x[2] - (x[1] - 2.0) + u[1];
                out[2] = x[1] - (1.5 + 0.5 * x[0]) * x[2] + u[2];
                out[3] = x[0] - x[3] + u[3];
            }
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|sys| sys.name() == s.replace('-', "_"))
            .ok_or_else(|| {
                let names: Vec<&str> = System::ALL.iter().map(|sys| sys.name()).collect();
                domain(alloc::format!(
                    "unknown system '{s}' (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

/// Input signal, sampled on the data grid and held between samples.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSignal {
    /// Same value on every channel row.
    Constant(Vec<f64>),
    /// `offset + amplitude * sin(2 pi frequency t)` on every channel.
    Sine {
        amplitude: f64,
        frequency: f64,
        offset: f64,
    },
}

impl InputSignal {
    fn sample(&self, t: f64, m: usize) -> Result<Vec<f64>> {
        match self {
            InputSignal::Constant(v) => {
                if v.len() != m {
                    return Err(domain(alloc::format!(
                        "input signal has {} channels, system needs {m}",
                        v.len()
                    )));
                }
                Ok(v.clone())
            }
            InputSignal::Sine {
                amplitude,
                frequency,
                offset,
            } => Ok(vec![
                offset
                    + amplitude
                        * libm::sin(2.0 * core::f64::consts::PI * frequency * t);
                m
            ]),
        }
    }
}

/// Everything needed to regenerate a benchmark dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub system: System,
    pub initial_state: Vec<f64>,
    pub input: InputSignal,
    /// Seconds.
    pub duration: f64,
    /// Samples per second.
    pub rate: f64,
    /// Standard deviation of additive Gaussian noise on the states.
    pub noise: f64,
    pub seed: u64,
    /// Solver steps per sample interval; at least 100.
    pub substeps: usize,
}

impl BenchmarkSpec {
    /// Canonical settings for each system: LV at 1 Hz from (30, 4) with u = 1;
    /// Lorenz at 20 Hz from (-8, 7, 27); F8 at 10 Hz from a 0.1 rad angle of
    /// attack with a small sinusoidal elevator; pathogen at 10 Hz from
    /// (1.5, 2, 4/3, 0) without control. All run for 200 s.
    pub fn default_for(system: System) -> Self {
        let (x0, input, rate) = match system {
            System::LotkaVolterra => (vec![30.0, 4.0], InputSignal::Constant(vec![1.0]), 1.0),
            System::Lorenz => (vec![-8.0, 7.0, 27.0], InputSignal::Constant(vec![]), 20.0),
            System::F8Cruiser => (
                vec![0.1, 0.0, 0.0],
                InputSignal::Sine {
                    amplitude: 0.02,
                    frequency: 0.05,
                    offset: 0.0,
                },
                10.0,
            ),
            System::Pathogen => (
                vec![1.5, 2.0, 4.0 / 3.0, 0.0],
                InputSignal::Constant(vec![0.0; 4]),
                10.0,
            ),
        };
        Self {
            system,
            initial_state: x0,
            input,
            duration: 200.0,
            rate,
            noise: 0.0,
            seed: 0,
            substeps: FINE_SUBSTEPS,
        }
    }

    /// Number of samples including the initial one.
    pub fn samples(&self) -> Result<usize> {
        let n = self.duration * self.rate;
        let r = libm::round(n);
        if !(self.duration > 0.0 && self.rate > 0.0) || (n - r).abs() > 1e-9 * n.max(1.0) {
            return Err(domain("duration x rate must be a positive whole number"));
        }
        Ok(r as usize + 1)
    }

    pub fn validate(&self) -> Result<()> {
        self.samples()?;
        if self.initial_state.len() != self.system.n_states() {
            return Err(domain(alloc::format!(
                "{} needs {} initial states, got {}",
                self.system,
                self.system.n_states(),
                self.initial_state.len()
            )));
        }
        if self.substeps < 100 {
            return Err(domain("generation needs at least 100 solver steps per sample"));
        }
        if !(self.noise >= 0.0) {
            return Err(domain("noise level must be non-negative"));
        }
        self.input.sample(0.0, self.system.n_inputs())?;
        Ok(())
    }
}

/// Integrates the spec's system and samples it on the spec's grid.
pub fn generate(spec: &BenchmarkSpec) -> Result<Trajectory> {
    spec.validate()?;
    let samples = spec.samples()?;
    let n = spec.system.n_states();
    let m = spec.system.n_inputs();
    let dt = 1.0 / spec.rate;
    let mut inputs = Vec::with_capacity(samples * m);
    for i in 0..samples {
        inputs.extend(spec.input.sample(i as f64 * dt, m)?);
    }
    let mut traj = match spec.system.sparse_model() {
        Some(model) => {
            let (traj, diverged) = simulate(&model, &spec.initial_state, &inputs, 0.0, dt, samples, spec.substeps)?;
            if let Some(i) = diverged {
                return Err(Error::GenerationDiverged { time: i as f64 * dt });
            }
            traj
        }
        None => integrate_closed_form(spec.system, &spec.initial_state, &inputs, dt, samples, spec.substeps)?,
    };
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|e| domain(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for v in traj.states_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    debug_assert_eq!(traj.n_states(), n);
    Ok(traj)
}

fn integrate_closed_form(
    system: System,
    x0: &[f64],
    inputs: &[f64],
    dt: f64,
    samples: usize,
    substeps: usize,
) -> Result<Trajectory> {
    let n = x0.len();
    let m = system.n_inputs();
    let h = dt / substeps as f64;
    let mut states = Vec::with_capacity(samples * n);
    states.extend_from_slice(x0);
    let mut x = x0.to_vec();
    let mut k = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut tmp = vec![0.0; n];
    for i in 0..samples - 1 {
        let u = &inputs[i * m..(i + 1) * m];
        for _ in 0..substeps {
            let [k1, k2, k3, k4] = &mut k;
            system.rhs(&x, u, k1);
            for j in 0..n {
                tmp[j] = x[j] + 0.5 * h * k1[j];
            }
            system.rhs(&tmp, u, k2);
            for j in 0..n {
                tmp[j] = x[j] + 0.5 * h * k2[j];
            }
            system.rhs(&tmp, u, k3);
            for j in 0..n {
                tmp[j] = x[j] + h * k3[j];
            }
            system.rhs(&tmp, u, k4);
            for j in 0..n {
                x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::GenerationDiverged {
                time: (i + 1) as f64 * dt,
            });
        }
        states.extend_from_slice(&x);
    }
    Trajectory::new(0.0, dt, n, m, states, inputs.to_vec())
}

/// Human-readable description of the ground truth.
pub fn describe(system: System) -> String {
    match system.sparse_model() {
        Some(m) => alloc::format!("{m}"),
        None => match system {
            System::F8Cruiser => "F8 crusader longitudinal dynamics (cubic in angle of attack and elevator)".into(),
            _ => "pathogen / immune response with cosine organ-health coupling".into(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predator_prey_dataset() {
        let ds = generate(&BenchmarkSpec::default_for(System::LotkaVolterra)).unwrap();
        assert_eq!(ds.len(), 201);
        assert!(ds.states().iter().all(|&v| v > 0.0));
        assert_eq!(ds.state(0), &[30.0, 4.0]);
    }

    #[test]
    fn lorenz_stays_on_attractor() {
        let ds = generate(&BenchmarkSpec::default_for(System::Lorenz)).unwrap();
        assert_eq!(ds.len(), 4001);
        let max = ds.states().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max < 60.0, "{max}");
    }

    #[test]
    fn closed_form_systems_generate() {
        for sys in [System::F8Cruiser, System::Pathogen] {
            let ds = generate(&BenchmarkSpec::default_for(sys)).unwrap();
            assert_eq!(ds.len(), 2001);
            assert!(ds.states().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn closed_form_matches_library_form() {
        let model = lotka_volterra_reference();
        let mut a = [0.0; 2];
        System::LotkaVolterra.rhs(&[10.0, 5.0], &[1.0], &mut a);
        let b = model.rhs(&[10.0, 5.0], &[1.0]).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    }

    #[test]
    fn noise_is_seeded_and_bounded() {
        let mut spec = BenchmarkSpec::default_for(System::LotkaVolterra);
        let clean = generate(&spec).unwrap();
        assert_eq!(clean, generate(&spec).unwrap());
        spec.noise = 0.5;
        spec.seed = 3;
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        for (x, y) in a.states().iter().zip(clean.states()) {
            assert!((x - y).abs() <= 6.0 * 0.5);
        }
        assert_ne!(a, clean);
    }

    #[test]
    fn finer_generation_agrees() {
        let mut spec = BenchmarkSpec::default_for(System::LotkaVolterra);
        let coarse = generate(&spec).unwrap();
        spec.substeps = 1000;
        let fine = generate(&spec).unwrap();
        for (a, b) in coarse.states().iter().zip(fine.states()) {
            assert!((a - b).abs() <= 1e-6 * b.abs());
        }
    }

    #[test]
    fn unstable_truth_reports_time() {
        let mut spec = BenchmarkSpec::default_for(System::Pathogen);
        spec.input = InputSignal::Constant(vec![0.0, 0.0, -50.0, 0.0]);
        spec.initial_state = vec![5.0, 2.0, -10.0, 0.0];
        match generate(&spec) {
            Err(Error::GenerationDiverged { time }) => assert!(time > 0.0 && time <= 200.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = BenchmarkSpec::default_for(System::Lorenz);
        spec.initial_state.pop();
        assert!(generate(&spec).is_err());
        let mut spec = BenchmarkSpec::default_for(System::Lorenz);
        spec.rate = 0.3;
        spec.duration = 1.0;
        assert!(generate(&spec).is_err());
        assert_eq!("lorenz".parse::<System>().unwrap(), System::Lorenz);
        assert!("duffing".parse::<System>().is_err());
    }
}
