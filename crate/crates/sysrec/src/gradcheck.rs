//! Gradient-check cases runnable from a config file.

use serde::{Deserialize, Serialize};

use sysrec_core::bench::{generate, BenchmarkSpec, System};
use sysrec_core::net::{grad_check, init_params, BatchTensor, DenseProbe, GradCheckReport, NetShape, OutputProbe};
use sysrec_core::train::{make_batches, Pipeline, PipelineObjective, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradCase {
    /// GRU, dense head, dropout, RK4 and the window loss on benchmark data.
    Pipeline,
    /// One GRU step with a single input channel pair.
    SingleCell,
    /// Dense head alone under a linear probe.
    DenseOnly,
    /// Linear probe with zero weights: zero loss and zero gradient.
    Zero,
}

/// Grad-check request. Omitted fields take the case defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub case: GradCase,
    pub system: String,
    pub hidden: usize,
    pub window: usize,
    /// Samples between restarts; 0 means the whole window.
    pub segment: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub delta: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self::for_case(GradCase::Pipeline)
    }
}

impl GradcheckConfig {
    pub fn for_case(case: GradCase) -> Self {
        let tolerance = match case {
            GradCase::Pipeline => 1e-4,
            GradCase::SingleCell => 1e-5,
            GradCase::DenseOnly => 1e-6,
            GradCase::Zero => 0.0,
        };
        Self {
            case,
            system: System::LotkaVolterra.name().into(),
            hidden: 8,
            window: 20,
            segment: 0,
            batch_size: 4,
            tau: 0.001,
            delta: 1e-6,
            tolerance,
            seed: 0,
        }
    }
}

/// Partial config as read from disk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckFile {
    pub case: Option<GradCase>,
    pub system: Option<String>,
    pub hidden: Option<usize>,
    pub window: Option<usize>,
    pub segment: Option<usize>,
    pub batch_size: Option<usize>,
    pub tau: Option<f64>,
    pub delta: Option<f64>,
    pub tolerance: Option<f64>,
    pub seed: Option<u64>,
}

impl GradcheckFile {
    pub fn resolve(&self) -> GradcheckConfig {
        let mut c = GradcheckConfig::for_case(self.case.unwrap_or(GradCase::Pipeline));
        macro_rules! take {
            ($($f:ident),*) => { $(if let Some(v) = &self.$f { c.$f = v.clone(); })* };
        }
        take!(system, hidden, window, segment, batch_size, tau, delta, tolerance, seed);
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOutcome {
    pub report: GradCheckReport,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> sysrec_core::Result<GradcheckOutcome> {
    let report = match cfg.case {
        GradCase::Pipeline => {
            let system: System = cfg.system.parse()?;
            let ds = generate(&BenchmarkSpec::default_for(system))?;
            let train = TrainConfig {
                hidden: cfg.hidden,
                window: cfg.window,
                tau: cfg.tau,
                batch_size: cfg.batch_size,
                ..system.train_config()
            };
            train.validate(ds.len())?;
            let pipeline = Pipeline::new(&ds, &train)?;
            let starts = make_batches(&ds, cfg.batch_size, cfg.window, cfg.seed)?[0]
                .starts
                .clone();
            let params = init_params(pipeline.shape(), cfg.tau, cfg.seed)?;
            let segment = if cfg.segment == 0 { cfg.window - 1 } else { cfg.segment };
            let objective = PipelineObjective {
                pipeline,
                starts,
                segment,
                tau: cfg.tau,
            };
            grad_check(&params, &objective, cfg.delta)
        }
        GradCase::SingleCell => {
            let shape = NetShape::new(1, 1, 2, 2, 1).with_dense_hidden(3);
            let params = init_params(shape, 0.0, cfg.seed)?;
            let probe = OutputProbe {
                batch: BatchTensor::new(1, 2, 1, vec![0.7, -0.4])?,
                target: vec![0.3, -0.2, 0.9],
            };
            grad_check(&params, &probe, cfg.delta)
        }
        GradCase::DenseOnly => {
            let shape = NetShape::new(1, 1, 4, 2, 1).with_dense_hidden(4);
            let params = init_params(shape, 0.0, cfg.seed)?;
            let probe = DenseProbe {
                hidden: vec![0.3, -0.8, 0.5, 0.1],
                weights: vec![1.0, -2.0, 0.5],
            };
            grad_check(&params, &probe, cfg.delta)
        }
        GradCase::Zero => {
            let shape = NetShape::new(1, 0, 2, 1, 0).with_dense_hidden(2);
            let params = init_params(shape, 0.0, cfg.seed)?;
            let probe = DenseProbe {
                hidden: vec![0.5, 0.5],
                weights: vec![0.0],
            };
            grad_check(&params, &probe, cfg.delta)
        }
    };
    let passed = report.max_rel_error <= cfg.tolerance;
    Ok(GradcheckOutcome {
        report,
        tolerance: cfg.tolerance,
        passed,
    })
}
