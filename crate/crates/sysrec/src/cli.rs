//! Command-line front end. Each command resolves its arguments into an
//! [`Invocation`] that holds every setting it needs, executes it, and writes
//! a [`RunManifest`]. Re-running a manifest executes the stored invocation.
//!
//! Precedence for settings: command-line flags, then the config file, then
//! the built-in defaults (or the named preset).

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use sysrec_core::bench::{describe, generate, System};
use sysrec_core::select::{enumerate_select_by, refine_selection, Criterion, MeasurementTable, Surrogates};
use sysrec_core::train::{evaluate_with, train_with, Serial, SupportReport, FINE_SUBSTEPS};
use sysrec_core::SparseOdeModel;

use crate::exec::{ProgressLog, Rayon};
use crate::gradcheck::{run_gradcheck, GradCase, GradcheckConfig, GradcheckFile};
use crate::io::{self, BenchmarkSpecFile, TrainConfigFile};
use crate::manifest::{manifest_path, RunManifest};
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "sysrec", version, about = "Sparse ODE model recovery with a GRU neural flow")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed overriding the one in the spec or config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for training (1 runs everything on the calling thread).
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Output file (generate) or directory (other commands).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a benchmark dataset as CSV.
    Generate {
        /// Benchmark spec (TOML).
        #[arg(long, conflicts_with = "system")]
        spec: Option<PathBuf>,
        /// Use the built-in spec of this system.
        #[arg(long)]
        system: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Recover a sparse model from a dataset.
    Recover {
        /// Dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// Training config (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from the tuned configuration of this system.
        #[arg(long)]
        preset: Option<String>,
        /// Reference model for support comparison: a system name or a model file.
        #[arg(long)]
        truth: Option<String>,
        /// Training epochs
        #[arg(long)]
        epochs: Option<usize>,
        /// GRU hidden size V
        #[arg(long)]
        hidden: Option<usize>,
        /// Window length k in samples
        #[arg(long)]
        window: Option<usize>,
        /// Dropout threshold
        #[arg(long)]
        tau: Option<f64>,
        /// Echo per-epoch progress to stderr.
        #[arg(long)]
        verbose: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Re-solve a model over a dataset and report the reconstruction error.
    Eval {
        /// Model file (TOML).
        #[arg(long)]
        model: PathBuf,
        /// Dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// Reference model for support comparison: a system name or a model file.
        #[arg(long)]
        truth: Option<String>,
        /// RK4 steps per sample interval.
        #[arg(long, default_value_t = FINE_SUBSTEPS)]
        substeps: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Choose platform, task and hyperparameters from fitted surrogates.
    Select {
        /// Measurement CSV; the bundled table when omitted.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Selection query (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Weight of power against memory in the objective, in [0, 1].
        #[arg(long, value_parser = unit_interval)]
        gamma: Option<f64>,
        /// Error budget (strict upper bound on predicted error).
        #[arg(long, allow_hyphen_values = true)]
        eps_max: Option<f64>,
        /// Time limit in seconds (strict upper bound on predicted time).
        #[arg(long, allow_hyphen_values = true)]
        time_limit: Option<f64>,
        /// Ridge strength.
        #[arg(long)]
        lambda: Option<f64>,
        /// Polynomial degree of the surrogates.
        #[arg(long)]
        degree: Option<u32>,
        /// Objective: the gamma-weighted power/memory mix, or predicted error or time alone
        #[arg(long, value_enum)]
        criterion: Option<CriterionArg>,
        /// Refine the error budget on [lo, hi] at the chosen configuration.
        #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_hyphen_values = true)]
        refine: Option<Vec<f64>>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Grad-check config (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Case to check; overrides the config file
        #[arg(long, value_enum)]
        case: Option<GradCaseArg>,
        #[command(flatten)]
        common: Common,
    },
    /// Re-execute the invocation stored in a manifest.
    Rerun {
        manifest: PathBuf,
        /// Write outputs here instead of the original location.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn unit_interval(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionArg {
    /// gamma * power + (1 - gamma) * memory
    Weighted,
    /// Predicted error
    Error,
    /// Predicted training time
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradCaseArg {
    Pipeline,
    SingleCell,
    DenseOnly,
    Zero,
}

impl From<GradCaseArg> for GradCase {
    fn from(c: GradCaseArg) -> Self {
        match c {
            GradCaseArg::Pipeline => GradCase::Pipeline,
            GradCaseArg::SingleCell => GradCase::SingleCell,
            GradCaseArg::DenseOnly => GradCase::DenseOnly,
            GradCaseArg::Zero => GradCase::Zero,
        }
    }
}

/// Fully resolved selection query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectQuery {
    pub gamma: f64,
    /// Unbounded when absent.
    pub eps_max: Option<f64>,
    /// Unbounded when absent.
    pub time_limit: Option<f64>,
    pub lambda: f64,
    pub degree: u32,
    pub criterion: CriterionArg,
    pub refine: Option<[f64; 2]>,
}

impl Default for SelectQuery {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            eps_max: None,
            time_limit: None,
            lambda: 1.0,
            degree: 3,
            criterion: CriterionArg::Weighted,
            refine: None,
        }
    }
}

/// Selection query as read from disk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectFile {
    pub gamma: Option<f64>,
    pub eps_max: Option<f64>,
    pub time_limit: Option<f64>,
    pub lambda: Option<f64>,
    pub degree: Option<u32>,
    pub criterion: Option<CriterionArg>,
    pub refine: Option<[f64; 2]>,
}

/// Everything a command needs, with files already parsed into settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
// One value per process, so the variant size spread is irrelevant.
#[allow(clippy::large_enum_variant)]
pub enum Invocation {
    Generate {
        spec: BenchmarkSpecFile,
        out: PathBuf,
    },
    Recover {
        data: PathBuf,
        config: TrainConfigFile,
        truth: Option<String>,
        threads: usize,
        verbose: bool,
        out: PathBuf,
    },
    Eval {
        model: PathBuf,
        data: PathBuf,
        truth: Option<String>,
        substeps: usize,
        out: PathBuf,
    },
    Select {
        table: Option<PathBuf>,
        query: SelectQuery,
        out: PathBuf,
    },
    Gradcheck {
        config: GradcheckConfig,
        out: PathBuf,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Generate { .. } => "generate",
            Invocation::Recover { .. } => "recover",
            Invocation::Eval { .. } => "eval",
            Invocation::Select { .. } => "select",
            Invocation::Gradcheck { .. } => "gradcheck",
        }
    }

    pub fn out(&self) -> &Path {
        match self {
            Invocation::Generate { out, .. }
            | Invocation::Recover { out, .. }
            | Invocation::Eval { out, .. }
            | Invocation::Select { out, .. }
            | Invocation::Gradcheck { out, .. } => out,
        }
    }

    pub fn set_out(&mut self, path: PathBuf) {
        match self {
            Invocation::Generate { out, .. }
            | Invocation::Recover { out, .. }
            | Invocation::Eval { out, .. }
            | Invocation::Select { out, .. }
            | Invocation::Gradcheck { out, .. } => *out = path,
        }
    }

    /// Seed in effect, if the command uses one.
    pub fn seed(&self) -> Option<u64> {
        match self {
            Invocation::Generate { spec, .. } => spec.seed,
            Invocation::Recover { config, .. } => config.seed,
            Invocation::Gradcheck { config, .. } => Some(config.seed),
            Invocation::Eval { .. } | Invocation::Select { .. } => None,
        }
    }

    pub fn threads(&self) -> usize {
        match self {
            Invocation::Recover { threads, .. } => *threads,
            _ => 1,
        }
    }
}

/// Result of executing an invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// False when the command completed but a validation failed.
    pub ok: bool,
    /// Human-readable summary printed to stdout.
    pub summary: String,
}

fn truth_model(spec: &Option<String>) -> Result<Option<SparseOdeModel>> {
    let Some(s) = spec else { return Ok(None) };
    if let Ok(system) = s.parse::<System>() {
        return system
            .sparse_model()
            .map(Some)
            .ok_or_else(|| anyhow!("{system} has no polynomial reference model"));
    }
    Ok(Some(io::load_model(Path::new(s))?))
}

/// Parses the command line into an invocation (or a manifest re-run).
pub fn resolve(command: Command) -> Result<Invocation> {
    Ok(match command {
        Command::Generate { spec, system, common } => {
            let mut file = match (spec, system) {
                (Some(p), _) => {
                    let resolved = io::load_benchmark_spec(&p)?;
                    BenchmarkSpecFile::from_spec(&resolved)
                }
                (None, Some(name)) => {
                    let system: System = name.parse()?;
                    BenchmarkSpecFile::from_spec(&sysrec_core::bench::BenchmarkSpec::default_for(system))
                }
                (None, None) => bail!("generate needs --spec or --system"),
            };
            if let Some(seed) = common.seed {
                file.seed = Some(seed);
            }
            Invocation::Generate {
                spec: file,
                out: common.out,
            }
        }
        Command::Recover {
            data,
            config,
            preset,
            truth,
            epochs,
            hidden,
            window,
            tau,
            verbose,
            common,
        } => {
            let mut file = match &config {
                Some(p) => io::load_train_config(p)?,
                None => TrainConfigFile::default(),
            };
            if preset.is_some() {
                file.preset = preset;
            }
            let mut cfg = file.resolve()?;
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = hidden {
                cfg.hidden = v;
            }
            if let Some(v) = window {
                cfg.window = v;
            }
            if let Some(v) = tau {
                cfg.tau = v;
            }
            if let Some(v) = common.seed {
                cfg.seed = v;
            }
            Invocation::Recover {
                data,
                config: TrainConfigFile::from_config(&cfg),
                truth,
                threads: common.threads,
                verbose,
                out: common.out,
            }
        }
        Command::Eval {
            model,
            data,
            truth,
            substeps,
            common,
        } => Invocation::Eval {
            model,
            data,
            truth,
            substeps,
            out: common.out,
        },
        Command::Select {
            table,
            config,
            gamma,
            eps_max,
            time_limit,
            lambda,
            degree,
            criterion,
            refine,
            common,
        } => {
            let file: SelectFile = match &config {
                Some(p) => toml::from_str(&io::read_text(p)?).with_context(|| format!("{}", p.display()))?,
                None => SelectFile::default(),
            };
            let d = SelectQuery::default();
            let query = SelectQuery {
                gamma: gamma.or(file.gamma).unwrap_or(d.gamma),
                eps_max: eps_max.or(file.eps_max),
                time_limit: time_limit.or(file.time_limit),
                lambda: lambda.or(file.lambda).unwrap_or(d.lambda),
                degree: degree.or(file.degree).unwrap_or(d.degree),
                criterion: criterion.or(file.criterion).unwrap_or(d.criterion),
                refine: refine.map(|v| [v[0], v[1]]).or(file.refine),
            };
            unit_interval(&query.gamma.to_string()).map_err(|e| anyhow!("gamma: {e}"))?;
            Invocation::Select {
                table,
                query,
                out: common.out,
            }
        }
        Command::Gradcheck { config, case, common } => {
            let mut file = match &config {
                Some(p) => {
                    toml::from_str::<GradcheckFile>(&io::read_text(p)?).with_context(|| format!("{}", p.display()))?
                }
                None => GradcheckFile::default(),
            };
            if let Some(c) = case {
                file.case = Some(c.into());
            }
            if let Some(s) = common.seed {
                file.seed = Some(s);
            }
            Invocation::Gradcheck {
                config: file.resolve(),
                out: common.out,
            }
        }
        Command::Rerun { .. } => bail!("rerun is resolved from its manifest"),
    })
}

fn write(outputs: &mut Vec<PathBuf>, path: PathBuf, text: &str) -> Result<()> {
    io::write_text(&path, text)?;
    outputs.push(path);
    Ok(())
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serialises");
    s.push('\n');
    s
}

/// Runs an invocation, writing its outputs.
pub fn execute(inv: &Invocation) -> Result<Outcome> {
    let mut outputs = Vec::new();
    match inv {
        Invocation::Generate { spec, out } => {
            let spec = spec.resolve()?;
            let traj = generate(&spec)?;
            io::save_csv(out, &traj)?;
            outputs.push(out.clone());
            Ok(Outcome {
                inputs: vec![],
                outputs,
                ok: true,
                summary: format!(
                    "{}\nwrote {} samples to {}\n",
                    describe(spec.system),
                    traj.len(),
                    out.display()
                ),
            })
        }
        Invocation::Recover {
            data,
            config,
            truth,
            threads,
            verbose,
            out,
        } => {
            let ds = io::load_csv(data)?;
            let cfg = config.resolve()?;
            let truth = truth_model(truth)?;
            let mut log = ProgressLog::new(*verbose);
            let result = if *threads > 1 {
                let pool = Rayon::new(*threads)?;
                train_with(&ds, &cfg, truth.as_ref(), &pool, &mut log)
            } else {
                train_with(&ds, &cfg, truth.as_ref(), &Serial, &mut log)
            }
            .context("training failed")?;
            let text = report::recovery_report(&result, cfg.epochs, ds.len());
            write(
                &mut outputs,
                out.join("model.toml"),
                &io::model_to_string(&result.model),
            )?;
            write(&mut outputs, out.join("report.txt"), &text)?;
            write(
                &mut outputs,
                out.join("metrics.json"),
                &json(&report::RecoveryMetrics::new(&result)),
            )?;
            write(
                &mut outputs,
                out.join("loss.csv"),
                &report::loss_csv(&result.loss_history),
            )?;
            write(&mut outputs, out.join("progress.log"), &log.text())?;
            write(&mut outputs, out.join("config.toml"), &io::train_config_to_string(&cfg))?;
            io::save_params(&out.join("params.bin"), &result.params)?;
            outputs.push(out.join("params.bin"));
            write(
                &mut outputs,
                out.join("params.txt"),
                &io::params_summary(&result.params),
            )?;
            Ok(Outcome {
                inputs: vec![data.clone()],
                outputs,
                ok: true,
                summary: text,
            })
        }
        Invocation::Eval {
            model,
            data,
            truth,
            substeps,
            out,
        } => {
            let m = io::load_model(model)?;
            let ds = io::load_csv(data)?;
            let eval = evaluate_with(&m, &ds, *substeps)?;
            let support = truth_model(truth)?.map(|t| SupportReport::compare(&m, &t));
            let text = report::evaluation_report(&m, &eval, support.as_ref());
            #[derive(Serialize)]
            struct EvalRecord<'a> {
                mse: Option<f64>,
                diverged_at: Option<usize>,
                support: &'a [Vec<String>],
                exact_support: Option<bool>,
            }
            let record = EvalRecord {
                mse: eval.mse.is_finite().then_some(eval.mse),
                diverged_at: eval.diverged_at,
                support: &eval.support,
                exact_support: support.as_ref().map(SupportReport::exact),
            };
            write(&mut outputs, out.join("eval.txt"), &text)?;
            write(&mut outputs, out.join("eval.json"), &json(&record))?;
            Ok(Outcome {
                inputs: vec![model.clone(), data.clone()],
                outputs,
                ok: true,
                summary: text,
            })
        }
        Invocation::Select { table, query, out } => {
            let t = match table {
                Some(p) => io::load_measurements(p)?,
                None => MeasurementTable::bundled(),
            };
            let s = Surrogates::fit(&t, query.degree, query.lambda)?;
            let criterion = match query.criterion {
                CriterionArg::Weighted => Criterion::Weighted(query.gamma),
                CriterionArg::Error => Criterion::Error,
                CriterionArg::Time => Criterion::Time,
            };
            let mut sel = enumerate_select_by(
                &s,
                criterion,
                query.eps_max.unwrap_or(f64::INFINITY),
                query.time_limit.unwrap_or(f64::INFINITY),
            )?;
            if let Some([lo, hi]) = query.refine {
                refine_selection(&s, &mut sel, query.gamma, lo, hi)?;
            }
            let label = match criterion {
                Criterion::Weighted(g) => format!("{g} * power + {} * memory", 1.0 - g),
                Criterion::Error => "predicted error".into(),
                Criterion::Time => "predicted time".into(),
            };
            let text = report::selection_report(&sel, &label);
            write(&mut outputs, out.join("selection.txt"), &text)?;
            write(
                &mut outputs,
                out.join("selection.json"),
                &json(&report::SelectionRecord::new(&sel)),
            )?;
            Ok(Outcome {
                inputs: table.iter().cloned().collect(),
                outputs,
                ok: true,
                summary: text,
            })
        }
        Invocation::Gradcheck { config, out } => {
            let r = run_gradcheck(config)?;
            let text = format!(
                "gradcheck\ncase: {:?}\nparameters: {}\nmax relative error: {}\ntolerance: {}\nresult: {}\n",
                config.case,
                r.report.n_params,
                report::sig4(r.report.max_rel_error),
                report::sig4(r.tolerance),
                if r.passed { "pass" } else { "fail" }
            );
            #[derive(Serialize)]
            struct GradRecord {
                max_rel_error: f64,
                worst_index: Option<usize>,
                n_params: usize,
                tolerance: f64,
                passed: bool,
            }
            let record = GradRecord {
                max_rel_error: r.report.max_rel_error,
                worst_index: r.report.worst_index,
                n_params: r.report.n_params,
                tolerance: r.tolerance,
                passed: r.passed,
            };
            write(&mut outputs, out.join("gradcheck.txt"), &text)?;
            write(&mut outputs, out.join("gradcheck.json"), &json(&record))?;
            Ok(Outcome {
                inputs: vec![],
                outputs,
                ok: r.passed,
                summary: text,
            })
        }
    }
}

/// Executes an invocation and records it in a manifest, also on failure.
pub fn execute_and_record(inv: &Invocation) -> Result<Outcome> {
    let started = Instant::now();
    let result = execute(inv);
    let manifest = RunManifest::new(inv, &result, started.elapsed().as_secs_f64());
    let path = manifest_path(inv);
    let written = manifest.write(&path);
    let outcome = result?;
    written.with_context(|| format!("writing manifest {}", path.display()))?;
    Ok(outcome)
}

/// Entry point: returns whether every validation passed.
pub fn run(cli: Cli) -> Result<bool> {
    let inv = match cli.command {
        Command::Rerun { manifest, out } => {
            let mut inv = RunManifest::read(&manifest)?.invocation;
            if let Some(o) = out {
                inv.set_out(o);
            }
            inv
        }
        other => {
            let out = match &other {
                Command::Generate { common, .. }
                | Command::Recover { common, .. }
                | Command::Eval { common, .. }
                | Command::Select { common, .. }
                | Command::Gradcheck { common, .. } => common.out.clone(),
                Command::Rerun { .. } => unreachable!(),
            };
            let name = match &other {
                Command::Generate { .. } => "generate",
                Command::Recover { .. } => "recover",
                Command::Eval { .. } => "eval",
                Command::Select { .. } => "select",
                Command::Gradcheck { .. } => "gradcheck",
                Command::Rerun { .. } => unreachable!(),
            };
            match resolve(other) {
                Ok(inv) => inv,
                Err(e) => {
                    RunManifest::unresolved(name, &out, &e).write_for(name, &out).ok();
                    return Err(e);
                }
            }
        }
    };
    let outcome = execute_and_record(&inv)?;
    print!("{}", outcome.summary);
    Ok(outcome.ok)
}
