//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Exits nonzero when an attainable criterion fails. The closed-form
//! single-step value in criterion 4 is printed but cannot pass with
//! classical RK4, so it does not affect the exit status.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use sysrec::gradcheck::{run_gradcheck, GradCase, GradcheckConfig};
use sysrec_core::bench::{generate, BenchmarkSpec, System};
use sysrec_core::library::{lorenz_reference, lotka_volterra_reference};
use sysrec_core::net::threshold_dropout;
use sysrec_core::ode::{rk4_step, solve, SolveOptions};
use sysrec_core::select::{
    design_space, enumerate_select, enumerate_select_by, predict, ridge_fit, Config, Criterion, DesignPoint,
    FeatureSpec, MeasurementTable, SurrogateModel, Surrogates, DRAM_REGRESSION,
};
use sysrec_core::train::{evaluate, train, TrainConfig};
use sysrec_core::{SparseOdeModel, TermLibrary};

struct Suite {
    failed_required: usize,
}

impl Suite {
    fn record(&mut self, id: &str, name: &str, pass: bool, detail: String) {
        println!("[{}] {id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed_required += 1;
        }
    }

    fn known_defect(&mut self, id: &str, name: &str, pass: bool, detail: String) {
        let note = if pass {
            ""
        } else {
            " (known defect in the stated value; does not gate)"
        };
        println!("[{}] {id} {name}: {detail}{note}", if pass { "PASS" } else { "FAIL" });
    }
}

fn sci(v: f64) -> String {
    format!("{v:.3e}")
}

fn lotka_volterra_recovery(s: &mut Suite) {
    let t = Instant::now();
    let ds = generate(&BenchmarkSpec::default_for(System::LotkaVolterra)).unwrap();
    let cfg = TrainConfig::default();
    let r = train(&ds, &cfg, Some(&lotka_volterra_reference())).unwrap();
    let sup = r.support.as_ref().unwrap();
    let secs = t.elapsed().as_secs_f64();
    let pass = sup.exact() && r.mse <= 0.1 && secs <= 600.0;
    s.record(
        "1",
        "lotka-volterra recovery",
        pass,
        format!(
            "V={} k={} epochs={} tau={}, support {:?}, exact={}, mse {} (<= 0.1), {secs:.0} s",
            cfg.hidden,
            cfg.window,
            cfg.epochs,
            cfg.tau,
            r.model.support_names(),
            sup.exact(),
            sci(r.mse)
        ),
    );
}

fn lorenz_recovery(s: &mut Suite) {
    let t = Instant::now();
    let ds = generate(&BenchmarkSpec::default_for(System::Lorenz)).unwrap();
    let r = train(&ds, &System::Lorenz.train_config(), Some(&lorenz_reference())).unwrap();
    let sup = r.support.as_ref().unwrap();
    let end = (2.0 / ds.dt()).round() as usize + 1;
    let short = evaluate(&r.model, &ds.slice(0, end).unwrap()).unwrap().mse;
    let secs = t.elapsed().as_secs_f64();
    let pass = sup.n_false_negatives() == 0 && sup.n_false_positives() <= 2 && short <= 5.0 && secs <= 900.0;
    s.record(
        "2",
        "lorenz recovery",
        pass,
        format!(
            "missing {} of 7 true terms, spurious {} (<= 2), 2 s mse {} (<= 5), full-horizon mse {}, {secs:.0} s",
            sup.n_false_negatives(),
            sup.n_false_positives(),
            sci(short),
            sci(r.mse)
        ),
    );
}

fn gradient_exactness(s: &mut Suite) {
    let pipeline = run_gradcheck(&GradcheckConfig::for_case(GradCase::Pipeline)).unwrap();
    let cell = run_gradcheck(&GradcheckConfig::for_case(GradCase::SingleCell)).unwrap();
    s.record(
        "3",
        "gradient exactness",
        pipeline.passed && cell.passed,
        format!(
            "pipeline V=8 k=20 max rel err {} (<= 1e-4), single cell {} (<= 1e-5)",
            sci(pipeline.report.max_rel_error),
            sci(cell.report.max_rel_error)
        ),
    );
}

/// Linear systems with closed-form solutions: (model, x0, input, exact).
type Case = (SparseOdeModel, Vec<f64>, Vec<f64>, fn(f64) -> Vec<f64>);

fn linear_battery() -> Vec<(&'static str, Case)> {
    let lib = |n, m| TermLibrary::new(n, m, 1, false).unwrap();
    let model = |n, m, c: Vec<f64>| SparseOdeModel::new(lib(n, m), c, 0.0).unwrap();
    vec![
        (
            "decay",
            (model(1, 0, vec![-1.0]), vec![1.0], vec![], |t| vec![(-t).exp()]),
        ),
        (
            "growth",
            (model(1, 0, vec![0.5]), vec![1.0], vec![], |t| vec![(0.5 * t).exp()]),
        ),
        (
            "oscillator",
            (model(2, 0, vec![0.0, 1.0, -1.0, 0.0]), vec![1.0, 0.0], vec![], |t| {
                vec![t.cos(), -t.sin()]
            }),
        ),
        (
            "damped",
            (model(2, 0, vec![-0.5, 1.0, -1.0, -0.5]), vec![1.0, 0.0], vec![], |t| {
                let d = (-0.5 * t).exp();
                vec![d * t.cos(), -d * t.sin()]
            }),
        ),
        (
            "driven",
            (model(1, 1, vec![1.0, -1.0]), vec![3.0], vec![1.0], |t| {
                vec![1.0 + 2.0 * (-t).exp()]
            }),
        ),
    ]
}

fn max_global_error(case: &Case, dt: f64, horizon: f64) -> f64 {
    let (model, x0, u, exact) = case;
    let steps = (horizon / dt).round() as usize;
    let inputs: Vec<f64> = (0..=steps).flat_map(|_| u.iter().copied()).collect();
    let out = solve(model, x0, &inputs, 0.0, dt, steps, SolveOptions::default()).unwrap();
    (0..=steps)
        .map(|i| {
            let e = exact(i as f64 * dt);
            out.trajectory
                .state(i)
                .iter()
                .zip(&e)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

fn solver_order(s: &mut Suite) {
    let mut ratios = Vec::new();
    for (name, case) in linear_battery() {
        let ratio = max_global_error(&case, 0.1, 2.0) / max_global_error(&case, 0.05, 2.0);
        ratios.push((name, ratio));
    }
    let pass = ratios.iter().all(|(_, r)| (12.0..=20.0).contains(r));
    let text: Vec<String> = ratios.iter().map(|(n, r)| format!("{n} {r:.2}")).collect();
    s.record("4a", "rk4 step-halving ratio in [12, 20]", pass, text.join(", "));

    let decay = SparseOdeModel::new(TermLibrary::new(1, 0, 1, false).unwrap(), vec![-1.0], 0.0).unwrap();
    let (x, _) = rk4_step(&decay, &[1.0], &[], 0.1).unwrap();
    let stated = 0.904_837_416_66;
    s.known_defect(
        "4b",
        "single step x'=-x, h=0.1 equals 0.90483741666 +- 1e-10",
        (x[0] - stated).abs() <= 1e-10,
        format!(
            "one rk4 step gives {:.10} (the 4th-order Taylor polynomial), off by {}; the stated value truncates at 5th order",
            x[0],
            sci((x[0] - stated).abs())
        ),
    );
}

fn dropout(s: &mut Suite) {
    let raw = [
        0.0006, 0.55, 0.06, 0.0003, 0.005, -0.09, 0.8, 0.003, -0.7, 0.04, 0.06, 0.00005, 0.008,
    ];
    let expected = [
        0.0, 0.55, 0.06, 0.0, 0.005, -0.09, 0.8, 0.003, -0.7, 0.04, 0.06, 0.0, 0.008,
    ];
    let worked = threshold_dropout(&raw, 0.001) == expected;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for _ in 0..1000 {
        let len = rng.random_range(1..64);
        let v: Vec<f64> = (0..len)
            .map(|_| rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-5..1)))
            .collect();
        let t1 = rng.random_range(0.0..0.01);
        let t2 = t1 + rng.random_range(0.0..0.01);
        let once = threshold_dropout(&v, t1);
        let tighter = threshold_dropout(&v, t2);
        let idempotent = threshold_dropout(&once, t1) == once;
        let monotone = tighter.iter().zip(&once).all(|(a, b)| *a == 0.0 || *b != 0.0);
        violations += usize::from(!(idempotent && monotone));
    }
    s.record(
        "5",
        "threshold dropout",
        worked && violations == 0,
        format!(
            "worked example bit-exact: {worked}; idempotence/monotonicity violations on 1000 vectors: {violations}"
        ),
    );
}

/// Regularised normal equations by Gaussian elimination; bias unpenalised.
#[allow(clippy::needless_range_loop)]
fn normal_equation_oracle(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
    let p = x[0].len() + 1;
    let mut m = vec![vec![0.0; p + 1]; p];
    for (row, &t) in x.iter().zip(y) {
        let full: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
        for i in 0..p {
            for j in 0..p {
                m[i][j] += full[i] * full[j];
            }
            m[i][p] += full[i] * t;
        }
    }
    for (i, r) in m.iter_mut().enumerate().skip(1) {
        r[i] += lambda;
    }
    for c in 0..p {
        let piv = (c..p).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())).unwrap();
        m.swap(c, piv);
        for r in c + 1..p {
            let f = m[r][c] / m[c][c];
            for k in c..=p {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    let mut w = vec![0.0; p];
    for c in (0..p).rev() {
        let s: f64 = (c + 1..p).map(|k| m[c][k] * w[k]).sum();
        w[c] = (m[c][p] - s) / m[c][c];
    }
    w
}

fn ridge(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let p = rng.random_range(1..10);
        let n = rng.random_range(p + 2..=50);
        let lambda = if trial % 4 == 0 {
            0.0
        } else {
            rng.random_range(0.0..5.0)
        };
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let samples: Vec<(Vec<f64>, f64)> = x.iter().cloned().zip(y.iter().copied()).collect();
        let fit = ridge_fit(&samples, lambda).unwrap();
        let oracle = normal_equation_oracle(&x, &y, lambda);
        let got = std::iter::once(fit.bias).chain(fit.weights.iter().copied());
        let scale = oracle.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (g, o) in got.zip(&oracle) {
            worst = worst.max((g - o).abs() / scale);
        }
    }

    let [ce, cn, chi, ceps, bias] = DRAM_REGRESSION;
    let mut samples = Vec::new();
    for e in [16.0, 64.0, 128.0] {
        for n in [50.0, 100.0, 200.0] {
            for hi in [16.0, 64.0, 128.0] {
                for eps in [1.0, 5.0, 10.0] {
                    samples.push((vec![e, n, hi, eps], ce * e + cn * n + chi * hi + ceps * eps + bias));
                }
            }
        }
    }
    let fit = ridge_fit(&samples, 1e-8).unwrap();
    let coef_err = fit
        .weights
        .iter()
        .chain(std::iter::once(&fit.bias))
        .zip(DRAM_REGRESSION)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    s.record(
        "6",
        "ridge oracle",
        worst <= 1e-8 && coef_err <= 1e-6,
        format!(
            "max relative deviation from normal equations over 200 systems {} (<= 1e-8); reference DRAM regression recovered to {} (<= 1e-6)",
            sci(worst),
            sci(coef_err)
        ),
    );
}

fn random_surrogates(seed: u64) -> Surrogates {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |eps: bool, offset: f64, target: &str| {
        let spec = FeatureSpec {
            eps_scale: eps.then_some(10.0),
            ..FeatureSpec::default()
        };
        SurrogateModel {
            features: Some(spec),
            bias: offset + rng.random_range(-1.0..1.0),
            weights: (0..spec.len()).map(|_| rng.random_range(-2.0..2.0)).collect(),
            lambda: 1.0,
            target: target.into(),
        }
    };
    Surrogates {
        error: make(false, 3.0, "error"),
        time: make(false, 3.0, "time_s"),
        power: make(true, 0.0, "energy_J"),
        memory: make(true, 0.0, "dram_MB"),
    }
}

/// (error, time, power, memory) evaluated directly from the surrogates.
fn metrics(s: &Surrogates, c: Config) -> [f64; 4] {
    let mut p = DesignPoint {
        platform: c.platform,
        task: c.task,
        hi: c.hi as f64,
        e: c.e as f64,
        n: c.n as f64,
        eps: 0.0,
    };
    let error = predict(&s.error, &p).unwrap();
    let time = predict(&s.time, &p).unwrap();
    p.eps = error;
    [
        error,
        time,
        predict(&s.power, &p).unwrap(),
        predict(&s.memory, &p).unwrap(),
    ]
}

/// Nested loops in reverse order, ranked by a full sort.
fn brute_force(s: &Surrogates, gamma: f64, eps_max: f64, r: f64) -> (Config, bool) {
    let mut all = Vec::new();
    for n in [200u32, 100, 50] {
        for e in [128u32, 64, 32, 16] {
            for hi in [128u32, 64, 32, 16] {
                for task in [2u8, 1, 0] {
                    for platform in [1u8, 0] {
                        let cfg = Config {
                            platform,
                            task,
                            hi,
                            e,
                            n,
                        };
                        let [error, time, power, memory] = metrics(s, cfg);
                        let obj = gamma * power + (1.0 - gamma) * memory;
                        let violation = (error - eps_max).max(0.0) + (time - r).max(0.0);
                        all.push((cfg, obj, error, time, violation));
                    }
                }
            }
        }
    }
    let key = |a: &(Config, f64, f64, f64, f64), b: &(Config, f64, f64, f64, f64)| {
        a.1.total_cmp(&b.1)
            .then(a.2.total_cmp(&b.2))
            .then(a.3.total_cmp(&b.3))
            .then(a.0.cmp(&b.0))
    };
    let mut feasible: Vec<_> = all.iter().copied().filter(|c| c.2 < eps_max && c.3 < r).collect();
    if !feasible.is_empty() {
        feasible.sort_by(key);
        return (feasible[0].0, true);
    }
    all.sort_by(|a, b| a.4.total_cmp(&b.4).then(key(a, b)));
    (all[0].0, false)
}

fn selector(s: &mut Suite) {
    let mut mismatches = 0;
    let mut bad_count = 0;
    for seed in 0..100u64 {
        let sur = random_surrogates(seed);
        let gamma = (seed % 11) as f64 / 10.0;
        let eps_max = [f64::INFINITY, 3.0, 2.0, -100.0][(seed % 4) as usize];
        let r = [f64::INFINITY, 3.5, 1.0][(seed % 3) as usize];
        let got = enumerate_select(&sur, gamma, eps_max, r).unwrap();
        mismatches += usize::from((got.config, got.feasible) != brute_force(&sur, gamma, eps_max, r));
        bad_count += usize::from(got.candidates != 288);
    }
    let space = design_space().len();

    let mut invariant_failures = 0;
    for seed in 0..50u64 {
        let sur = random_surrogates(500 + seed);
        for (gamma, k) in [(1.0, 2usize), (0.0, 3)] {
            let sel = enumerate_select(&sur, gamma, f64::INFINITY, f64::INFINITY).unwrap();
            let best = design_space()
                .into_iter()
                .map(|c| metrics(&sur, c)[k])
                .fold(f64::INFINITY, f64::min);
            invariant_failures += usize::from(metrics(&sur, sel.config)[k] != best);
        }
    }

    let fitted = Surrogates::fit(&MeasurementTable::bundled(), 3, 1.0).unwrap();
    let energy = enumerate_select(&fitted, 1.0, f64::INFINITY, f64::INFINITY).unwrap();
    let accuracy = enumerate_select_by(&fitted, Criterion::Error, f64::INFINITY, f64::INFINITY).unwrap();
    let bundled_ok = energy.config.platform == 0 && (accuracy.config.platform, accuracy.config.task) == (1, 2);

    s.record(
        "7",
        "configuration selector",
        mismatches == 0 && bad_count == 0 && space == 288 && invariant_failures == 0 && bundled_ok,
        format!(
            "brute-force mismatches {mismatches}/100, design space {space}, gamma 0/1 argmin failures {invariant_failures}/100, \
             bundled table: min energy platform {}, min error (platform {}, task {})",
            energy.config.platform, accuracy.config.platform, accuracy.config.task
        ),
    );
}

fn sysrec(args: &[&str], dir: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_sysrec"))
        .args(args)
        .current_dir(dir)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

/// Reruns `manifest` into `rerun_out` and compares every recorded output.
fn rerun_matches(dir: &Path, manifest: &str, out: &str, rerun_out: &str) -> Result<usize, String> {
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.join(manifest)).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    if !sysrec(&["rerun", manifest, "--out", rerun_out], dir) {
        return Err(format!("rerun of {manifest} failed"));
    }
    let outputs = m["outputs"].as_array().ok_or("no outputs")?;
    for o in outputs {
        let path = o["path"].as_str().ok_or("bad path")?;
        let twin = path.replacen(out, rerun_out, 1);
        let a = fs::read(dir.join(path)).map_err(|e| e.to_string())?;
        let b = fs::read(dir.join(&twin)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{path} differs from {twin}"));
        }
    }
    Ok(outputs.len())
}

fn determinism(s: &mut Suite) {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let runs: [(&[&str], &str, &str); 5] = [
        (
            &["generate", "--system", "lotka_volterra", "--out", "lv.csv"],
            "lv.csv.manifest.json",
            "lv.csv",
        ),
        (
            &[
                "recover",
                "--data",
                "lv.csv",
                "--truth",
                "lotka_volterra",
                "--out",
                "rec",
            ],
            "rec/manifest.json",
            "rec",
        ),
        (
            &["eval", "--model", "rec/model.toml", "--data", "lv.csv", "--out", "ev"],
            "ev/manifest.json",
            "ev",
        ),
        (
            &["select", "--gamma", "0.5", "--eps-max", "6", "--out", "sel"],
            "sel/manifest.json",
            "sel",
        ),
        (
            &["gradcheck", "--case", "pipeline", "--out", "gc"],
            "gc/manifest.json",
            "gc",
        ),
    ];
    let mut notes = Vec::new();
    let mut pass = true;
    for (args, manifest, out) in runs {
        if !sysrec(args, d) {
            pass = false;
            notes.push(format!("{} failed", args[0]));
            continue;
        }
        match rerun_matches(d, manifest, out, &format!("{out}.again")) {
            Ok(n) => notes.push(format!("{} {n} files identical", args[0])),
            Err(e) => {
                pass = false;
                notes.push(format!("{}: {e}", args[0]));
            }
        }
    }
    s.record("8", "rerun from manifest is byte-identical", pass, notes.join(", "));
}

fn main() -> ExitCode {
    let mut s = Suite { failed_required: 0 };
    lotka_volterra_recovery(&mut s);
    lorenz_recovery(&mut s);
    gradient_exactness(&mut s);
    solver_order(&mut s);
    dropout(&mut s);
    ridge(&mut s);
    selector(&mut s);
    determinism(&mut s);
    if s.failed_required == 0 {
        println!("acceptance: all gating criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} gating criteria failed", s.failed_required);
        ExitCode::FAILURE
    }
}
