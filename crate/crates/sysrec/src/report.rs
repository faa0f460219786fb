//! Human-readable reports (4 significant digits) and their machine-readable
//! counterparts (full precision JSON).

use serde::Serialize;

use sysrec_core::select::SelectionResult;
use sysrec_core::train::{Evaluation, RecoveryResult, SupportReport};
use sysrec_core::SparseOdeModel;

/// Formats with 4 significant digits.
pub fn sig4(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0".into();
    }
    let mag = v.abs().log10().floor() as i32;
    if (-3..4).contains(&mag) {
        let decimals = (3 - mag).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.3e}")
    }
}

fn model_lines(model: &SparseOdeModel) -> String {
    let lib = model.library();
    let mut s = String::new();
    for eq in 0..model.n_states() {
        let mut rhs = String::new();
        for (j, t) in lib.terms().iter().enumerate() {
            let c = model.get(eq, j);
            if c == 0.0 {
                continue;
            }
            let sign = match (rhs.is_empty(), c < 0.0) {
                (true, true) => "-",
                (true, false) => "",
                (false, true) => " - ",
                (false, false) => " + ",
            };
            rhs.push_str(&format!("{sign}{} {t}", sig4(c.abs())));
        }
        if rhs.is_empty() {
            rhs.push('0');
        }
        s.push_str(&format!("  dx{}/dt = {}\n", eq + 1, rhs));
    }
    s
}

fn support_lines(report: &SupportReport) -> String {
    let mut s = format!(
        "support vs reference: {} (false positives {}, false negatives {})\n",
        if report.exact() { "exact" } else { "mismatch" },
        report.n_false_positives(),
        report.n_false_negatives()
    );
    for eq in 0..report.true_positives.len() {
        s.push_str(&format!(
            "  eq {}: matched [{}] spurious [{}] missing [{}]\n",
            eq + 1,
            report.true_positives[eq].join(", "),
            report.false_positives[eq].join(", "),
            report.false_negatives[eq].join(", ")
        ));
    }
    s
}

fn mse_text(mse: f64, diverged_at: Option<usize>) -> String {
    match diverged_at {
        Some(i) => format!("inf (diverged at sample {i})"),
        None => sig4(mse),
    }
}

pub fn recovery_report(result: &RecoveryResult, epochs: usize, samples: usize) -> String {
    let mut s = String::from("recovery\n");
    s.push_str(&format!("samples: {samples}\nepochs: {epochs}\n"));
    if let (Some(first), Some(last)) = (result.loss_history.first(), result.loss_history.last()) {
        s.push_str(&format!("loss: first {} last {}\n", sig4(*first), sig4(*last)));
    }
    s.push_str(&format!(
        "reconstruction mse: {}\n",
        mse_text(result.mse, result.diverged_at)
    ));
    s.push_str(&format!("support size: {}\n", result.model.support_size()));
    s.push_str(&format!("threshold: {}\n", sig4(result.model.threshold())));
    s.push_str("model:\n");
    s.push_str(&model_lines(&result.model));
    if let Some(sup) = &result.support {
        s.push_str(&support_lines(sup));
    }
    s
}

pub fn evaluation_report(model: &SparseOdeModel, eval: &Evaluation, support: Option<&SupportReport>) -> String {
    let mut s = String::from("evaluation\n");
    s.push_str(&format!(
        "reconstruction mse: {}\n",
        mse_text(eval.mse, eval.diverged_at)
    ));
    s.push_str("model:\n");
    s.push_str(&model_lines(model));
    if let Some(sup) = support {
        s.push_str(&support_lines(sup));
    }
    s
}

const PLATFORM_NAMES: [&str; 2] = ["FPGA", "GPU"];
const TASK_NAMES: [&str; 3] = ["ML", "ML+PG", "MR"];

pub fn selection_report(sel: &SelectionResult, criterion: &str) -> String {
    let c = sel.config;
    let p = sel.prediction;
    let mut s = String::from("selection\n");
    s.push_str(&format!("criterion: {criterion}\ncandidates: {}\n", sel.candidates));
    s.push_str(&format!(
        "status: {}\n",
        if sel.feasible {
            "feasible"
        } else {
            "infeasible (least-violating configuration shown)"
        }
    ));
    s.push_str(&format!(
        "platform: {} ({})\ntask: {} ({})\nhidden: {}\nepochs: {}\nsequence length: {}\n",
        c.platform, PLATFORM_NAMES[c.platform as usize], c.task, TASK_NAMES[c.task as usize], c.hi, c.e, c.n
    ));
    s.push_str(&format!(
        "predicted error: {}{}\npredicted time: {} s{}\npredicted power: {} ({})\npredicted memory: {}\nobjective: {}\n",
        sig4(p.error),
        if sel.error_ok { "" } else { "  [violates error budget]" },
        sig4(p.time),
        if sel.time_ok { "" } else { "  [violates time limit]" },
        sig4(p.power),
        sel.power_unit,
        sig4(p.memory),
        sig4(sel.objective)
    ));
    if !sel.feasible {
        s.push_str(&format!("violation: {}\n", sig4(sel.violation)));
    }
    if let Some(e) = sel.refined_eps {
        s.push_str(&format!("refined error budget: {}\n", sig4(e)));
    }
    let bad = p.nonpositive();
    if !bad.is_empty() {
        s.push_str(&format!("warning: non-positive prediction for {}\n", bad.join(", ")));
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct RecoveryMetrics {
    /// `None` when the re-solve diverged.
    pub mse: Option<f64>,
    pub diverged_at: Option<usize>,
    pub support_size: usize,
    pub support: Vec<Vec<String>>,
    pub exact_support: Option<bool>,
    pub false_positives: Option<usize>,
    pub false_negatives: Option<usize>,
    pub final_loss: Option<f64>,
}

impl RecoveryMetrics {
    pub fn new(result: &RecoveryResult) -> Self {
        Self {
            mse: result.mse.is_finite().then_some(result.mse),
            diverged_at: result.diverged_at,
            support_size: result.model.support_size(),
            support: result.model.support_names(),
            exact_support: result.support.as_ref().map(SupportReport::exact),
            false_positives: result.support.as_ref().map(SupportReport::n_false_positives),
            false_negatives: result.support.as_ref().map(SupportReport::n_false_negatives),
            final_loss: result.loss_history.last().copied(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionRecord {
    pub platform: u8,
    pub task: u8,
    pub hi: u32,
    pub e: u32,
    #[serde(rename = "N")]
    pub n: u32,
    pub error: f64,
    pub time_s: f64,
    pub power: f64,
    pub power_unit: String,
    pub memory: f64,
    pub objective: f64,
    pub feasible: bool,
    pub error_ok: bool,
    pub time_ok: bool,
    pub violation: f64,
    pub candidates: usize,
    pub refined_eps: Option<f64>,
    pub nonpositive: Vec<String>,
}

impl SelectionRecord {
    pub fn new(sel: &SelectionResult) -> Self {
        let c = sel.config;
        let p = sel.prediction;
        Self {
            platform: c.platform,
            task: c.task,
            hi: c.hi,
            e: c.e,
            n: c.n,
            error: p.error,
            time_s: p.time,
            power: p.power,
            power_unit: sel.power_unit.clone(),
            memory: p.memory,
            objective: sel.objective,
            feasible: sel.feasible,
            error_ok: sel.error_ok,
            time_ok: sel.time_ok,
            violation: sel.violation,
            candidates: sel.candidates,
            refined_eps: sel.refined_eps,
            nonpositive: p.nonpositive().into_iter().map(String::from).collect(),
        }
    }
}

/// Per-epoch loss history as CSV.
pub fn loss_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i, crate::io::num(*l)));
    }
    s
}
