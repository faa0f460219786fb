//! Candidate-term libraries and sparse polynomial ODE models.
//!
//! A [`TermLibrary`] fixes the ordered list of candidate right-hand-side terms:
//! an optional constant, one linear term per external input, then every
//! monomial of total degree `1..=order` in the state variables, in graded
//! lexicographic order. A [`SparseOdeModel`] holds one coefficient row per
//! state equation over that list.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{check_dim, domain, Result};

/// A single candidate term.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Constant,
    /// Linear in one external input.
    Input(usize),
    /// Product of state variables; one exponent per state.
    Monomial(Vec<u8>),
}

impl Term {
    pub fn degree(&self) -> u32 {
        match self {
            Term::Constant => 0,
            Term::Input(_) => 1,
            Term::Monomial(e) => e.iter().map(|&p| p as u32).sum(),
        }
    }

    /// Name such as `u1`, `x1`, `x1^2`, `x1*x2`.
    pub fn name(&self) -> String {
        match self {
            Term::Constant => String::from("1"),
            Term::Input(j) => format!("u{}", j + 1),
            Term::Monomial(exps) => {
                let mut parts = Vec::new();
                for (s, &p) in exps.iter().enumerate() {
                    match p {
                        0 => {}
                        1 => parts.push(format!("x{}", s + 1)),
                        _ => parts.push(format!("x{}^{}", s + 1, p)),
                    }
                }
                parts.join("*")
            }
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Flattened monomial: list of (state index, power) factors.
#[derive(Debug, Clone, PartialEq)]
enum Kernel {
    Constant,
    Input(usize),
    Monomial(Vec<(usize, u8)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermLibrary {
    n_states: usize,
    n_inputs: usize,
    order: u32,
    include_constant: bool,
    terms: Vec<Term>,
    kernels: Vec<Kernel>,
}

/// Exponent vectors of total degree `degree` in `n` variables, descending lex.
fn exponents_of_degree(n: usize, degree: u32) -> Vec<Vec<u8>> {
    fn rec(n: usize, remaining: u32, prefix: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if prefix.len() == n - 1 {
            prefix.push(remaining as u8);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for p in (0..=remaining).rev() {
            prefix.push(p as u8);
            rec(n, remaining - p, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, degree, &mut Vec::with_capacity(n), &mut out);
    out
}

impl TermLibrary {
    /// Builds the library for `n_states` states, `n_inputs` inputs and
    /// polynomial order `order`.
    pub fn new(n_states: usize, n_inputs: usize, order: u32, include_constant: bool) -> Result<Self> {
        if n_states == 0 {
            return Err(domain("n_states must be at least 1"));
        }
        if order == 0 {
            return Err(domain("polynomial order must be at least 1"));
        }
        if order > u8::MAX as u32 {
            return Err(domain("polynomial order too large"));
        }
        let mut terms = Vec::new();
        if include_constant {
            terms.push(Term::Constant);
        }
        terms.extend((0..n_inputs).map(Term::Input));
        for d in 1..=order {
            terms.extend(exponents_of_degree(n_states, d).into_iter().map(Term::Monomial));
        }
        let kernels = terms
            .iter()
            .map(|t| match t {
                Term::Constant => Kernel::Constant,
                Term::Input(j) => Kernel::Input(*j),
                Term::Monomial(e) => Kernel::Monomial(
                    e.iter()
                        .enumerate()
                        .filter(|(_, &p)| p > 0)
                        .map(|(s, &p)| (s, p))
                        .collect(),
                ),
            })
            .collect();
        Ok(Self {
            n_states,
            n_inputs,
            order,
            include_constant,
            terms,
            kernels,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn include_constant(&self) -> bool {
        self.include_constant
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.terms.iter().position(|t| t.name() == name)
    }

    fn check_point(&self, x: &[f64], u: &[f64]) -> Result<()> {
        check_dim("state vector", self.n_states, x.len())?;
        check_dim("input vector", self.n_inputs, u.len())
    }

    /// Evaluates every term at `(x, u)`.
    pub fn eval_features(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x, u)?;
        let mut out = vec![0.0; self.len()];
        self.features_into(x, u, &mut out);
        Ok(out)
    }

    /// Unchecked evaluation into a caller-provided buffer of length `len()`.
    pub(crate) fn features_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        for (slot, k) in out.iter_mut().zip(&self.kernels) {
            *slot = match k {
                Kernel::Constant => 1.0,
                Kernel::Input(j) => u[*j],
                Kernel::Monomial(factors) => factors.iter().fold(1.0, |acc, &(s, p)| acc * powu(x[s], p)),
            };
        }
    }

    /// Accumulates `out[s] += sum_j w[j] * d phi_j / d x_s`.
    pub(crate) fn features_vjp_state(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        for (k, &wj) in self.kernels.iter().zip(w) {
            if wj == 0.0 {
                continue;
            }
            if let Kernel::Monomial(factors) = k {
                for (i, &(s, p)) in factors.iter().enumerate() {
                    let mut d = p as f64 * powu(x[s], p - 1);
                    for (j, &(s2, p2)) in factors.iter().enumerate() {
                        if i != j {
                            d *= powu(x[s2], p2);
                        }
                    }
                    out[s] += wj * d;
                }
            }
        }
    }

    /// Accumulates `out[j] += w[term of input j]`, the input part of the VJP.
    pub(crate) fn features_vjp_input(&self, w: &[f64], out: &mut [f64]) {
        for (k, &wj) in self.kernels.iter().zip(w) {
            if let Kernel::Input(j) = k {
                out[*j] += wj;
            }
        }
    }
}

#[inline]
fn powu(x: f64, p: u8) -> f64 {
    match p {
        0 => 1.0,
        1 => x,
        2 => x * x,
        3 => x * x * x,
        _ => {
            let mut acc = 1.0;
            for _ in 0..p {
                acc *= x;
            }
            acc
        }
    }
}

/// Sparse polynomial ODE model: `dx_i/dt = sum_j theta[i][j] * phi_j(x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOdeModel {
    library: TermLibrary,
    /// Row-major `n_states x library.len()`.
    coefficients: Vec<f64>,
    threshold: f64,
}

impl SparseOdeModel {
    pub fn new(library: TermLibrary, coefficients: Vec<f64>, threshold: f64) -> Result<Self> {
        check_dim(
            "coefficient matrix",
            library.n_states() * library.len(),
            coefficients.len(),
        )?;
        if !(threshold >= 0.0) {
            return Err(domain("threshold must be non-negative"));
        }
        Ok(Self {
            library,
            coefficients,
            threshold,
        })
    }

    pub fn zeros(library: TermLibrary) -> Self {
        let n = library.n_states() * library.len();
        Self {
            library,
            coefficients: vec![0.0; n],
            threshold: 0.0,
        }
    }

    /// Builds a model from `(equation, term name, coefficient)` entries.
    pub fn from_terms(library: TermLibrary, entries: &[(usize, &str, f64)], threshold: f64) -> Result<Self> {
        let mut model = Self::zeros(library);
        model.threshold = threshold;
        for &(eq, name, c) in entries {
            if eq >= model.n_states() {
                return Err(domain(format!("equation index {eq} out of range")));
            }
            let j = model
                .library
                .position(name)
                .ok_or_else(|| domain(format!("unknown term {name}")))?;
            model.set(eq, j, c);
        }
        Ok(model)
    }

    pub fn library(&self) -> &TermLibrary {
        &self.library
    }

    pub fn n_states(&self) -> usize {
        self.library.n_states()
    }

    pub fn n_inputs(&self) -> usize {
        self.library.n_inputs()
    }

    pub fn n_terms(&self) -> usize {
        self.library.len()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut [f64] {
        &mut self.coefficients
    }

    pub fn row(&self, eq: usize) -> &[f64] {
        let t = self.n_terms();
        &self.coefficients[eq * t..(eq + 1) * t]
    }

    pub fn get(&self, eq: usize, term: usize) -> f64 {
        self.coefficients[eq * self.n_terms() + term]
    }

    pub fn set(&mut self, eq: usize, term: usize, value: f64) {
        let t = self.n_terms();
        self.coefficients[eq * t + term] = value;
    }

    /// Zeroes every coefficient with magnitude below the threshold.
    pub fn apply_threshold(&mut self) {
        let tau = self.threshold;
        for c in &mut self.coefficients {
            if c.abs() < tau {
                *c = 0.0;
            }
        }
    }

    /// Supported `(equation, term)` pairs, i.e. `|c| >= threshold` and `c != 0`.
    pub fn support(&self) -> Vec<(usize, usize)> {
        let t = self.n_terms();
        self.coefficients
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0 && c.abs() >= self.threshold)
            .map(|(i, _)| (i / t, i % t))
            .collect()
    }

    pub fn support_size(&self) -> usize {
        self.support().len()
    }

    /// Support as term names, one list per equation.
    pub fn support_names(&self) -> Vec<Vec<String>> {
        let mut out = vec![Vec::new(); self.n_states()];
        for (eq, j) in self.support() {
            out[eq].push(self.library.terms()[j].name());
        }
        out
    }

    /// State derivative at `(x, u)`.
    pub fn rhs(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.library.check_point(x, u)?;
        let mut phi = vec![0.0; self.n_terms()];
        let mut out = vec![0.0; self.n_states()];
        self.rhs_into(x, u, &mut phi, &mut out);
        Ok(out)
    }

    /// Unchecked evaluation; `phi` is scratch of length `n_terms()`.
    pub(crate) fn rhs_into(&self, x: &[f64], u: &[f64], phi: &mut [f64], out: &mut [f64]) {
        self.library.features_into(x, u, phi);
        for (eq, o) in out.iter_mut().enumerate() {
            *o = self.row(eq).iter().zip(phi.iter()).map(|(c, f)| c * f).sum();
        }
    }

    /// FNV-1a hash of the coefficient bits and threshold.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for c in self.coefficients.iter().chain(core::iter::once(&self.threshold)) {
            for b in c.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

impl fmt::Display for SparseOdeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for eq in 0..self.n_states() {
            write!(f, "dx{}/dt =", eq + 1)?;
            let mut first = true;
            for (j, term) in self.library.terms().iter().enumerate() {
                let c = self.get(eq, j);
                if c == 0.0 {
                    continue;
                }
                let sign = if c < 0.0 { '-' } else { '+' };
                if first {
                    if c < 0.0 {
                        write!(f, " -")?;
                    }
                } else {
                    write!(f, " {sign}")?;
                }
                write!(f, " {:.4} {}", c.abs(), term)?;
                first = false;
            }
            if first {
                write!(f, " 0")?;
            }
            if eq + 1 < self.n_states() {
                writeln!(f)?;
            }
        }
        Ok(())
    }
}

/// Coefficients of the recovered predator-prey model (`u` is input 1).
pub fn lotka_volterra_reference() -> SparseOdeModel {
    let lib = TermLibrary::new(2, 1, 2, false).expect("valid library");
    SparseOdeModel::from_terms(
        lib,
        &[
            (0, "x1", 0.52),
            (0, "x1*x2", -0.026),
            (1, "u1", 0.999),
            (1, "x2", -0.501),
            (1, "x1*x2", 0.005),
        ],
        0.001,
    )
    .expect("valid terms")
}

/// Lorenz system with the canonical `sigma = 10, rho = 28, beta = 8/3`.
pub fn lorenz_reference() -> SparseOdeModel {
    let lib = TermLibrary::new(3, 0, 2, false).expect("valid library");
    SparseOdeModel::from_terms(
        lib,
        &[
            (0, "x1", -10.0),
            (0, "x2", 10.0),
            (1, "x1", 28.0),
            (1, "x2", -1.0),
            (1, "x1*x3", -1.0),
            (2, "x3", -8.0 / 3.0),
            (2, "x1*x2", 1.0),
        ],
        0.001,
    )
    .expect("valid terms")
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn names(lib: &TermLibrary) -> Vec<String> {
        lib.terms().iter().map(Term::name).collect()
    }

    #[test]
    fn predator_prey_library_has_six_terms() {
        let lib = TermLibrary::new(2, 1, 2, false).unwrap();
        assert_eq!(names(&lib), ["u1", "x1", "x2", "x1^2", "x1*x2", "x2^2"]);
    }

    #[test]
    fn single_linear_term() {
        let lib = TermLibrary::new(1, 0, 1, false).unwrap();
        assert_eq!(names(&lib), ["x1"]);
    }

    #[test]
    fn three_state_quadratic_library() {
        let lib = TermLibrary::new(3, 0, 2, false).unwrap();
        assert_eq!(
            names(&lib),
            ["x1", "x2", "x3", "x1^2", "x1*x2", "x1*x3", "x2^2", "x2*x3", "x3^2"]
        );
    }

    #[test]
    fn constant_comes_first_when_enabled() {
        let lib = TermLibrary::new(2, 1, 1, true).unwrap();
        assert_eq!(names(&lib), ["1", "u1", "x1", "x2"]);
    }

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(TermLibrary::new(0, 1, 2, false).is_err());
        assert!(TermLibrary::new(2, 1, 0, false).is_err());
    }

    #[test]
    fn features_at_points() {
        let lib = TermLibrary::new(2, 1, 2, false).unwrap();
        assert_eq!(
            lib.eval_features(&[2.0, 3.0], &[1.0]).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]
        );
        assert_eq!(lib.eval_features(&[0.0, 0.0], &[0.0]).unwrap(), vec![0.0; 6]);
        assert_eq!(
            lib.eval_features(&[1.0, 1.0], &[0.0]).unwrap(),
            vec![0.0, 1.0, 1.0, 1.0, 1.0, 1.0]
        );
        assert!(lib.eval_features(&[1.0], &[0.0]).is_err());
        assert!(lib.eval_features(&[1.0, 1.0], &[]).is_err());
    }

    #[test]
    fn reference_rhs() {
        let m = lotka_volterra_reference();
        let d = m.rhs(&[10.0, 5.0], &[0.0]).unwrap();
        assert!((d[0] - 3.9).abs() < 1e-12);
        assert!((d[1] + 2.255).abs() < 1e-12);
    }

    #[test]
    fn zero_model_has_zero_rhs() {
        let m = SparseOdeModel::zeros(TermLibrary::new(2, 1, 2, false).unwrap());
        assert_eq!(m.rhs(&[3.0, -2.0], &[5.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn first_pass_model_sums_coefficients() {
        // Random first-pass head output, all features equal to one.
        let lib = TermLibrary::new(2, 1, 2, false).unwrap();
        let theta = vec![0.4, 0.5, 0.6, 0.1, 0.5, 0.2, 0.1, 0.3, 0.4, 0.6, 0.2, 0.8];
        let m = SparseOdeModel::new(lib, theta, 0.001).unwrap();
        let d = m.rhs(&[1.0, 1.0], &[1.0]).unwrap();
        assert!((d[0] - 2.3).abs() < 1e-12);
        assert!((d[1] - 2.4).abs() < 1e-12);
    }

    #[test]
    fn support_respects_threshold() {
        let lib = TermLibrary::new(1, 0, 2, false).unwrap();
        let mut m = SparseOdeModel::new(lib, vec![0.0005, 0.3], 0.001).unwrap();
        assert_eq!(m.support(), vec![(0, 1)]);
        m.apply_threshold();
        assert_eq!(m.coefficients(), &[0.0, 0.3]);
    }

    #[test]
    fn display_lists_nonzero_terms() {
        let s = alloc::format!("{}", lotka_volterra_reference());
        assert!(s.starts_with("dx1/dt = 0.5200 x1 - 0.0260 x1*x2"));
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let lib = TermLibrary::new(3, 1, 3, false).unwrap();
        let x = [0.7, -1.3, 2.1];
        let u = [0.4];
        let w: Vec<f64> = (0..lib.len()).map(|j| (j as f64 * 0.37).sin()).collect();
        let mut g = vec![0.0; 3];
        lib.features_vjp_state(&x, &w, &mut g);
        for s in 0..3 {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[s] += h;
            xm[s] -= h;
            let fp: f64 = lib
                .eval_features(&xp, &u)
                .unwrap()
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum();
            let fm: f64 = lib
                .eval_features(&xm, &u)
                .unwrap()
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - g[s]).abs() < 1e-7 * (1.0 + fd.abs()),
                "state {s}: {fd} vs {}",
                g[s]
            );
        }
    }
}
