//! Finite entropy-regularised MDP instances.
//!
//! Every measure is a weighted sum over a finite index set: transitions are
//! rows of a `(S*A) x S` stochastic matrix, `mu` weights actions, `rho`
//! weights states and `beta` weights state-action pairs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Probability vectors must sum to one within this tolerance.
pub const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// Row `s * n_actions + a` is `P(. | s, a)`.
    pub transition: DMatrix<f64>,
    /// `cost[(s, a)]`.
    pub cost: DMatrix<f64>,
    pub gamma: f64,
    pub tau: f64,
    pub mu: DVector<f64>,
    pub rho: DVector<f64>,
    /// `beta[(s, a)]`.
    pub beta: DMatrix<f64>,
}

/// Outcome of [`validate_mdp`]: every violated invariant, in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub reasons: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.reasons.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            Err(Error::InvalidInstance(self.reasons))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            write!(f, "pass")
        } else {
            write!(f, "fail: {}", self.reasons.join("; "))
        }
    }
}

fn check_probability(name: &str, values: impl Iterator<Item = f64>, reasons: &mut Vec<String>) {
    let mut sum = 0.0;
    let mut bad = false;
    for v in values {
        if !v.is_finite() || v < 0.0 {
            bad = true;
        }
        sum += v;
    }
    if bad {
        reasons.push(format!("{name} has negative or non-finite entries"));
    } else if (sum - 1.0).abs() > PROB_TOL {
        reasons.push(format!("{name} sums to {sum} instead of 1"));
    }
}

/// Lists every violated invariant of a [`FiniteMdp`]. Never fails.
pub fn validate_mdp(mdp: &FiniteMdp) -> ValidationReport {
    let mut reasons = Vec::new();
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    if ns == 0 {
        reasons.push("n_states must be positive".to_string());
    }
    if na == 0 {
        reasons.push("n_actions must be positive".to_string());
    }
    let shapes_ok = mdp.transition.shape() == (ns * na, ns)
        && mdp.cost.shape() == (ns, na)
        && mdp.beta.shape() == (ns, na)
        && mdp.mu.len() == na
        && mdp.rho.len() == ns;
    if !shapes_ok {
        reasons.push(format!(
            "shape mismatch: transition {:?}, cost {:?}, beta {:?}, mu {}, rho {} for {ns} states and {na} actions",
            mdp.transition.shape(),
            mdp.cost.shape(),
            mdp.beta.shape(),
            mdp.mu.len(),
            mdp.rho.len()
        ));
        return ValidationReport { reasons };
    }
    if !(mdp.gamma > 0.0 && mdp.gamma < 1.0) {
        reasons.push("discount not in (0,1)".to_string());
    }
    if !(mdp.tau > 0.0 && mdp.tau.is_finite()) {
        reasons.push("regularisation tau must be positive".to_string());
    }
    if mdp.cost.iter().any(|c| !c.is_finite()) {
        reasons.push("cost has non-finite entries".to_string());
    }
    for s in 0..ns {
        for a in 0..na {
            let row = mdp.transition.row(s * na + a);
            check_probability(&format!("transition row ({s},{a})"), row.iter().copied(), &mut reasons);
        }
    }
    check_probability("mu", mdp.mu.iter().copied(), &mut reasons);
    if mdp.mu.iter().any(|&m| m <= 0.0) {
        reasons.push("reference measure lacks full support".to_string());
    }
    check_probability("rho", mdp.rho.iter().copied(), &mut reasons);
    check_probability("beta", mdp.beta.iter().copied(), &mut reasons);
    if mdp.beta.iter().any(|&b| b <= 0.0) {
        reasons.push("critic sampling law beta lacks full support".to_string());
    }
    ValidationReport { reasons }
}

impl FiniteMdp {
    #[inline]
    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    /// `|c|_inf`.
    pub fn cost_sup(&self) -> f64 {
        self.cost.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// State kernel `P_pi(s' | s) = sum_a P(s' | s, a) pi(a | s)`.
    pub fn state_kernel(&self, probs: &DMatrix<f64>) -> DMatrix<f64> {
        let (ns, na) = (self.n_states, self.n_actions);
        DMatrix::from_fn(ns, ns, |s, t| {
            (0..na).map(|a| probs[(s, a)] * self.transition[(self.pair(s, a), t)]).sum()
        })
    }

    /// State-action kernel `P^pi((s', a') | (s, a)) = P(s' | s, a) pi(a' | s')`.
    pub fn pair_kernel(&self, probs: &DMatrix<f64>) -> DMatrix<f64> {
        let (ns, na) = (self.n_states, self.n_actions);
        DMatrix::from_fn(ns * na, ns * na, |i, j| {
            let (t, b) = (j / na, j % na);
            self.transition[(i, t)] * probs[(t, b)]
        })
    }

    /// Row-major flattening of an `S x A` matrix into an `S*A` vector.
    pub fn flatten(&self, m: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(self.n_pairs(), |i, _| m[(i / self.n_actions, i % self.n_actions)])
    }

    pub fn unflatten(&self, v: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_states, self.n_actions, |s, a| v[self.pair(s, a)])
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let mdp: FiniteMdp = serde_json::from_str(text)?;
        validate_mdp(&mdp).into_result()?;
        Ok(mdp)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// On-disk layout: nested row-major arrays.
#[derive(Serialize, Deserialize)]
pub(crate) struct MdpDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub tau: f64,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub cost: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("{what}: every row must have {ncols} entries")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl From<&FiniteMdp> for MdpDocument {
    fn from(m: &FiniteMdp) -> Self {
        let transition = (0..m.n_states)
            .map(|s| {
                (0..m.n_actions)
                    .map(|a| m.transition.row(m.pair(s, a)).iter().copied().collect())
                    .collect()
            })
            .collect();
        MdpDocument {
            n_states: m.n_states,
            n_actions: m.n_actions,
            gamma: m.gamma,
            tau: m.tau,
            transition,
            cost: matrix_rows(&m.cost),
            mu: m.mu.iter().copied().collect(),
            rho: m.rho.iter().copied().collect(),
            beta: matrix_rows(&m.beta),
        }
    }
}

impl TryFrom<MdpDocument> for FiniteMdp {
    type Error = Error;

    fn try_from(d: MdpDocument) -> Result<Self> {
        let (ns, na) = (d.n_states, d.n_actions);
        if d.transition.len() != ns || d.transition.iter().any(|row| row.len() != na) {
            return Err(Error::Dimension(format!("transition must be [{ns}][{na}][{ns}]")));
        }
        let flat: Vec<Vec<f64>> = d.transition.into_iter().flatten().collect();
        let transition = matrix_from_rows(&flat, ns, "transition")?;
        if d.cost.len() != ns || d.beta.len() != ns {
            return Err(Error::Dimension(format!("cost and beta must have {ns} rows")));
        }
        Ok(FiniteMdp {
            n_states: ns,
            n_actions: na,
            transition,
            cost: matrix_from_rows(&d.cost, na, "cost")?,
            gamma: d.gamma,
            tau: d.tau,
            mu: DVector::from_vec(d.mu),
            rho: DVector::from_vec(d.rho),
            beta: matrix_from_rows(&d.beta, na, "beta")?,
        })
    }
}

impl Serialize for FiniteMdp {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        MdpDocument::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FiniteMdp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let doc = MdpDocument::deserialize(deserializer)?;
        FiniteMdp::try_from(doc).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> FiniteMdp {
        FiniteMdp {
            n_states: 2,
            n_actions: 2,
            transition: DMatrix::from_row_slice(4, 2, &[0.5, 0.5, 1.0, 0.0, 0.0, 1.0, 0.25, 0.75]),
            cost: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 2.0]),
            gamma: 0.9,
            tau: 0.1,
            mu: DVector::from_vec(vec![0.5, 0.5]),
            rho: DVector::from_vec(vec![1.0, 0.0]),
            beta: DMatrix::from_element(2, 2, 0.25),
        }
    }

    #[test]
    fn well_formed_instance_passes() {
        assert!(validate_mdp(&two_state()).passed());
    }

    #[test]
    fn degenerate_reference_measure_fails() {
        let mut m = two_state();
        m.mu = DVector::from_vec(vec![1.0, 0.0]);
        let report = validate_mdp(&m);
        assert!(!report.passed());
        assert!(report.reasons.contains(&"reference measure lacks full support".to_string()));
    }

    #[test]
    fn unit_discount_fails() {
        let mut m = two_state();
        m.gamma = 1.0;
        let report = validate_mdp(&m);
        assert_eq!(report.reasons, vec!["discount not in (0,1)".to_string()]);
    }

    #[test]
    fn bad_rows_are_all_listed() {
        let mut m = two_state();
        m.transition[(0, 0)] = 0.6;
        m.beta[(1, 1)] = 0.0;
        m.tau = 0.0;
        let report = validate_mdp(&m);
        assert_eq!(report.reasons.len(), 4, "{report}");
    }

    #[test]
    fn json_layout_is_nested_row_major() {
        let m = two_state();
        let text = serde_json::to_string(&m).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["transition"][1][1][1], 0.75);
        assert_eq!(v["cost"][1][0], 0.5);
        let back = FiniteMdp::from_json_str(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn invalid_rows_rejected_on_load() {
        let mut m = two_state();
        m.rho = DVector::from_vec(vec![0.7, 0.7]);
        let text = serde_json::to_string(&m).unwrap();
        assert!(matches!(FiniteMdp::from_json_str(&text), Err(Error::InvalidInstance(_))));
    }
}
