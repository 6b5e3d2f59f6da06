//! Seeded instance generators and the bundled demo instances.
//!
//! An instance file is the MDP document with one extra key, `features`,
//! holding the `S*A x N` feature matrix row by row.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::path::Path;

use crate::critic::{build_certificate, FeatureMap};
use crate::error::{Error, Result};
use crate::mdp::{matrix_from_rows, matrix_rows, validate_mdp, FiniteMdp, MdpDocument};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    /// Indicator features, `N = S*A`.
    Onehot,
    /// Generic dense features of rank `k`; realisability fails in general.
    RandomRank { k: usize },
    /// `P(s'|s,a) = <phi(s,a), psi(s')>` and `c = <phi, w>`, so every `Q^pi` is
    /// linear in `phi`.
    LinearMdp { k: usize },
}

/// Parameters of a generated instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub tau: f64,
    pub features: FeatureKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub mdp: FiniteMdp,
    pub features: FeatureMap,
}

#[derive(Serialize, Deserialize)]
struct InstanceDocument {
    #[serde(flatten)]
    mdp: MdpDocument,
    features: Vec<Vec<f64>>,
}

impl Serialize for Instance {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        InstanceDocument { mdp: MdpDocument::from(&self.mdp), features: matrix_rows(&self.features.phi) }
            .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Instance {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let doc = InstanceDocument::deserialize(deserializer)?;
        let convert = || -> Result<Instance> {
            let mdp = FiniteMdp::try_from(doc.mdp)?;
            let ncols = doc.features.first().map_or(0, Vec::len);
            let features = FeatureMap::new(matrix_from_rows(&doc.features, ncols, "features")?)?;
            Ok(Instance { mdp, features })
        };
        convert().map_err(serde::de::Error::custom)
    }
}

impl Instance {
    /// Checks the MDP, the feature shape and the rank condition.
    pub fn validate(&self) -> Result<()> {
        validate_mdp(&self.mdp).into_result()?;
        build_certificate(&self.mdp, &self.features).map(|_| ())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let inst: Instance = serde_json::from_str(text)?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Random probability vector with every entry at least `floor / len`.
fn simplex(rng: &mut ChaCha8Rng, len: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random::<f64>() + floor).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

fn uniform_parts(n_states: usize, n_actions: usize) -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
    (
        DVector::from_element(n_actions, 1.0 / n_actions as f64),
        DVector::from_element(n_states, 1.0 / n_states as f64),
        DMatrix::from_element(n_states, n_actions, 1.0 / (n_states * n_actions) as f64),
    )
}

/// Deterministic instance for `(spec, seed)` with uniform `mu`, `rho` and `beta`.
pub fn generate(spec: &GenSpec, seed: u64) -> Result<Instance> {
    let (ns, na) = (spec.n_states, spec.n_actions);
    if ns == 0 || na == 0 {
        return Err(Error::InvalidArgument(format!("sizes must be at least 1, got {ns} x {na}")));
    }
    let pairs = ns * na;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mu, rho, beta) = uniform_parts(ns, na);
    let (transition, cost, phi) = match spec.features {
        FeatureKind::Onehot | FeatureKind::RandomRank { .. } => {
            let rows: Vec<Vec<f64>> = (0..pairs).map(|_| simplex(&mut rng, ns, 0.05)).collect();
            let cost = DMatrix::from_fn(ns, na, |_, _| rng.random::<f64>());
            let phi = match spec.features {
                FeatureKind::RandomRank { k } => {
                    if k == 0 || k > pairs {
                        return Err(Error::InvalidArgument(format!("random_rank needs 1 <= k <= {pairs}, got {k}")));
                    }
                    DMatrix::from_fn(pairs, k, |_, _| rng.random_range(-1.0..1.0))
                }
                _ => DMatrix::identity(pairs, pairs),
            };
            (matrix_from_rows(&rows, ns, "transition")?, cost, phi)
        }
        FeatureKind::LinearMdp { k } => {
            if k == 0 || k > pairs {
                return Err(Error::InvalidArgument(format!("linear_mdp needs 1 <= k <= {pairs}, got {k}")));
            }
            // Rows of phi and the psi_i are probability vectors, so P is stochastic.
            let phi_rows: Vec<Vec<f64>> = (0..pairs).map(|_| simplex(&mut rng, k, 0.0)).collect();
            let psi_rows: Vec<Vec<f64>> = (0..k).map(|_| simplex(&mut rng, ns, 0.05)).collect();
            let phi = matrix_from_rows(&phi_rows, k, "features")?;
            let psi = matrix_from_rows(&psi_rows, ns, "psi")?;
            let w = DVector::from_fn(k, |_, _| rng.random::<f64>());
            let flat_cost = &phi * w;
            (&phi * psi, DMatrix::from_fn(ns, na, |s, a| flat_cost[s * na + a]), phi)
        }
    };
    let mdp = FiniteMdp {
        n_states: ns,
        n_actions: na,
        transition,
        cost,
        gamma: spec.gamma,
        tau: spec.tau,
        mu,
        rho,
        beta,
    };
    let inst = Instance { features: FeatureMap::new(phi)?, mdp };
    inst.validate()?;
    Ok(inst)
}

pub const DEMO_NAMES: [&str; 3] = ["tabular_6x4", "linear_mdp_4x3", "cycle2"];

/// Bundled demo instances by name.
pub fn demo(name: &str) -> Result<Instance> {
    match name {
        "tabular_6x4" => generate(
            &GenSpec { n_states: 6, n_actions: 4, gamma: 0.05, tau: 1.0, features: FeatureKind::Onehot },
            7,
        ),
        "linear_mdp_4x3" => generate(
            &GenSpec { n_states: 4, n_actions: 3, gamma: 0.05, tau: 1.0, features: FeatureKind::LinearMdp { k: 2 } },
            11,
        ),
        "cycle2" => {
            let (mu, rho, beta) = uniform_parts(2, 2);
            // Both actions move to the other state.
            let transition = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
            let mdp = FiniteMdp {
                n_states: 2,
                n_actions: 2,
                transition,
                cost: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 0.25]),
                gamma: 0.5,
                tau: 0.5,
                mu,
                rho,
                beta,
            };
            let inst = Instance { features: FeatureMap::one_hot(&mdp), mdp };
            inst.validate()?;
            Ok(inst)
        }
        other => Err(Error::InvalidArgument(format!("unknown demo '{other}', expected one of {DEMO_NAMES:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(features: FeatureKind) -> GenSpec {
        GenSpec { n_states: 4, n_actions: 3, gamma: 0.9, tau: 0.5, features }
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let a = generate(&spec(FeatureKind::RandomRank { k: 3 }), 5).unwrap();
        let b = generate(&spec(FeatureKind::RandomRank { k: 3 }), 5).unwrap();
        let c = generate(&spec(FeatureKind::RandomRank { k: 3 }), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn onehot_has_full_dimension() {
        let inst = generate(&spec(FeatureKind::Onehot), 1).unwrap();
        assert_eq!(inst.features.dim, 12);
        assert!(build_certificate(&inst.mdp, &inst.features).unwrap().lambda_beta > 0.0);
    }

    #[test]
    fn infeasible_rank_is_rejected() {
        assert!(generate(&spec(FeatureKind::LinearMdp { k: 0 }), 1).is_err());
        assert!(generate(&spec(FeatureKind::LinearMdp { k: 13 }), 1).is_err());
        assert!(generate(&spec(FeatureKind::RandomRank { k: 13 }), 1).is_err());
    }

    #[test]
    fn instance_json_round_trips() {
        for name in DEMO_NAMES {
            let inst = demo(name).unwrap();
            let back = Instance::from_json_str(&inst.to_json_pretty().unwrap()).unwrap();
            assert_eq!(inst, back, "{name}");
        }
    }

    #[test]
    fn feature_kind_tags() {
        let s = serde_json::to_string(&FeatureKind::LinearMdp { k: 2 }).unwrap();
        assert_eq!(s, r#"{"kind":"linear_mdp","k":2}"#);
    }
}
