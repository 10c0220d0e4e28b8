//! Nearest-neighbor spin systems on trees: symmetric pair potentials with
//! hard constraints, singleton potentials, and the single-site heat-bath
//! kernel they induce.

use alloc::string::{String, ToString};
use alloc::{format, vec, vec::Vec};
use core::fmt;

use crate::tree::{BoundaryCondition, TreeTopology};

/// Spin values are dense indices into a model-owned label table.
pub type Spin = u8;

/// One entry of the pair potential. Hard constraints are an explicit
/// variant rather than a large float, so configuration validity is exact.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Potential {
    Finite(f64),
    Forbidden,
}

impl Potential {
    pub fn is_forbidden(self) -> bool {
        matches!(self, Potential::Forbidden)
    }

    /// Finite energy value, or `None` for a hard constraint.
    pub fn energy(self) -> Option<f64> {
        match self {
            Potential::Finite(e) => Some(e),
            Potential::Forbidden => None,
        }
    }
}

/// The generating parameters of a model instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModelParams {
    Ising { beta: f64, h: f64 },
    HardCore { lambda: f64 },
    Potts { q: usize, beta: f64, antiferro: bool },
    /// Proper colorings: antiferromagnetic Potts at zero temperature,
    /// realized exactly through hard constraints instead of a beta limit.
    Colorings { q: usize },
}

/// Largest supported number of spin values.
pub const MAX_SPINS: usize = 16;

/// Errors from model construction and single-site kernels.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    /// A parameter was NaN, infinite, or out of its admissible range.
    BadParameter(String),
    /// Every spin value at a site is forbidden by the neighbors.
    FrozenContradiction,
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::BadParameter(msg) => write!(f, "bad model parameter: {msg}"),
            ModelError::FrozenContradiction => {
                write!(f, "frozen contradiction: all spin values forbidden at site")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ModelError {}

/// A nearest-neighbor spin system: `spin_count` values, a symmetric pair
/// potential `U` (possibly forbidden) and a singleton potential `W`.
///
/// The Gibbs weight of a valid configuration is
/// `exp[-(sum_edges U + sum_sites W)]`. The Ising instance uses the
/// `+/-1` convention `U(s,s') = -beta*s*s'`, `W(s) = -beta*h*s`; the Potts
/// instance uses `U(s,s') = -/+ beta*delta(s,s')` with `W = 0`. The two
/// conventions differ by constants that cancel in all probabilities.
#[derive(Clone, Debug)]
pub struct SpinModel {
    spin_count: usize,
    pair: Vec<Potential>,
    single: Vec<f64>,
    labels: Vec<String>,
    params: ModelParams,
}

fn require_finite(x: f64, name: &str) -> Result<(), ModelError> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(ModelError::BadParameter(format!("{name} = {x} is not finite")))
    }
}

impl SpinModel {
    /// Ising model at inverse temperature `beta >= 0` and external field `h`.
    ///
    /// Spin index 0 encodes `-1`, index 1 encodes `+1`.
    pub fn ising(beta: f64, h: f64) -> Result<Self, ModelError> {
        require_finite(beta, "beta")?;
        require_finite(h, "h")?;
        if beta < 0.0 {
            return Err(ModelError::BadParameter(format!("beta = {beta} < 0")));
        }
        let sig = |s: usize| 2.0 * s as f64 - 1.0;
        let mut pair = vec![Potential::Finite(0.0); 4];
        for s in 0..2 {
            for t in 0..2 {
                pair[s * 2 + t] = Potential::Finite(-beta * sig(s) * sig(t));
            }
        }
        let single = vec![beta * h, -beta * h];
        Ok(SpinModel {
            spin_count: 2,
            pair,
            single,
            labels: vec!["-".to_string(), "+".to_string()],
            params: ModelParams::Ising { beta, h },
        })
    }

    /// Hard-core lattice gas at activity `lambda > 0`.
    ///
    /// Index 0 is empty, index 1 occupied; adjacent occupied sites are
    /// forbidden, and `mu(sigma)` is proportional to `lambda^(#occupied)`.
    pub fn hard_core(lambda: f64) -> Result<Self, ModelError> {
        require_finite(lambda, "lambda")?;
        if lambda <= 0.0 {
            return Err(ModelError::BadParameter(format!("lambda = {lambda} <= 0")));
        }
        let pair = vec![
            Potential::Finite(1.0), // 00
            Potential::Finite(1.0), // 01
            Potential::Finite(1.0), // 10
            Potential::Forbidden,   // 11
        ];
        let single = vec![0.0, -libm::log(lambda)];
        Ok(SpinModel {
            spin_count: 2,
            pair,
            single,
            labels: vec!["0".to_string(), "1".to_string()],
            params: ModelParams::HardCore { lambda },
        })
    }

    /// q-state Potts model. `antiferro = false` favors equal neighbors.
    pub fn potts(q: usize, beta: f64, antiferro: bool) -> Result<Self, ModelError> {
        require_finite(beta, "beta")?;
        if !(2..=MAX_SPINS).contains(&q) {
            return Err(ModelError::BadParameter(format!(
                "q = {q} outside 2..={MAX_SPINS}"
            )));
        }
        if beta < 0.0 {
            return Err(ModelError::BadParameter(format!("beta = {beta} < 0")));
        }
        let sign = if antiferro { 1.0 } else { -1.0 };
        let mut pair = vec![Potential::Finite(0.0); q * q];
        for s in 0..q {
            pair[s * q + s] = Potential::Finite(sign * beta);
        }
        Ok(SpinModel {
            spin_count: q,
            pair,
            single: vec![0.0; q],
            labels: (1..=q).map(|c| c.to_string()).collect(),
            params: ModelParams::Potts { q, beta, antiferro },
        })
    }

    /// Proper q-colorings: the zero-temperature antiferromagnetic Potts
    /// model, with equal adjacent colors forbidden outright.
    pub fn colorings(q: usize) -> Result<Self, ModelError> {
        if !(2..=MAX_SPINS).contains(&q) {
            return Err(ModelError::BadParameter(format!(
                "q = {q} outside 2..={MAX_SPINS}"
            )));
        }
        let mut pair = vec![Potential::Finite(0.0); q * q];
        for s in 0..q {
            pair[s * q + s] = Potential::Forbidden;
        }
        Ok(SpinModel {
            spin_count: q,
            pair,
            single: vec![0.0; q],
            labels: (1..=q).map(|c| c.to_string()).collect(),
            params: ModelParams::Colorings { q },
        })
    }

    pub fn spin_count(&self) -> usize {
        self.spin_count
    }

    pub fn params(&self) -> ModelParams {
        self.params
    }

    pub fn pair_potential(&self, s: Spin, t: Spin) -> Potential {
        self.pair[s as usize * self.spin_count + t as usize]
    }

    pub fn singleton_potential(&self, s: Spin) -> f64 {
        self.single[s as usize]
    }

    /// Label of a spin value (`-`/`+`, `0`/`1`, or a 1-based color).
    pub fn label(&self, s: Spin) -> &str {
        &self.labels[s as usize]
    }

    pub fn parse_label(&self, label: &str) -> Option<Spin> {
        self.labels.iter().position(|l| l == label).map(|i| i as Spin)
    }

    pub fn is_ising(&self) -> bool {
        matches!(self.params, ModelParams::Ising { .. })
    }

    pub fn has_hard_constraints(&self) -> bool {
        self.pair.iter().any(|p| p.is_forbidden())
    }

    /// Whether heat-bath updates are monotone under a known partial order
    /// (spin order for Ising, checkerboard order for hard-core).
    pub fn is_monotone(&self) -> bool {
        matches!(
            self.params,
            ModelParams::Ising { .. } | ModelParams::HardCore { .. }
        )
    }

    /// Heat-bath conditional distribution of a single spin given the spins
    /// of its neighbors: `p(s)` proportional to `exp[-W(s) - sum_nb U(s, s_nb)]`.
    ///
    /// Fails with `FrozenContradiction` when every value is forbidden, which
    /// cannot happen when the neighbors come from a valid configuration.
    pub fn site_conditional(&self, neighbors: &[Spin]) -> Result<Vec<f64>, ModelError> {
        let q = self.spin_count;
        let mut energy = vec![f64::INFINITY; q];
        let mut min_e = f64::INFINITY;
        for s in 0..q {
            let mut e = self.single[s];
            let mut ok = true;
            for &nb in neighbors {
                match self.pair[s * q + nb as usize] {
                    Potential::Finite(u) => e += u,
                    Potential::Forbidden => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                energy[s] = e;
                if e < min_e {
                    min_e = e;
                }
            }
        }
        if !min_e.is_finite() {
            return Err(ModelError::FrozenContradiction);
        }
        let mut p: Vec<f64> = energy
            .iter()
            .map(|&e| {
                if e.is_finite() {
                    libm::exp(min_e - e)
                } else {
                    0.0
                }
            })
            .collect();
        let z: f64 = p.iter().sum();
        for v in &mut p {
            *v /= z;
        }
        Ok(p)
    }
}

/// A spin assignment for every tree vertex, boundary vertices included
/// (boundary spins are stored inline so conditional code paths are uniform).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Configuration {
    pub spins: Vec<Spin>,
}

impl Configuration {
    pub fn constant(tree: &TreeTopology, s: Spin) -> Self {
        Configuration {
            spins: vec![s; tree.total_vertices()],
        }
    }

    /// Overwrite the boundary slots from a boundary condition; free
    /// boundaries leave the existing values in place.
    pub fn apply_boundary(&mut self, tree: &TreeTopology, bc: &BoundaryCondition) {
        if let BoundaryCondition::Fixed(assignment) = bc {
            for (i, &s) in assignment.iter().enumerate() {
                self.spins[tree.vertex_count() + i] = s;
            }
        }
    }

    /// True when no edge of the tree (boundary edges included) joins a
    /// forbidden pair.
    pub fn is_valid(&self, model: &SpinModel, tree: &TreeTopology) -> bool {
        for v in 0..tree.total_vertices() {
            if self.spins[v] as usize >= model.spin_count() {
                return false;
            }
        }
        for (x, y) in tree.edges() {
            if model.pair_potential(self.spins[x], self.spins[y]).is_forbidden() {
                return false;
            }
        }
        true
    }
}

/// Log Gibbs weight `-(sum_edges U + sum_interior W)` of a configuration,
/// with edges ranging over the tree plus its boundary edges and `W` over
/// interior sites only. `None` for invalid configurations.
pub fn log_gibbs_weight(
    model: &SpinModel,
    tree: &TreeTopology,
    config: &Configuration,
) -> Option<f64> {
    let mut total = 0.0;
    for (x, y) in tree.edges() {
        match model.pair_potential(config.spins[x], config.spins[y]) {
            Potential::Finite(u) => total += u,
            Potential::Forbidden => return None,
        }
    }
    for v in 0..tree.vertex_count() {
        total += model.singleton_potential(config.spins[v]);
    }
    Some(-total)
}

/// Gibbs weight as a plain non-negative number; invalid configurations
/// weigh zero.
pub fn gibbs_weight(model: &SpinModel, tree: &TreeTopology, config: &Configuration) -> f64 {
    log_gibbs_weight(model, tree, config).map_or(0.0, libm::exp)
}
