//! Exact and Monte Carlo analysis of heat-bath Glauber dynamics for
//! nearest-neighbor spin systems on complete b-ary trees.
//!
//! The crate provides:
//!
//! * spin-system definitions with hard constraints ([`model`]) on complete
//!   b-ary trees with fixed or free boundaries ([`tree`]);
//! * exact tree inference: partition-weight messages, conditional marginals,
//!   perfect sampling, and variance/entropy functionals with a brute-force
//!   oracle on small trees ([`exact`]);
//! * the Ising recursion machinery: the maps `F`, `K`, `J`, their fixed
//!   points, coupling constants kappa/gamma, and the phase boundaries of the
//!   Ising, hard-core, Potts and colorings models ([`analytics`]);
//! * dense generator-level analysis on small state spaces: spectral gap,
//!   Dirichlet forms, a numeric log-Sobolev upper bound and exact `L^p`
//!   mixing times ([`spectrum`]);
//! * numeric verification of the variance/entropy spatial-mixing conditions
//!   and root-contraction constants ([`mixing`]);
//! * seeded Glauber chains, grand couplings and the recursive down/up
//!   couplings with their tail statistics ([`sim`]).
//!
//! Everything here is deterministic given seeds and free of IO; the
//! companion `treegibbs` crate adds the CLI, config files and output
//! formats. The crate builds without `std` (with `alloc`).

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(feature = "std")]
extern crate std;

pub mod analytics;
pub mod exact;
pub mod linalg;
pub mod mixing;
pub mod model;
pub mod sim;
pub mod spectrum;
pub mod tree;

pub(crate) mod util {
    /// Numerically stable log of a sum of exponentials.
    pub fn log_sum_exp(terms: &[f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for &t in terms {
            if t > max {
                max = t;
            }
        }
        if !max.is_finite() {
            return f64::NEG_INFINITY;
        }
        let sum: f64 = terms.iter().map(|&t| libm::exp(t - max)).sum();
        max + libm::log(sum)
    }
}
