//! The closed-form recursion machinery of the Ising model on the b-ary
//! tree -- the maps `F`, `K`, `J`, magnetization ratios and the coupling
//! constants kappa/gamma -- together with the phase boundaries of the
//! Ising, hard-core, Potts and colorings models.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::{format, vec, vec::Vec};
use core::fmt;

use crate::exact::MessageSet;
use crate::model::{ModelParams, Spin, SpinModel};
use crate::tree::{Region, TreeTopology};
use crate::util::log_sum_exp;

#[derive(Clone, Debug, PartialEq)]
pub enum AnalyticsError {
    NegativeArgument(f64),
    NoConvergence(String),
    NotIsing,
    RegionTooLarge(String),
    InvalidConditioning,
}

impl fmt::Display for AnalyticsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalyticsError::NegativeArgument(a) => write!(f, "argument {a} must be >= 0"),
            AnalyticsError::NoConvergence(msg) => write!(f, "iteration did not converge: {msg}"),
            AnalyticsError::NotIsing => write!(f, "operation requires an Ising model"),
            AnalyticsError::RegionTooLarge(msg) => write!(f, "region too large: {msg}"),
            AnalyticsError::InvalidConditioning => write!(f, "conditioning forbids every config"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for AnalyticsError {}

/// `F(a) = (a + e^(-2 beta)) / (e^(-2 beta) a + 1)`.
pub fn f_beta(a: f64, beta: f64) -> Result<f64, AnalyticsError> {
    if a < 0.0 {
        return Err(AnalyticsError::NegativeArgument(a));
    }
    let e = libm::exp(-2.0 * beta);
    Ok((a + e) / (e * a + 1.0))
}

/// Derivative of `F`: `(1 - e^(-4 beta)) / (e^(-2 beta) a + 1)^2`.
pub fn f_beta_prime(a: f64, beta: f64) -> f64 {
    let e = libm::exp(-2.0 * beta);
    (1.0 - e * e) / ((e * a + 1.0) * (e * a + 1.0))
}

/// `K(a) = 1/(e^(-2 beta) a + 1) - 1/(e^(2 beta) a + 1)`, the variation
/// distance at a site between the two parent-spin conditionings when the
/// parent-erased magnetization ratio there is `a`.
pub fn k_beta(a: f64, beta: f64) -> Result<f64, AnalyticsError> {
    if a < 0.0 {
        return Err(AnalyticsError::NegativeArgument(a));
    }
    let em = libm::exp(-2.0 * beta);
    let ep = libm::exp(2.0 * beta);
    Ok(1.0 / (em * a + 1.0) - 1.0 / (ep * a + 1.0))
}

/// `J(a) = e^(-2 beta h) F(a)^b`: the one-level magnetization recursion
/// for the all-(+) boundary.
pub fn j_map(a: f64, beta: f64, h: f64, b: usize) -> Result<f64, AnalyticsError> {
    let f = f_beta(a, beta)?;
    Ok(libm::exp(-2.0 * beta * h) * libm::pow(f, b as f64))
}

/// Closed-form derivative of `J`.
pub fn j_prime(a: f64, beta: f64, h: f64, b: usize) -> Result<f64, AnalyticsError> {
    let f = f_beta(a, beta)?;
    Ok(libm::exp(-2.0 * beta * h)
        * b as f64
        * libm::pow(f, b as f64 - 1.0)
        * f_beta_prime(a, beta))
}

/// `J^(l)(0)`: the exact magnetization ratio at distance `l` above the
/// bottom boundary of an all-(+) tree.
pub fn j_iterate(beta: f64, h: f64, b: usize, l: usize) -> Result<f64, AnalyticsError> {
    let mut a = 0.0;
    for _ in 0..l {
        a = j_map(a, beta, h, b)?;
    }
    Ok(a)
}

/// A fixed point of `J` found by monotone iteration.
#[derive(Clone, Copy, Debug)]
pub struct FixedPoint {
    pub a0: f64,
    pub iterations: usize,
    pub residual: f64,
}

const FP_TOL: f64 = 1e-13;
const FP_MAX_ITER: usize = 10_000;

/// Least fixed point of `J`, reached monotonically from below starting
/// at 0, followed by one bisection refinement pass (iteration alone is
/// slow near tangency).
pub fn least_fixed_point(beta: f64, h: f64, b: usize) -> Result<FixedPoint, AnalyticsError> {
    let mut a = 0.0f64;
    let mut iterations = 0;
    loop {
        let next = j_map(a, beta, h, b)?;
        iterations += 1;
        if (next - a).abs() < FP_TOL || iterations >= FP_MAX_ITER {
            a = next;
            break;
        }
        a = next;
    }
    // Refinement: bisect g(x) = J(x) - x on a small bracket around a;
    // g > 0 strictly below the least fixed point.
    let g = |x: f64| j_map(x, beta, h, b).unwrap_or(f64::NAN) - x;
    let mut lo = (a - 1e-6).max(0.0);
    let mut hi = a + 1e-6;
    if g(lo) > 0.0 && g(hi) < 0.0 {
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        a = 0.5 * (lo + hi);
    }
    let residual = g(a).abs();
    Ok(FixedPoint {
        a0: a,
        iterations,
        residual,
    })
}

/// Uniqueness threshold `beta_0 = artanh(1/b)`.
pub fn beta0(b: usize) -> f64 {
    0.5 * libm::log((b as f64 + 1.0) / (b as f64 - 1.0))
}

/// Spin-glass / reconstruction threshold `beta_1 = artanh(1/sqrt(b))`.
pub fn beta1(b: usize) -> f64 {
    let r = libm::sqrt(b as f64);
    0.5 * libm::log((r + 1.0) / (r - 1.0))
}

/// Hard-core critical activity `lambda_0 = b^b / (b-1)^(b+1)`.
pub fn lambda0(b: usize) -> f64 {
    let b = b as f64;
    libm::pow(b, b) / libm::pow(b - 1.0, b + 1.0)
}

/// Critical field `h_c(beta)` of the Ising model on the b-ary tree;
/// zero for `beta <= beta_0`.
///
/// At the critical field the least fixed point of `J` is tangent:
/// `J(a) = a` and `J'(a) = 1` hold simultaneously. By the fixed-point
/// identity `J'(a) = b K(a)` the tangency abscissa solves `b K(a) = 1`,
/// which is the quadratic `a^2 - Ba + 1 = 0` with
/// `B = b (e^{2beta} - e^{-2beta}) - (e^{2beta} + e^{-2beta})`; the field
/// then follows from `e^(-2 beta h) F(a)^b = a`.
pub fn critical_field(beta: f64, b: usize) -> f64 {
    let ep = libm::exp(2.0 * beta);
    let em = libm::exp(-2.0 * beta);
    let big = b as f64 * (ep - em) - (ep + em);
    if big <= 2.0 {
        return 0.0;
    }
    let a_minus = 0.5 * (big - libm::sqrt(big * big - 4.0));
    let f = f_beta(a_minus, beta).expect("a >= 0");
    (libm::log(a_minus) - b as f64 * libm::log(f)) / (2.0 * beta)
}

/// Ferromagnetic Potts threshold for the free boundary: the solution of
/// `(u-1)/(u+q-1) * (u-1)/(u+1) = 1/b` in `u = e^(2 beta)`.
pub fn potts_beta1(b: usize, q: usize) -> f64 {
    let target = 1.0 / b as f64;
    let g = |u: f64| (u - 1.0) / (u + q as f64 - 1.0) * ((u - 1.0) / (u + 1.0)) - target;
    let mut lo = 1.0;
    let mut hi = 2.0;
    while g(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * libm::log(0.5 * (lo + hi))
}

/// Upper bound on the Potts uniqueness threshold,
/// `beta_0 < (1/2) ln((b+q-1)/(b-1))`; exact for `q = 2`.
pub fn potts_beta0_upper(b: usize, q: usize) -> f64 {
    0.5 * libm::log((b as f64 + q as f64 - 1.0) / (b as f64 - 1.0))
}

/// The critical-value table for a branching number and state count.
#[derive(Clone, Copy, Debug)]
pub struct CriticalValues {
    pub b: usize,
    pub q: usize,
    pub beta0: f64,
    pub beta1: f64,
    pub lambda0: f64,
    pub potts_beta1: f64,
    pub potts_beta0_upper: f64,
}

pub fn critical_values(b: usize, q: usize) -> CriticalValues {
    CriticalValues {
        b,
        q,
        beta0: beta0(b),
        beta1: beta1(b),
        lambda0: lambda0(b),
        potts_beta1: potts_beta1(b, q),
        potts_beta0_upper: potts_beta0_upper(b, q),
    }
}

/// Exact magnetization ratio `R_z = Z_z(-)/Z_z(+)` (parent edge erased)
/// for every vertex, from the upward messages of an Ising tree.
pub fn magnetization_ratios(ms: &MessageSet<'_>) -> Result<Vec<f64>, AnalyticsError> {
    if !ms.model.is_ising() {
        return Err(AnalyticsError::NotIsing);
    }
    Ok((0..ms.tree.vertex_count())
        .map(|z| libm::exp(ms.log_z(z, 0) - ms.log_z(z, 1)))
        .collect())
}

/// Worst-case single-edge disagreement `gamma = K(1) = tanh(beta)` for the
/// Ising model; boundary independent.
pub fn gamma_ising(beta: f64) -> f64 {
    libm::tanh(beta)
}

/// Exact finite-tree kappa together with the fixed-point bound.
#[derive(Clone, Copy, Debug)]
pub struct KappaIsing {
    /// `max_z K(R_z)` on this tree with this boundary.
    pub kappa: f64,
    /// `K(a_0)` when `h >= -h_c` (the regime where `a_0 <= 1`); falls back
    /// to `K(1)` otherwise.
    pub bound: f64,
    /// Set when the fallback bound was used.
    pub bound_is_fallback: bool,
}

/// kappa for an Ising tree: the exact finite-tree value `max_z K(R_z)`
/// plus the fixed-point bound `K(a_0)` appropriate for the (+)-boundary.
pub fn kappa_ising(ms: &MessageSet<'_>) -> Result<KappaIsing, AnalyticsError> {
    let (beta, h) = match ms.model.params() {
        ModelParams::Ising { beta, h } => (beta, h),
        _ => return Err(AnalyticsError::NotIsing),
    };
    let b = ms.tree.branching();
    let mut kappa = 0.0f64;
    for r in magnetization_ratios(ms)? {
        kappa = kappa.max(k_beta(r, beta)?);
    }
    let hc = critical_field(beta, b);
    let (bound, bound_is_fallback) = if h >= -hc {
        let fp = least_fixed_point(beta, h, b)?;
        (k_beta(fp.a0, beta)?, false)
    } else {
        (k_beta(1.0, beta)?, true)
    };
    Ok(KappaIsing {
        kappa,
        bound,
        bound_is_fallback,
    })
}

/// Exact finite-tree kappa for any model: the largest variation distance
/// at `z` between the subtree measures induced by two parent spins.
pub fn kappa_exact(ms: &MessageSet<'_>) -> Result<f64, AnalyticsError> {
    let q = ms.model.spin_count();
    let mut kappa = 0.0f64;
    // The root takes part through a phantom parent edge, matching the
    // parent-erased ratio convention.
    for z in 0..ms.tree.vertex_count() {
        let margs: Vec<Option<Vec<f64>>> = (0..q)
            .map(|sp| ms.subtree_marginal(z, Some(sp as Spin)).ok())
            .collect();
        for s1 in 0..q {
            for s2 in s1 + 1..q {
                if let (Some(p1), Some(p2)) = (&margs[s1], &margs[s2]) {
                    kappa = kappa.max(tv_distance(p1, p2));
                }
            }
        }
    }
    Ok(kappa)
}

pub fn tv_distance(p1: &[f64], p2: &[f64]) -> f64 {
    0.5 * p1
        .iter()
        .zip(p2)
        .map(|(&a, &b)| (a - b).abs())
        .sum::<f64>()
}

/// Exact conditional distribution of a small region given a partial
/// assignment on its boundary: boundary sites present in `eta` are fixed,
/// absent ones have their edges erased.
pub struct RegionTable {
    /// Region sites in ascending (breadth-first) id order.
    pub sites: Vec<usize>,
    pub states: Vec<Vec<Spin>>,
    pub probs: Vec<f64>,
}

const MAX_REGION_STATES: usize = 1 << 20;

pub fn region_conditional(
    model: &SpinModel,
    tree: &TreeTopology,
    region: &Region,
    eta: &BTreeMap<usize, Spin>,
) -> Result<RegionTable, AnalyticsError> {
    let q = model.spin_count();
    let mut sites = region.vertices.clone();
    sites.sort_unstable();
    let mut bound = 1usize;
    for _ in 0..sites.len() {
        bound = bound.saturating_mul(q);
        if bound > MAX_REGION_STATES {
            return Err(AnalyticsError::RegionTooLarge(format!(
                "{} sites with {q} spins",
                sites.len()
            )));
        }
    }
    let pos: BTreeMap<usize, usize> = sites.iter().enumerate().map(|(i, &v)| (v, i)).collect();

    fn energy_at(
        model: &SpinModel,
        tree: &TreeTopology,
        sites: &[usize],
        pos: &BTreeMap<usize, usize>,
        eta: &BTreeMap<usize, Spin>,
        assign: &[Spin],
        i: usize,
        s: Spin,
    ) -> Option<f64> {
        let v = sites[i];
        let mut e = model.singleton_potential(s);
        if let Some(p) = tree.parent(v) {
            if let Some(&pi) = pos.get(&p) {
                e += model.pair_potential(s, assign[pi]).energy()?;
            } else if let Some(&tau) = eta.get(&p) {
                e += model.pair_potential(s, tau).energy()?;
            }
        }
        for c in tree.children(v) {
            if pos.contains_key(&c) {
                continue; // counted when c itself is assigned
            }
            if let Some(&tau) = eta.get(&c) {
                e += model.pair_potential(s, tau).energy()?;
            }
        }
        Some(e)
    }

    // DFS in ascending id order; a site's in-region parent has a smaller
    // id and is therefore already assigned.
    let k = sites.len();
    let mut states = Vec::new();
    let mut log_w = Vec::new();
    let mut assign = vec![0 as Spin; k];
    let mut next_spin = vec![0usize; k];
    let mut energy = vec![0.0f64; k + 1];
    let mut i = 0usize;
    loop {
        if next_spin[i] == q {
            next_spin[i] = 0;
            if i == 0 {
                break;
            }
            i -= 1;
            next_spin[i] += 1;
            continue;
        }
        let s = next_spin[i] as Spin;
        match energy_at(model, tree, &sites, &pos, eta, &assign, i, s) {
            Some(e) => {
                assign[i] = s;
                energy[i + 1] = energy[i] + e;
                if i + 1 == k {
                    states.push(assign.clone());
                    log_w.push(-energy[k]);
                    next_spin[i] += 1;
                } else {
                    i += 1;
                }
            }
            None => next_spin[i] += 1,
        }
    }
    if states.is_empty() {
        return Err(AnalyticsError::InvalidConditioning);
    }
    let log_z = log_sum_exp(&log_w);
    let probs = log_w.iter().map(|&l| libm::exp(l - log_z)).collect();
    Ok(RegionTable {
        sites,
        states,
        probs,
    })
}

impl RegionTable {
    pub fn marginal_at(&self, v: usize, q: usize) -> Vec<f64> {
        let i = self
            .sites
            .iter()
            .position(|&s| s == v)
            .expect("site in region");
        let mut p = vec![0.0; q];
        for (st, &pr) in self.states.iter().zip(&self.probs) {
            p[st[i] as usize] += pr;
        }
        p
    }
}

/// `max over changes at y of || mu_A^eta - mu_A^(eta^y) ||_z`: the exact
/// single-site disagreement seen at `z in A` when the boundary site `y`
/// changes, the quantity behind both kappa and gamma.
pub fn tv_disagreement(
    model: &SpinModel,
    tree: &TreeTopology,
    region: &Region,
    eta: &BTreeMap<usize, Spin>,
    y: usize,
    z: usize,
) -> Result<f64, AnalyticsError> {
    let q = model.spin_count();
    let base = region_conditional(model, tree, region, eta)?;
    let p_base = base.marginal_at(z, q);
    let s_y = *eta.get(&y).expect("y must be fixed in eta");
    let mut worst = 0.0f64;
    for alt in 0..q as Spin {
        if alt == s_y {
            continue;
        }
        let mut eta2 = eta.clone();
        eta2.insert(y, alt);
        // A change that forbids every configuration is skipped.
        if let Ok(table) = region_conditional(model, tree, region, &eta2) {
            worst = worst.max(tv_distance(&p_base, &table.marginal_at(z, q)));
        }
    }
    Ok(worst)
}

/// Provenance marker for coupling constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Analytic,
    Numeric,
}

#[derive(Clone, Copy, Debug)]
pub struct CouplingConstants {
    pub kappa: f64,
    pub gamma: f64,
    pub provenance: Provenance,
}

/// Numeric kappa/gamma estimates for the models without closed forms:
/// kappa from the exact finite-tree subtree marginals, gamma by maximizing
/// the exact disagreement over upward path regions of at most `max_path`
/// vertices and every boundary assignment around them.
pub fn coupling_constants_numeric(
    ms: &MessageSet<'_>,
    max_path: usize,
) -> Result<CouplingConstants, AnalyticsError> {
    let model = ms.model;
    let tree = ms.tree;
    let q = model.spin_count();
    let kappa = kappa_exact(ms)?;

    let mut gamma = 0.0f64;
    for start in 0..tree.vertex_count() {
        let mut path = vec![start];
        for _ in 1..max_path {
            match tree.parent(*path.last().unwrap()) {
                Some(p) if p < tree.vertex_count() => path.push(p),
                _ => break,
            }
        }
        for k in 1..=path.len() {
            let region = Region {
                vertices: path[..k].to_vec(),
            };
            let boundary = region.boundary(tree);
            if libm::pow(q as f64, boundary.len() as f64) > 4096.0 {
                continue;
            }
            // z sits at the bottom of the path; y ranges over its
            // boundary neighbors.
            let z = start;
            let neighbors: Vec<usize> = boundary
                .iter()
                .copied()
                .filter(|&y| tree.parent(z) == Some(y) || tree.children(z).any(|c| c == y))
                .collect();
            let mut assign = vec![0 as Spin; boundary.len()];
            loop {
                let eta: BTreeMap<usize, Spin> = boundary
                    .iter()
                    .copied()
                    .zip(assign.iter().copied())
                    .collect();
                for &y in &neighbors {
                    if let Ok(tv) = tv_disagreement(model, tree, &region, &eta, y, z) {
                        gamma = gamma.max(tv);
                    }
                }
                // Next boundary assignment in mixed radix.
                let mut pos = 0;
                while pos < assign.len() {
                    assign[pos] += 1;
                    if (assign[pos] as usize) < q {
                        break;
                    }
                    assign[pos] = 0;
                    pos += 1;
                }
                if pos == assign.len() {
                    break;
                }
            }
        }
    }
    Ok(CouplingConstants {
        kappa,
        gamma: gamma.max(kappa),
        provenance: Provenance::Numeric,
    })
}

/// A boundary that freezes every interior vertex of the colorings model:
/// top-down, the children of a vertex exhibit every color other than its
/// own, so each color is forced from below. Exists exactly for
/// `q <= b + 1`. Returns the boundary together with the unique coloring it
/// forces on the interior.
pub fn frozen_colorings_boundary(
    tree: &TreeTopology,
    q: usize,
    root_color: Spin,
) -> Result<(crate::tree::BoundaryCondition, Vec<Spin>), AnalyticsError> {
    if q < 2 || q > tree.branching() + 1 {
        return Err(AnalyticsError::NoConvergence(format!(
            "frozen boundary needs 2 <= q <= b+1, got q={q}, b={}",
            tree.branching()
        )));
    }
    let n = tree.vertex_count();
    let mut target = vec![0 as Spin; tree.total_vertices()];
    target[0] = root_color;
    for v in 0..n {
        let tv = target[v];
        let others: Vec<Spin> = (0..q as Spin).filter(|&c| c != tv).collect();
        for (j, c) in tree.children(v).enumerate() {
            target[c] = others[j % others.len()];
        }
    }
    let assignment = target[n..].to_vec();
    Ok((
        crate::tree::BoundaryCondition::Fixed(assignment),
        target[..n].to_vec(),
    ))
}

/// One step of the hard-core occupied/empty likelihood-ratio recursion,
/// `R' = lambda / (1 + R)^b`.
pub fn hardcore_step(r: f64, lambda: f64, b: usize) -> f64 {
    lambda / libm::pow(1.0 + r, b as f64)
}

/// Trajectory of the hard-core ratio recursion from a starting value.
pub fn hardcore_ratio_trajectory(lambda: f64, b: usize, levels: usize, start: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(levels + 1);
    let mut r = start;
    out.push(r);
    for _ in 0..levels {
        r = hardcore_step(r, lambda, b);
        out.push(r);
    }
    out
}

/// Gap between the greatest and least fixed points of the two-step
/// hard-core map; positive exactly when a two-cycle has opened.
fn hardcore_two_cycle_gap(lambda: f64, b: usize) -> f64 {
    let g = |r: f64| hardcore_step(hardcore_step(r, lambda, b), lambda, b);
    let mut lo = 0.0f64;
    let mut hi = lambda; // R(0) = lambda is the largest reachable ratio
    for _ in 0..200_000 {
        let (nlo, nhi) = (g(lo), g(hi));
        if (nlo - lo).abs() < 1e-14 && (nhi - hi).abs() < 1e-14 {
            lo = nlo;
            hi = nhi;
            break;
        }
        lo = nlo;
        hi = nhi;
    }
    hi - lo
}

/// Smallest activity at which the two-step recursion map acquires distinct
/// stable fixed points, located by bisection on the two-cycle gap.
pub fn hardcore_cycle_onset(b: usize) -> f64 {
    let has_cycle = |lambda: f64| hardcore_two_cycle_gap(lambda, b) > 1e-8;
    let mut lo = 1e-3;
    let mut hi = 1.0;
    while has_cycle(lo) {
        lo *= 0.5;
    }
    while !has_cycle(hi) {
        hi *= 2.0;
        if hi > 1e6 {
            return f64::INFINITY;
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if has_cycle(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::upward_messages;
    use crate::tree::BoundaryCondition;

    #[test]
    fn k_beta_basics() {
        for beta in [0.2, 0.9, 2.1] {
            assert_eq!(k_beta(0.0, beta).unwrap(), 0.0);
        }
        for a in [0.0, 0.5, 1.0, 3.7] {
            assert!(k_beta(a, 0.0).unwrap().abs() < 1e-15);
        }
        for beta in [0.3, 1.0, 1.7] {
            assert!((k_beta(1.0, beta).unwrap() - libm::tanh(beta)).abs() < 1e-14);
        }
        // At b=2 and beta = beta_1(2), K(1) = 1/sqrt(2).
        let k = k_beta(1.0, beta1(2)).unwrap();
        assert!((k - 1.0 / libm::sqrt(2.0)).abs() < 1e-12);
        assert!(k_beta(-0.1, 1.0).is_err());
        assert!(f_beta(-0.1, 1.0).is_err());
    }

    #[test]
    fn critical_points_closed_forms() {
        assert!((beta0(2) - 0.5 * libm::log(3.0)).abs() < 1e-15);
        assert!((beta0(2) - 0.549306).abs() < 1e-6);
        assert!((beta1(2) - 0.881374).abs() < 1e-6);
        for b in 2..=9 {
            assert!((libm::tanh(beta1(b)) - 1.0 / libm::sqrt(b as f64)).abs() < 1e-12);
            assert!(beta0(b) < beta1(b));
        }
        assert!((lambda0(2) - 4.0).abs() < 1e-12);
        assert!((lambda0(5) - 3125.0 / 4096.0).abs() < 1e-12);
        // 1/(sqrt(b)-1) exceeds lambda_0 for b >= 5.
        for b in 5..=9 {
            assert!(1.0 / (libm::sqrt(b as f64) - 1.0) > lambda0(b));
        }
    }

    #[test]
    fn potts_beta1_solves_threshold_equation() {
        // b=2, q=3: u^2 - 7u = 0, so u = 7.
        let v = potts_beta1(2, 3);
        assert!((v - 0.5 * libm::log(7.0)).abs() < 1e-9);
        assert!((v - 0.972955).abs() < 1e-6);
        // q=2 coincides with the Ising beta_1.
        for b in [2usize, 3, 5] {
            assert!((potts_beta1(b, 2) - beta1(b)).abs() < 1e-9);
        }
        assert!((potts_beta0_upper(2, 2) - beta0(2)).abs() < 1e-12);
    }

    #[test]
    fn j_fixed_point_and_depth_one() {
        // beta = 0: F = 1 identically, so the fixed point is 1.
        let fp = least_fixed_point(0.0, 0.7, 2).unwrap();
        assert!((fp.a0 - 1.0).abs() < 1e-12);
        // Depth-1 evaluation J(0) = F(0)^b = e^(-4 beta) at h=0, b=2.
        for beta in [0.3, 1.0, 2.5] {
            let r = j_iterate(beta, 0.0, 2, 1).unwrap();
            assert!((r - libm::exp(-4.0 * beta)).abs() < 1e-12);
        }
        // Iteration agrees with an independent bisection for the least root.
        let beta = 1.0;
        let fp = least_fixed_point(beta, 0.0, 2).unwrap();
        let g = |x: f64| j_map(x, beta, 0.0, 2).unwrap() - x;
        let (mut lo, mut hi) = (0.0, 1.0);
        assert!(g(lo) > 0.0);
        while g(hi) > 0.0 {
            hi += 1.0;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((fp.a0 - 0.5 * (lo + hi)).abs() < 1e-12);
        // J'(a0) <= 1 and iteration from 0 increases monotonically.
        assert!(j_prime(fp.a0, beta, 0.0, 2).unwrap() <= 1.0 + 1e-12);
        let mut prev = 0.0;
        for l in 1..12 {
            let r = j_iterate(beta, 0.0, 2, l).unwrap();
            assert!(r >= prev - 1e-15);
            assert!(r <= fp.a0 + 1e-12);
            prev = r;
        }
    }

    #[test]
    fn fixed_point_derivative_identity() {
        // K(a0) = J'(a0)/b on a grid, J' both closed-form and by central
        // finite difference.
        for &b in &[2usize, 3, 4] {
            for &beta in &[0.1, 0.5, 1.0, 2.0, 3.0] {
                for &h in &[-0.5, 0.0, 0.3, 1.0] {
                    let fp = least_fixed_point(beta, h, b).unwrap();
                    let k = k_beta(fp.a0, beta).unwrap();
                    let jp = j_prime(fp.a0, beta, h, b).unwrap();
                    assert!(
                        (k - jp / b as f64).abs() < 1e-9,
                        "b={b} beta={beta} h={h}: K={k} J'/b={}",
                        jp / b as f64
                    );
                    let step = 1e-6;
                    let lo = (fp.a0 - step).max(0.0);
                    let fd = (j_map(fp.a0 + step, beta, h, b).unwrap()
                        - j_map(lo, beta, h, b).unwrap())
                        / (fp.a0 + step - lo);
                    assert!((fd - jp).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn critical_field_properties() {
        assert_eq!(critical_field(0.3, 2), 0.0); // below beta_0
        assert_eq!(critical_field(beta0(2), 2), 0.0);
        // Spot values validated against an independent uniqueness-onset
        // bisection of the fixed-point structure.
        assert!((critical_field(1.2, 2) - 0.42932222).abs() < 1e-7);
        assert!((critical_field(1.5, 3) - 1.36472791).abs() < 1e-7);
        // h_c decreases to 0 as beta decreases to beta_0.
        let mut prev = f64::INFINITY;
        for k in 1..10 {
            let beta = beta0(2) + libm::pow(2.0, -(k as f64));
            let hc = critical_field(beta, 2);
            assert!(hc > 0.0);
            assert!(hc < prev);
            prev = hc;
        }
        assert!(prev < 1e-2);
        // Tangency: locate the abscissa with b*K(a) = 1 by an independent
        // bisection; at h = -h_c it must satisfy both J(a) = a and J' = 1.
        let beta = 1.2;
        let b = 2usize;
        let hc = critical_field(beta, b);
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if b as f64 * k_beta(mid, beta).unwrap() < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let a_tan = 0.5 * (lo + hi);
        assert!((j_map(a_tan, beta, -hc, b).unwrap() - a_tan).abs() < 1e-9);
        assert!((j_prime(a_tan, beta, -hc, b).unwrap() - 1.0).abs() < 1e-9);
        // Plain iteration approaches the tangent point, slowly (rate 1/k).
        let fp = least_fixed_point(beta, -hc, b).unwrap();
        assert!((fp.a0 - a_tan).abs() < 5e-3);
    }

    #[test]
    fn magnetization_ratio_matches_j_iteration() {
        // All-(+) boundary: R_z = J^(l)(0) with l the distance from the
        // bottom boundary.
        for &(b, m) in &[(2usize, 3usize), (3, 2)] {
            for &beta in &[0.4, 1.0] {
                for &h in &[0.0, 0.3] {
                    let model = SpinModel::ising(beta, h).unwrap();
                    let tree = TreeTopology::build(b, m).unwrap();
                    let bc = BoundaryCondition::all_constant(&tree, 1);
                    let ms = upward_messages(&model, &tree, &bc).unwrap();
                    let ratios = magnetization_ratios(&ms).unwrap();
                    for z in 0..tree.vertex_count() {
                        let l = m + 1 - tree.level(z);
                        let expect = j_iterate(beta, h, b, l).unwrap();
                        assert!(
                            (ratios[z] - expect).abs() <= 1e-9 * expect.max(1.0),
                            "z={z}: {} vs {}",
                            ratios[z],
                            expect
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn ratios_stay_below_fixed_point() {
        // For h >= -h_c and (+)-boundary, R_z <= a_0 everywhere.
        let beta = 2.0;
        let b = 2;
        let model = SpinModel::ising(beta, 0.0).unwrap();
        let tree = TreeTopology::build(b, 4).unwrap();
        let bc = BoundaryCondition::all_constant(&tree, 1);
        let ms = upward_messages(&model, &tree, &bc).unwrap();
        let fp = least_fixed_point(beta, 0.0, b).unwrap();
        for r in magnetization_ratios(&ms).unwrap() {
            assert!(r <= fp.a0 + 1e-12);
        }
        // and b * K(a0) = J'(a0) <= 1.
        let kb = kappa_ising(&ms).unwrap();
        assert!(!kb.bound_is_fallback);
        assert!(b as f64 * kb.bound <= 1.0 + 1e-12);
        assert!(kb.kappa <= kb.bound + 1e-12);
    }

    #[test]
    fn kappa_gamma_zero_at_beta_zero() {
        let model = SpinModel::ising(0.0, 0.0).unwrap();
        let tree = TreeTopology::build(2, 2).unwrap();
        let bc = BoundaryCondition::all_constant(&tree, 1);
        let ms = upward_messages(&model, &tree, &bc).unwrap();
        let kb = kappa_ising(&ms).unwrap();
        assert!(kb.kappa.abs() < 1e-14);
        assert_eq!(gamma_ising(0.0), 0.0);
        let cc = coupling_constants_numeric(&ms, 2).unwrap();
        assert!(cc.kappa < 1e-12);
        assert!(cc.gamma < 1e-12);
    }

    #[test]
    fn kappa_exact_agrees_with_k_of_r() {
        let model = SpinModel::ising(0.9, 0.1).unwrap();
        let tree = TreeTopology::build(2, 2).unwrap();
        let bc = BoundaryCondition::all_constant(&tree, 1);
        let ms = upward_messages(&model, &tree, &bc).unwrap();
        let via_k = kappa_ising(&ms).unwrap().kappa;
        let direct = kappa_exact(&ms).unwrap();
        assert!((via_k - direct).abs() < 1e-12);
    }

    #[test]
    fn tv_disagreement_matches_k_of_r() {
        // On a subtree region, flipping the parent y and reading z below
        // equals K(R) with R the y-erased magnetization ratio.
        let beta = 1.1;
        let model = SpinModel::ising(beta, -0.2).unwrap();
        let tree = TreeTopology::build(2, 2).unwrap();
        let bc = BoundaryCondition::all_constant(&tree, 1);
        let ms = upward_messages(&model, &tree, &bc).unwrap();
        let z = 1usize;
        let region = tree.subtree(z).unwrap();
        let mut eta = BTreeMap::new();
        eta.insert(0usize, 1 as Spin);
        if let BoundaryCondition::Fixed(assign) = &bc {
            for v in region.boundary(&tree) {
                if tree.is_boundary(v) {
                    eta.insert(v, assign[v - tree.vertex_count()]);
                }
            }
        }
        let tv = tv_disagreement(&model, &tree, &region, &eta, 0, z).unwrap();
        let r = magnetization_ratios(&ms).unwrap()[z];
        let expect = k_beta(r, beta).unwrap();
        assert!((tv - expect).abs() < 1e-10, "{tv} vs {expect}");
    }

    #[test]
    fn gamma_numeric_bounded_by_tanh_for_ising() {
        let model = SpinModel::ising(0.8, 0.0).unwrap();
        let tree = TreeTopology::build(2, 2).unwrap();
        let bc = BoundaryCondition::Free;
        let ms = upward_messages(&model, &tree, &bc).unwrap();
        let cc = coupling_constants_numeric(&ms, 3).unwrap();
        let g = gamma_ising(0.8);
        assert!(cc.gamma <= g + 1e-10);
        // A single free leaf has erased ratio 1, which attains tanh(beta).
        assert!(cc.gamma > 0.9 * g);
        assert!(cc.kappa <= cc.gamma + 1e-12);
    }

    #[test]
    fn hardcore_recursion_and_onset() {
        // Small lambda: R -> lambda.
        for b in [2usize, 3] {
            let traj = hardcore_ratio_trajectory(1e-6, b, 5, 0.0);
            assert!((traj[1] - 1e-6).abs() < 1e-12);
        }
        for b in [2usize, 3, 4] {
            let onset = hardcore_cycle_onset(b);
            assert!(
                (onset - lambda0(b)).abs() < 1e-3,
                "b={b}: onset {onset} vs lambda0 {}",
                lambda0(b)
            );
        }
    }
}
