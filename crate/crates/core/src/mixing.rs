//! Numeric verification of the variance and entropy spatial-mixing
//! conditions: the dual root-contraction constant, projection ratios for
//! concrete functions of the level-`l` row, the modified decay
//! inequalities, the level-`l` likelihood-ratio statistic, and the minimum
//! conditional spin probability.

use alloc::string::String;
use alloc::{format, vec, vec::Vec};
use core::fmt;

use nalgebra::DMatrix;
use rand::Rng;

use crate::exact::{ExactError, ExactSpace, MessageSet};
use crate::linalg::dense_sym_eigen;
use crate::model::{Configuration, Potential, Spin};
use crate::util::log_sum_exp;

/// Cap on the number of level-row configurations that are enumerated.
pub const MAX_ROW_CONFIGS: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq)]
pub enum MixingError {
    RowTooLarge(String),
    BadDepth(String),
    ZeroProbabilityRow,
    Exact(ExactError),
}

impl fmt::Display for MixingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MixingError::RowTooLarge(msg) => write!(f, "level row too large: {msg}"),
            MixingError::BadDepth(msg) => write!(f, "bad depth: {msg}"),
            MixingError::ZeroProbabilityRow => write!(f, "row configuration has probability zero"),
            MixingError::Exact(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MixingError {}

impl From<ExactError> for MixingError {
    fn from(e: ExactError) -> Self {
        MixingError::Exact(e)
    }
}

/// Log weights of the root spin of `T_x` with the interior row at distance
/// `l` clamped to `rvec`: the levels in between are summed out and
/// everything below the row enters through the upward messages. The parent
/// edge of `x` is not included.
fn clamped_root_weights(
    ms: &MessageSet<'_>,
    x: usize,
    row_sites: &[usize],
    rvec: &[Spin],
) -> Vec<f64> {
    let model = ms.model;
    let tree = ms.tree;
    let q = model.spin_count();
    let lx = tree.level(x);
    let l = tree.level(row_sites[0]) - lx;
    let block = tree.block(x, l).expect("x interior");
    let ids = &block.vertices;
    let mut msg = vec![f64::NEG_INFINITY; ids.len() * q];
    let local = |v: usize| ids.binary_search(&v).expect("block vertex");
    for (i, &v) in ids.iter().enumerate().rev() {
        for s in 0..q {
            let mut acc = -model.singleton_potential(s as Spin);
            for c in tree.children(v) {
                if let Ok(r) = row_sites.binary_search(&c) {
                    // Clamped child: its subtree weight enters at the
                    // clamped spin only.
                    let sc = rvec[r];
                    acc += match model.pair_potential(s as Spin, sc) {
                        Potential::Finite(u) => -u + ms.log_z(c, sc),
                        Potential::Forbidden => f64::NEG_INFINITY,
                    };
                } else {
                    // Block child between x and the row.
                    let ci = local(c);
                    let mut terms = vec![f64::NEG_INFINITY; q];
                    for (sc, t) in terms.iter_mut().enumerate() {
                        *t = match model.pair_potential(s as Spin, sc as Spin) {
                            Potential::Finite(u) => -u + msg[ci * q + sc],
                            Potential::Forbidden => f64::NEG_INFINITY,
                        };
                    }
                    acc += log_sum_exp(&terms);
                }
            }
            msg[i * q + s] = acc;
        }
    }
    msg[..q].to_vec()
}

/// The exact joint law of the root spin of `T_x` and the interior row at
/// distance `l` below it, under the subtree measure with an optional
/// parent-spin conditioning.
pub struct RootRowJoint {
    /// Marginal of the root spin.
    pub root_marginal: Vec<f64>,
    /// One entry per row configuration of positive probability.
    pub rows: Vec<RowState>,
    pub row_sites: Vec<usize>,
}

/// A row configuration together with its probability and the conditional
/// root distribution it induces.
#[derive(Clone, Debug)]
pub struct RowState {
    pub config: Vec<Spin>,
    pub prob: f64,
    pub cond_root: Vec<f64>,
}

impl RootRowJoint {
    pub fn compute(
        ms: &MessageSet<'_>,
        x: usize,
        l: usize,
        parent_spin: Option<Spin>,
    ) -> Result<Self, MixingError> {
        let tree = ms.tree;
        let model = ms.model;
        let q = model.spin_count();
        if l == 0 {
            return Err(MixingError::BadDepth("row distance must be >= 1".into()));
        }
        let row_sites = tree
            .row_below(x, l)
            .map_err(|e| MixingError::BadDepth(format!("{e}")))?;
        if row_sites.iter().any(|&v| tree.is_boundary(v)) {
            return Err(MixingError::BadDepth(
                "row reaches the fixed boundary".into(),
            ));
        }
        let mut count = 1usize;
        for _ in 0..row_sites.len() {
            count = count.saturating_mul(q);
            if count > MAX_ROW_CONFIGS {
                return Err(MixingError::RowTooLarge(format!(
                    "{} sites with {q} spins",
                    row_sites.len()
                )));
            }
        }

        let parent_term = |s: usize| -> f64 {
            match parent_spin {
                None => 0.0,
                Some(sp) => match model.pair_potential(s as Spin, sp) {
                    Potential::Finite(u) => -u,
                    Potential::Forbidden => f64::NEG_INFINITY,
                },
            }
        };

        let mut rvec = vec![0 as Spin; row_sites.len()];
        let mut raw: Vec<(Vec<Spin>, Vec<f64>)> = Vec::new();
        let mut log_total = Vec::new();
        loop {
            let mut w = clamped_root_weights(ms, x, &row_sites, &rvec);
            for (s, wi) in w.iter_mut().enumerate() {
                *wi += parent_term(s);
            }
            let tot = log_sum_exp(&w);
            if tot.is_finite() {
                raw.push((rvec.clone(), w));
                log_total.push(tot);
            }
            // Next row configuration in mixed radix.
            let mut pos = 0;
            while pos < rvec.len() {
                rvec[pos] += 1;
                if (rvec[pos] as usize) < q {
                    break;
                }
                rvec[pos] = 0;
                pos += 1;
            }
            if pos == rvec.len() {
                break;
            }
        }
        if raw.is_empty() {
            return Err(MixingError::ZeroProbabilityRow);
        }
        let log_z = log_sum_exp(&log_total);
        let mut rows = Vec::with_capacity(raw.len());
        for ((config, w), tot) in raw.into_iter().zip(log_total) {
            let prob = libm::exp(tot - log_z);
            let mut cond_root: Vec<f64> = w.iter().map(|&wi| libm::exp(wi - tot)).collect();
            let cs: f64 = cond_root.iter().sum();
            for c in &mut cond_root {
                *c /= cs;
            }
            rows.push(RowState {
                config,
                prob,
                cond_root,
            });
        }
        // Renormalize so the row probabilities sum to one exactly; the
        // ratio code relies on constants having zero variance.
        let psum: f64 = rows.iter().map(|r| r.prob).sum();
        let mut root_marginal = vec![0.0f64; q];
        for r in &mut rows {
            r.prob /= psum;
            for s in 0..q {
                root_marginal[s] += r.prob * r.cond_root[s];
            }
        }
        Ok(RootRowJoint {
            root_marginal,
            rows,
            row_sites,
        })
    }

    /// `Var[E(f | sigma_x)] / Var(f)` for a function of the row; 0/0 is 0.
    pub fn vm_ratio(&self, f: &[f64]) -> f64 {
        let q = self.root_marginal.len();
        let mean: f64 = self.rows.iter().zip(f).map(|(r, &v)| r.prob * v).sum();
        let var: f64 = self
            .rows
            .iter()
            .zip(f)
            .map(|(r, &v)| r.prob * (v - mean) * (v - mean))
            .sum();
        let second: f64 = self.rows.iter().zip(f).map(|(r, &v)| r.prob * v * v).sum();
        if var <= 1e-22 * second.max(1e-300) {
            return 0.0;
        }
        let mut proj_var = 0.0;
        for s in 0..q {
            let ps = self.root_marginal[s];
            if ps <= 0.0 {
                continue;
            }
            let e_s: f64 = self
                .rows
                .iter()
                .zip(f)
                .map(|(r, &v)| r.prob * r.cond_root[s] * v)
                .sum::<f64>()
                / ps;
            proj_var += ps * (e_s - mean) * (e_s - mean);
        }
        proj_var / var
    }

    /// `Ent[E(f | sigma_x)] / Ent(f)` for non-negative `f`; entropies below
    /// 1e-13 are treated as zero to avoid 0/0 noise.
    pub fn em_ratio(&self, f: &[f64]) -> Result<f64, MixingError> {
        if f.iter().any(|&v| v < 0.0) {
            return Err(MixingError::Exact(ExactError::NegativeFunction));
        }
        let q = self.root_marginal.len();
        let xlogx = |v: f64| if v <= 0.0 { 0.0 } else { v * libm::log(v) };
        let mean: f64 = self.rows.iter().zip(f).map(|(r, &v)| r.prob * v).sum();
        let ent: f64 = self
            .rows
            .iter()
            .zip(f)
            .map(|(r, &v)| r.prob * xlogx(v))
            .sum::<f64>()
            - xlogx(mean);
        if ent < 1e-13 {
            return Ok(0.0);
        }
        let mut proj_ent = -xlogx(mean);
        for s in 0..q {
            let ps = self.root_marginal[s];
            if ps <= 0.0 {
                continue;
            }
            let e_s: f64 = self
                .rows
                .iter()
                .zip(f)
                .map(|(r, &v)| r.prob * r.cond_root[s] * v)
                .sum::<f64>()
                / ps;
            proj_ent += ps * xlogx(e_s);
        }
        Ok(proj_ent / ent)
    }

    /// The dual root-contraction constant: the worst variance-contraction
    /// ratio over functions of the root spin alone. A two-valued root gives
    /// the ratio directly (any non-constant function is affine-equivalent);
    /// more spin values lead to a tiny generalized eigenproblem over
    /// centered root functions.
    pub fn contraction(&self) -> f64 {
        let q = self.root_marginal.len();
        let p = &self.root_marginal;
        // Covariance matrices of the conditional root distribution (M) and
        // of the root-spin indicators (V).
        let mut m = DMatrix::<f64>::zeros(q, q);
        let mut v = DMatrix::<f64>::zeros(q, q);
        for r in &self.rows {
            for a in 0..q {
                for b in 0..q {
                    m[(a, b)] += r.prob * r.cond_root[a] * r.cond_root[b];
                }
            }
        }
        for a in 0..q {
            for b in 0..q {
                m[(a, b)] -= p[a] * p[b];
                v[(a, b)] = if a == b { p[a] } else { 0.0 } - p[a] * p[b];
            }
        }
        // Largest eigenvalue of V^(-1/2) M V^(-1/2) on the positive
        // eigenspace of V.
        let (vals, vecs) = dense_sym_eigen(v);
        let mut dirs: Vec<Vec<f64>> = Vec::new();
        for k in 0..q {
            if vals[k] > 1e-13 {
                let scale = 1.0 / libm::sqrt(vals[k]);
                dirs.push((0..q).map(|i| vecs[(i, k)] * scale).collect());
            }
        }
        if dirs.is_empty() {
            return 0.0; // deterministic root
        }
        let d = dirs.len();
        let mut reduced = DMatrix::<f64>::zeros(d, d);
        for a in 0..d {
            for b in 0..d {
                let mut acc = 0.0;
                for i in 0..q {
                    for j in 0..q {
                        acc += dirs[a][i] * m[(i, j)] * dirs[b][j];
                    }
                }
                reduced[(a, b)] = acc;
            }
        }
        let (rvals, _) = dense_sym_eigen(reduced);
        rvals[d - 1].clamp(0.0, 1.0)
    }
}

/// The exact dual root-contraction constant `eps*(x, l)` under an optional
/// parent-spin conditioning. `l = 0` is the identity projection; a row on
/// the fixed boundary projects to a constant.
pub fn vm_root_contraction(
    ms: &MessageSet<'_>,
    x: usize,
    l: usize,
    parent_spin: Option<Spin>,
) -> Result<f64, MixingError> {
    let tree = ms.tree;
    if l == 0 {
        let marg = ms
            .subtree_marginal(x, parent_spin)
            .map_err(MixingError::Exact)?;
        let nondeg = marg.iter().filter(|&&p| p > 1e-13).count() > 1;
        return Ok(if nondeg { 1.0 } else { 0.0 });
    }
    let dist_to_boundary = tree.depth() + 1 - tree.level(x);
    if l >= dist_to_boundary {
        return Ok(0.0);
    }
    Ok(RootRowJoint::compute(ms, x, l, parent_spin)?.contraction())
}

/// Outcome of one modified decay-inequality check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecayCheck {
    Pass { lhs: f64, rhs: f64 },
    Fail { lhs: f64, rhs: f64 },
    /// The measured epsilon is outside the hypothesis of the inequality.
    OutOfHypothesis,
}

/// Variance form of the modified decay inequality for an arbitrary `f`:
/// with `e' = 2 eps`,
/// `Var^eta[E_til(f)] <= (2-e')/(1-e') E[Var_B(f)] + e'/(1-e') E[Var_til(f)]`
/// checked for every conditioning `eta` outside `T_x`.
pub fn decay_var_check(
    space: &ExactSpace<'_>,
    x: usize,
    l: usize,
    f: &[f64],
    eps: f64,
    slack: f64,
) -> DecayCheck {
    if eps >= 0.5 {
        return DecayCheck::OutOfHypothesis;
    }
    let ep = 2.0 * eps;
    let c1 = (2.0 - ep) / (1.0 - ep);
    let c2 = ep / (1.0 - ep);
    let tree = space.tree;
    let tx = tree.subtree(x).expect("x interior");
    let tilde = crate::tree::Region {
        vertices: tx.vertices.iter().copied().filter(|&v| v != x).collect(),
    };
    let block = tree.block(x, l).expect("x interior");
    let split_tx = space.split(&tx);
    let split_tilde = space.split(&tilde);
    let split_block = space.split(&block);
    let proj_tilde = split_tilde.projection(space, f);
    let var_block = split_block.cond_var_table(space, f);
    let var_tilde = split_tilde.cond_var_table(space, f);

    let mut worst_lhs = 0.0f64;
    let mut worst_rhs = 0.0f64;
    let mut pass = true;
    for (members, &gp) in split_tx.members.iter().zip(&split_tx.group_prob) {
        if gp <= 0.0 {
            continue;
        }
        let mean: f64 = members
            .iter()
            .map(|&i| space.probs[i] * proj_tilde[i])
            .sum::<f64>()
            / gp;
        let lhs: f64 = members
            .iter()
            .map(|&i| {
                let d = proj_tilde[i] - mean;
                space.probs[i] * d * d
            })
            .sum::<f64>()
            / gp;
        let e_vb: f64 = members
            .iter()
            .map(|&i| space.probs[i] * var_block[i])
            .sum::<f64>()
            / gp;
        let e_vt: f64 = members
            .iter()
            .map(|&i| space.probs[i] * var_tilde[i])
            .sum::<f64>()
            / gp;
        let rhs = c1 * e_vb + c2 * e_vt;
        if lhs > rhs + slack {
            pass = false;
            worst_lhs = lhs;
            worst_rhs = rhs;
        } else if lhs > worst_lhs {
            worst_lhs = lhs;
            worst_rhs = rhs;
        }
    }
    if pass {
        DecayCheck::Pass {
            lhs: worst_lhs,
            rhs: worst_rhs,
        }
    } else {
        DecayCheck::Fail {
            lhs: worst_lhs,
            rhs: worst_rhs,
        }
    }
}

/// Entropy form of the modified decay inequality, with
/// `e' = sqrt(eps)/p_min` under the hypothesis `eps < p_min^2`, where
/// `p_min` is the smallest positive conditional root-spin probability
/// within the conditioning.
pub fn decay_ent_check(
    space: &ExactSpace<'_>,
    x: usize,
    l: usize,
    f: &[f64],
    eps: f64,
    slack: f64,
) -> Result<DecayCheck, MixingError> {
    let tree = space.tree;
    let tx = tree.subtree(x).expect("x interior");
    let tilde = crate::tree::Region {
        vertices: tx.vertices.iter().copied().filter(|&v| v != x).collect(),
    };
    let block = tree.block(x, l).expect("x interior");
    let split_tx = space.split(&tx);
    let split_tilde = space.split(&tilde);
    let split_block = space.split(&block);
    let proj_tilde = split_tilde.projection(space, f);
    let ent_block = split_block.cond_ent_table(space, f)?;
    let ent_tilde = split_tilde.cond_ent_table(space, f)?;
    let q = space.model.spin_count();
    let xlogx = |v: f64| if v <= 0.0 { 0.0 } else { v * libm::log(v) };

    let mut worst_lhs = 0.0f64;
    let mut worst_rhs = 0.0f64;
    let mut pass = true;
    let mut any_checked = false;
    for (members, &gp) in split_tx.members.iter().zip(&split_tx.group_prob) {
        if gp <= 0.0 {
            continue;
        }
        let mut root_p = vec![0.0f64; q];
        for &i in members {
            root_p[space.states[i][x] as usize] += space.probs[i] / gp;
        }
        let p_min = root_p
            .iter()
            .copied()
            .filter(|&p| p > 0.0)
            .fold(f64::INFINITY, f64::min);
        if eps >= p_min * p_min {
            continue;
        }
        any_checked = true;
        let ep = libm::sqrt(eps) / p_min;
        let c1 = 1.0 / (1.0 - ep);
        let c2 = ep / (1.0 - ep);
        let mean: f64 = members
            .iter()
            .map(|&i| space.probs[i] * proj_tilde[i])
            .sum::<f64>()
            / gp;
        let lhs: f64 = members
            .iter()
            .map(|&i| space.probs[i] * xlogx(proj_tilde[i]))
            .sum::<f64>()
            / gp
            - xlogx(mean);
        let e_eb: f64 = members
            .iter()
            .map(|&i| space.probs[i] * ent_block[i])
            .sum::<f64>()
            / gp;
        let e_et: f64 = members
            .iter()
            .map(|&i| space.probs[i] * ent_tilde[i])
            .sum::<f64>()
            / gp;
        let rhs = c1 * e_eb + c2 * e_et;
        if lhs > rhs + slack {
            pass = false;
            worst_lhs = lhs;
            worst_rhs = rhs;
        } else if lhs > worst_lhs {
            worst_lhs = lhs;
            worst_rhs = rhs;
        }
    }
    if !any_checked {
        return Ok(DecayCheck::OutOfHypothesis);
    }
    Ok(if pass {
        DecayCheck::Pass {
            lhs: worst_lhs,
            rhs: worst_rhs,
        }
    } else {
        DecayCheck::Fail {
            lhs: worst_lhs,
            rhs: worst_rhs,
        }
    })
}

/// The likelihood-ratio statistic `g_s^(l)` at the tree root: the ratio of
/// the probability of the level-`l` spins of `config` when the root spin
/// is conditioned to `s` versus unconditioned.
pub fn g_ell(
    ms: &MessageSet<'_>,
    s: Spin,
    l: usize,
    config: &Configuration,
) -> Result<f64, MixingError> {
    let tree = ms.tree;
    if l == 0 || l > tree.depth() {
        return Err(MixingError::BadDepth(format!(
            "level {l} outside 1..={}",
            tree.depth()
        )));
    }
    let row_sites = tree.row_below(0, l).expect("interior row");
    let rvec: Vec<Spin> = row_sites.iter().map(|&v| config.spins[v]).collect();
    let w = clamped_root_weights(ms, 0, &row_sites, &rvec);
    let tot = log_sum_exp(&w);
    if !tot.is_finite() {
        return Err(MixingError::ZeroProbabilityRow);
    }
    let p_root = ms.marginal(0).map_err(MixingError::Exact)?;
    let ps = p_root[s as usize];
    if ps <= 0.0 {
        return Err(MixingError::ZeroProbabilityRow);
    }
    Ok(libm::exp(w[s as usize] - tot) / ps)
}

/// Monte Carlo estimate of `mu[|g_s^(l) - 1| > delta]` over perfect
/// samples.
pub fn g_ell_tail<R: Rng + ?Sized>(
    ms: &MessageSet<'_>,
    s: Spin,
    l: usize,
    delta: f64,
    samples: usize,
    rng: &mut R,
) -> Result<TailEstimate, MixingError> {
    let mut hits = 0usize;
    for _ in 0..samples {
        let config = ms.sample(rng);
        let g = g_ell(ms, s, l, &config)?;
        if (g - 1.0).abs() > delta {
            hits += 1;
        }
    }
    Ok(TailEstimate {
        frequency: hits as f64 / samples as f64,
        hits,
        samples,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct TailEstimate {
    pub frequency: f64,
    pub hits: usize,
    pub samples: usize,
}

impl TailEstimate {
    /// Half-width of the 95% normal-approximation confidence interval.
    pub fn ci95(&self) -> f64 {
        let p = self.frequency;
        1.96 * libm::sqrt((p * (1.0 - p)).max(1.0 / self.samples as f64) / self.samples as f64)
    }
}

/// Minimum conditional spin probability over sites, spin values and
/// reachable parent-spin conditionings; zero when some site is frozen.
pub fn pmin(ms: &MessageSet<'_>) -> Result<f64, MixingError> {
    let tree = ms.tree;
    let q = ms.model.spin_count();
    let mut worst = f64::INFINITY;
    for x in 0..tree.vertex_count() {
        let conditionings: Vec<Option<Spin>> = match tree.parent(x) {
            None => vec![None],
            Some(p) => {
                let reachable = ms.marginal(p).map_err(MixingError::Exact)?;
                (0..q)
                    .filter(|&sp| reachable[sp] > 0.0)
                    .map(|sp| Some(sp as Spin))
                    .collect()
            }
        };
        for cond in conditionings {
            if let Ok(marg) = ms.subtree_marginal(x, cond) {
                for &p in &marg {
                    worst = worst.min(p);
                }
            }
        }
    }
    Ok(worst)
}

/// One row of a spatial-mixing report: the exact contraction constant and
/// sampled entropy ratios for a (site, depth, parent-spin) triple.
#[derive(Clone, Debug)]
pub struct MixingReport {
    pub site: usize,
    pub level: usize,
    pub parent_spin: Option<Spin>,
    pub epsilon_vm: f64,
    /// Largest sampled entropy-projection ratio over random positive
    /// functions of the row (sampled evidence, not a worst case).
    pub epsilon_em_sampled: f64,
    pub bound_predicted: f64,
    pub vm_within_bound: bool,
}

/// Build the report for one `(x, l, parent_spin)` triple, sampling
/// `random_f` positive functions of the row for the entropy side.
pub fn mixing_report<R: Rng + ?Sized>(
    ms: &MessageSet<'_>,
    x: usize,
    l: usize,
    parent_spin: Option<Spin>,
    bound_predicted: f64,
    random_f: usize,
    rng: &mut R,
) -> Result<MixingReport, MixingError> {
    let epsilon_vm = vm_root_contraction(ms, x, l, parent_spin)?;
    let mut epsilon_em_sampled = 0.0f64;
    let dist_to_boundary = ms.tree.depth() + 1 - ms.tree.level(x);
    if l >= 1 && l < dist_to_boundary && random_f > 0 {
        let joint = RootRowJoint::compute(ms, x, l, parent_spin)?;
        for _ in 0..random_f {
            let f: Vec<f64> = (0..joint.rows.len())
                .map(|_| libm::exp(1.5 * (rng.random::<f64>() - 0.5)))
                .collect();
            epsilon_em_sampled = epsilon_em_sampled.max(joint.em_ratio(&f)?);
        }
    }
    Ok(MixingReport {
        site: x,
        level: l,
        parent_spin,
        epsilon_vm,
        epsilon_em_sampled,
        bound_predicted,
        vm_within_bound: epsilon_vm <= bound_predicted + 1e-10,
    })
}
