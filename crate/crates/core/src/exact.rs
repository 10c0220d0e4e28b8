//! Exact inference on trees: log-space partition-weight messages, exact
//! conditional marginals, a perfect sampler, and explicit distribution
//! tables over the configuration space of small trees together with the
//! variance/entropy functionals used by the spatial-mixing machinery.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::{vec, vec::Vec};
use core::fmt;

use rand::Rng;

use crate::model::{Configuration, Potential, Spin, SpinModel};
use crate::tree::{BoundaryCondition, Region, TreeTopology};
use crate::util::log_sum_exp;

/// Hard cap on explicit state enumeration.
pub const MAX_EXACT_STATES: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq)]
pub enum ExactError {
    /// The boundary condition admits no valid configuration.
    ImpossibleBoundary,
    /// Explicit enumeration would exceed [`MAX_EXACT_STATES`].
    TooLarge { bound: usize },
    /// A conditioning configuration has probability zero.
    InvalidConditioning,
    /// Entropy of a function with negative values was requested.
    NegativeFunction,
    Other(String),
}

impl fmt::Display for ExactError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExactError::ImpossibleBoundary => write!(f, "boundary admits no valid configuration"),
            ExactError::TooLarge { bound } => {
                write!(f, "state space bound {bound} exceeds cap {MAX_EXACT_STATES}")
            }
            ExactError::InvalidConditioning => write!(f, "conditioning has probability zero"),
            ExactError::NegativeFunction => write!(f, "entropy requires a non-negative function"),
            ExactError::Other(msg) => write!(f, "{msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ExactError {}

/// Per-vertex subtree partition weights in log space.
///
/// `log_z(v, s)` is the log weight of all valid configurations of the
/// subtree `T_v` (its boundary rows included) given `sigma_v = s`, with the
/// singleton potential of `v` itself included and the parent edge excluded.
pub struct MessageSet<'a> {
    pub model: &'a SpinModel,
    pub tree: &'a TreeTopology,
    pub boundary: &'a BoundaryCondition,
    log_z: Vec<f64>,
}

impl<'a> MessageSet<'a> {
    pub fn log_z(&self, v: usize, s: Spin) -> f64 {
        self.log_z[v * self.model.spin_count() + s as usize]
    }

    /// `log sum_{s_c} exp(-U(s, s_c)) Z_c(s_c)` for an interior or boundary
    /// child `c` of a vertex carrying spin `s`.
    pub fn child_factor(&self, s: Spin, c: usize) -> f64 {
        let q = self.model.spin_count();
        if self.tree.is_boundary(c) {
            match self.boundary {
                BoundaryCondition::Free => 0.0,
                BoundaryCondition::Fixed(assign) => {
                    let tau = assign[c - self.tree.vertex_count()];
                    match self.model.pair_potential(s, tau) {
                        Potential::Finite(u) => -u,
                        Potential::Forbidden => f64::NEG_INFINITY,
                    }
                }
            }
        } else {
            let mut terms = [f64::NEG_INFINITY; 16];
            let terms = &mut terms[..q];
            for sc in 0..q {
                terms[sc] = match self.model.pair_potential(s, sc as Spin) {
                    Potential::Finite(u) => -u + self.log_z(c, sc as Spin),
                    Potential::Forbidden => f64::NEG_INFINITY,
                };
            }
            log_sum_exp(terms)
        }
    }

    /// Log partition function of the full tree.
    pub fn log_partition(&self) -> f64 {
        let q = self.model.spin_count();
        let terms: Vec<f64> = (0..q).map(|s| self.log_z(0, s as Spin)).collect();
        log_sum_exp(&terms)
    }

    /// Marginal of `sigma_v` under the subtree measure `mu_{T_v}` with the
    /// parent spin fixed to `parent` (or the parent edge erased for `None`).
    pub fn subtree_marginal(&self, v: usize, parent: Option<Spin>) -> Result<Vec<f64>, ExactError> {
        let q = self.model.spin_count();
        let mut logs = vec![f64::NEG_INFINITY; q];
        for s in 0..q {
            let mut l = self.log_z(v, s as Spin);
            if let Some(sp) = parent {
                l += match self.model.pair_potential(s as Spin, sp) {
                    Potential::Finite(u) => -u,
                    Potential::Forbidden => f64::NEG_INFINITY,
                };
            }
            logs[s] = l;
        }
        normalize_logs(&logs).ok_or(ExactError::InvalidConditioning)
    }

    /// Exact single-site marginal under the full measure, by an additional
    /// downward pass.
    pub fn marginal(&self, v: usize) -> Result<Vec<f64>, ExactError> {
        let above = self.log_above(v);
        let q = self.model.spin_count();
        let logs: Vec<f64> = (0..q)
            .map(|s| above[s] + self.log_z(v, s as Spin))
            .collect();
        normalize_logs(&logs).ok_or(ExactError::InvalidConditioning)
    }

    /// Log weight of everything outside `T_v` as a function of `sigma_v`
    /// (the parent edge included, the spins above summed out).
    fn log_above(&self, v: usize) -> Vec<f64> {
        let q = self.model.spin_count();
        // Path from root down to v.
        let mut path = vec![v];
        let mut cur = v;
        while let Some(p) = self.tree.parent(cur) {
            path.push(p);
            cur = p;
        }
        path.reverse();
        let mut above = vec![0.0; q]; // at the root there is nothing outside
        for w in path.windows(2) {
            let (p, c) = (w[0], w[1]);
            let mut next = vec![f64::NEG_INFINITY; q];
            for (sc, slot) in next.iter_mut().enumerate() {
                let mut terms = vec![f64::NEG_INFINITY; q];
                for (sp, term) in terms.iter_mut().enumerate() {
                    let u_pc = match self.model.pair_potential(sp as Spin, sc as Spin) {
                        Potential::Finite(u) => u,
                        Potential::Forbidden => continue,
                    };
                    let mut l = above[sp] - self.model.singleton_potential(sp as Spin) - u_pc;
                    for y in self.tree.children(p) {
                        if y != c {
                            l += self.child_factor(sp as Spin, y);
                        }
                    }
                    *term = l;
                }
                *slot = log_sum_exp(&terms);
            }
            above = next;
        }
        above
    }

    /// Draw one exact sample by a downward pass. Boundary slots are filled
    /// from the boundary condition (zeros under a free boundary).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Configuration {
        let tree = self.tree;
        let q = self.model.spin_count();
        let mut spins = vec![0 as Spin; tree.total_vertices()];
        if let BoundaryCondition::Fixed(assign) = self.boundary {
            spins[tree.vertex_count()..].copy_from_slice(assign);
        }
        let mut logs = vec![0.0f64; q];
        for v in 0..tree.vertex_count() {
            for (s, slot) in logs.iter_mut().enumerate() {
                let mut l = self.log_z(v, s as Spin);
                if let Some(p) = tree.parent(v) {
                    l += match self.model.pair_potential(s as Spin, spins[p]) {
                        Potential::Finite(u) => -u,
                        Potential::Forbidden => f64::NEG_INFINITY,
                    };
                }
                *slot = l;
            }
            let p = normalize_logs(&logs).expect("valid boundary admits a sample");
            spins[v] = draw_index(&p, rng.random::<f64>()) as Spin;
        }
        Configuration { spins }
    }
}

/// Inverse-CDF draw from a probability vector using one uniform.
pub(crate) fn draw_index(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

pub(crate) fn normalize_logs(logs: &[f64]) -> Option<Vec<f64>> {
    let z = log_sum_exp(logs);
    if !z.is_finite() {
        return None;
    }
    Some(logs.iter().map(|&l| libm::exp(l - z)).collect())
}

/// Upward message pass over the whole tree.
pub fn upward_messages<'a>(
    model: &'a SpinModel,
    tree: &'a TreeTopology,
    boundary: &'a BoundaryCondition,
) -> Result<MessageSet<'a>, ExactError> {
    let q = model.spin_count();
    let n = tree.vertex_count();
    let mut ms = MessageSet {
        model,
        tree,
        boundary,
        log_z: vec![f64::NEG_INFINITY; n * q],
    };
    for v in (0..n).rev() {
        for s in 0..q {
            let mut l = -model.singleton_potential(s as Spin);
            for c in tree.children(v) {
                l += ms.child_factor(s as Spin, c);
            }
            ms.log_z[v * q + s] = l;
        }
    }
    if !ms.log_partition().is_finite() {
        return Err(ExactError::ImpossibleBoundary);
    }
    Ok(ms)
}

/// The explicit Gibbs distribution over all valid configurations of a small
/// tree: the brute-force oracle behind the exact functionals.
pub struct ExactSpace<'a> {
    pub model: &'a SpinModel,
    pub tree: &'a TreeTopology,
    pub boundary: &'a BoundaryCondition,
    /// Interior spin assignments of the valid configurations, in the
    /// enumeration order.
    pub states: Vec<Vec<Spin>>,
    pub probs: Vec<f64>,
    log_w: Vec<f64>,
    pub log_z: f64,
    index: BTreeMap<Vec<Spin>, usize>,
}

impl<'a> ExactSpace<'a> {
    /// Enumerate every valid configuration by a depth-first sweep in
    /// breadth-first vertex order (so each parent is assigned before its
    /// children and hard constraints prune early).
    pub fn enumerate(
        model: &'a SpinModel,
        tree: &'a TreeTopology,
        boundary: &'a BoundaryCondition,
    ) -> Result<Self, ExactError> {
        let q = model.spin_count();
        let n = tree.vertex_count();
        // Models without hard constraints fill the whole product space, so
        // oversize cases are rejected up front; with hard constraints the
        // valid-state count is only discovered while enumerating.
        if !model.has_hard_constraints() {
            let mut bound = 1usize;
            for _ in 0..n {
                bound = bound.saturating_mul(q);
                if bound > MAX_EXACT_STATES {
                    return Err(ExactError::TooLarge { bound });
                }
            }
        }

        let mut states = Vec::new();
        let mut log_w = Vec::new();
        let mut assign = vec![0 as Spin; n];
        let mut energy = vec![0.0f64; n + 1];
        // Iterative DFS: spin[v] counts up at each level.
        let mut v = 0usize;
        let mut next_spin = vec![0usize; n];
        loop {
            if next_spin[v] == q {
                next_spin[v] = 0;
                if v == 0 {
                    break;
                }
                v -= 1;
                next_spin[v] += 1;
                continue;
            }
            let s = next_spin[v] as Spin;
            match site_energy(model, tree, boundary, &assign, v, s) {
                Some(e) => {
                    assign[v] = s;
                    energy[v + 1] = energy[v] + e;
                    if v + 1 == n {
                        if states.len() >= MAX_EXACT_STATES {
                            return Err(ExactError::TooLarge {
                                bound: MAX_EXACT_STATES + 1,
                            });
                        }
                        states.push(assign.clone());
                        log_w.push(-energy[n]);
                        next_spin[v] += 1;
                    } else {
                        v += 1;
                    }
                }
                None => {
                    next_spin[v] += 1;
                }
            }
        }
        if states.is_empty() {
            return Err(ExactError::ImpossibleBoundary);
        }
        let log_z = log_sum_exp(&log_w);
        let probs: Vec<f64> = log_w.iter().map(|&l| libm::exp(l - log_z)).collect();
        let index = states
            .iter()
            .enumerate()
            .map(|(i, st)| (st.clone(), i))
            .collect();
        Ok(ExactSpace {
            model,
            tree,
            boundary,
            states,
            probs,
            log_w,
            log_z,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_index(&self, interior: &[Spin]) -> Option<usize> {
        self.index.get(interior).map(|&i| i)
    }

    pub fn log_weight(&self, i: usize) -> f64 {
        self.log_w[i]
    }

    /// Brute-force single-site marginal.
    pub fn marginal(&self, v: usize) -> Vec<f64> {
        let q = self.model.spin_count();
        let mut p = vec![0.0; q];
        for (st, &pr) in self.states.iter().zip(&self.probs) {
            p[st[v] as usize] += pr;
        }
        p
    }

    pub fn mean(&self, f: &[f64]) -> f64 {
        self.probs.iter().zip(f).map(|(&p, &x)| p * x).sum()
    }

    pub fn variance(&self, f: &[f64]) -> f64 {
        variance_of(&self.probs, f)
    }

    pub fn entropy(&self, f: &[f64]) -> Result<f64, ExactError> {
        entropy_of(&self.probs, f)
    }

    /// Conditional decomposition with respect to a region: states are
    /// grouped by their assignment outside the region, so each group
    /// carries the conditional measure `mu_B^eta` for one `eta`.
    pub fn split(&self, region: &Region) -> BlockSplit {
        let n = self.tree.vertex_count();
        let mut in_region = vec![false; n];
        for &v in &region.vertices {
            in_region[v] = true;
        }
        let outside: Vec<usize> = (0..n).filter(|&v| !in_region[v]).collect();
        let mut keys: BTreeMap<Vec<Spin>, usize> = BTreeMap::new();
        let mut group_of = vec![0usize; self.len()];
        let mut members: Vec<Vec<usize>> = Vec::new();
        for (i, st) in self.states.iter().enumerate() {
            let key: Vec<Spin> = outside.iter().map(|&v| st[v]).collect();
            let g = *keys.entry(key).or_insert_with(|| {
                members.push(Vec::new());
                members.len() - 1
            });
            group_of[i] = g;
            members[g].push(i);
        }
        let group_prob: Vec<f64> = members
            .iter()
            .map(|m| m.iter().map(|&i| self.probs[i]).sum())
            .collect();
        BlockSplit {
            group_of,
            members,
            group_prob,
        }
    }
}

fn site_energy(
    model: &SpinModel,
    tree: &TreeTopology,
    boundary: &BoundaryCondition,
    assign: &[Spin],
    v: usize,
    s: Spin,
) -> Option<f64> {
    let mut e = model.singleton_potential(s);
    if let Some(p) = tree.parent(v) {
        e += model.pair_potential(s, assign[p]).energy()?;
    }
    if tree.level(v) == tree.depth() {
        if let BoundaryCondition::Fixed(bdry) = boundary {
            for c in tree.children(v) {
                let tau = bdry[c - tree.vertex_count()];
                e += model.pair_potential(s, tau).energy()?;
            }
        }
    }
    Some(e)
}

/// Grouping of an [`ExactSpace`] by the configuration outside a region.
pub struct BlockSplit {
    /// Group id of each state.
    pub group_of: Vec<usize>,
    /// State ids per group.
    pub members: Vec<Vec<usize>>,
    /// Total probability per group.
    pub group_prob: Vec<f64>,
}

impl BlockSplit {
    pub fn group_count(&self) -> usize {
        self.members.len()
    }

    /// Conditional expectation per group.
    pub fn cond_means(&self, space: &ExactSpace<'_>, f: &[f64]) -> Vec<f64> {
        self.members
            .iter()
            .zip(&self.group_prob)
            .map(|(m, &gp)| {
                if gp <= 0.0 {
                    return 0.0;
                }
                m.iter().map(|&i| space.probs[i] * f[i]).sum::<f64>() / gp
            })
            .collect()
    }

    /// The projection `E_B(f)` as a state-indexed table.
    pub fn projection(&self, space: &ExactSpace<'_>, f: &[f64]) -> Vec<f64> {
        let means = self.cond_means(space, f);
        self.group_of.iter().map(|&g| means[g]).collect()
    }

    /// `E[Var_B(f)]`: the mean conditional variance.
    pub fn mean_cond_var(&self, space: &ExactSpace<'_>, f: &[f64]) -> f64 {
        let mut total = 0.0;
        for (m, &gp) in self.members.iter().zip(&self.group_prob) {
            if gp <= 0.0 {
                continue;
            }
            let mean: f64 = m.iter().map(|&i| space.probs[i] * f[i]).sum::<f64>() / gp;
            let var: f64 = m
                .iter()
                .map(|&i| {
                    let d = f[i] - mean;
                    space.probs[i] * d * d
                })
                .sum::<f64>()
                / gp;
            total += gp * var;
        }
        total
    }

    /// `Var[E_B(f)]`: the variance of the projection.
    pub fn var_cond_mean(&self, space: &ExactSpace<'_>, f: &[f64]) -> f64 {
        variance_of(&space.probs, &self.projection(space, f))
    }

    /// `E[Ent_B(f)]`: the mean conditional entropy, for `f >= 0`.
    pub fn mean_cond_ent(&self, space: &ExactSpace<'_>, f: &[f64]) -> Result<f64, ExactError> {
        if f.iter().any(|&x| x < 0.0) {
            return Err(ExactError::NegativeFunction);
        }
        let mut total = 0.0;
        for (m, &gp) in self.members.iter().zip(&self.group_prob) {
            if gp <= 0.0 {
                continue;
            }
            let mean: f64 = m.iter().map(|&i| space.probs[i] * f[i]).sum::<f64>() / gp;
            if mean <= 0.0 {
                continue;
            }
            let e_flogf: f64 = m
                .iter()
                .map(|&i| space.probs[i] * xlogx(f[i]))
                .sum::<f64>()
                / gp;
            total += gp * (e_flogf - xlogx(mean));
        }
        Ok(total)
    }

    /// State-indexed table of `Var_B(f)`: each state gets the conditional
    /// variance of its group.
    pub fn cond_var_table(&self, space: &ExactSpace<'_>, f: &[f64]) -> Vec<f64> {
        let mut per_group = vec![0.0f64; self.group_count()];
        for (g, (m, &gp)) in self.members.iter().zip(&self.group_prob).enumerate() {
            if gp <= 0.0 {
                continue;
            }
            let mean: f64 = m.iter().map(|&i| space.probs[i] * f[i]).sum::<f64>() / gp;
            per_group[g] = m
                .iter()
                .map(|&i| {
                    let d = f[i] - mean;
                    space.probs[i] * d * d
                })
                .sum::<f64>()
                / gp;
        }
        self.group_of.iter().map(|&g| per_group[g]).collect()
    }

    /// State-indexed table of `Ent_B(f)` for `f >= 0`.
    pub fn cond_ent_table(&self, space: &ExactSpace<'_>, f: &[f64]) -> Result<Vec<f64>, ExactError> {
        if f.iter().any(|&x| x < 0.0) {
            return Err(ExactError::NegativeFunction);
        }
        let mut per_group = vec![0.0f64; self.group_count()];
        for (g, (m, &gp)) in self.members.iter().zip(&self.group_prob).enumerate() {
            if gp <= 0.0 {
                continue;
            }
            let mean: f64 = m.iter().map(|&i| space.probs[i] * f[i]).sum::<f64>() / gp;
            if mean <= 0.0 {
                continue;
            }
            let e_flogf: f64 = m
                .iter()
                .map(|&i| space.probs[i] * xlogx(f[i]))
                .sum::<f64>()
                / gp;
            per_group[g] = e_flogf - xlogx(mean);
        }
        Ok(self.group_of.iter().map(|&g| per_group[g]).collect())
    }

    /// Conditional variance in the single group that matches a reference
    /// state (i.e. `Var_B^eta(f)` with `eta` read off that state).
    pub fn cond_var_at(&self, space: &ExactSpace<'_>, f: &[f64], state: usize) -> f64 {
        let g = self.group_of[state];
        let gp = self.group_prob[g];
        let m = &self.members[g];
        let mean: f64 = m.iter().map(|&i| space.probs[i] * f[i]).sum::<f64>() / gp;
        m.iter()
            .map(|&i| {
                let d = f[i] - mean;
                space.probs[i] * d * d
            })
            .sum::<f64>()
            / gp
    }
}

fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * libm::log(x)
    }
}

/// Variance of a table under explicit probabilities.
pub fn variance_of(probs: &[f64], f: &[f64]) -> f64 {
    let mean: f64 = probs.iter().zip(f).map(|(&p, &x)| p * x).sum();
    probs
        .iter()
        .zip(f)
        .map(|(&p, &x)| {
            let d = x - mean;
            p * d * d
        })
        .sum()
}

/// Entropy `E[f log f] - E[f] log E[f]` under explicit probabilities.
pub fn entropy_of(probs: &[f64], f: &[f64]) -> Result<f64, ExactError> {
    if f.iter().any(|&x| x < 0.0) {
        return Err(ExactError::NegativeFunction);
    }
    let mean: f64 = probs.iter().zip(f).map(|(&p, &x)| p * x).sum();
    let e_flogf: f64 = probs.iter().zip(f).map(|(&p, &x)| p * xlogx(x)).sum();
    Ok(e_flogf - xlogx(mean))
}
