//! Exact generator-level analysis on small trees: the dense heat-bath
//! Glauber generator over the valid configuration space, its spectral gap,
//! Dirichlet forms, a numeric upper bound on the log-Sobolev constant, and
//! exact `L^p` mixing times.

use alloc::{vec, vec::Vec};
use core::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exact::{ExactSpace, ExactError};
use crate::linalg::{dense_sym_eigen, lanczos_smallest, CsrMatrix, LinalgError};
use crate::model::{Spin, SpinModel};
use crate::tree::{BoundaryCondition, TreeTopology};

/// Cap on the configuration space for generator construction.
pub const MAX_GENERATOR_STATES: usize = 1 << 15;
/// Cap for the dense eigendecomposition paths (log-Sobolev search, T_p).
pub const MAX_DENSE_STATES: usize = 1 << 12;
/// Dense/sparse crossover for the spectral gap.
const DENSE_GAP_LIMIT: usize = 1 << 10;

#[derive(Clone, Debug, PartialEq)]
pub enum SpectrumError {
    TooLarge { states: usize, cap: usize },
    Reducible,
    DegenerateSearch,
    BadProbability(f64),
    Exact(ExactError),
    Linalg(LinalgError),
}

impl fmt::Display for SpectrumError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpectrumError::TooLarge { states, cap } => {
                write!(f, "state space {states} exceeds cap {cap}")
            }
            SpectrumError::Reducible => write!(f, "generator is reducible"),
            SpectrumError::DegenerateSearch => {
                write!(f, "all descent restarts degenerated to constant functions")
            }
            SpectrumError::BadProbability(p) => write!(f, "probability {p} outside (0,1)"),
            SpectrumError::Exact(e) => write!(f, "{e}"),
            SpectrumError::Linalg(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SpectrumError {}

impl From<ExactError> for SpectrumError {
    fn from(e: ExactError) -> Self {
        SpectrumError::Exact(e)
    }
}

impl From<LinalgError> for SpectrumError {
    fn from(e: LinalgError) -> Self {
        SpectrumError::Linalg(e)
    }
}

/// The continuous-time heat-bath generator over the valid configurations
/// of a small tree: every site carries a rate-1 clock and resamples its
/// spin from the exact conditional given its neighbors.
pub struct GeneratorMatrix<'a> {
    pub space: ExactSpace<'a>,
    /// Off-diagonal transition rates `L(i, j)`, `i != j`.
    rates: CsrMatrix,
    /// Diagonal of `L` (negative row sums of the rates).
    diag: Vec<f64>,
}

impl<'a> GeneratorMatrix<'a> {
    pub fn build(
        model: &'a SpinModel,
        tree: &'a TreeTopology,
        boundary: &'a BoundaryCondition,
    ) -> Result<Self, SpectrumError> {
        let space = ExactSpace::enumerate(model, tree, boundary)?;
        let n_states = space.len();
        if n_states > MAX_GENERATOR_STATES {
            return Err(SpectrumError::TooLarge {
                states: n_states,
                cap: MAX_GENERATOR_STATES,
            });
        }
        let n = tree.vertex_count();
        let mut triplets: Vec<(u32, u32, f64)> = Vec::new();
        let mut diag = vec![0.0f64; n_states];
        let mut flipped = vec![0 as Spin; n];
        for (i, st) in space.states.iter().enumerate() {
            for x in 0..n {
                let neighbors = neighbor_spins(tree, boundary, st, x);
                let p = model
                    .site_conditional(&neighbors)
                    .expect("states are valid");
                for (s, &rate) in p.iter().enumerate() {
                    if s as Spin == st[x] || rate <= 0.0 {
                        continue;
                    }
                    flipped.copy_from_slice(st);
                    flipped[x] = s as Spin;
                    let j = space
                        .state_index(&flipped)
                        .expect("positive-rate move stays valid");
                    triplets.push((i as u32, j as u32, rate));
                    diag[i] -= rate;
                }
            }
        }
        let rates = CsrMatrix::from_triplets(n_states, triplets);
        Ok(GeneratorMatrix { space, rates, diag })
    }

    pub fn state_count(&self) -> usize {
        self.space.len()
    }

    pub fn stationary(&self) -> &[f64] {
        &self.space.probs
    }

    /// Largest absolute row sum of `L` (zero for a proper generator).
    pub fn max_row_sum_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.state_count() {
            let s: f64 = self.rates.row(i).map(|(_, v)| v).sum::<f64>() + self.diag[i];
            worst = worst.max(s.abs());
        }
        worst
    }

    /// Largest violation of `mu(i) L(i,j) = mu(j) L(j,i)` over the stored
    /// transitions, relative to the flow scale.
    pub fn detailed_balance_error(&self) -> f64 {
        let mu = self.stationary();
        let mut worst = 0.0f64;
        for i in 0..self.state_count() {
            for (j, rij) in self.rates.row(i) {
                let rji = self
                    .rates
                    .row(j)
                    .find(|&(c, _)| c == i)
                    .map(|(_, v)| v)
                    .unwrap_or(0.0);
                let flow = mu[i] * rij;
                let back = mu[j] * rji;
                worst = worst.max((flow - back).abs() / flow.max(back).max(1e-300));
            }
        }
        worst
    }

    pub fn min_off_diagonal(&self) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..self.state_count() {
            for (_, v) in self.rates.row(i) {
                m = m.min(v);
            }
        }
        m
    }

    /// The mu-symmetrized negated generator `D^(1/2) (-L) D^(-1/2)`, made
    /// exactly symmetric through the detailed-balance identity
    /// `A(i,j) = -sqrt(L(i,j) L(j,i))`.
    pub fn symmetrized(&self) -> CsrMatrix {
        let n = self.state_count();
        let mut triplets: Vec<(u32, u32, f64)> = Vec::with_capacity(self.rates.nnz() + n);
        for i in 0..n {
            triplets.push((i as u32, i as u32, -self.diag[i]));
            for (j, rij) in self.rates.row(i) {
                let rji = self
                    .rates
                    .row(j)
                    .find(|&(c, _)| c == i)
                    .map(|(_, v)| v)
                    .unwrap_or(0.0);
                triplets.push((i as u32, j as u32, -libm::sqrt(rij * rji)));
            }
        }
        CsrMatrix::from_triplets(n, triplets)
    }

    fn sqrt_mu(&self) -> Vec<f64> {
        self.stationary().iter().map(|&p| libm::sqrt(p)).collect()
    }

    /// Smallest positive eigenvalue of `-L`: dense for small spaces, by
    /// deflated thick-restart Lanczos above [`DENSE_GAP_LIMIT`].
    pub fn spectral_gap(&self, seed: u64) -> Result<f64, SpectrumError> {
        let n = self.state_count();
        if n == 1 {
            return Err(SpectrumError::Reducible);
        }
        let a = self.symmetrized();
        let gap = if n <= DENSE_GAP_LIMIT {
            let (vals, _) = dense_sym_eigen(a.to_dense());
            if vals[0].abs() > 1e-8 {
                return Err(SpectrumError::Reducible);
            }
            vals[1]
        } else {
            lanczos_smallest(&a, &self.sqrt_mu(), seed, 1e-9, 4_000_000)?.value
        };
        if gap < 1e-13 {
            return Err(SpectrumError::Reducible);
        }
        Ok(gap)
    }

    /// The Dirichlet form
    /// `(1/2) sum_i mu(i) sum_j L(i,j) [f(j) - f(i)]^2`.
    pub fn dirichlet_form(&self, f: &[f64]) -> f64 {
        assert_eq!(f.len(), self.state_count(), "dimension mismatch");
        let mu = self.stationary();
        let mut total = 0.0;
        for i in 0..self.state_count() {
            for (j, r) in self.rates.row(i) {
                let d = f[j] - f[i];
                total += mu[i] * r * d * d;
            }
        }
        0.5 * total
    }

    /// Full eigendecomposition of the symmetrized generator (ascending).
    pub fn dense_eigen(&self) -> Result<(Vec<f64>, DMatrix<f64>), SpectrumError> {
        let n = self.state_count();
        if n > MAX_DENSE_STATES {
            return Err(SpectrumError::TooLarge {
                states: n,
                cap: MAX_DENSE_STATES,
            });
        }
        Ok(dense_sym_eigen(self.symmetrized().to_dense()))
    }

    /// Exact `T_p` mixing time: the smallest `t` with
    /// `sup_sigma || h_t^sigma - 1 ||_p <= threshold`, located by bisection
    /// (to 1e-6 in `t`) on top of the full eigendecomposition.
    pub fn mixing_time(&self, p: MixingNorm, threshold: f64) -> Result<f64, SpectrumError> {
        let (vals, vecs) = self.dense_eigen()?;
        let mu = self.stationary();
        let n = self.state_count();
        let worst_norm = |t: f64| -> f64 {
            match p {
                MixingNorm::L2 => {
                    let mut worst = 0.0f64;
                    for i in 0..n {
                        let mut s = 0.0;
                        for k in 1..n {
                            let q = vecs[(i, k)];
                            s += libm::exp(-2.0 * vals[k] * t) * q * q;
                        }
                        worst = worst.max(s / mu[i]);
                    }
                    libm::sqrt(worst)
                }
                MixingNorm::L1 => {
                    let mut worst = 0.0f64;
                    for i in 0..n {
                        let mut total = 0.0;
                        for eta in 0..n {
                            let mut dev = 0.0;
                            for k in 1..n {
                                dev += libm::exp(-vals[k] * t) * vecs[(i, k)] * vecs[(eta, k)];
                            }
                            // P_t(i,eta) - mu(eta) = dev * sqrt(mu_eta/mu_i)
                            total += (dev * libm::sqrt(mu[eta] / mu[i])).abs();
                        }
                        worst = worst.max(total);
                    }
                    worst
                }
            }
        };
        let mut hi = 1.0f64;
        let mut guard = 0;
        while worst_norm(hi) > threshold {
            hi *= 2.0;
            guard += 1;
            if guard > 60 {
                return Err(SpectrumError::Reducible);
            }
        }
        let mut lo = 0.0f64;
        while hi - lo > 1e-6 {
            let mid = 0.5 * (lo + hi);
            if worst_norm(mid) > threshold {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Numeric upper bound on the log-Sobolev constant: the best value of
    /// `E(sqrt f) / Ent(f)` found by projected gradient descent over
    /// `f >= 0`, warm-started from perturbations of the spectral-gap
    /// eigenfunction and from seeded random positive tables.
    pub fn log_sobolev_upper(
        &self,
        restarts: usize,
        iterations: usize,
        seed: u64,
    ) -> Result<f64, SpectrumError> {
        let n = self.state_count();
        if n > MAX_DENSE_STATES {
            return Err(SpectrumError::TooLarge {
                states: n,
                cap: MAX_DENSE_STATES,
            });
        }
        let mu = self.stationary().to_vec();
        // Gradient operator of the Dirichlet form in u = sqrt(f):
        // E(u) = u . (B u), B = diag(mu) (-L).
        let mut triplets: Vec<(u32, u32, f64)> = Vec::new();
        for i in 0..n {
            triplets.push((i as u32, i as u32, -mu[i] * self.diag[i]));
            for (j, r) in self.rates.row(i) {
                triplets.push((i as u32, j as u32, -mu[i] * r));
            }
        }
        let b = CsrMatrix::from_triplets(n, triplets);
        let energy = |u: &[f64], scratch: &mut Vec<f64>| -> f64 {
            b.matvec(u, scratch);
            crate::linalg::dot(u, scratch)
        };
        let entropy_sq = |u: &[f64]| -> f64 {
            let mean: f64 = mu.iter().zip(u).map(|(&m, &x)| m * x * x).sum();
            if mean <= 0.0 {
                return 0.0;
            }
            let mut e = 0.0;
            for (&m, &x) in mu.iter().zip(u) {
                if x > 0.0 {
                    e += m * x * x * libm::log(x * x);
                }
            }
            e - mean * libm::log(mean)
        };

        let (vals, vecs) = self.dense_eigen()?;
        if vals[1] < 1e-13 {
            return Err(SpectrumError::Reducible);
        }
        // Gap eigenfunction phi with mu(phi^2) = 1.
        let phi: Vec<f64> = (0..n).map(|i| vecs[(i, 1)] / libm::sqrt(mu[i])).collect();

        let mut starts: Vec<Vec<f64>> = Vec::new();
        for eps in [1e-4, -1e-4, 1e-3, -1e-3] {
            starts.push(phi.iter().map(|&p| (1.0 + eps * p).max(1e-12)).collect());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..restarts {
            starts.push(
                (0..n)
                    .map(|_| libm::exp(0.7 * (rng.random::<f64>() - 0.5)))
                    .collect(),
            );
        }

        let mut best = f64::INFINITY;
        let mut scratch = vec![0.0f64; n];
        let mut grad = vec![0.0f64; n];
        let mut any_valid = false;
        for mut u in starts {
            let mut ent = entropy_sq(&u);
            if ent < 1e-14 {
                continue;
            }
            let mut en = energy(&u, &mut scratch);
            let mut ratio = en / ent;
            any_valid = true;
            for _ in 0..iterations {
                // grad ratio = (2 B u * ent - en * dEnt) / ent^2; the common
                // 1/ent^2 scale is absorbed into the step size.
                b.matvec(&u, &mut scratch);
                let mean_sq: f64 = mu.iter().zip(&u).map(|(&m, &x)| m * x * x).sum();
                let log_mean = libm::log(mean_sq);
                for i in 0..n {
                    let dent = if u[i] > 0.0 {
                        2.0 * mu[i] * u[i] * (libm::log(u[i] * u[i]) - log_mean)
                    } else {
                        0.0
                    };
                    grad[i] = 2.0 * scratch[i] * ent - en * dent;
                }
                let gn = crate::linalg::norm(&grad);
                if gn < 1e-16 {
                    break;
                }
                let un = crate::linalg::norm(&u);
                let mut step = 0.2 * un / gn;
                let mut improved = false;
                for _ in 0..30 {
                    let trial: Vec<f64> = u
                        .iter()
                        .zip(&grad)
                        .map(|(&x, &g)| (x - step * g).max(0.0))
                        .collect();
                    let t_ent = entropy_sq(&trial);
                    if t_ent > 1e-14 {
                        let t_en = energy(&trial, &mut scratch);
                        let t_ratio = t_en / t_ent;
                        if t_ratio < ratio {
                            u = trial;
                            en = t_en;
                            ent = t_ent;
                            ratio = t_ratio;
                            improved = true;
                            break;
                        }
                    }
                    step *= 0.5;
                }
                if !improved {
                    break;
                }
            }
            best = best.min(ratio);
        }
        if !any_valid {
            return Err(SpectrumError::DegenerateSearch);
        }
        Ok(best)
    }
}

/// Which `L^p(mu)` norm a mixing time is measured in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixingNorm {
    L1,
    L2,
}

fn neighbor_spins(
    tree: &TreeTopology,
    boundary: &BoundaryCondition,
    interior: &[Spin],
    x: usize,
) -> Vec<Spin> {
    let mut out = Vec::with_capacity(tree.branching() + 1);
    if let Some(p) = tree.parent(x) {
        out.push(interior[p]);
    }
    for c in tree.children(x) {
        if c < tree.vertex_count() {
            out.push(interior[c]);
        } else if let BoundaryCondition::Fixed(assign) = boundary {
            out.push(assign[c - tree.vertex_count()]);
        }
    }
    out
}

/// `sum_x E[Var_{B_{x,l}}(f)]`: the block Dirichlet form of the exact
/// space underlying a generator.
pub fn block_dirichlet(space: &ExactSpace<'_>, f: &[f64], l: usize) -> f64 {
    let tree = space.tree;
    let mut total = 0.0;
    for x in 0..tree.vertex_count() {
        let block = tree.block(x, l).expect("x interior");
        total += space.split(&block).mean_cond_var(space, f);
    }
    total
}

/// The optimal constant `alpha(p)` in `Ent(g) <= alpha(p) Var(sqrt g)` for
/// a two-point distribution with weights `(p, 1-p)`:
/// `alpha(p) = ln(p/(1-p)) / (2p - 1)`, extended by continuity to
/// `alpha(1/2) = 2`.
pub fn bernoulli_alpha(p: f64) -> Result<f64, SpectrumError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(SpectrumError::BadProbability(p));
    }
    let x = 2.0 * p - 1.0;
    if x.abs() < 1e-6 {
        // 2 artanh(x)/x = 2 (1 + x^2/3 + x^4/5 + ...)
        return Ok(2.0 * (1.0 + x * x / 3.0));
    }
    Ok(2.0 * libm::atanh(x) / x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{entropy_of, variance_of};

    fn ising_gen<'a>(
        model: &'a SpinModel,
        tree: &'a TreeTopology,
        bc: &'a BoundaryCondition,
    ) -> GeneratorMatrix<'a> {
        GeneratorMatrix::build(model, tree, bc).unwrap()
    }

    #[test]
    fn single_site_gap_is_one() {
        for (beta, h) in [(0.0, 0.0), (1.0, 0.0), (0.7, -0.4)] {
            let model = SpinModel::ising(beta, h).unwrap();
            let tree = TreeTopology::build(2, 0).unwrap();
            for bc in [
                BoundaryCondition::all_constant(&tree, 1),
                BoundaryCondition::Free,
            ] {
                let gen = GeneratorMatrix::build(&model, &tree, &bc).unwrap();
                assert_eq!(gen.state_count(), 2);
                let gap = gen.spectral_gap(1).unwrap();
                assert!((gap - 1.0).abs() < 1e-12, "gap {gap}");
            }
        }
    }

    #[test]
    fn beta_zero_gap_is_one() {
        // Independent rate-1 heat-bath sites: the product chain has gap 1.
        let model = SpinModel::ising(0.0, 0.0).unwrap();
        let tree = TreeTopology::build(2, 2).unwrap();
        let bc = BoundaryCondition::Free;
        let gen = ising_gen(&model, &tree, &bc);
        let gap = gen.spectral_gap(1).unwrap();
        assert!((gap - 1.0).abs() < 1e-8, "gap {gap}");
    }

    #[test]
    fn generator_invariants() {
        let models = [
            SpinModel::ising(1.2, 0.1).unwrap(),
            SpinModel::hard_core(2.5).unwrap(),
            SpinModel::colorings(3).unwrap(),
        ];
        let tree = TreeTopology::build(2, 2).unwrap();
        let bc = BoundaryCondition::Free;
        for model in &models {
            let gen = GeneratorMatrix::build(model, &tree, &bc).unwrap();
            assert!(gen.max_row_sum_error() < 1e-12);
            assert!(gen.detailed_balance_error() < 1e-12);
            assert!(gen.min_off_diagonal() > 0.0);
        }
    }

    #[test]
    fn lanczos_gap_agrees_with_dense() {
        // Depth-2 space (128 states) computed by both paths.
        let model = SpinModel::ising(1.2, 0.0).unwrap();
        let tree = TreeTopology::build(2, 2).unwrap();
        let bc = BoundaryCondition::all_constant(&tree, 1);
        let gen = ising_gen(&model, &tree, &bc);
        let a = gen.symmetrized();
        let (vals, _) = dense_sym_eigen(a.to_dense());
        let sparse = lanczos_smallest(&a, &gen.sqrt_mu(), 3, 1e-10, 1_000_000).unwrap();
        assert!((vals[1] - sparse.value).abs() < 1e-8);
        assert!((gen.spectral_gap(3).unwrap() - vals[1]).abs() < 1e-10);
    }

    #[test]
    fn dirichlet_form_equals_sum_of_site_variances() {
        let models = [
            SpinModel::ising(0.9, -0.2).unwrap(),
            SpinModel::hard_core(1.7).unwrap(),
            SpinModel::potts(3, 0.5, true).unwrap(),
        ];
        let tree = TreeTopology::build(2, 2).unwrap();
        let bc = BoundaryCondition::Free;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for model in &models {
            let gen = GeneratorMatrix::build(model, &tree, &bc).unwrap();
            for _ in 0..10 {
                let f: Vec<f64> = (0..gen.state_count())
                    .map(|_| rng.random::<f64>() * 2.0 - 0.5)
                    .collect();
                let lhs = gen.dirichlet_form(&f);
                let rhs = block_dirichlet(&gen.space, &f, 1);
                assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
            }
            let f = vec![3.0; gen.state_count()];
            assert!(gen.dirichlet_form(&f).abs() < 1e-14);
        }
    }

    #[test]
    fn gap_is_rayleigh_minimum() {
        let model = SpinModel::ising(1.0, 0.0).unwrap();
        let tree = TreeTopology::build(2, 2).unwrap();
        let bc = BoundaryCondition::all_constant(&tree, 1);
        let gen = ising_gen(&model, &tree, &bc);
        let gap = gen.spectral_gap(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let f: Vec<f64> = (0..gen.state_count()).map(|_| rng.random::<f64>()).collect();
            let var = variance_of(gen.stationary(), &f);
            if var < 1e-12 {
                continue;
            }
            assert!(gap <= gen.dirichlet_form(&f) / var + 1e-8);
        }
    }

    #[test]
    fn log_sobolev_single_site_and_tensorization() {
        // Symmetric two-point chain: c_sob = 1/2, found by the search and
        // confirmed by a one-parameter exhaustive scan.
        let model = SpinModel::ising(0.0, 0.0).unwrap();
        let tree = TreeTopology::build(2, 0).unwrap();
        let bc = BoundaryCondition::Free;
        let gen = ising_gen(&model, &tree, &bc);
        let found = gen.log_sobolev_upper(20, 300, 5).unwrap();
        assert!(found <= 0.5 + 1e-6, "found {found}");
        let mut scan_best = f64::INFINITY;
        for k in 1..2000 {
            let t = k as f64 / 2000.0;
            let f = [1.0 + t, 1.0 - t];
            let sq = [libm::sqrt(f[0]), libm::sqrt(f[1])];
            let ratio = gen.dirichlet_form(&sq) / entropy_of(gen.stationary(), &f).unwrap();
            scan_best = scan_best.min(ratio);
        }
        assert!((found - scan_best).abs() < 1e-3, "{found} vs {scan_best}");
        assert!((scan_best - 0.5).abs() < 1e-3);

        // beta = 0 tensorizes: depth-1 value within 5% of the single site.
        let tree1 = TreeTopology::build(2, 1).unwrap();
        let gen1 = GeneratorMatrix::build(&model, &tree1, &bc).unwrap();
        let found1 = gen1.log_sobolev_upper(20, 300, 6).unwrap();
        assert!((found1 - found).abs() < 0.05 * found, "{found1} vs {found}");
    }

    #[test]
    fn log_sobolev_below_half_gap() {
        let cases = [
            (SpinModel::ising(1.2, 0.0).unwrap(), 1usize),
            (SpinModel::hard_core(2.0).unwrap(), 2),
            (SpinModel::colorings(4).unwrap(), 1),
        ];
        for (model, m) in &cases {
            let tree = TreeTopology::build(2, *m).unwrap();
            let bc = BoundaryCondition::Free;
            let gen = GeneratorMatrix::build(model, &tree, &bc).unwrap();
            let gap = gen.spectral_gap(1).unwrap();
            let csob = gen.log_sobolev_upper(10, 200, 9).unwrap();
            assert!(csob <= gap / 2.0 + 1e-6, "csob {csob} gap {gap}");
            assert!(csob > 0.0);
        }
    }

    #[test]
    fn mixing_time_single_site_closed_form() {
        // Two-state chain with stationary (q, p): the deviation decays as
        // e^(-t) exactly, so T_1 = 1 + ln(2 max(p,q)) and
        // T_2 = 1 + (1/2) ln(max/min).
        for (beta, h) in [(0.0, 0.0), (0.8, 0.3)] {
            let model = SpinModel::ising(beta, h).unwrap();
            let tree = TreeTopology::build(2, 0).unwrap();
            let bc = BoundaryCondition::Free;
            let gen = ising_gen(&model, &tree, &bc);
            let mu = gen.stationary();
            let (lo, hi) = (mu[0].min(mu[1]), mu[0].max(mu[1]));
            let t1 = gen.mixing_time(MixingNorm::L1, 1.0 / libm::exp(1.0)).unwrap();
            let t2 = gen.mixing_time(MixingNorm::L2, 1.0 / libm::exp(1.0)).unwrap();
            assert!((t1 - (1.0 + libm::log(2.0 * hi))).abs() < 1e-5, "t1 {t1}");
            assert!((t2 - (1.0 + 0.5 * libm::log(hi / lo))).abs() < 1e-5, "t2 {t2}");
        }
    }

    #[test]
    fn mixing_time_beta_zero_matches_product_oracle() {
        // Three independent fair sites: compare against the closed-form
        // product kernel enumerated over the 8 states.
        let model = SpinModel::ising(0.0, 0.0).unwrap();
        let tree = TreeTopology::build(2, 1).unwrap();
        let bc = BoundaryCondition::Free;
        let gen = ising_gen(&model, &tree, &bc);
        let t1 = gen.mixing_time(MixingNorm::L1, 1.0 / libm::exp(1.0)).unwrap();
        let norm1 = |t: f64| -> f64 {
            // sup_sigma sum_eta |prod_i P_t(s_i, e_i) - 1/8|; by symmetry the
            // starting state does not matter.
            let stay = 0.5 * (1.0 + libm::exp(-t));
            let flip = 0.5 * (1.0 - libm::exp(-t));
            let mut total = 0.0;
            for k in 0..8u32 {
                let flips = k.count_ones() as usize;
                let p: f64 = libm::pow(stay, (3 - flips) as f64) * libm::pow(flip, flips as f64);
                total += (p - 0.125).abs();
            }
            total
        };
        let mut lo = 0.0;
        let mut hi = 16.0;
        while hi - lo > 1e-8 {
            let mid = 0.5 * (lo + hi);
            if norm1(mid) > 1.0 / libm::exp(1.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((t1 - 0.5 * (lo + hi)).abs() < 1e-5, "{t1} vs {}", 0.5 * (lo + hi));
    }

    #[test]
    fn gap_times_mixing_time_lower_bounds() {
        let cases = [
            (SpinModel::ising(1.2, 0.0).unwrap(), 1usize),
            (SpinModel::hard_core(3.0).unwrap(), 2),
            (SpinModel::colorings(3).unwrap(), 1),
        ];
        let threshold = 1.0 / libm::exp(1.0);
        for (model, m) in &cases {
            let tree = TreeTopology::build(2, *m).unwrap();
            let bc = BoundaryCondition::Free;
            let gen = GeneratorMatrix::build(model, &tree, &bc).unwrap();
            let gap = gen.spectral_gap(1).unwrap();
            let t1 = gen.mixing_time(MixingNorm::L1, threshold).unwrap();
            let t2 = gen.mixing_time(MixingNorm::L2, threshold).unwrap();
            assert!(gap * t1 >= 1.0 - 1e-6, "gap*T1 = {}", gap * t1);
            assert!(gap * t2 >= 1.0 - 1e-6, "gap*T2 = {}", gap * t2);
        }
    }

    #[test]
    fn bernoulli_alpha_values() {
        // Continuity at 1/2 and symmetry.
        assert!((bernoulli_alpha(0.5).unwrap() - 2.0).abs() < 1e-12);
        for p in [0.1, 0.25, 0.731, 0.9] {
            let a = bernoulli_alpha(p).unwrap();
            let b = bernoulli_alpha(1.0 - p).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
        assert!((bernoulli_alpha(0.5 + 1e-9).unwrap() - 2.0).abs() < 1e-8);
        assert!(bernoulli_alpha(0.0).is_err());
        assert!(bernoulli_alpha(1.0).is_err());
        assert!(bernoulli_alpha(-0.3).is_err());

        // Ent(g) <= alpha(p) Var(sqrt g) on a grid of two-point g, and the
        // bound is attained somewhere (it is the optimal constant).
        for p in [0.5, 0.731, 0.88] {
            let alpha = bernoulli_alpha(p).unwrap();
            let probs = [1.0 - p, p];
            let mut best = 0.0f64;
            for k in 0..4000 {
                let g1 = libm::exp(-9.0 + 18.0 * k as f64 / 4000.0);
                let g = [1.0, g1];
                let s = [1.0, libm::sqrt(g1)];
                let var = variance_of(&probs, &s);
                if var < 1e-300 {
                    continue;
                }
                let ratio = entropy_of(&probs, &g).unwrap() / var;
                assert!(ratio <= alpha + 1e-9, "p={p}: ratio {ratio} > alpha {alpha}");
                best = best.max(ratio);
            }
            assert!(best > alpha - 1e-3, "p={p}: sup {best} below alpha {alpha}");
        }
    }
}
