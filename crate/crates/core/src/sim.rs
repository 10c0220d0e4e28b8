//! Seeded Monte Carlo Glauber dynamics: uniformized single-site chains,
//! grand couplings from extremal starts for monotone models, a
//! total-variation mixing estimator at the root, stationary autocovariance
//! rate fits, and the recursive down/up couplings with their
//! Hamming-distance statistics.

use alloc::string::String;
use alloc::{format, vec, vec::Vec};
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exact::{draw_index, ExactError, MessageSet};
use crate::mixing::MixingError;
use crate::model::{Configuration, ModelParams, Potential, Spin, SpinModel};
use crate::tree::{BoundaryCondition, TreeTopology};
use crate::util::log_sum_exp;

#[derive(Clone, Debug, PartialEq)]
pub enum SimError {
    /// Grand coupling requested for a model without a monotone order;
    /// use the total-variation estimator instead.
    NonMonotone,
    InsufficientReplicas(String),
    InsufficientSignal(String),
    BadSite(String),
    Exact(ExactError),
    Mixing(MixingError),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::NonMonotone => write!(
                f,
                "model has no monotone coupling order; use the TV estimator"
            ),
            SimError::InsufficientReplicas(msg) => write!(f, "replica budget too small: {msg}"),
            SimError::InsufficientSignal(msg) => write!(f, "insufficient signal: {msg}"),
            SimError::BadSite(msg) => write!(f, "bad site: {msg}"),
            SimError::Exact(e) => write!(f, "{e}"),
            SimError::Mixing(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SimError {}

impl From<ExactError> for SimError {
    fn from(e: ExactError) -> Self {
        SimError::Exact(e)
    }
}

impl From<MixingError> for SimError {
    fn from(e: MixingError) -> Self {
        SimError::Mixing(e)
    }
}

/// Deterministic per-replica RNG stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

enum Kernel {
    /// `p_plus[field + dmax]` with `field` the signed neighbor sum.
    Ising { p_plus: Vec<f64>, dmax: i32 },
    /// Occupation probability with all neighbors empty; the acceptance
    /// interval alternates with the level parity so that a shared uniform
    /// preserves the checkerboard order.
    HardCore { p_occ: f64 },
    Generic,
}

/// A compiled single-site update rule: flattened neighbor lists plus a
/// fast kernel, consuming one uniform per update under a fixed spin
/// ordering (the construction that makes heat-bath monotone for
/// attractive models).
pub struct Dynamics<'a> {
    pub model: &'a SpinModel,
    pub tree: &'a TreeTopology,
    pub boundary: &'a BoundaryCondition,
    neigh_idx: Vec<u32>,
    neigh_ptr: Vec<u32>,
    level_even: Vec<bool>,
    kernel: Kernel,
}

impl<'a> Dynamics<'a> {
    pub fn new(
        model: &'a SpinModel,
        tree: &'a TreeTopology,
        boundary: &'a BoundaryCondition,
    ) -> Self {
        let n = tree.vertex_count();
        let mut neigh_idx = Vec::new();
        let mut neigh_ptr = Vec::with_capacity(n + 1);
        neigh_ptr.push(0u32);
        for v in 0..n {
            if let Some(p) = tree.parent(v) {
                neigh_idx.push(p as u32);
            }
            for c in tree.children(v) {
                if c < n || !boundary.is_free() {
                    neigh_idx.push(c as u32);
                }
            }
            neigh_ptr.push(neigh_idx.len() as u32);
        }
        let level_even = (0..n).map(|v| tree.level(v) % 2 == 0).collect();
        let kernel = match model.params() {
            ModelParams::Ising { beta, h } => {
                let dmax = tree.branching() as i32 + 1;
                let p_plus = (-dmax..=dmax)
                    .map(|s| 1.0 / (1.0 + libm::exp(-2.0 * beta * (s as f64 + h))))
                    .collect();
                Kernel::Ising { p_plus, dmax }
            }
            ModelParams::HardCore { lambda } => Kernel::HardCore {
                p_occ: lambda / (1.0 + lambda),
            },
            _ => Kernel::Generic,
        };
        Dynamics {
            model,
            tree,
            boundary,
            neigh_idx,
            neigh_ptr,
            level_even,
            kernel,
        }
    }

    #[inline]
    fn neighbors(&self, v: usize) -> &[u32] {
        &self.neigh_idx[self.neigh_ptr[v] as usize..self.neigh_ptr[v + 1] as usize]
    }

    /// Resample the spin at `site` from its exact conditional using the
    /// single uniform `u`. Returns (old, new).
    pub fn apply(&self, spins: &mut [Spin], site: usize, u: f64) -> (Spin, Spin) {
        let old = spins[site];
        let new = match &self.kernel {
            Kernel::Ising { p_plus, dmax } => {
                let mut field = 0i32;
                for &nb in self.neighbors(site) {
                    field += 2 * spins[nb as usize] as i32 - 1;
                }
                (u < p_plus[(field + dmax) as usize]) as Spin
            }
            Kernel::HardCore { p_occ } => {
                let blocked = self
                    .neighbors(site)
                    .iter()
                    .any(|&nb| spins[nb as usize] == 1);
                if blocked {
                    0
                } else if self.level_even[site] {
                    (u < *p_occ) as Spin
                } else {
                    (u >= 1.0 - *p_occ) as Spin
                }
            }
            Kernel::Generic => {
                let q = self.model.spin_count();
                let mut energy = [f64::INFINITY; crate::model::MAX_SPINS];
                let mut min_e = f64::INFINITY;
                for (s, slot) in energy.iter_mut().enumerate().take(q) {
                    let mut e = self.model.singleton_potential(s as Spin);
                    let mut ok = true;
                    for &nb in self.neighbors(site) {
                        match self.model.pair_potential(s as Spin, spins[nb as usize]) {
                            Potential::Finite(x) => e += x,
                            Potential::Forbidden => {
                                ok = false;
                                break;
                            }
                        }
                    }
                    if ok {
                        *slot = e;
                        min_e = min_e.min(e);
                    }
                }
                let mut weights = [0.0f64; crate::model::MAX_SPINS];
                let mut total = 0.0;
                for s in 0..q {
                    if energy[s].is_finite() {
                        weights[s] = libm::exp(min_e - energy[s]);
                        total += weights[s];
                    }
                }
                let mut acc = 0.0;
                let mut chosen = q - 1;
                for (s, &w) in weights.iter().enumerate().take(q) {
                    acc += w / total;
                    if u < acc {
                        chosen = s;
                        break;
                    }
                }
                chosen as Spin
            }
        };
        spins[site] = new;
        #[cfg(debug_assertions)]
        for &nb in self.neighbors(site) {
            debug_assert!(
                !self
                    .model
                    .pair_potential(new, spins[nb as usize])
                    .is_forbidden(),
                "heat-bath update produced a forbidden edge"
            );
        }
        (old, new)
    }
}

/// A seeded Glauber chain in uniformized continuous time: the waiting
/// time is drawn before each event, so `time` always stamps the moment of
/// the last applied update and snapshots between events are exact.
pub struct ChainState {
    pub config: Configuration,
    pub time: f64,
    pub steps: u64,
}

impl ChainState {
    pub fn new(config: Configuration) -> Self {
        ChainState {
            config,
            time: 0.0,
            steps: 0,
        }
    }

    /// Run until the next event would pass `t` and stop there. Discarding
    /// the unused waiting time is exact by memorylessness.
    pub fn advance_to<R: Rng + ?Sized>(&mut self, dynamics: &Dynamics<'_>, t: f64, rng: &mut R) {
        let n = dynamics.tree.vertex_count();
        loop {
            let dt = -libm::log(1.0 - rng.random::<f64>()) / n as f64;
            if self.time + dt > t {
                self.time = t;
                return;
            }
            self.time += dt;
            let site = rng.random_range(0..n);
            let u: f64 = rng.random();
            dynamics.apply(&mut self.config.spins, site, u);
            self.steps += 1;
        }
    }
}

/// Extremal starting configurations of the monotone orders: spin order for
/// Ising, checkerboard order for hard-core (even levels maximal).
pub fn extremal_configs(
    model: &SpinModel,
    tree: &TreeTopology,
    boundary: &BoundaryCondition,
) -> Result<(Configuration, Configuration), SimError> {
    match model.params() {
        ModelParams::Ising { .. } => {
            let mut top = Configuration::constant(tree, 1);
            let mut bottom = Configuration::constant(tree, 0);
            top.apply_boundary(tree, boundary);
            bottom.apply_boundary(tree, boundary);
            Ok((top, bottom))
        }
        ModelParams::HardCore { .. } => {
            let make = |up_even: bool| {
                let mut c = Configuration::constant(tree, 0);
                c.apply_boundary(tree, boundary);
                for v in 0..tree.vertex_count() {
                    let even = tree.level(v) % 2 == 0;
                    if even == up_even {
                        let blocked = tree.children(v).any(|c2| {
                            c2 >= tree.vertex_count()
                                && boundary.fixed_spin(c2 - tree.vertex_count()) == Some(1)
                        });
                        if !blocked {
                            c.spins[v] = 1;
                        }
                    }
                }
                c
            };
            Ok((make(true), make(false)))
        }
        _ => Err(SimError::NonMonotone),
    }
}

/// Coordinatewise (Ising) or checkerboard (hard-core) order test.
pub fn ordered(model: &SpinModel, tree: &TreeTopology, top: &[Spin], bottom: &[Spin]) -> bool {
    match model.params() {
        ModelParams::Ising { .. } => (0..tree.vertex_count()).all(|v| top[v] >= bottom[v]),
        ModelParams::HardCore { .. } => (0..tree.vertex_count()).all(|v| {
            if tree.level(v) % 2 == 0 {
                top[v] >= bottom[v]
            } else {
                top[v] <= bottom[v]
            }
        }),
        _ => false,
    }
}

/// Result of one grand-coupling replica.
#[derive(Clone, Copy, Debug)]
pub struct CoalescenceRun {
    pub time: f64,
    pub steps: u64,
    pub coalesced: bool,
}

/// Run the two extremal chains with shared site choices, update uniforms
/// and clocks until they meet (or `max_time` passes, leaving a censored
/// run). Coalescence of the extremal pair bounds the coupling time from
/// every start for monotone models.
pub fn grand_coupling_run(
    dynamics: &Dynamics<'_>,
    seed: u64,
    stream: u64,
    max_time: f64,
) -> Result<CoalescenceRun, SimError> {
    let tree = dynamics.tree;
    let n = tree.vertex_count();
    let (top, bottom) = extremal_configs(dynamics.model, tree, dynamics.boundary)?;
    let mut top = top.spins;
    let mut bottom = bottom.spins;
    let mut disagreements = (0..n).filter(|&v| top[v] != bottom[v]).count();
    let mut rng = stream_rng(seed, stream);
    let mut time = 0.0f64;
    let mut steps = 0u64;
    while disagreements > 0 {
        let dt = -libm::log(1.0 - rng.random::<f64>()) / n as f64;
        if time + dt > max_time {
            time = max_time;
            break;
        }
        time += dt;
        let site = rng.random_range(0..n);
        let u: f64 = rng.random();
        let (ot, nt) = dynamics.apply(&mut top, site, u);
        let (ob, nb) = dynamics.apply(&mut bottom, site, u);
        if ot != ob && nt == nb {
            disagreements -= 1;
        } else if ot == ob && nt != nb {
            disagreements += 1;
        }
        debug_assert!(ordered(dynamics.model, tree, &top, &bottom));
        steps += 1;
    }
    Ok(CoalescenceRun {
        time,
        steps,
        coalesced: disagreements == 0,
    })
}

/// Repeated grand-coupling runs on consecutive RNG streams.
pub fn coalescence_times(
    dynamics: &Dynamics<'_>,
    seed: u64,
    replicas: usize,
    max_time: f64,
) -> Result<Vec<CoalescenceRun>, SimError> {
    (0..replicas)
        .map(|r| grand_coupling_run(dynamics, seed, r as u64, max_time))
        .collect()
}

/// Median of a sample (averaging the middle pair); NaN on empty input.
pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Bootstrap percentile interval for the median.
pub fn bootstrap_median_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> (f64, f64) {
    let mut rng = stream_rng(seed, u64::MAX);
    let mut medians: Vec<f64> = (0..resamples)
        .map(|_| {
            let mut sample: Vec<f64> = (0..values.len())
                .map(|_| values[rng.random_range(0..values.len())])
                .collect();
            median(&mut sample)
        })
        .collect();
    medians.sort_by(|a, b| a.total_cmp(b));
    let lo_idx = (((1.0 - level) / 2.0) * resamples as f64) as usize;
    let hi_idx = ((1.0 - (1.0 - level) / 2.0) * resamples as f64) as usize;
    (
        medians[lo_idx.min(resamples - 1)],
        medians[hi_idx.min(resamples - 1)],
    )
}

/// One checkpoint of the root-spin total-variation estimator.
#[derive(Clone, Copy, Debug)]
pub struct TvPoint {
    pub time: f64,
    pub tv: f64,
    pub ci95: f64,
}

#[derive(Clone, Debug)]
pub struct TvMixingEstimate {
    /// First checkpoint at which the empirical TV fell below the target.
    pub time: Option<f64>,
    pub series: Vec<TvPoint>,
}

/// A valid start maximizing the initial root distance: the constant
/// configuration at the least likely root spin when valid, otherwise a
/// greedy valid configuration with that root spin.
pub fn adversarial_start(ms: &MessageSet<'_>) -> Result<Configuration, SimError> {
    let tree = ms.tree;
    let model = ms.model;
    let root = ms.marginal(0)?;
    let mut order: Vec<usize> = (0..model.spin_count()).collect();
    order.sort_by(|&a, &b| root[a].total_cmp(&root[b]));
    let target = order[0] as Spin;
    let mut config = Configuration::constant(tree, target);
    config.apply_boundary(tree, ms.boundary);
    if config.is_valid(model, tree) {
        return Ok(config);
    }
    // Greedy: keep the preferred spin wherever the parent and the fixed
    // boundary children allow it.
    for v in 0..tree.vertex_count() {
        let parent_spin = tree.parent(v).map(|p| config.spins[p]);
        let fixed_kids: Vec<Spin> = tree
            .children(v)
            .filter(|&c| c >= tree.vertex_count() && !ms.boundary.is_free())
            .map(|c| config.spins[c])
            .collect();
        let allowed = |s: Spin| {
            if let Some(p) = parent_spin {
                if model.pair_potential(s, p).is_forbidden() {
                    return false;
                }
            }
            fixed_kids
                .iter()
                .all(|&k| !model.pair_potential(s, k).is_forbidden())
        };
        if allowed(target) {
            config.spins[v] = target;
            continue;
        }
        match (0..model.spin_count() as Spin).find(|&s| allowed(s)) {
            Some(s) => config.spins[v] = s,
            None => return Err(SimError::BadSite(format!("no valid spin at {v}"))),
        }
    }
    Ok(config)
}

/// Estimate the time at which the empirical root-spin distribution over
/// replicas, started from the adversarial start, is within `eps` of the
/// exact root marginal in total variation. Confidence intervals come from
/// a multinomial bootstrap over replicas.
pub fn tv_mixing_estimate(
    ms: &MessageSet<'_>,
    eps: f64,
    replicas: usize,
    checkpoints: &[f64],
    seed: u64,
) -> Result<TvMixingEstimate, SimError> {
    let q = ms.model.spin_count();
    // The estimator cannot resolve an eps below its own binomial noise.
    let noise = 1.96 * libm::sqrt(0.25 / replicas as f64);
    if noise > eps {
        return Err(SimError::InsufficientReplicas(format!(
            "{replicas} replicas resolve TV ~{noise:.4}, requested eps {eps}"
        )));
    }
    let exact = ms.marginal(0)?;
    let start = adversarial_start(ms)?;
    let dynamics = Dynamics::new(ms.model, ms.tree, ms.boundary);
    let mut counts = vec![vec![0u64; q]; checkpoints.len()];
    for r in 0..replicas {
        let mut rng = stream_rng(seed, r as u64);
        let mut chain = ChainState::new(start.clone());
        for (k, &t) in checkpoints.iter().enumerate() {
            chain.advance_to(&dynamics, t, &mut rng);
            counts[k][chain.config.spins[0] as usize] += 1;
        }
    }
    let mut boot_rng = stream_rng(seed, u64::MAX - 1);
    let mut series = Vec::with_capacity(checkpoints.len());
    let mut hit: Option<f64> = None;
    for (k, &t) in checkpoints.iter().enumerate() {
        let freq: Vec<f64> = counts[k]
            .iter()
            .map(|&c| c as f64 / replicas as f64)
            .collect();
        let tv = 0.5
            * freq
                .iter()
                .zip(&exact)
                .map(|(&a, &b)| (a - b).abs())
                .sum::<f64>();
        let mut boots: Vec<f64> = (0..200)
            .map(|_| {
                let mut resampled = vec![0u64; q];
                for _ in 0..replicas {
                    let u: f64 = boot_rng.random();
                    resampled[draw_index(&freq, u)] += 1;
                }
                0.5 * resampled
                    .iter()
                    .zip(&exact)
                    .map(|(&c, &b)| (c as f64 / replicas as f64 - b).abs())
                    .sum::<f64>()
            })
            .collect();
        boots.sort_by(|a, b| a.total_cmp(b));
        let ci95 = (boots[194.min(boots.len() - 1)] - tv).abs();
        series.push(TvPoint { time: t, tv, ci95 });
        if hit.is_none() && tv <= eps {
            hit = Some(t);
        }
    }
    Ok(TvMixingEstimate { time: hit, series })
}

/// Exponential rate fitted to the stationary autocovariance of the root
/// observable (signed spin for two-state models, a centered indicator
/// otherwise).
#[derive(Clone, Copy, Debug)]
pub struct RateFit {
    pub rate: f64,
    pub stderr: f64,
    pub lags_used: usize,
}

pub fn autocorr_gap_estimate(
    ms: &MessageSet<'_>,
    replicas: usize,
    lag_step: f64,
    max_lags: usize,
    seed: u64,
) -> Result<RateFit, SimError> {
    let dynamics = Dynamics::new(ms.model, ms.tree, ms.boundary);
    let two_state = ms.model.spin_count() == 2;
    let observe = |s: Spin| -> f64 {
        if two_state {
            2.0 * s as f64 - 1.0
        } else {
            (s == 0) as u8 as f64
        }
    };
    let cols = max_lags + 1;
    let mut sum = vec![0.0f64; cols];
    let mut cross = vec![0.0f64; cols]; // sums of f(0) * f(k dt)
    let mut cross_sq = vec![0.0f64; cols];
    for r in 0..replicas {
        let mut rng = stream_rng(seed, r as u64);
        let start = ms.sample(&mut rng); // stationary start
        let mut chain = ChainState::new(start);
        let f0 = observe(chain.config.spins[0]);
        for k in 0..cols {
            chain.advance_to(&dynamics, k as f64 * lag_step, &mut rng);
            let fk = observe(chain.config.spins[0]);
            sum[k] += fk;
            cross[k] += f0 * fk;
            cross_sq[k] += (f0 * fk) * (f0 * fk);
        }
    }
    let nrep = replicas as f64;
    let mean0 = sum[0] / nrep;
    let mut cov = vec![0.0f64; cols];
    let mut se = vec![0.0f64; cols];
    for k in 0..cols {
        let meank = sum[k] / nrep;
        cov[k] = cross[k] / nrep - mean0 * meank;
        let var_prod = cross_sq[k] / nrep - (cross[k] / nrep) * (cross[k] / nrep);
        se[k] = libm::sqrt(var_prod.max(0.0) / nrep);
    }
    // Usable lags: autocovariance above three standard errors.
    let mut last_usable = 0;
    for k in 0..cols {
        if cov[k] > 3.0 * se[k] && cov[k] > 0.0 {
            last_usable = k;
        } else if k > 0 {
            break;
        }
    }
    if last_usable < 2 {
        return Err(SimError::InsufficientSignal(
            "fewer than three usable lags".into(),
        ));
    }
    let foldings = libm::log(cov[0] / cov[last_usable]);
    if foldings < 3.0 {
        return Err(SimError::InsufficientSignal(format!(
            "only {foldings:.2} e-foldings above the noise floor"
        )));
    }
    // Least squares on ln cov over the usable range.
    let xs: Vec<f64> = (0..=last_usable).map(|k| k as f64 * lag_step).collect();
    let ys: Vec<f64> = (0..=last_usable).map(|k| libm::log(cov[k])).collect();
    let npt = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / npt;
    let my = ys.iter().sum::<f64>() / npt;
    let sxx: f64 = xs.iter().map(|&x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(&x, &y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let resid: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| {
            let e = y - (my + slope * (x - mx));
            e * e
        })
        .sum();
    let stderr = libm::sqrt(resid / (npt - 2.0).max(1.0) / sxx);
    Ok(RateFit {
        rate: -slope,
        stderr,
        lags_used: last_usable + 1,
    })
}

/// Draw from the maximal coupling of two distributions: one shared uniform
/// decides the common part, excess parts are drawn independently.
fn maximal_coupling<R: Rng + ?Sized>(p: &[f64], q: &[f64], rng: &mut R) -> (usize, usize) {
    let overlap: f64 = p.iter().zip(q).map(|(&a, &b)| a.min(b)).sum();
    let u: f64 = rng.random();
    let rest = 1.0 - overlap;
    if u < overlap || rest < 1e-14 {
        let mut acc = 0.0;
        for (s, (&a, &b)) in p.iter().zip(q).enumerate() {
            acc += a.min(b);
            if u < acc {
                return (s, s);
            }
        }
        let last = p.len() - 1;
        return (last, last);
    }
    let excess_p: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| (a - b).max(0.0) / rest)
        .collect();
    let excess_q: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| (b - a).max(0.0) / rest)
        .collect();
    let x = draw_index(&excess_p, rng.random());
    let y = draw_index(&excess_q, rng.random());
    (x, y)
}

/// Hamming-distance samples at the row `l` levels below `x` for the
/// recursive coupling of the two parent-spin conditionings: each child is
/// coupled maximally from its exact conditional; agreement merges the
/// whole subtree, disagreement recurses.
pub struct DownCouplingStats {
    pub distances: Vec<u32>,
    pub levels: usize,
}

impl DownCouplingStats {
    pub fn mean(&self) -> f64 {
        self.distances.iter().map(|&d| d as f64).sum::<f64>() / self.distances.len() as f64
    }

    pub fn stderr(&self) -> f64 {
        let m = self.mean();
        let var: f64 = self
            .distances
            .iter()
            .map(|&d| (d as f64 - m) * (d as f64 - m))
            .sum::<f64>()
            / (self.distances.len() as f64 - 1.0).max(1.0);
        libm::sqrt(var / self.distances.len() as f64)
    }

    /// Empirical `P[distance > c]`.
    pub fn tail(&self, c: f64) -> f64 {
        self.distances.iter().filter(|&&d| d as f64 > c).count() as f64
            / self.distances.len() as f64
    }
}

pub fn coupling_down(
    ms: &MessageSet<'_>,
    x: usize,
    l: usize,
    spins: (Spin, Spin),
    replicas: usize,
    seed: u64,
) -> Result<DownCouplingStats, SimError> {
    let tree = ms.tree;
    let q = ms.model.spin_count();
    if tree.level(x) + l > tree.depth() + 1 {
        return Err(SimError::BadSite(format!(
            "level {l} below {x} leaves the tree"
        )));
    }
    // Conditional child tables P(sigma_c | parent spin), filled lazily.
    let mut cond: Vec<Option<Vec<Vec<f64>>>> = vec![None; tree.vertex_count()];
    let target_level = tree.level(x) + l;
    let mut distances = Vec::with_capacity(replicas);
    for r in 0..replicas {
        let mut rng = stream_rng(seed, r as u64);
        let mut count = 0u32;
        let mut stack: Vec<(usize, Spin, Spin)> = vec![(x, spins.0, spins.1)];
        while let Some((v, st, sb)) = stack.pop() {
            for c in tree.children(v) {
                if tree.is_boundary(c) {
                    continue;
                }
                if cond[c].is_none() {
                    let table: Vec<Vec<f64>> = (0..q)
                        .map(|sp| {
                            ms.subtree_marginal(c, Some(sp as Spin))
                                .unwrap_or_else(|_| vec![0.0; q])
                        })
                        .collect();
                    cond[c] = Some(table);
                }
                let table = cond[c].as_ref().unwrap();
                let (a, b) = maximal_coupling(&table[st as usize], &table[sb as usize], &mut rng);
                if a == b {
                    continue; // the subtrees below c merge with certainty
                }
                if tree.level(c) == target_level {
                    count += 1;
                } else {
                    stack.push((c, a as Spin, b as Spin));
                }
            }
        }
        distances.push(count);
    }
    Ok(DownCouplingStats {
        distances,
        levels: l,
    })
}

/// Estimate of the probability that a single boundary discrepancy at `w`
/// propagates a disagreement up to `x` under the recursive path coupling.
#[derive(Clone, Copy, Debug)]
pub struct UpCouplingEstimate {
    pub probability: f64,
    pub hits: usize,
    pub replicas: usize,
    pub path_length: usize,
}

impl UpCouplingEstimate {
    pub fn ci95(&self) -> f64 {
        let p = self.probability;
        1.96 * libm::sqrt((p * (1.0 - p)).max(1.0 / self.replicas as f64) / self.replicas as f64)
    }
}

pub fn disagreement_up(
    ms: &MessageSet<'_>,
    x: usize,
    w: usize,
    alt_spin: Spin,
    parent_spin: Option<Spin>,
    replicas: usize,
    seed: u64,
) -> Result<UpCouplingEstimate, SimError> {
    let tree = ms.tree;
    let model = ms.model;
    let q = model.spin_count();
    if !tree.is_boundary(w) {
        return Err(SimError::BadSite(format!("{w} is not a boundary vertex")));
    }
    let base_spin = match ms.boundary {
        BoundaryCondition::Fixed(assign) => assign[w - tree.vertex_count()],
        BoundaryCondition::Free => {
            return Err(SimError::BadSite(
                "up-path coupling needs a fixed boundary at w".into(),
            ))
        }
    };
    // Path from w's parent up to x.
    let mut path = Vec::new();
    let mut v = tree.parent(w).expect("boundary vertex has a parent");
    loop {
        path.push(v);
        if v == x {
            break;
        }
        v = match tree.parent(v) {
            Some(p) => p,
            None => return Err(SimError::BadSite(format!("{x} is not an ancestor of {w}"))),
        };
    }
    // psi[i](s): log weight at path vertex i of everything in T_x except
    // the branch toward w, filled top-down from x.
    let mut psi: Vec<Vec<f64>> = vec![vec![0.0; q]; path.len()];
    for i in (0..path.len()).rev() {
        let v = path[i];
        let path_child = if i == 0 { w } else { path[i - 1] };
        for s in 0..q {
            let mut acc = -model.singleton_potential(s as Spin);
            for c in tree.children(v) {
                if c != path_child {
                    acc += ms.child_factor(s as Spin, c);
                }
            }
            if i + 1 < path.len() {
                let mut terms = vec![f64::NEG_INFINITY; q];
                for (sp, t) in terms.iter_mut().enumerate() {
                    *t = match model.pair_potential(s as Spin, sp as Spin) {
                        Potential::Finite(u) => -u + psi[i + 1][sp],
                        Potential::Forbidden => f64::NEG_INFINITY,
                    };
                }
                acc += log_sum_exp(&terms);
            } else if let Some(sp) = parent_spin {
                acc += match model.pair_potential(s as Spin, sp) {
                    Potential::Finite(u) => -u,
                    Potential::Forbidden => f64::NEG_INFINITY,
                };
            }
            psi[i][s] = acc;
        }
    }
    let marginal_given_child = |i: usize, child_spin: Spin| -> Option<Vec<f64>> {
        let logs: Vec<f64> = (0..q)
            .map(|s| {
                psi[i][s]
                    + match model.pair_potential(s as Spin, child_spin) {
                        Potential::Finite(u) => -u,
                        Potential::Forbidden => f64::NEG_INFINITY,
                    }
            })
            .collect();
        crate::exact::normalize_logs(&logs)
    };

    let mut hits = 0usize;
    for r in 0..replicas {
        let mut rng = stream_rng(seed, r as u64);
        let mut pair = (base_spin, alt_spin);
        let mut disagree = true;
        for i in 0..path.len() {
            match (
                marginal_given_child(i, pair.0),
                marginal_given_child(i, pair.1),
            ) {
                (Some(pa), Some(pb)) => {
                    let (a, b) = maximal_coupling(&pa, &pb, &mut rng);
                    if a == b {
                        disagree = false;
                        break;
                    }
                    pair = (a as Spin, b as Spin);
                }
                _ => {
                    // One conditioning forbids every spin: unreachable
                    // configuration, no influence to track.
                    disagree = false;
                    break;
                }
            }
        }
        if disagree {
            hits += 1;
        }
    }
    Ok(UpCouplingEstimate {
        probability: hits as f64 / replicas as f64,
        hits,
        replicas,
        path_length: path.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{gamma_ising, k_beta, kappa_ising, magnetization_ratios, tv_distance};
    use crate::exact::upward_messages;

    #[test]
    fn replay_determinism() {
        let model = SpinModel::hard_core(2.0).unwrap();
        let tree = TreeTopology::build(2, 3).unwrap();
        let bc = BoundaryCondition::even_occupied(&tree);
        let dynamics = Dynamics::new(&model, &tree, &bc);
        let start = extremal_configs(&model, &tree, &bc).unwrap().0;
        let mut c1 = ChainState::new(start.clone());
        let mut c2 = ChainState::new(start);
        let mut r1 = stream_rng(9, 4);
        let mut r2 = stream_rng(9, 4);
        c1.advance_to(&dynamics, 50.0, &mut r1);
        c2.advance_to(&dynamics, 50.0, &mut r2);
        assert_eq!(c1.config, c2.config);
        assert_eq!(c1.steps, c2.steps);
        assert!(c1.config.is_valid(&model, &tree));
    }

    #[test]
    fn beta_zero_update_is_fair_coin() {
        let model = SpinModel::ising(0.0, 0.0).unwrap();
        let tree = TreeTopology::build(2, 2).unwrap();
        let bc = BoundaryCondition::Free;
        let dynamics = Dynamics::new(&model, &tree, &bc);
        let mut spins = vec![0 as Spin; tree.total_vertices()];
        let (_, up) = dynamics.apply(&mut spins, 0, 0.499);
        assert_eq!(up, 1); // p_plus = 1/2 regardless of neighbors
        let (_, up) = dynamics.apply(&mut spins, 0, 0.501);
        assert_eq!(up, 0);
    }

    #[test]
    fn chain_matches_exact_marginals() {
        // Long-run root distribution within binomial noise of the DP
        // marginal, b=2, m=2, beta=1.
        let model = SpinModel::ising(1.0, 0.0).unwrap();
        let tree = TreeTopology::build(2, 2).unwrap();
        let bc = BoundaryCondition::all_constant(&tree, 1);
        let ms = upward_messages(&model, &tree, &bc).unwrap();
        let exact = ms.marginal(0).unwrap()[1];
        let dynamics = Dynamics::new(&model, &tree, &bc);
        let mut hits = 0u64;
        let reps = 4000usize;
        for r in 0..reps {
            let mut rng = stream_rng(33, r as u64);
            let mut start = Configuration::constant(&tree, 0);
            start.apply_boundary(&tree, &bc);
            let mut chain = ChainState::new(start);
            chain.advance_to(&dynamics, 30.0, &mut rng);
            hits += (chain.config.spins[0] == 1) as u64;
        }
        let freq = hits as f64 / reps as f64;
        let sigma = libm::sqrt(exact * (1.0 - exact) / reps as f64);
        assert!(
            (freq - exact).abs() < 3.5 * sigma,
            "freq {freq} vs exact {exact}"
        );
    }

    #[test]
    fn update_rate_calibration() {
        // Empirical per-site update rate within 2% of 1 in continuous time.
        let model = SpinModel::ising(0.5, 0.0).unwrap();
        let tree = TreeTopology::build(2, 3).unwrap();
        let bc = BoundaryCondition::Free;
        let dynamics = Dynamics::new(&model, &tree, &bc);
        let mut rng = stream_rng(7, 0);
        let mut chain = ChainState::new(Configuration::constant(&tree, 0));
        chain.advance_to(&dynamics, 20_000.0, &mut rng);
        let rate = chain.steps as f64 / (chain.time * tree.vertex_count() as f64);
        assert!((rate - 1.0).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn grand_coupling_monotone_and_coalesces() {
        let tree = TreeTopology::build(2, 3).unwrap();
        let ising = SpinModel::ising(0.8, 0.0).unwrap();
        let bcp = BoundaryCondition::all_constant(&tree, 1);
        let dynamics = Dynamics::new(&ising, &tree, &bcp);
        let run = grand_coupling_run(&dynamics, 5, 0, 1e5).unwrap();
        assert!(run.coalesced);
        assert!(run.time > 0.0);

        let hc = SpinModel::hard_core(3.0).unwrap();
        let even = BoundaryCondition::even_occupied(&tree);
        let dynamics = Dynamics::new(&hc, &tree, &even);
        let run = grand_coupling_run(&dynamics, 5, 1, 1e5).unwrap();
        assert!(run.coalesced);

        let colorings = SpinModel::colorings(3).unwrap();
        let free = BoundaryCondition::Free;
        assert!(matches!(
            extremal_configs(&colorings, &tree, &free),
            Err(SimError::NonMonotone)
        ));
    }

    #[test]
    fn order_preserved_step_by_step() {
        // Explicit order check at every shared update, both models.
        let tree = TreeTopology::build(2, 3).unwrap();
        let cases = [
            (
                SpinModel::ising(1.2, -0.1).unwrap(),
                BoundaryCondition::all_constant(&tree, 1),
            ),
            (
                SpinModel::hard_core(4.0).unwrap(),
                BoundaryCondition::odd_occupied(&tree),
            ),
        ];
        for (model, bc) in &cases {
            let dynamics = Dynamics::new(model, &tree, bc);
            let (top, bottom) = extremal_configs(model, &tree, bc).unwrap();
            let mut top = top.spins;
            let mut bottom = bottom.spins;
            assert!(ordered(model, &tree, &top, &bottom));
            let mut rng = stream_rng(41, 0);
            for _ in 0..20_000 {
                let site = rng.random_range(0..tree.vertex_count());
                let u: f64 = rng.random();
                dynamics.apply(&mut top, site, u);
                dynamics.apply(&mut bottom, site, u);
                assert!(ordered(model, &tree, &top, &bottom));
            }
        }
    }

    #[test]
    fn coalescence_near_coupon_collector_at_beta_zero() {
        // At beta=0 the shared uniform equalizes a site on its first
        // update, so coalescence is a coupon-collector time: the max of n
        // unit-rate exponentials, mean H_n.
        let model = SpinModel::ising(0.0, 0.0).unwrap();
        let tree = TreeTopology::build(2, 3).unwrap();
        let bc = BoundaryCondition::Free;
        let dynamics = Dynamics::new(&model, &tree, &bc);
        let runs = coalescence_times(&dynamics, 11, 400, 1e4).unwrap();
        let mean: f64 = runs.iter().map(|r| r.time).sum::<f64>() / runs.len() as f64;
        let harmonic: f64 = (1..=tree.vertex_count()).map(|k| 1.0 / k as f64).sum();
        assert!(
            (mean - harmonic).abs() < 0.2 * harmonic,
            "mean {mean} vs H_n {harmonic}"
        );
    }

    #[test]
    fn tv_estimate_beta_zero_is_fast() {
        let model = SpinModel::ising(0.0, 0.0).unwrap();
        let tree = TreeTopology::build(2, 2).unwrap();
        let bc = BoundaryCondition::Free;
        let ms = upward_messages(&model, &tree, &bc).unwrap();
        let checkpoints: Vec<f64> = (1..=10).map(|k| k as f64 * 0.5).collect();
        let est = tv_mixing_estimate(&ms, 0.05, 4000, &checkpoints, 3).unwrap();
        // The root is exactly uniform once it has resampled, around t ~ 1.
        let t = est.time.expect("must mix");
        assert!(t <= 2.5, "estimated time {t}");
        assert!(matches!(
            tv_mixing_estimate(&ms, 0.001, 100, &checkpoints, 3),
            Err(SimError::InsufficientReplicas(_))
        ));
    }

    #[test]
    fn tv_estimate_bounded_by_coalescence_on_monotone_instance() {
        // The grand coupling bounds the distance from the worst start:
        // TV(t) <= P(tau > t), so at the empirical (1-eps)-quantile of the
        // coalescence time the measured TV must be below eps.
        let model = SpinModel::ising(0.9, 0.0).unwrap();
        let tree = TreeTopology::build(2, 2).unwrap();
        let bc = BoundaryCondition::all_constant(&tree, 1);
        let ms = upward_messages(&model, &tree, &bc).unwrap();
        let dynamics = Dynamics::new(&model, &tree, &bc);
        let runs = coalescence_times(&dynamics, 21, 1000, 1e4).unwrap();
        let mut times: Vec<f64> = runs.iter().map(|r| r.time).collect();
        times.sort_by(|a, b| a.total_cmp(b));
        let eps = 0.2;
        let t_star = times[(0.8 * times.len() as f64) as usize];
        let est = tv_mixing_estimate(&ms, eps, 3000, &[t_star], 4).unwrap();
        let point = est.series[0];
        assert!(
            point.tv <= eps + 3.0 * point.ci95,
            "TV({t_star}) = {} above coupling bound {eps}",
            point.tv
        );
    }

    #[test]
    fn autocorr_rate_single_site_is_one() {
        let model = SpinModel::ising(0.7, 0.2).unwrap();
        let tree = TreeTopology::build(2, 0).unwrap();
        let bc = BoundaryCondition::all_constant(&tree, 1);
        let ms = upward_messages(&model, &tree, &bc).unwrap();
        let fit = autocorr_gap_estimate(&ms, 60_000, 0.25, 16, 12).unwrap();
        assert!(
            (fit.rate - 1.0).abs() < 0.05,
            "rate {} +- {}",
            fit.rate,
            fit.stderr
        );
    }

    #[test]
    fn autocorr_insufficient_signal_reported() {
        let model = SpinModel::ising(0.7, 0.0).unwrap();
        let tree = TreeTopology::build(2, 1).unwrap();
        let bc = BoundaryCondition::Free;
        let ms = upward_messages(&model, &tree, &bc).unwrap();
        // Tiny replica budget: the noise floor swallows the signal before
        // three e-foldings.
        assert!(matches!(
            autocorr_gap_estimate(&ms, 60, 0.3, 12, 1),
            Err(SimError::InsufficientSignal(_))
        ));
    }

    #[test]
    fn coupling_down_zero_distance_at_beta_zero() {
        let model = SpinModel::ising(0.0, 0.0).unwrap();
        let tree = TreeTopology::build(2, 3).unwrap();
        let bc = BoundaryCondition::Free;
        let ms = upward_messages(&model, &tree, &bc).unwrap();
        let stats = coupling_down(&ms, 0, 2, (1, 0), 500, 17).unwrap();
        assert!(stats.distances.iter().all(|&d| d == 0));
    }

    #[test]
    fn coupling_down_mean_bounded_by_kappa_b_power() {
        let beta = 1.2;
        let model = SpinModel::ising(beta, 0.0).unwrap();
        let tree = TreeTopology::build(2, 4).unwrap();
        let bc = BoundaryCondition::all_constant(&tree, 1);
        let ms = upward_messages(&model, &tree, &bc).unwrap();
        let kappa = kappa_ising(&ms).unwrap().kappa;
        let l = 3usize;
        let stats = coupling_down(&ms, 0, l, (1, 0), 4000, 19).unwrap();
        let bound = libm::pow(2.0 * kappa, l as f64);
        assert!(
            stats.mean() <= bound + 3.0 * stats.stderr(),
            "mean {} vs (kappa b)^l {}",
            stats.mean(),
            bound
        );
    }

    #[test]
    fn down_coupling_matches_k_of_r_single_level() {
        // One level down, the disagreement probability at a child equals
        // K(R) exactly; the mean distance is the sum over children.
        let beta = 0.9;
        let model = SpinModel::ising(beta, 0.0).unwrap();
        let tree = TreeTopology::build(2, 2).unwrap();
        let bc = BoundaryCondition::all_constant(&tree, 1);
        let ms = upward_messages(&model, &tree, &bc).unwrap();
        let stats = coupling_down(&ms, 0, 1, (1, 0), 40_000, 31).unwrap();
        let ratios = magnetization_ratios(&ms).unwrap();
        let expect = k_beta(ratios[1], beta).unwrap() + k_beta(ratios[2], beta).unwrap();
        assert!(
            (stats.mean() - expect).abs() < 4.0 * stats.stderr(),
            "mean {} vs exact {expect}",
            stats.mean()
        );
    }

    #[test]
    fn disagreement_up_matches_exact_tv_at_length_one() {
        let beta = 1.0;
        let model = SpinModel::ising(beta, 0.0).unwrap();
        let tree = TreeTopology::build(2, 0).unwrap();
        let bc = BoundaryCondition::all_constant(&tree, 1);
        let ms = upward_messages(&model, &tree, &bc).unwrap();
        let w = tree.vertex_count(); // first boundary vertex
        let est = disagreement_up(&ms, 0, w, 0, None, 40_000, 23).unwrap();
        assert_eq!(est.path_length, 1);
        // Exact conditionals of the root given children (+,+) vs (-,+).
        let p_pp = model.site_conditional(&[1, 1]).unwrap();
        let p_mp = model.site_conditional(&[0, 1]).unwrap();
        let exact = tv_distance(&p_pp, &p_mp);
        assert!(
            (est.probability - exact).abs() < 3.0 * est.ci95().max(1e-3),
            "estimate {} vs exact {exact}",
            est.probability
        );
    }

    #[test]
    fn disagreement_up_bounded_by_gamma_power() {
        let beta = 1.0;
        let model = SpinModel::ising(beta, 0.0).unwrap();
        let tree = TreeTopology::build(2, 4).unwrap();
        let bc = BoundaryCondition::all_constant(&tree, 1);
        let ms = upward_messages(&model, &tree, &bc).unwrap();
        let w = tree.vertex_count(); // leftmost boundary vertex
        let est = disagreement_up(&ms, 0, w, 0, None, 20_000, 29).unwrap();
        assert_eq!(est.path_length, 5);
        let bound = libm::pow(gamma_ising(beta), 5.0);
        assert!(
            est.probability <= bound + est.ci95(),
            "estimate {} vs gamma^5 {bound}",
            est.probability
        );
        // beta = 0 never propagates.
        let model0 = SpinModel::ising(0.0, 0.0).unwrap();
        let ms0 = upward_messages(&model0, &tree, &bc).unwrap();
        let est0 = disagreement_up(&ms0, 0, w, 0, None, 2000, 29).unwrap();
        assert_eq!(est0.hits, 0);
    }
}
