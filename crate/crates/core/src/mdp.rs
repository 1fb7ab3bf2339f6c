//! Tabular low-rank MDPs, policies, exact planners, occupancy measures and samplers.
//!
//! State-action pairs are flattened row-major: row `s * num_actions + a`.
//! Kernels are `(|S|·|A|) × |S|` matrices whose rows are next-state distributions.

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::rng::{self, streams, Rng};

/// Tolerance on kernel row sums.
pub const KERNEL_SUM_TOL: f64 = 1e-9;
/// Tolerance on negative kernel entries.
pub const KERNEL_NEG_TOL: f64 = 1e-12;
/// Tolerance on policy row sums.
pub const POLICY_SUM_TOL: f64 = 1e-12;
pub const DEFAULT_VI_TOL: f64 = 1e-10;
pub const DEFAULT_VI_MAX_ITER: usize = 100_000;
/// Number of random sign patterns used to check the normalization of `mu_star`.
const SIGN_PATTERNS: usize = 64;

#[inline]
pub fn sa_index(s: usize, a: usize, num_actions: usize) -> usize {
    s * num_actions + a
}

/// Ground-truth MDP whose kernel factors as `P(s'|s,a) = phi_star(s,a)^T mu_star(s')`
/// and whose reward is `r(s,a) = phi_star(s,a)^T theta_r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankMdp {
    num_states: usize,
    num_actions: usize,
    rank: usize,
    phi_star: Matrix,
    mu_star: Matrix,
    theta_r: Vector,
    rho: Vector,
    gamma: f64,
    kernel: Matrix,
}

impl LowRankMdp {
    /// Builds an instance and checks every structural invariant.
    pub fn new(
        phi_star: Matrix,
        mu_star: Matrix,
        theta_r: Vector,
        rho: Vector,
        gamma: f64,
        num_actions: usize,
    ) -> Result<Self> {
        let num_states = mu_star.nrows();
        let rank = phi_star.ncols();
        if num_states == 0 || num_actions == 0 || rank == 0 {
            return Err(Error::validation("num_states, num_actions and rank must be positive"));
        }
        if phi_star.nrows() != num_states * num_actions {
            return Err(Error::DimensionMismatch {
                expected: num_states * num_actions,
                actual: phi_star.nrows(),
            });
        }
        if mu_star.ncols() != rank {
            return Err(Error::DimensionMismatch { expected: rank, actual: mu_star.ncols() });
        }
        if theta_r.len() != rank {
            return Err(Error::DimensionMismatch { expected: rank, actual: theta_r.len() });
        }
        if rho.len() != num_states {
            return Err(Error::DimensionMismatch { expected: num_states, actual: rho.len() });
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::validation(format!("gamma must lie in (0,1), got {gamma}")));
        }
        let finite = phi_star.iter().chain(mu_star.iter()).chain(theta_r.iter()).chain(rho.iter());
        if finite.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite entry in MDP parameters"));
        }
        check_distribution(rho.as_slice(), 1e-12, "rho")?;

        let kernel = &phi_star * mu_star.transpose();
        validate_kernel_rows(&kernel, num_actions).map_err(|e| match e {
            Error::InvalidKernel(m) => Error::ValidationFailure(m),
            other => other,
        })?;

        let d = rank as f64;
        for i in 0..phi_star.nrows() {
            let norm = phi_star.row(i).norm();
            if norm > 1.0 + 1e-9 {
                let (s, a) = (i / num_actions, i % num_actions);
                return Err(Error::validation(format!(
                    "||phi_star(s={s}, a={a})|| = {norm} exceeds 1"
                )));
            }
        }
        if theta_r.norm() > d.sqrt() + 1e-9 {
            return Err(Error::validation(format!("||theta_r|| = {} exceeds sqrt(d)", theta_r.norm())));
        }
        let mass = mu_star_norm_max(&mu_star, rng::derive_seed(0, streams::SIGN_PATTERNS));
        if mass > d.sqrt() + 1e-9 {
            return Err(Error::validation(format!(
                "||sum_s' mu_star(s') g(s')|| = {mass} exceeds sqrt(d)"
            )));
        }
        let reward = &phi_star * &theta_r;
        if let Some(i) = reward.iter().position(|&r| !(-1e-12..=1.0 + 1e-12).contains(&r)) {
            return Err(Error::validation(format!(
                "reward {} at (s={}, a={}) outside [0,1]",
                reward[i],
                i / num_actions,
                i % num_actions
            )));
        }

        Ok(Self { num_states, num_actions, rank, phi_star, mu_star, theta_r, rho, gamma, kernel })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn num_rows(&self) -> usize {
        self.num_states * self.num_actions
    }
    pub fn rank(&self) -> usize {
        self.rank
    }
    pub fn phi_star(&self) -> &Matrix {
        &self.phi_star
    }
    pub fn mu_star(&self) -> &Matrix {
        &self.mu_star
    }
    pub fn theta_r(&self) -> &Vector {
        &self.theta_r
    }
    pub fn rho(&self) -> &Vector {
        &self.rho
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// The `(|S|·|A|) × |S|` transition matrix.
    pub fn kernel(&self) -> &Matrix {
        &self.kernel
    }

    /// Reward as an `|S| × |A|` matrix.
    pub fn reward(&self) -> Matrix {
        let flat = &self.phi_star * &self.theta_r;
        Matrix::from_fn(self.num_states, self.num_actions, |s, a| {
            flat[sa_index(s, a, self.num_actions)]
        })
    }

    /// Same instance with a different discount factor.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.phi_star.clone(),
            self.mu_star.clone(),
            self.theta_r.clone(),
            self.rho.clone(),
            gamma,
            self.num_actions,
        )
    }

    /// Same instance with a different reward parameter.
    pub fn with_theta(&self, theta_r: Vector) -> Result<Self> {
        Self::new(
            self.phi_star.clone(),
            self.mu_star.clone(),
            theta_r,
            self.rho.clone(),
            self.gamma,
            self.num_actions,
        )
    }

    /// Same instance with a different initial distribution.
    pub fn with_rho(&self, rho: Vector) -> Result<Self> {
        Self::new(
            self.phi_star.clone(),
            self.mu_star.clone(),
            self.theta_r.clone(),
            rho,
            self.gamma,
            self.num_actions,
        )
    }

    /// Optimal value functions and the greedy optimal policy.
    pub fn solve(&self) -> Result<(ValueFunctions, Policy)> {
        value_iteration(&self.kernel, &self.reward(), self.gamma, DEFAULT_VI_TOL, DEFAULT_VI_MAX_ITER)
    }

    /// Exact value functions of `policy`.
    pub fn evaluate(&self, policy: &Policy) -> Result<ValueFunctions> {
        policy_evaluation(&self.kernel, &self.reward(), policy, self.gamma)
    }

    /// `rho^T V^pi`.
    pub fn policy_value(&self, policy: &Policy) -> Result<f64> {
        Ok(self.evaluate(policy)?.value_at(&self.rho))
    }
}

/// Largest `||mu^T g||_2` over `g = 1` and a fixed set of random sign patterns.
pub fn mu_star_norm_max(mu_star: &Matrix, seed: u64) -> f64 {
    let n = mu_star.nrows();
    let mut best = (mu_star.transpose() * Vector::from_element(n, 1.0)).norm();
    let mut rng = rng::rng_from_seed(seed);
    let mut g = Vector::zeros(n);
    for _ in 0..SIGN_PATTERNS {
        for x in g.iter_mut() {
            *x = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        best = best.max((mu_star.transpose() * &g).norm());
    }
    best
}

fn check_distribution(p: &[f64], tol: f64, what: &str) -> Result<()> {
    if let Some(x) = p.iter().find(|&&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::validation(format!("{what} has invalid entry {x}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::validation(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Checks every row of `kernel` is a probability vector.
pub fn validate_kernel_rows(kernel: &Matrix, num_actions: usize) -> Result<()> {
    for (i, row) in kernel.row_iter().enumerate() {
        let (s, a) = (i / num_actions.max(1), i % num_actions.max(1));
        let sum: f64 = row.iter().sum();
        let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
        if !sum.is_finite() || (sum - 1.0).abs() > KERNEL_SUM_TOL || min < -KERNEL_NEG_TOL {
            return Err(Error::InvalidKernel(format!(
                "row (s={s}, a={a}) sums to {sum} with minimum entry {min}"
            )));
        }
    }
    Ok(())
}

/// `phi_star mu_star^T` for a validated MDP.
pub fn kernel_matrix(mdp: &LowRankMdp) -> Matrix {
    mdp.kernel.clone()
}

// ── policies and values ──

/// Stationary stochastic policy, `|S| × |A|` with distribution rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    probs: Matrix,
}

impl Policy {
    pub fn new(probs: Matrix) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(Error::validation("policy must have at least one state and action"));
        }
        for (s, row) in probs.row_iter().enumerate() {
            let v: Vec<f64> = row.iter().cloned().collect();
            check_distribution(&v, POLICY_SUM_TOL, &format!("policy row {s}"))?;
        }
        Ok(Self { probs })
    }

    /// Normalizes each row of nonnegative weights.
    pub(crate) fn from_weights(mut w: Matrix) -> Self {
        for mut row in w.row_iter_mut() {
            let sum: f64 = row.iter().sum();
            if sum > 0.0 && sum.is_finite() {
                row /= sum;
            } else {
                row.fill(1.0 / row.len() as f64);
            }
        }
        Self { probs: w }
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self { probs: Matrix::from_element(num_states, num_actions, 1.0 / num_actions as f64) }
    }

    pub fn deterministic(actions: &[usize], num_actions: usize) -> Result<Self> {
        let mut probs = Matrix::zeros(actions.len(), num_actions);
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(Error::validation(format!("action {a} out of range at state {s}")));
            }
            probs[(s, a)] = 1.0;
        }
        Self::new(probs)
    }

    /// Greedy policy; near-ties (within `1e-9 (1 + |max|)`) go to the lowest action index.
    pub fn greedy(q: &Matrix) -> Self {
        let actions: Vec<usize> = (0..q.nrows()).map(|s| greedy_action(q, s)).collect();
        let mut probs = Matrix::zeros(q.nrows(), q.ncols());
        for (s, &a) in actions.iter().enumerate() {
            probs[(s, a)] = 1.0;
        }
        Self { probs }
    }

    /// Mixture `(1 - eps) * self + eps * uniform`.
    pub fn epsilon_mix(&self, eps: f64) -> Self {
        let a = self.num_actions() as f64;
        Self { probs: self.probs.map(|p| (1.0 - eps) * p + eps / a) }
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }
    pub fn num_states(&self) -> usize {
        self.probs.nrows()
    }
    pub fn num_actions(&self) -> usize {
        self.probs.ncols()
    }
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[(s, a)]
    }

    /// Index of the most likely action at each state (lowest index on ties).
    pub fn modes(&self) -> Vec<usize> {
        (0..self.num_states()).map(|s| greedy_action(&self.probs, s)).collect()
    }

    pub(crate) fn check_dims(&self, num_states: usize, num_actions: usize) -> Result<()> {
        if self.num_states() != num_states {
            return Err(Error::DimensionMismatch { expected: num_states, actual: self.num_states() });
        }
        if self.num_actions() != num_actions {
            return Err(Error::DimensionMismatch { expected: num_actions, actual: self.num_actions() });
        }
        Ok(())
    }
}

fn greedy_action(q: &Matrix, s: usize) -> usize {
    let row = q.row(s);
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-9 * (1.0 + max.abs());
    row.iter().position(|&x| x >= max - tol).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueFunctions {
    pub v: Vector,
    pub q: Matrix,
    pub gamma: f64,
}

impl ValueFunctions {
    /// Expected value under an initial distribution.
    pub fn value_at(&self, rho: &Vector) -> f64 {
        rho.dot(&self.v)
    }
}

fn check_planning_inputs(kernel: &Matrix, reward: &Matrix, gamma: f64) -> Result<()> {
    let (ns, na) = (reward.nrows(), reward.ncols());
    if kernel.nrows() != ns * na {
        return Err(Error::DimensionMismatch { expected: ns * na, actual: kernel.nrows() });
    }
    if kernel.ncols() != ns {
        return Err(Error::DimensionMismatch { expected: ns, actual: kernel.ncols() });
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::validation(format!("gamma must lie in (0,1), got {gamma}")));
    }
    if reward.iter().any(|r| !r.is_finite()) {
        return Err(Error::validation("reward has non-finite entries"));
    }
    validate_kernel_rows(kernel, na)
}

fn flatten_sa(m: &Matrix) -> Vector {
    let na = m.ncols();
    Vector::from_fn(m.nrows() * na, |i, _| m[(i / na, i % na)])
}

fn unflatten_sa(v: &Vector, num_actions: usize) -> Matrix {
    Matrix::from_fn(v.len() / num_actions, num_actions, |s, a| v[sa_index(s, a, num_actions)])
}

/// Optimal Q by value iteration from `Q = 0`.
pub fn value_iteration(
    kernel: &Matrix,
    reward: &Matrix,
    gamma: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(ValueFunctions, Policy)> {
    let q0 = Matrix::zeros(reward.nrows(), reward.ncols());
    value_iteration_from(kernel, reward, gamma, tol, max_iter, &q0)
}

/// Value iteration warm-started at `q0`.
///
/// Stops once successive iterates differ by at most `tol` in sup-norm, which
/// bounds the Bellman residual by `gamma * tol`.
pub fn value_iteration_from(
    kernel: &Matrix,
    reward: &Matrix,
    gamma: f64,
    tol: f64,
    max_iter: usize,
    q0: &Matrix,
) -> Result<(ValueFunctions, Policy)> {
    check_planning_inputs(kernel, reward, gamma)?;
    if q0.shape() != reward.shape() {
        return Err(Error::DimensionMismatch { expected: reward.len(), actual: q0.len() });
    }
    let na = reward.ncols();
    let ns = reward.nrows();
    let r = flatten_sa(reward);
    let mut q = flatten_sa(q0);
    let mut v = Vector::zeros(ns);
    let mut q_next = Vector::zeros(q.len());
    let bound = tol * (1.0 + gamma) / (1.0 - gamma);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        for s in 0..ns {
            v[s] = (0..na).map(|a| q[sa_index(s, a, na)]).fold(f64::NEG_INFINITY, f64::max);
        }
        q_next.copy_from(&r);
        q_next.gemv(gamma, kernel, &v, 1.0);
        residual = (&q_next - &q).amax();
        std::mem::swap(&mut q, &mut q_next);
        if residual <= tol {
            break;
        }
    }
    if !(residual <= bound) {
        return Err(Error::NonConvergence { residual, bound, iterations });
    }
    let q = unflatten_sa(&q, na);
    let policy = Policy::greedy(&q);
    let v = Vector::from_fn(ns, |s, _| (0..na).map(|a| policy.prob(s, a) * q[(s, a)]).sum());
    Ok((ValueFunctions { v, q, gamma }, policy))
}

/// State-to-state matrix `P_pi(s, s') = sum_a pi(a|s) P(s'|s,a)`.
pub fn policy_kernel(kernel: &Matrix, policy: &Policy) -> Matrix {
    let (ns, na) = (policy.num_states(), policy.num_actions());
    let mut p = Matrix::zeros(ns, kernel.ncols());
    for s in 0..ns {
        for a in 0..na {
            let w = policy.prob(s, a);
            if w != 0.0 {
                let i = sa_index(s, a, na);
                for j in 0..kernel.ncols() {
                    p[(s, j)] += w * kernel[(i, j)];
                }
            }
        }
    }
    p
}

/// Exact value functions of `policy` by solving `(I - gamma P_pi) v = r_pi`.
pub fn policy_evaluation(
    kernel: &Matrix,
    reward: &Matrix,
    policy: &Policy,
    gamma: f64,
) -> Result<ValueFunctions> {
    check_planning_inputs(kernel, reward, gamma)?;
    policy.check_dims(reward.nrows(), reward.ncols())?;
    policy_evaluation_unchecked(kernel, reward, policy, gamma)
}

/// Policy evaluation for kernels that need not be valid distributions
/// (used for unprojected models inside diagnostics).
pub(crate) fn policy_evaluation_unchecked(
    kernel: &Matrix,
    reward: &Matrix,
    policy: &Policy,
    gamma: f64,
) -> Result<ValueFunctions> {
    let (ns, na) = (reward.nrows(), reward.ncols());
    let p_pi = policy_kernel(kernel, policy);
    let r_pi = Vector::from_fn(ns, |s, _| (0..na).map(|a| policy.prob(s, a) * reward[(s, a)]).sum());
    let system = Matrix::identity(ns, ns) - &p_pi * gamma;
    let mut v = linalg::solve(&system, &r_pi)?;
    // One step of iterative refinement keeps the residual near machine precision.
    let resid = &r_pi - &system * &v;
    if let Ok(dv) = linalg::solve(&system, &resid) {
        v += dv;
    }
    let q_flat = flatten_sa(reward) + kernel * &v * gamma;
    Ok(ValueFunctions { v, q: unflatten_sa(&q_flat, na), gamma })
}

// ── occupancy ──

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyMeasure {
    pub d_s: Vector,
    pub d_sa: Vector,
}

/// Discounted occupancy of `policy` in `mdp`.
pub fn occupancy(mdp: &LowRankMdp, policy: &Policy) -> Result<OccupancyMeasure> {
    policy.check_dims(mdp.num_states, mdp.num_actions)?;
    occupancy_in_kernel(&mdp.kernel, &mdp.rho, policy, mdp.gamma)
}

/// Occupancy under an arbitrary valid kernel: solves `d = (1-gamma) rho + gamma P_pi^T d`.
pub fn occupancy_in_kernel(
    kernel: &Matrix,
    rho: &Vector,
    policy: &Policy,
    gamma: f64,
) -> Result<OccupancyMeasure> {
    let (ns, na) = (policy.num_states(), policy.num_actions());
    if kernel.nrows() != ns * na || kernel.ncols() != ns || rho.len() != ns {
        return Err(Error::DimensionMismatch { expected: ns * na, actual: kernel.nrows() });
    }
    let p_pi = policy_kernel(kernel, policy);
    let system = Matrix::identity(ns, ns) - p_pi.transpose() * gamma;
    let d_s = linalg::solve(&system, &(rho * (1.0 - gamma)))?;
    let d_sa = Vector::from_fn(ns * na, |i, _| d_s[i / na] * policy.prob(i / na, i % na));
    Ok(OccupancyMeasure { d_s, d_sa })
}

// ── sampling ──

/// Draws an index from a (possibly unnormalized) nonnegative weight slice.
pub(crate) fn sample_index<I>(weights: I, rng: &mut Rng) -> usize
where
    I: IntoIterator<Item = f64> + Clone,
{
    let total: f64 = weights.clone().into_iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, w) in weights.into_iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
            acc += w;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

fn sample_row(m: &Matrix, row: usize, rng: &mut Rng) -> usize {
    sample_index(m.row(row).iter().cloned(), rng)
}

/// One tuple `(s, a, s', a', s~)` as collected by the online explorer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeTransition {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
    pub a_next: usize,
    pub s_tilde: usize,
}

/// Samples a state from the discounted occupancy of `policy` by a
/// geometric-termination rollout, then appends two uniform-action transitions.
pub fn sample_episode_transition(mdp: &LowRankMdp, policy: &Policy, rng_seed: u64) -> EpisodeTransition {
    let mut rng = rng::rng_from_seed(rng_seed);
    sample_episode_transition_with(mdp, policy, &mut rng)
}

/// Generator-handle variant of [`sample_episode_transition`].
pub fn sample_episode_transition_with(mdp: &LowRankMdp, policy: &Policy, rng: &mut Rng) -> EpisodeTransition {
    let s = sample_occupancy_state(mdp, policy, rng);
    let na = mdp.num_actions;
    let a = rng.random_range(0..na);
    let s_next = sample_row(&mdp.kernel, sa_index(s, a, na), rng);
    let a_next = rng.random_range(0..na);
    let s_tilde = sample_row(&mdp.kernel, sa_index(s_next, a_next, na), rng);
    EpisodeTransition { s, a, s_next, a_next, s_tilde }
}

/// Rollout cap `ceil(50 / (1 - gamma))`.
pub fn rollout_cap(gamma: f64) -> usize {
    (50.0 / (1.0 - gamma)).ceil() as usize
}

/// State drawn from `d^pi` by rolling out with per-step termination `1 - gamma`.
/// Rollouts reaching the cap are discarded and restarted.
pub fn sample_occupancy_state(mdp: &LowRankMdp, policy: &Policy, rng: &mut Rng) -> usize {
    let cap = rollout_cap(mdp.gamma);
    let na = mdp.num_actions;
    loop {
        let mut s = sample_index(mdp.rho.iter().cloned(), rng);
        for _ in 0..cap {
            if rng.random::<f64>() < 1.0 - mdp.gamma {
                return s;
            }
            let a = sample_row(&policy.probs, s, rng);
            s = sample_row(&mdp.kernel, sa_index(s, a, na), rng);
        }
    }
}

/// Draws `s' ~ P(.|s,a)`.
pub fn sample_next_state(mdp: &LowRankMdp, s: usize, a: usize, rng: &mut Rng) -> usize {
    sample_row(&mdp.kernel, sa_index(s, a, mdp.num_actions), rng)
}

/// Draws `a ~ pi(.|s)`.
pub fn sample_action(policy: &Policy, s: usize, rng: &mut Rng) -> usize {
    sample_row(&policy.probs, s, rng)
}

// ── datasets ──

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
}

/// Primary triples `(s, a, s')` and, for online data, the aligned secondary
/// triples `(s', a', s~)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransitionDataset {
    pub primary: Vec<Transition>,
    pub secondary: Vec<Transition>,
}

impl TransitionDataset {
    pub fn new(primary: Vec<Transition>, secondary: Vec<Transition>) -> Result<Self> {
        let d = Self { primary, secondary };
        d.check_alignment()?;
        Ok(d)
    }

    pub fn from_triples(primary: Vec<Transition>) -> Self {
        Self { primary, secondary: Vec::new() }
    }

    fn check_alignment(&self) -> Result<()> {
        if !self.secondary.is_empty() && self.secondary.len() != self.primary.len() {
            return Err(Error::validation(format!(
                "secondary has {} rows but primary has {}",
                self.secondary.len(),
                self.primary.len()
            )));
        }
        for (i, (p, q)) in self.primary.iter().zip(&self.secondary).enumerate() {
            if p.s_next != q.s {
                return Err(Error::validation(format!(
                    "row {i}: secondary starts at {} but primary ends at {}",
                    q.s, p.s_next
                )));
            }
        }
        Ok(())
    }

    /// Checks alignment and that every id is within range.
    pub fn validate(&self, num_states: usize, num_actions: usize) -> Result<()> {
        self.check_alignment()?;
        for (i, t) in self.primary.iter().chain(&self.secondary).enumerate() {
            if t.s >= num_states || t.s_next >= num_states || t.a >= num_actions {
                return Err(Error::validation(format!(
                    "transition {i} ({}, {}, {}) out of range for |S|={num_states}, |A|={num_actions}",
                    t.s, t.a, t.s_next
                )));
            }
        }
        Ok(())
    }

    pub fn push(&mut self, tr: EpisodeTransition) {
        self.primary.push(Transition { s: tr.s, a: tr.a, s_next: tr.s_next });
        self.secondary.push(Transition { s: tr.s_next, a: tr.a_next, s_next: tr.s_tilde });
    }

    pub fn len(&self) -> usize {
        self.primary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primary.is_empty()
    }

    /// Primary triples followed by secondary triples.
    pub fn all_triples(&self) -> impl Iterator<Item = &Transition> + '_ {
        self.primary.iter().chain(&self.secondary)
    }
}

/// Draws `n` i.i.d. triples with `(s,a)` from the row weighting and `s'` from the kernel.
pub fn sample_iid_triples(mdp: &LowRankMdp, weighting: &Vector, n: usize, rng: &mut Rng) -> Vec<Transition> {
    let na = mdp.num_actions;
    (0..n)
        .map(|_| {
            let i = sample_index(weighting.iter().cloned(), rng);
            let s_next = sample_row(&mdp.kernel, i, rng);
            Transition { s: i / na, a: i % na, s_next }
        })
        .collect()
}

/// Dataset of i.i.d. triples drawn from the occupancy of `policy`.
pub fn sample_occupancy_dataset(
    mdp: &LowRankMdp,
    policy: &Policy,
    num_samples: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    let occ = occupancy(mdp, policy)?;
    let weights = occ.d_sa.map(|x| x.max(0.0));
    let mut rng = rng::child_rng(seed, streams::DATASET);
    Ok(TransitionDataset::from_triples(sample_iid_triples(mdp, &weights, num_samples, &mut rng)))
}

/// `num_trajectories` rollouts of fixed `horizon` from `rho` under `policy`.
pub fn sample_trajectories(
    mdp: &LowRankMdp,
    policy: &Policy,
    num_trajectories: usize,
    horizon: usize,
    seed: u64,
) -> TransitionDataset {
    let mut rng = rng::child_rng(seed, streams::TRAJECTORIES);
    let mut out = Vec::with_capacity(num_trajectories * horizon);
    for _ in 0..num_trajectories {
        let mut s = sample_index(mdp.rho.iter().cloned(), &mut rng);
        for _ in 0..horizon {
            let a = sample_action(policy, s, &mut rng);
            let s_next = sample_next_state(mdp, s, a, &mut rng);
            out.push(Transition { s, a, s_next });
            s = s_next;
        }
    }
    TransitionDataset::from_triples(out)
}

// ── instance generators ──

const GENERATION_ATTEMPTS: usize = 100;
const PHI_CONCENTRATION: f64 = 0.5;
const MU_CONCENTRATION: f64 = 0.3;
const RHO_CONCENTRATION: f64 = 2.0;
/// Default discount of generated instances.
pub const DEFAULT_GAMMA: f64 = 0.9;

fn dirichlet(dim: usize, concentration: f64, rng: &mut Rng) -> Option<Vec<f64>> {
    let g = Gamma::new(concentration, 1.0).ok()?;
    let mut x: Vec<f64> = (0..dim).map(|_| g.sample(rng)).collect();
    let sum: f64 = x.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return None;
    }
    x.iter_mut().for_each(|v| *v /= sum);
    Some(x)
}

/// Random rank-`rank` MDP with simplex features and distribution-valued `mu_star` columns.
///
/// `phi_star` rows are Dirichlet draws on the `rank`-simplex and each column of
/// `mu_star` is a Dirichlet distribution over states, so every kernel row is a
/// convex combination of `rank` next-state distributions. With rows in the
/// simplex, `||phi|| <= 1`, and `theta_r` in `[0,1]^d` keeps rewards in `[0,1]`.
pub fn generate_random_mdp(
    num_states: usize,
    num_actions: usize,
    rank: usize,
    rng_seed: u64,
) -> Result<LowRankMdp> {
    if num_states == 0 || num_actions == 0 || rank == 0 {
        return Err(Error::validation("num_states, num_actions and rank must be positive"));
    }
    if rank > num_states.min(num_states * num_actions) {
        return Err(Error::validation(format!(
            "rank {rank} exceeds min(|S|·|A|, |S|) = {}",
            num_states.min(num_states * num_actions)
        )));
    }
    let rows = num_states * num_actions;
    let mut rng = rng::child_rng(rng_seed, streams::MDP_GENERATION);
    let mut reason = String::new();
    for _ in 0..GENERATION_ATTEMPTS {
        let mut phi = Matrix::zeros(rows, rank);
        let mut mu = Matrix::zeros(num_states, rank);
        let mut ok = true;
        for i in 0..rows {
            match dirichlet(rank, PHI_CONCENTRATION, &mut rng) {
                Some(x) => phi.row_mut(i).copy_from_slice(&x),
                None => ok = false,
            }
        }
        for k in 0..rank {
            match dirichlet(num_states, MU_CONCENTRATION, &mut rng) {
                Some(x) => mu.column_mut(k).copy_from_slice(&x),
                None => ok = false,
            }
        }
        let theta = Vector::from_fn(rank, |_, _| rng.random::<f64>());
        let rho = dirichlet(num_states, RHO_CONCENTRATION, &mut rng);
        let Some(rho) = rho.filter(|_| ok) else {
            reason = "degenerate Dirichlet draw".into();
            continue;
        };
        let kernel = &phi * mu.transpose();
        let sv = linalg::singular_values_desc(&kernel);
        if sv[rank - 1] < 1e-6 * sv[0] {
            reason = format!("kernel rank below {rank}");
            continue;
        }
        match LowRankMdp::new(phi, mu, theta, Vector::from_vec(rho), DEFAULT_GAMMA, num_actions) {
            Ok(m) => return Ok(m),
            Err(e) => reason = e.to_string(),
        }
    }
    Err(Error::GenerationFailure { attempts: GENERATION_ATTEMPTS, reason })
}

/// Square gridworld with `side * side` states and actions up/right/down/left.
///
/// The agent starts in the top-left corner; the bottom-right corner is an
/// absorbing goal. With probability `slip` the executed move is drawn
/// uniformly from the four directions. Moves into walls leave the state
/// unchanged. The factorization is tabular: `phi_star` is the kernel itself and
/// `mu_star = I`, so `rank = |S|`; the reward is `r(s,a) = P(goal | s, a)`.
pub fn gridworld(side: usize, slip: f64, gamma: f64) -> Result<LowRankMdp> {
    if side == 0 {
        return Err(Error::validation("gridworld side must be positive"));
    }
    if !(0.0..=1.0).contains(&slip) {
        return Err(Error::validation(format!("slip must lie in [0,1], got {slip}")));
    }
    let ns = side * side;
    let na = 4;
    let goal = ns - 1;
    let step = |s: usize, a: usize| -> usize {
        let (r, c) = (s / side, s % side);
        match a {
            0 if r > 0 => s - side,
            1 if c + 1 < side => s + 1,
            2 if r + 1 < side => s + side,
            3 if c > 0 => s - 1,
            _ => s,
        }
    };
    let mut kernel = Matrix::zeros(ns * na, ns);
    for s in 0..ns {
        for a in 0..na {
            let i = sa_index(s, a, na);
            if s == goal {
                kernel[(i, goal)] = 1.0;
                continue;
            }
            kernel[(i, step(s, a))] += 1.0 - slip;
            for b in 0..na {
                kernel[(i, step(s, b))] += slip / na as f64;
            }
        }
    }
    let mut theta = Vector::zeros(ns);
    theta[goal] = 1.0;
    let mut rho = Vector::zeros(ns);
    rho[0] = 1.0;
    LowRankMdp::new(kernel, Matrix::identity(ns, ns), theta, rho, gamma, na)
}

/// Clips negative entries and renormalizes each row; rows with mass
/// `<= 1e-12` become uniform.
pub fn simplex_project_kernel(raw: &Matrix) -> Matrix {
    let mut out = raw.map(|x| if x.is_finite() { x.max(0.0) } else { 0.0 });
    let n = out.ncols() as f64;
    for mut row in out.row_iter_mut() {
        let sum: f64 = row.iter().sum();
        if sum <= 1e-12 {
            row.fill(1.0 / n);
        } else {
            row /= sum;
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn one_state() -> LowRankMdp {
        LowRankMdp::new(
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, 1.0),
            Vector::from_element(1, 1.0),
            Vector::from_element(1, 1.0),
            0.9,
            1,
        )
        .unwrap()
    }

    /// s0 -> s1 -> s1, one action, canonical-basis features.
    fn chain(gamma: f64) -> LowRankMdp {
        LowRankMdp::new(
            Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0]),
            Matrix::identity(2, 2),
            Vector::from_vec(vec![0.0, 1.0]),
            Vector::from_vec(vec![1.0, 0.0]),
            gamma,
            1,
        )
        .unwrap()
    }

    fn random_policy(ns: usize, na: usize, seed: u64) -> Policy {
        let mut rng = rng::rng_from_seed(seed);
        Policy::from_weights(Matrix::from_fn(ns, na, |_, _| rng.random::<f64>()))
    }

    #[test]
    fn trivial_kernels() {
        assert_eq!(kernel_matrix(&one_state()), Matrix::from_element(1, 1, 1.0));
        let k = kernel_matrix(&chain(0.9));
        assert_eq!(k, Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0]));
    }

    #[test]
    fn kernel_matches_explicit_dot_products() {
        let m = generate_random_mdp(20, 4, 3, 42).unwrap();
        let k = kernel_matrix(&m);
        for i in 0..m.num_rows() {
            for j in 0..m.num_states() {
                let mut acc = 0.0;
                for l in 0..m.rank() {
                    acc += m.phi_star()[(i, l)] * m.mu_star()[(j, l)];
                }
                assert!((k[(i, j)] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_kernel_row_is_reported() {
        let err = LowRankMdp::new(
            Matrix::from_row_slice(2, 1, &[1.0, 0.5]),
            Matrix::from_row_slice(2, 1, &[0.5, 0.5]),
            Vector::from_element(1, 0.0),
            Vector::from_vec(vec![1.0, 0.0]),
            0.9,
            1,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::ValidationFailure(_)));
        assert!(msg.contains("s=1, a=0"), "{msg}");
    }

    #[test]
    fn value_iteration_trivial_values() {
        let k = Matrix::from_element(1, 1, 1.0);
        let (vf, _) = value_iteration(&k, &Matrix::from_element(1, 1, 1.0), 0.9, 1e-10, 100_000).unwrap();
        assert!((vf.v[0] - 10.0).abs() < 1e-8);

        let m = chain(0.9);
        let r = Matrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let (vf, _) = value_iteration(m.kernel(), &r, 0.9, 1e-10, 100_000).unwrap();
        assert!((vf.v[1] - 10.0).abs() < 1e-8);
        assert!((vf.v[0] - 9.0).abs() < 1e-8);
    }

    #[test]
    fn value_iteration_matches_linear_solve() {
        let m = generate_random_mdp(20, 4, 3, 42).unwrap();
        let (vf, pi) = m.solve().unwrap();
        let exact = m.evaluate(&pi).unwrap();
        assert!((vf.v - exact.v).amax() < 1e-8);
    }

    #[test]
    fn value_iteration_reports_nonconvergence_and_bad_kernels() {
        let m = generate_random_mdp(5, 2, 2, 1).unwrap();
        let err = value_iteration(m.kernel(), &m.reward(), 0.99, 1e-12, 3).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }));
        let mut bad = m.kernel().clone();
        bad[(0, 0)] += 0.1;
        let err = value_iteration(&bad, &m.reward(), 0.9, 1e-10, 100).unwrap_err();
        assert!(matches!(err, Error::InvalidKernel(_)));
    }

    #[test]
    fn policy_evaluation_trivial_values() {
        let k = Matrix::from_element(1, 1, 1.0);
        let vf = policy_evaluation(&k, &Matrix::from_element(1, 1, 1.0), &Policy::uniform(1, 1), 0.5).unwrap();
        assert!((vf.v[0] - 2.0).abs() < 1e-12);
        let m = chain(0.9);
        let pi = Policy::deterministic(&[0, 0], 1).unwrap();
        let r = Matrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let vf = policy_evaluation(m.kernel(), &r, &pi, 0.9).unwrap();
        assert!((vf.v[0] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn policy_evaluation_matches_truncated_backups() {
        let m = generate_random_mdp(12, 3, 3, 9).unwrap();
        let pi = random_policy(12, 3, 4);
        let exact = m.evaluate(&pi).unwrap();
        let p_pi = policy_kernel(m.kernel(), &pi);
        let r = m.reward();
        let r_pi = Vector::from_fn(12, |s, _| (0..3).map(|a| pi.prob(s, a) * r[(s, a)]).sum());
        let mut v = Vector::zeros(12);
        for _ in 0..10_000 {
            v = &r_pi + &p_pi * &v * m.gamma();
        }
        assert!((v - exact.v).amax() < 1e-8);
    }

    #[test]
    fn occupancy_trivial_cases() {
        let occ = occupancy(&one_state(), &Policy::uniform(1, 1)).unwrap();
        assert!((occ.d_s[0] - 1.0).abs() < 1e-12);
        let occ = occupancy(&chain(0.9), &Policy::uniform(2, 1)).unwrap();
        assert!((occ.d_s[0] - 0.1).abs() < 1e-12);
        assert!((occ.d_s[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn occupancy_matches_geometric_rollouts() {
        let m = generate_random_mdp(6, 2, 2, 3).unwrap();
        let pi = random_policy(6, 2, 8);
        let occ = occupancy(&m, &pi).unwrap();
        let n = 200_000;
        let mut counts = vec![0usize; 6];
        let mut rng = rng::rng_from_seed(11);
        for _ in 0..n {
            counts[sample_occupancy_state(&m, &pi, &mut rng)] += 1;
        }
        for s in 0..6 {
            let p = occ.d_s[s];
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let emp = counts[s] as f64 / n as f64;
            assert!((emp - p).abs() <= 3.0 * se + 1e-12, "state {s}: {emp} vs {p}");
        }
    }

    #[test]
    fn episode_transitions_on_trivial_mdps() {
        for seed in 0..5 {
            let t = sample_episode_transition(&one_state(), &Policy::uniform(1, 1), seed);
            assert_eq!(t, EpisodeTransition { s: 0, a: 0, s_next: 0, a_next: 0, s_tilde: 0 });
            let t = sample_episode_transition(&chain(0.9), &Policy::uniform(2, 1), seed);
            assert_eq!(t.s_next, 1);
            assert_eq!(t.s_tilde, 1);
        }
        let m = generate_random_mdp(5, 2, 2, 1).unwrap();
        let pi = Policy::uniform(5, 2);
        assert_eq!(sample_episode_transition(&m, &pi, 77), sample_episode_transition(&m, &pi, 77));
    }

    #[test]
    fn episode_state_distribution_matches_occupancy() {
        let m = generate_random_mdp(8, 2, 3, 5).unwrap();
        let pi = random_policy(8, 2, 1);
        let occ = occupancy(&m, &pi).unwrap();
        let mut rng = rng::rng_from_seed(3);
        let n = 100_000;
        let mut counts = vec![0usize; 8];
        for _ in 0..n {
            counts[sample_episode_transition_with(&m, &pi, &mut rng).s] += 1;
        }
        let tv: f64 = (0..8).map(|s| (counts[s] as f64 / n as f64 - occ.d_s[s]).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.01, "tv {tv}");
    }

    #[test]
    fn generator_contract() {
        let m = generate_random_mdp(1, 1, 1, 5).unwrap();
        assert_eq!(m.kernel(), &Matrix::from_element(1, 1, 1.0));
        let m = generate_random_mdp(20, 4, 3, 42).unwrap();
        let sv = linalg::singular_values_desc(m.kernel());
        assert!(sv[3] < 1e-10 * sv[0]);
        assert!(sv[2] > 1e-6 * sv[0]);
        assert_eq!(m, generate_random_mdp(20, 4, 3, 42).unwrap());
        assert!(generate_random_mdp(3, 1, 4, 0).is_err());
    }

    #[test]
    fn gridworld_is_valid_and_solvable() {
        let g = gridworld(8, 0.1, 0.9).unwrap();
        assert_eq!(g.num_states(), 64);
        let (vf, pi) = g.solve().unwrap();
        assert!(vf.v[63] > 9.99);
        // From the start corner the optimal first move heads right or down.
        assert!(matches!(pi.modes()[0], 1 | 2));
    }

    #[test]
    fn projection_rule() {
        let raw = Matrix::from_row_slice(3, 3, &[0.5, -0.1, 0.6, 0.2, 0.3, 0.5, 0.0, 0.0, 0.0]);
        let p = simplex_project_kernel(&raw);
        assert!((p[(0, 0)] - 0.5 / 1.1).abs() < 1e-15);
        assert_eq!(p[(0, 1)], 0.0);
        assert!((p[(0, 2)] - 0.6 / 1.1).abs() < 1e-15);
        assert_eq!(p.row(1), raw.row(1));
        assert!(p.row(2).iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn bellman_consistency(seed in 0u64..10_000) {
            let m = generate_random_mdp(6, 3, 2, seed).unwrap();
            let pi = random_policy(6, 3, seed ^ 0xABCD);
            let vf = m.evaluate(&pi).unwrap();
            let k = m.kernel();
            let r = m.reward();
            for s in 0..6 {
                let mut rhs = 0.0;
                for a in 0..3 {
                    let next: f64 = (0..6).map(|t| k[(sa_index(s, a, 3), t)] * vf.v[t]).sum();
                    rhs += pi.prob(s, a) * (r[(s, a)] + m.gamma() * next);
                }
                prop_assert!((vf.v[s] - rhs).abs() < 1e-9);
            }
        }

        #[test]
        fn occupancy_identity(seed in 0u64..10_000) {
            let m = generate_random_mdp(5, 2, 2, seed).unwrap();
            let pi = random_policy(5, 2, seed + 1);
            let occ = occupancy(&m, &pi).unwrap();
            let r = m.reward();
            let er: f64 = (0..10).map(|i| occ.d_sa[i] * r[(i / 2, i % 2)]).sum();
            let v = m.policy_value(&pi).unwrap();
            prop_assert!((v - er / (1.0 - m.gamma())).abs() < 1e-9);
            prop_assert!((occ.d_s.sum() - 1.0).abs() < 1e-9);
            for s in 0..5 {
                prop_assert!(occ.d_s[s] >= (1.0 - m.gamma()) * m.rho()[s] - 1e-12);
            }
        }

        #[test]
        fn kernel_rank_is_at_most_d(seed in 0u64..10_000, d in 1usize..4) {
            let m = generate_random_mdp(7, 2, d, seed).unwrap();
            let sv = linalg::singular_values_desc(m.kernel());
            prop_assert!(sv.iter().skip(d).all(|&x| x < 1e-10 * sv[0]));
        }

        #[test]
        fn greedy_policy_ignores_reward_shift(seed in 0u64..10_000, c in -5.0f64..5.0) {
            let m = generate_random_mdp(6, 3, 3, seed).unwrap();
            let r = m.reward();
            let (_, pi) = value_iteration(m.kernel(), &r, m.gamma(), 1e-10, 100_000).unwrap();
            let shifted = r.map(|x| x + c);
            let (_, pi2) = value_iteration(m.kernel(), &shifted, m.gamma(), 1e-10, 100_000).unwrap();
            prop_assert_eq!(pi, pi2);
        }

        #[test]
        fn projected_rows_are_distributions(v in proptest::collection::vec(-1.0f64..1.0, 12)) {
            let p = simplex_project_kernel(&Matrix::from_row_slice(3, 4, &v));
            for row in p.row_iter() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }
}
