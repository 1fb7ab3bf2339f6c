//! Executable checks of the identities and inequalities behind the learning
//! guarantees. Every expectation is computed by enumeration over the tabular
//! space, so the tolerances can be tight.

use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{build_candidate_class, erm_fit, CandidateClass};
use crate::linalg::{self, Matrix, Vector};
use crate::mdp::{
    self, generate_random_mdp, occupancy_in_kernel, policy_kernel, simplex_project_kernel, LowRankMdp, Policy,
    TransitionDataset,
};
use crate::objective::{self, kernel_l2_error, minimized_main_term, svd_primal_value, TransitionMoments};
use crate::rng::{self, streams, Rng};

/// Tolerance for the exact identities.
pub const IDENTITY_TOL: f64 = 1e-8;
/// Relative tolerance for the duality gap.
pub const DUALITY_TOL: f64 = 1e-6;
/// Absolute slack for the potential inequalities (floating-point only).
const POTENTIAL_SLACK: f64 = 1e-9;
/// Fraction of seeds selecting the truth above which an `n` is considered identified.
pub const IDENTIFIED_FRACTION: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub instances_checked: usize,
    pub violations: usize,
    #[serde(with = "crate::io::extended_f64")]
    pub max_violation_magnitude: f64,
    pub details_path: Option<String>,
}

impl CheckReport {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            instances_checked: 0,
            violations: 0,
            max_violation_magnitude: 0.0,
            details_path: None,
        }
    }

    /// Records one instance. `magnitude` is the size of the discrepancy (for
    /// identities) or of the excess (for inequalities); it counts as a
    /// violation when it exceeds `tol`.
    pub fn record(&mut self, magnitude: f64, tol: f64) {
        self.instances_checked += 1;
        let m = if magnitude.is_nan() { f64::INFINITY } else { magnitude };
        if m > tol {
            self.violations += 1;
        }
        self.max_violation_magnitude = self.max_violation_magnitude.max(m);
    }

    /// Folds another report for the same check into this one.
    pub fn merge(&mut self, other: &CheckReport) {
        self.instances_checked += other.instances_checked;
        self.violations += other.violations;
        self.max_violation_magnitude = self.max_violation_magnitude.max(other.max_violation_magnitude);
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

// ── subspaces ──

/// Largest principal angle (radians) between the column spaces of
/// `diag(sqrt(w)) phi_a` and `diag(sqrt(w)) phi_b`.
pub fn subspace_distance(phi_a: &Matrix, phi_b: &Matrix, weighting: &Vector) -> Result<f64> {
    if phi_a.shape() != phi_b.shape() {
        return Err(Error::DimensionMismatch { expected: phi_a.len(), actual: phi_b.len() });
    }
    if weighting.len() != phi_a.nrows() {
        return Err(Error::DimensionMismatch { expected: phi_a.nrows(), actual: weighting.len() });
    }
    if weighting.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::validation("weights must be nonnegative"));
    }
    let d = phi_a.ncols();
    let basis = |phi: &Matrix| -> Result<Matrix> {
        let mut x = phi.clone();
        for (i, mut row) in x.row_iter_mut().enumerate() {
            row *= weighting[i].sqrt();
        }
        let (q, rank) = linalg::orthonormal_basis(&x, 1e-10);
        if rank < d {
            return Err(Error::RankDeficient { rank, required: d });
        }
        Ok(q)
    };
    let qa = basis(phi_a)?;
    let qb = basis(phi_b)?;
    let cross = qb.transpose() * &qa;
    let cos = linalg::singular_values_desc(&cross).last().copied().unwrap_or(0.0);
    let residual = &qa - &qb * &cross;
    let sin = linalg::singular_values_desc(&residual).first().copied().unwrap_or(0.0);
    Ok(sin.atan2(cos).clamp(0.0, std::f64::consts::FRAC_PI_2))
}

// ── simulation lemma ──

/// Both sides of both value-difference identities for one tuple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimulationSides {
    pub lhs: f64,
    pub rhs_true_occupancy: f64,
    pub rhs_model_occupancy: f64,
}

/// Iterative policy evaluation to sup-norm tolerance `tol`, for the solver
/// sensitivity study; `None` gives the exact linear solve.
fn evaluate_v(kernel: &Matrix, reward: &Matrix, policy: &Policy, gamma: f64, tol: Option<f64>) -> Result<Vector> {
    match tol {
        None => Ok(mdp::policy_evaluation(kernel, reward, policy, gamma)?.v),
        Some(tol) => {
            let (ns, na) = (reward.nrows(), reward.ncols());
            let p_pi = policy_kernel(kernel, policy);
            let r_pi = Vector::from_fn(ns, |s, _| (0..na).map(|a| policy.prob(s, a) * reward[(s, a)]).sum());
            let mut v = Vector::zeros(ns);
            for _ in 0..mdp::DEFAULT_VI_MAX_ITER {
                let next = &r_pi + &p_pi * &v * gamma;
                let delta = (&next - &v).amax();
                v = next;
                if delta <= tol {
                    return Ok(v);
                }
            }
            Err(Error::NonConvergence { residual: f64::NAN, bound: tol, iterations: mdp::DEFAULT_VI_MAX_ITER })
        }
    }
}

/// Evaluates `V_{P_hat, r+b} - V_{P, r}` and the two occupancy-weighted
/// one-step expressions that should equal it.
pub fn simulation_sides(
    mdp: &LowRankMdp,
    model_kernel: &Matrix,
    bonus: &Matrix,
    policy: &Policy,
    vi_tol: Option<f64>,
) -> Result<SimulationSides> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    if bonus.shape() != (ns, na) {
        return Err(Error::DimensionMismatch { expected: ns * na, actual: bonus.len() });
    }
    if model_kernel.shape() != mdp.kernel().shape() {
        return Err(Error::DimensionMismatch { expected: mdp.kernel().len(), actual: model_kernel.len() });
    }
    mdp::validate_kernel_rows(model_kernel, na)?;
    policy.check_dims(ns, na)?;
    let gamma = mdp.gamma();
    let r = mdp.reward();
    let rb = &r + bonus;
    let v_model = evaluate_v(model_kernel, &rb, policy, gamma, vi_tol)?;
    let v_true = evaluate_v(mdp.kernel(), &r, policy, gamma, vi_tol)?;
    let lhs = mdp.rho().dot(&(&v_model - &v_true));

    let d_true = occupancy_in_kernel(mdp.kernel(), mdp.rho(), policy, gamma)?;
    let d_model = occupancy_in_kernel(model_kernel, mdp.rho(), policy, gamma)?;
    let gap_model_v = (model_kernel - mdp.kernel()) * &v_model;
    let gap_true_v = (model_kernel - mdp.kernel()) * &v_true;
    let (mut rhs1, mut rhs2) = (0.0, 0.0);
    for i in 0..ns * na {
        let b = bonus[(i / na, i % na)];
        rhs1 += d_true.d_sa[i] * (b + gamma * gap_model_v[i]);
        rhs2 += d_model.d_sa[i] * (b + gamma * gap_true_v[i]);
    }
    Ok(SimulationSides {
        lhs,
        rhs_true_occupancy: rhs1 / (1.0 - gamma),
        rhs_model_occupancy: rhs2 / (1.0 - gamma),
    })
}

/// Checks both identities of the simulation lemma on one tuple; each identity
/// counts as one instance.
pub fn check_simulation_lemma(
    mdp: &LowRankMdp,
    model_kernel: &Matrix,
    bonus: &Matrix,
    policy: &Policy,
) -> Result<CheckReport> {
    let sides = simulation_sides(mdp, model_kernel, bonus, policy, None)?;
    let mut report = CheckReport::new("simulation_lemma");
    report.record((sides.lhs - sides.rhs_true_occupancy).abs(), IDENTITY_TOL);
    report.record((sides.lhs - sides.rhs_model_occupancy).abs(), IDENTITY_TOL);
    Ok(report)
}

fn random_distribution(n: usize, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / sum).collect()
}

/// Random row-stochastic policy.
pub fn random_policy(num_states: usize, num_actions: usize, rng: &mut Rng) -> Policy {
    let mut p = Matrix::zeros(num_states, num_actions);
    for s in 0..num_states {
        let row = random_distribution(num_actions, rng);
        for (a, v) in row.into_iter().enumerate() {
            p[(s, a)] = v;
        }
    }
    Policy::from_weights(p)
}

/// One random simulation-lemma tuple: MDP, projected random kernel, bonus in
/// `[0,1]` and policy.
pub fn random_simulation_tuple(rng: &mut Rng) -> Result<(LowRankMdp, Matrix, Matrix, Policy)> {
    let ns = rng.random_range(2..=12);
    let na = rng.random_range(1..=4);
    let d = rng.random_range(1..=ns.min(4));
    let gamma = rng.random_range(0.5..0.95);
    let mdp = generate_random_mdp(ns, na, d, rng.random())?.with_gamma(gamma)?;
    let raw = Matrix::from_fn(ns * na, ns, |_, _| rng.random::<f64>() - 0.2);
    let kernel = simplex_project_kernel(&raw);
    let bonus = Matrix::from_fn(ns, na, |_, _| rng.random::<f64>());
    let policy = random_policy(ns, na, rng);
    Ok((mdp, kernel, bonus, policy))
}

/// Simulation-lemma suite over `instances` random tuples.
pub fn simulation_lemma_suite(instances: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = rng::child_rng(seed, streams::CHECKS);
    let mut report = CheckReport::new("simulation_lemma");
    for _ in 0..instances {
        let (mdp, kernel, bonus, policy) = random_simulation_tuple(&mut rng)?;
        report.merge(&check_simulation_lemma(&mdp, &kernel, &bonus, &policy)?);
    }
    Ok(report)
}

/// Largest identity residual over `instances` tuples when values come from
/// iterative evaluation at tolerance `vi_tol`.
pub fn simulation_residual_at_tolerance(instances: usize, seed: u64, vi_tol: f64) -> Result<f64> {
    let mut rng = rng::child_rng(seed, streams::CHECKS);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (mdp, kernel, bonus, policy) = random_simulation_tuple(&mut rng)?;
        let s = simulation_sides(&mdp, &kernel, &bonus, &policy, Some(vi_tol))?;
        worst = worst.max((s.lhs - s.rhs_true_occupancy).abs()).max((s.lhs - s.rhs_model_occupancy).abs());
    }
    Ok(worst)
}

// ── elliptical potential ──

/// Terms of the potential inequality chain for one sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PotentialTerms {
    /// `sum_n Tr(G_n M_n^{-1})`
    pub trace_sum: f64,
    /// `log det M_N - d log lambda`
    pub log_det_ratio: f64,
    /// `d log(1 + N c / lambda)`
    pub bound: f64,
}

/// Evaluates the chain for the sequence `gs` started at `M_0 = lambda I`.
pub fn potential_terms(gs: &[Matrix], lambda: f64, c: f64) -> Result<PotentialTerms> {
    if !(lambda > 0.0) {
        return Err(Error::validation("lambda must be positive"));
    }
    let d = gs.first().map_or(1, |g| g.nrows());
    let mut m = Matrix::identity(d, d) * lambda;
    let mut trace_sum = 0.0;
    for g in gs {
        if g.shape() != (d, d) {
            return Err(Error::DimensionMismatch { expected: d * d, actual: g.len() });
        }
        m += g;
        let inv = linalg::spd_inverse(&m)?;
        trace_sum += (g * inv).trace();
    }
    let chol = m.clone().cholesky().ok_or_else(|| Error::SingularSystem("M_N is not positive definite".into()))?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let df = d as f64;
    Ok(PotentialTerms {
        trace_sum,
        log_det_ratio: log_det - df * lambda.ln(),
        bound: df * (1.0 + gs.len() as f64 * c / lambda).ln(),
    })
}

/// Random PSD sequence with `||G_n||_op <= 1`: each `G_n` averages a random
/// number of normalized outer products and is scaled by a uniform factor.
fn random_psd_sequence(d: usize, n: usize, rng: &mut Rng) -> Vec<Matrix> {
    (0..n)
        .map(|_| {
            let k = rng.random_range(1..=d);
            let mut g = Matrix::zeros(d, d);
            for _ in 0..k {
                let v = Vector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
                let norm2 = v.norm_squared();
                if norm2 > 1e-12 {
                    g += &v * v.transpose() / norm2;
                }
            }
            g * (rng.random::<f64>() / k as f64)
        })
        .collect()
}

/// Checks both potential inequalities on one random sequence of length `n`
/// in dimension `d`. Both inequalities of the chain count as instances.
pub fn check_elliptical_potential(d: usize, n: usize, lambda: f64, seed: u64) -> Result<CheckReport> {
    if d == 0 || n == 0 {
        return Err(Error::validation("d and N must be positive"));
    }
    let mut rng = rng::child_rng(seed, streams::CHECKS);
    let gs = random_psd_sequence(d, n, &mut rng);
    let t = potential_terms(&gs, lambda, 1.0)?;
    let mut report = CheckReport::new("elliptical_potential");
    report.record(t.trace_sum - t.log_det_ratio, POTENTIAL_SLACK * (1.0 + t.log_det_ratio.abs()));
    report.record(t.log_det_ratio - t.bound, POTENTIAL_SLACK * (1.0 + t.bound.abs()));
    Ok(report)
}

/// `sequences` random draws with `d <= 8`, `N <= 256`, `lambda` log-uniform in `[0.1, 10]`.
pub fn elliptical_potential_suite(sequences: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = rng::child_rng(seed, streams::CHECKS);
    let mut report = CheckReport::new("elliptical_potential");
    for _ in 0..sequences {
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=256);
        let lambda = 10f64.powf(rng.random_range(-1.0..=1.0));
        report.merge(&check_elliptical_potential(d, n, lambda, rng.random())?);
    }
    Ok(report)
}

// ── L2 norm of V ──

/// `sum_s (sum_a ||phi*(s,a)||)^2` and `sum_s (sum_a r(s,a))^2` under the counting measure.
pub fn normalization_sums(mdp: &LowRankMdp) -> (f64, f64) {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let r = mdp.reward();
    let mut repr = 0.0;
    let mut reward = 0.0;
    for s in 0..ns {
        let a_sum: f64 = (0..na).map(|a| mdp.phi_star().row(mdp::sa_index(s, a, na)).norm()).sum();
        repr += a_sum * a_sum;
        let r_sum: f64 = r.row(s).sum();
        reward += r_sum * r_sum;
    }
    (repr, reward)
}

/// Whether both normalization assumptions hold (with `1e-9` slack).
pub fn normalization_holds(mdp: &LowRankMdp) -> bool {
    let d = mdp.rank() as f64;
    let (repr, reward) = normalization_sums(mdp);
    repr <= d + 1e-9 && reward <= d + 1e-9
}

/// `sqrt(2d(1 + d gamma^2 / (1-gamma)^2))`.
pub fn v_norm_bound(d: usize, gamma: f64) -> f64 {
    let d = d as f64;
    (2.0 * d * (1.0 + d * gamma * gamma / (1.0 - gamma).powi(2))).sqrt()
}

/// Compares `||V^pi||_2` (counting measure over states) with the bound.
/// Returns a report with zero instances when the normalization assumptions
/// fail, marking the check as not applicable.
pub fn check_v_norm(mdp: &LowRankMdp, policy: &Policy) -> Result<CheckReport> {
    let mut report = CheckReport::new("v_norm");
    if !normalization_holds(mdp) {
        return Ok(report);
    }
    let v = mdp.evaluate(policy)?.v;
    report.record(v.norm() - v_norm_bound(mdp.rank(), mdp.gamma()), 1e-12);
    Ok(report)
}

/// Full-rank tabular MDP with `phi* = P` rows and `mu* = I`. Rows are
/// Dirichlet(1) draws and `theta_r` lies in `[0, reward_cap]`.
pub fn random_tabular_mdp(num_states: usize, num_actions: usize, reward_cap: f64, rng: &mut Rng) -> Result<LowRankMdp> {
    let mut phi = Matrix::zeros(num_states * num_actions, num_states);
    for i in 0..phi.nrows() {
        let row = random_dirichlet_one(num_states, rng);
        for (j, v) in row.into_iter().enumerate() {
            phi[(i, j)] = v;
        }
    }
    let theta = Vector::from_fn(num_states, |_, _| rng.random::<f64>() * reward_cap);
    let rho = Vector::from_vec(random_distribution(num_states, rng));
    let gamma = rng.random_range(0.5..0.95);
    LowRankMdp::new(phi, Matrix::identity(num_states, num_states), theta, rho, gamma, num_actions)
}

fn random_dirichlet_one(n: usize, rng: &mut Rng) -> Vec<f64> {
    // Dirichlet(1) via normalized exponentials.
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / sum).collect()
}

/// V-norm check over `instances` random tabular MDPs that pass the assumption
/// check. Draws that fail the assumptions are discarded and redrawn.
pub fn v_norm_suite(instances: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = rng::child_rng(seed, streams::CHECKS);
    let mut report = CheckReport::new("v_norm");
    let mut attempts = 0;
    while report.instances_checked < instances {
        attempts += 1;
        if attempts > 100 * instances.max(1) {
            return Err(Error::GenerationFailure { attempts, reason: "too few MDPs satisfy the normalization".into() });
        }
        let ns = rng.random_range(8..=20);
        let na = rng.random_range(1..=2);
        let mdp = random_tabular_mdp(ns, na, 0.5, &mut rng)?;
        if !normalization_holds(&mdp) {
            continue;
        }
        let policy = random_policy(ns, na, &mut rng);
        report.merge(&check_v_norm(&mdp, &policy)?);
    }
    Ok(report)
}

// ── generalization ──

/// Parameters of the realizable decoy class used by the sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub num_decoys: usize,
    pub perturbation_scale: f64,
    pub class_seed: u64,
}

impl Default for ClassParams {
    fn default() -> Self {
        Self { num_decoys: 31, perturbation_scale: 0.3, class_seed: 7 }
    }
}

impl ClassParams {
    pub fn build(&self, mdp: &LowRankMdp) -> Result<CandidateClass> {
        build_candidate_class(mdp, self.num_decoys, self.perturbation_scale, self.class_seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    pub mean_l2_error: f64,
    /// Fraction of seeds whose selected candidate has zero error.
    pub identified_fraction: f64,
    pub used_in_fit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub slope: f64,
    pub intercept: f64,
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn fit_line(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    if points.len() < 2 {
        return None;
    }
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
    Some((slope, my - slope * mx))
}

/// ERM error versus sample size. For every `n` and seed, `n` triples are
/// drawn with `(s,a)` uniform, the class is fitted by ERM and the exact
/// uniform-weighted L2 error of the selected kernel is recorded. The slope of
/// log mean error against log `n` uses only points with positive error where
/// fewer than 95% of seeds identified the truth.
pub fn generalization_sweep(
    mdp: &LowRankMdp,
    class: &CandidateClass,
    n_grid: &[usize],
    seeds: &[u64],
) -> Result<SweepResult> {
    if n_grid.is_empty() || seeds.is_empty() {
        return Err(Error::validation("n_grid and seeds must be nonempty"));
    }
    if n_grid.windows(2).any(|w| w[0] >= w[1]) || n_grid[0] == 0 {
        return Err(Error::validation("n_grid must be positive and strictly ascending"));
    }
    let w = objective::uniform(mdp.num_rows());
    let errors: Vec<f64> =
        (0..class.len()).map(|k| kernel_l2_error(class.kernel(k), mdp.kernel(), &w)).collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let mut total = 0.0;
        let mut identified = 0usize;
        for &seed in seeds {
            let mut r = rng::child_rng(rng::derive_seed(seed, streams::SWEEP), n as u64);
            let data = TransitionDataset::from_triples(mdp::sample_iid_triples(mdp, &w, n, &mut r));
            let fit = erm_fit(class, &data)?;
            let e = errors[fit.index];
            total += e;
            if e <= 1e-15 {
                identified += 1;
            }
        }
        let mean = total / seeds.len() as f64;
        let frac = identified as f64 / seeds.len() as f64;
        points.push(SweepPoint { n, mean_l2_error: mean, identified_fraction: frac, used_in_fit: mean > 0.0 && frac < IDENTIFIED_FRACTION });
    }
    let fit_pts: Vec<(f64, f64)> =
        points.iter().filter(|p| p.used_in_fit).map(|p| ((p.n as f64).ln(), p.mean_l2_error.ln())).collect();
    let (slope, intercept) = fit_line(&fit_pts).ok_or_else(|| {
        Error::DegenerateSweep(format!("{} pre-identification point(s); the slope needs at least 2", fit_pts.len()))
    })?;
    Ok(SweepResult { points, slope, intercept })
}

/// The standard sweep grid: `n = 64, 128, ..., 16384`.
pub fn standard_n_grid() -> Vec<usize> {
    (6..=14).map(|k| 1usize << k).collect()
}

// ── duality ──

/// Relative gap between `-(2/d)` times the main term minimized over `mu'`
/// and the primal value, for `phi` whitened under the uniform weighting.
///
/// The primal value integrates next states with the counting measure, so the
/// main term is taken with unit base weights; a normalized base measure `p`
/// would divide each next-state contribution by `p(s')`.
pub fn duality_gap(mdp: &LowRankMdp, phi: &Matrix) -> Result<f64> {
    let w = objective::uniform(mdp.num_rows());
    let base = Vector::from_element(mdp.num_states(), 1.0);
    let m = TransitionMoments::exact(mdp.kernel(), &w, &base, mdp.num_actions())?;
    let d = phi.ncols() as f64;
    let dual = -2.0 / d * minimized_main_term(phi, &m);
    let primal = svd_primal_value(phi, mdp, &w)?;
    Ok((dual - primal).abs() / primal.abs().max(1e-300))
}

/// Duality gap over `num_feature_draws` random Gaussian features of the
/// MDP's rank, each whitened to `E[phi phi^T] = I`.
pub fn check_duality(mdp: &LowRankMdp, num_feature_draws: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = rng::child_rng(seed, streams::CHECKS);
    let normal = rand_distr::StandardNormal;
    let w = objective::uniform(mdp.num_rows());
    let mut report = CheckReport::new("duality");
    for _ in 0..num_feature_draws {
        let raw = Matrix::from_fn(mdp.num_rows(), mdp.rank(), |_, _| rand_distr::Distribution::<f64>::sample(&normal, &mut rng));
        let phi = objective::whiten(&raw, &w, 1.0)?;
        report.record(duality_gap(mdp, &phi)?, DUALITY_TOL);
    }
    Ok(report)
}

// ── bonus concentration proxy ──

/// Ratio of the empirical to the population elliptical norm at every `(s,a)`,
/// with `n` samples from `weighting` and regularizer `lambda`. Returns the
/// extreme ratios.
pub fn bonus_norm_ratios(mdp: &LowRankMdp, weighting: &Vector, n: usize, lambda: f64, seed: u64) -> Result<(f64, f64)> {
    let phi = mdp.phi_star();
    let d = phi.ncols();
    let mut rng = rng::child_rng(seed, streams::CHECKS);
    let mut emp = Matrix::identity(d, d) * lambda;
    for _ in 0..n {
        let i = mdp::sample_index(weighting.iter().copied(), &mut rng);
        let row = phi.row(i).transpose();
        emp += &row * row.transpose();
    }
    let pop = linalg::weighted_second_moment(phi, weighting) * n as f64 + Matrix::identity(d, d) * lambda;
    let emp_inv = linalg::spd_inverse(&emp)?;
    let pop_inv = linalg::spd_inverse(&pop)?;
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for i in 0..phi.nrows() {
        let x = phi.row(i).transpose();
        let a = (x.transpose() * &emp_inv * &x)[0].max(0.0).sqrt();
        let b = (x.transpose() * &pop_inv * &x)[0].max(0.0).sqrt();
        if b > 0.0 {
            let r = a / b;
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    Ok((lo, hi))
}

/// Records one instance per seed; the excess is how far the ratio range
/// leaves `[1/4, 4]`.
pub fn bonus_concentration_check(mdp: &LowRankMdp, n: usize, lambda: f64, seeds: &[u64]) -> Result<CheckReport> {
    let w = objective::uniform(mdp.num_rows());
    let mut report = CheckReport::new("bonus_concentration");
    for &seed in seeds {
        let (lo, hi) = bonus_norm_ratios(mdp, &w, n, lambda, seed)?;
        report.record((0.25 - lo).max(hi - 4.0), 0.0);
    }
    Ok(report)
}

// ── suites ──

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    SimLemma,
    Potential,
    VNorm,
    Generalization,
    Duality,
    All,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "simlemma" => Suite::SimLemma,
            "potential" => Suite::Potential,
            "vnorm" => Suite::VNorm,
            "generalization" => Suite::Generalization,
            "duality" => Suite::Duality,
            "all" => Suite::All,
            other => return Err(Error::validation(format!("unknown suite '{other}'"))),
        })
    }
}

/// Output of a suite run: the reports plus the sweep table when the
/// generalization suite ran.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOutput {
    pub reports: Vec<CheckReport>,
    pub sweep: Option<SweepResult>,
}

/// Slope window accepted by the generalization suite.
pub const SLOPE_RANGE: (f64, f64) = (-1.3, -0.7);

/// The seed-42 `(20, 4, 3)` instance shared by the standard suites.
pub fn standard_mdp() -> Result<LowRankMdp> {
    generate_random_mdp(20, 4, 3, 42)
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteOutput> {
    let mut reports = Vec::new();
    let mut sweep = None;
    let all = suite == Suite::All;
    if all || suite == Suite::SimLemma {
        reports.push(simulation_lemma_suite(100, seed)?);
    }
    if all || suite == Suite::Potential {
        reports.push(elliptical_potential_suite(1000, seed)?);
    }
    if all || suite == Suite::VNorm {
        reports.push(v_norm_suite(100, seed)?);
    }
    if all || suite == Suite::Duality {
        reports.push(check_duality(&standard_mdp()?, 50, seed)?);
    }
    if all || suite == Suite::Generalization {
        let mdp = standard_mdp()?;
        let class = ClassParams::default().build(&mdp)?;
        let seeds: Vec<u64> = (0..100).map(|k| rng::derive_seed(seed, k)).collect();
        let result = generalization_sweep(&mdp, &class, &standard_n_grid(), &seeds)?;
        let mut report = CheckReport::new("generalization_slope");
        let excess = (SLOPE_RANGE.0 - result.slope).max(result.slope - SLOPE_RANGE.1);
        report.record(excess, 0.0);
        reports.push(report);
        sweep = Some(result);
    }
    Ok(SuiteOutput { reports, sweep })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::svd_oracle_fit;
    use crate::objective::FeatureModel;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn subspace_examples() {
        let w = objective::uniform(2);
        let e1 = Matrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let e2 = Matrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert_eq!(subspace_distance(&e1, &e1, &w).unwrap(), 0.0);
        assert!((subspace_distance(&e1, &e2, &w).unwrap() - FRAC_PI_2).abs() < 1e-15);
        let zero = Matrix::zeros(2, 1);
        assert!(matches!(subspace_distance(&e1, &zero, &w), Err(Error::RankDeficient { .. })));
        // 45 degrees
        let diag = Matrix::from_column_slice(2, 1, &[1.0, 1.0]);
        assert!((subspace_distance(&e1, &diag, &w).unwrap() - FRAC_PI_2 / 2.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn subspace_is_span_invariant_and_symmetric(seed in 0u64..10_000) {
            let mut r = rng::rng_from_seed(seed);
            let a = Matrix::from_fn(12, 3, |_, _| r.random::<f64>() - 0.5);
            let b = Matrix::from_fn(12, 3, |_, _| r.random::<f64>() - 0.5);
            let map = Matrix::from_fn(3, 3, |i, j| if i == j { 2.0 } else { r.random::<f64>() - 0.5 });
            let w = Vector::from_fn(12, |_, _| r.random::<f64>() + 0.1);
            prop_assert!(subspace_distance(&a, &(&a * &map), &w).unwrap() < 1e-7);
            let ab = subspace_distance(&a, &b, &w).unwrap();
            let ba = subspace_distance(&b, &a, &w).unwrap();
            prop_assert!((ab - ba).abs() < 1e-10);
            prop_assert!((subspace_distance(&(&a * &map), &b, &w).unwrap() - ab).abs() < 1e-7);
        }
    }

    fn brute_force_sides(mdp: &LowRankMdp, kernel: &Matrix, bonus: &Matrix, policy: &Policy) -> (f64, f64, f64) {
        // Independent evaluation through truncated power series.
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let g = mdp.gamma();
        let series_v = |k: &Matrix, r: &Matrix| {
            let p = policy_kernel(k, policy);
            let r_pi = Vector::from_fn(ns, |s, _| (0..na).map(|a| policy.prob(s, a) * r[(s, a)]).sum());
            let mut v = Vector::zeros(ns);
            let mut term = r_pi.clone();
            for _ in 0..2000 {
                v += &term;
                term = &p * term * g;
            }
            v
        };
        let series_d = |k: &Matrix| {
            let p = policy_kernel(k, policy);
            let mut d = Vector::zeros(ns);
            let mut term = mdp.rho() * (1.0 - g);
            for _ in 0..2000 {
                d += &term;
                term = p.transpose() * term * g;
            }
            Vector::from_fn(ns * na, |i, _| d[i / na] * policy.prob(i / na, i % na))
        };
        let r = mdp.reward();
        let vm = series_v(kernel, &(&r + bonus));
        let vt = series_v(mdp.kernel(), &r);
        let dt = series_d(mdp.kernel());
        let dm = series_d(kernel);
        let lhs = mdp.rho().dot(&(&vm - &vt));
        let diff = kernel - mdp.kernel();
        let gm = &diff * &vm;
        let gt = &diff * &vt;
        let mut r1 = 0.0;
        let mut r2 = 0.0;
        for i in 0..ns * na {
            let b = bonus[(i / na, i % na)];
            r1 += dt[i] * (b + g * gm[i]);
            r2 += dm[i] * (b + g * gt[i]);
        }
        (lhs, r1 / (1.0 - g), r2 / (1.0 - g))
    }

    #[test]
    fn simulation_sides_match_power_series() {
        let mut rng = rng::rng_from_seed(5);
        for _ in 0..5 {
            let (mdp, k, b, p) = random_simulation_tuple(&mut rng).unwrap();
            let s = simulation_sides(&mdp, &k, &b, &p, None).unwrap();
            let (l, r1, r2) = brute_force_sides(&mdp, &k, &b, &p);
            assert!((s.lhs - l).abs() < 1e-9);
            assert!((s.rhs_true_occupancy - r1).abs() < 1e-9);
            assert!((s.rhs_model_occupancy - r2).abs() < 1e-9);
            // The power series is independent of the identity itself.
            assert!((l - r1).abs() < 1e-8 && (l - r2).abs() < 1e-8);
        }
    }

    #[test]
    fn simulation_examples() {
        let mdp = generate_random_mdp(6, 2, 2, 3).unwrap();
        let p = Policy::uniform(6, 2);
        let zero = Matrix::zeros(6, 2);
        let s = simulation_sides(&mdp, mdp.kernel(), &zero, &p, None).unwrap();
        assert!(s.lhs.abs() < 1e-10 && s.rhs_true_occupancy.abs() < 1e-10 && s.rhs_model_occupancy.abs() < 1e-10);
        let c = 0.3;
        let s = simulation_sides(&mdp, mdp.kernel(), &Matrix::from_element(6, 2, c), &p, None).unwrap();
        let expect = c / (1.0 - mdp.gamma());
        assert!((s.lhs - expect).abs() < 1e-10);
        assert!((s.rhs_true_occupancy - expect).abs() < 1e-10);
        assert!((s.rhs_model_occupancy - expect).abs() < 1e-10);
    }

    #[test]
    fn simulation_suite_has_no_violations() {
        let r = simulation_lemma_suite(100, 1).unwrap();
        assert_eq!(r.instances_checked, 200);
        assert_eq!(r.violations, 0, "{r:?}");
        assert!(r.max_violation_magnitude <= IDENTITY_TOL);
    }

    #[test]
    fn simulation_residual_tracks_solver_tolerance() {
        let loose = simulation_residual_at_tolerance(20, 2, 1e-6).unwrap();
        let tight = simulation_residual_at_tolerance(20, 2, 1e-7).unwrap();
        assert!(tight * 5.0 <= loose, "loose {loose:e} tight {tight:e}");
    }

    #[test]
    fn potential_examples() {
        let gs = vec![Matrix::from_element(1, 1, 1.0); 3];
        let t = potential_terms(&gs, 1.0, 1.0).unwrap();
        assert!((t.trace_sum - (0.5 + 1.0 / 3.0 + 0.25)).abs() < 1e-14);
        assert!((t.log_det_ratio - 4f64.ln()).abs() < 1e-14);
        assert!((t.bound - 4f64.ln()).abs() < 1e-14);
        let zeros = vec![Matrix::zeros(3, 3); 5];
        let t = potential_terms(&zeros, 2.0, 1.0).unwrap();
        assert_eq!(t.trace_sum, 0.0);
        assert!(t.log_det_ratio.abs() < 1e-12 && t.bound > 0.0);
    }

    #[test]
    fn potential_suite_has_no_violations() {
        let r = elliptical_potential_suite(200, 4).unwrap();
        assert_eq!(r.instances_checked, 400);
        assert_eq!(r.violations, 0, "{r:?}");
    }

    #[test]
    fn v_norm_examples() {
        // canonical basis with one action: phi(s) = e_s, mu = P^T
        let ns = 5;
        let mut rng = rng::rng_from_seed(9);
        let mut p = Matrix::zeros(ns, ns);
        for s in 0..ns {
            let row = random_distribution(ns, &mut rng);
            for (j, v) in row.into_iter().enumerate() {
                p[(s, j)] = v;
            }
        }
        let theta = Vector::from_fn(ns, |_, _| rng.random::<f64>());
        let mdp = LowRankMdp::new(Matrix::identity(ns, ns), p.transpose(), theta, objective::uniform(ns), 0.9, 1).unwrap();
        assert!(normalization_holds(&mdp));
        let r = check_v_norm(&mdp, &Policy::uniform(ns, 1)).unwrap();
        assert_eq!((r.instances_checked, r.violations), (1, 0));

        let zero = mdp.with_theta(Vector::zeros(ns)).unwrap();
        assert_eq!(zero.evaluate(&Policy::uniform(ns, 1)).unwrap().v.norm(), 0.0);
        assert!(check_v_norm(&zero, &Policy::uniform(ns, 1)).unwrap().passed());

        // two actions with one-hot features over (s, a): the representation sum is |S||A|^2 > d
        let na = 2;
        let kernel = Matrix::from_fn(ns * na, ns, |i, j| p[(i / na, j)]);
        let canon = LowRankMdp::new(
            Matrix::identity(ns * na, ns * na),
            kernel.transpose(),
            Vector::from_element(ns * na, 0.5),
            objective::uniform(ns),
            0.9,
            na,
        )
        .unwrap();
        assert!(!normalization_holds(&canon));
        assert_eq!(check_v_norm(&canon, &Policy::uniform(ns, na)).unwrap().instances_checked, 0);
    }

    #[test]
    fn v_norm_suite_has_no_violations() {
        let r = v_norm_suite(100, 3).unwrap();
        assert_eq!((r.instances_checked, r.violations), (100, 0), "{r:?}");
    }

    #[test]
    fn sweep_degenerate_and_floor() {
        let mdp = generate_random_mdp(6, 2, 2, 11).unwrap();
        let truth = FeatureModel::from_truth(&mdp, &objective::uniform(6)).unwrap();
        let single = CandidateClass::new(vec![truth], true).unwrap();
        let r = generalization_sweep(&mdp, &single, &[16, 64], &[1, 2, 3]);
        assert!(matches!(r, Err(Error::DegenerateSweep(_))));

        // a single decoy: the error never moves off its own L2 distance
        let class = ClassParams { num_decoys: 1, perturbation_scale: 0.3, class_seed: 1 }.build(&mdp).unwrap();
        let decoy_only = class.without(0).unwrap();
        let w = objective::uniform(12);
        let floor = kernel_l2_error(decoy_only.kernel(0), mdp.kernel(), &w).unwrap();
        let r = generalization_sweep(&mdp, &decoy_only, &[16, 64, 256], &[1, 2]).unwrap();
        for p in &r.points {
            assert!((p.mean_l2_error - floor).abs() < 1e-15);
            assert_eq!(p.identified_fraction, 0.0);
        }
        assert!(r.slope.abs() < 1e-12);
        assert!(generalization_sweep(&mdp, &class, &[64, 16], &[1]).is_err());
    }

    #[test]
    fn line_fit_recovers_exact_slope() {
        let pts: Vec<(f64, f64)> = (1..6).map(|k| (k as f64, 3.0 - 1.0 * k as f64)).collect();
        let (s, b) = fit_line(&pts).unwrap();
        assert!((s + 1.0).abs() < 1e-12 && (b - 3.0).abs() < 1e-12);
        assert!(fit_line(&pts[..1]).is_none());
    }

    #[test]
    fn duality_examples() {
        let mdp = standard_mdp().unwrap();
        let w = objective::uniform(mdp.num_rows());
        // oracle singular features, whitened
        let oracle = svd_oracle_fit(&mdp, &w, 3).unwrap();
        let phi = objective::whiten(oracle.phi_hat(), &w, 1.0).unwrap();
        let g = duality_gap(&mdp, &phi).unwrap();
        assert!(g <= 1e-8, "{g:e}");

        // one state, one action, d = 1: both sides equal sum P^2 = 1
        let one = crate::mdp::tests::one_state();
        let phi = Matrix::from_element(1, 1, 1.0);
        let m = TransitionMoments::exact(one.kernel(), &objective::uniform(1), &objective::uniform(1), 1).unwrap();
        assert!((-2.0 * minimized_main_term(&phi, &m) - 1.0).abs() < 1e-14);
        assert!((svd_primal_value(&phi, &one, &objective::uniform(1)).unwrap() - 1.0).abs() < 1e-14);

        let r = check_duality(&mdp, 50, 2).unwrap();
        assert_eq!(r.violations, 0, "{r:?}");
    }

    #[test]
    fn bonus_ratio_is_near_one_with_many_samples() {
        let mdp = standard_mdp().unwrap();
        let r = bonus_concentration_check(&mdp, 4096, 1.0, &[1, 2, 3]).unwrap();
        assert_eq!(r.violations, 0, "{r:?}");
    }

    #[test]
    fn report_merge_and_suite_names() {
        let mut a = CheckReport::new("x");
        a.record(1e-3, 1e-2);
        let mut b = CheckReport::new("x");
        b.record(0.5, 1e-2);
        a.merge(&b);
        assert_eq!((a.instances_checked, a.violations, a.max_violation_magnitude), (2, 1, 0.5));
        assert!("all".parse::<Suite>().is_ok());
        assert!("nope".parse::<Suite>().is_err());
    }
}
