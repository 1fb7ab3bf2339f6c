//! Optimistic online exploration with learned spectral features.
//!
//! Each episode draws one tuple `(s, a, s', a', s~)` with `s` from the
//! occupancy of the current policy and uniform actions, refits the
//! representation, builds the regularized feature covariance and plans on the
//! learned model with an elliptical exploration bonus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{Learner, LearnerConfig};
use crate::linalg::{self, Matrix, Vector};
use crate::mdp::{self, LowRankMdp, Policy, TransitionDataset, ValueFunctions};
use crate::objective::{self, model_to_kernel, FeatureModel};
use crate::rng::{self, streams};

// ── covariance ──

/// `sigma = lambda I + sum phi phi^T` over `count` feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceAccumulator {
    sigma: Matrix,
    lambda: f64,
    count: usize,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("covariance dimension must be positive"));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::validation(format!("lambda must be positive, got {lambda}")));
        }
        Ok(Self { sigma: Matrix::identity(dim, dim) * lambda, lambda, count: 0 })
    }

    pub fn sigma(&self) -> &Matrix {
        &self.sigma
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    /// Adds one feature row in place.
    pub fn push(&mut self, phi: &Vector) -> Result<()> {
        if phi.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), actual: phi.len() });
        }
        self.sigma.ger(1.0, phi, phi, 1.0);
        self.count += 1;
        Ok(())
    }

    pub fn inverse(&self) -> Result<Matrix> {
        linalg::spd_inverse(&self.sigma)
    }
}

/// Returns `acc` with `sum phi phi^T` over `phi_rows` added.
pub fn update_covariance(acc: &CovarianceAccumulator, phi_rows: &[Vector]) -> Result<CovarianceAccumulator> {
    if let Some(bad) = phi_rows.iter().find(|r| r.len() != acc.dim()) {
        return Err(Error::DimensionMismatch { expected: acc.dim(), actual: bad.len() });
    }
    let mut out = acc.clone();
    for r in phi_rows {
        out.push(r)?;
    }
    Ok(out)
}

/// `alpha * sqrt(phi^T sigma^{-1} phi)`.
pub fn elliptical_bonus(acc: &CovarianceAccumulator, phi: &Vector, alpha: f64) -> f64 {
    let chol = acc.sigma.clone().cholesky().expect("lambda > 0 keeps sigma positive definite");
    let y = chol.solve(phi);
    alpha * phi.dot(&y).max(0.0).sqrt()
}

/// Bonus `alpha ||phi(s,a)||_{sigma^{-1}}` for every row of `phi`, as an `|S| x |A|` matrix.
pub fn bonus_matrix(acc: &CovarianceAccumulator, phi: &Matrix, alpha: f64, num_actions: usize) -> Result<Matrix> {
    if phi.ncols() != acc.dim() {
        return Err(Error::DimensionMismatch { expected: acc.dim(), actual: phi.ncols() });
    }
    let inv = acc.inverse()?;
    let proj = phi * &inv;
    let ns = phi.nrows() / num_actions;
    Ok(Matrix::from_fn(ns, num_actions, |s, a| {
        let i = mdp::sa_index(s, a, num_actions);
        alpha * proj.row(i).dot(&phi.row(i)).max(0.0).sqrt()
    }))
}

/// Covariance of the primary `(s,a)` of `data` under features `phi`.
pub fn dataset_covariance(phi: &Matrix, data: &TransitionDataset, num_actions: usize, lambda: f64) -> Result<CovarianceAccumulator> {
    let mut acc = CovarianceAccumulator::new(phi.ncols(), lambda)?;
    for t in &data.primary {
        let i = mdp::sa_index(t.s, t.a, num_actions);
        if i >= phi.nrows() {
            return Err(Error::validation(format!("transition ({}, {}) outside the feature table", t.s, t.a)));
        }
        acc.push(&phi.row(i).transpose())?;
    }
    Ok(acc)
}

// ── schedules ──

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleScales {
    pub alpha_scale: f64,
    pub lambda_scale: f64,
    pub zeta_scale: f64,
}

impl Default for ScheduleScales {
    fn default() -> Self {
        Self { alpha_scale: 1.0, lambda_scale: 1.0, zeta_scale: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub alpha: f64,
    pub lambda: f64,
    pub zeta: f64,
}

/// `zeta = c_z log(|F|/delta)/n`, `lambda = c_l d log(n|F|/delta)`,
/// `alpha = c_a d sqrt(|A| n zeta)/(1-gamma)`.
pub fn theory_schedule(
    d: usize,
    num_actions: usize,
    n: usize,
    gamma: f64,
    class_size: f64,
    delta: f64,
    scales: ScheduleScales,
) -> Schedule {
    let n = n.max(1) as f64;
    let d = d as f64;
    let zeta = scales.zeta_scale * (class_size / delta).ln() / n;
    let lambda = scales.lambda_scale * d * (n * class_size / delta).ln();
    let alpha = scales.alpha_scale * d * (num_actions as f64 * n * zeta).sqrt() / (1.0 - gamma);
    Schedule { alpha, lambda, zeta }
}

/// `sqrt(2 c d (1 + gamma^2 d/(1-gamma)^2) zeta / (1-gamma))`, the slack of
/// the optimism (`c = |A|`) and pessimism (`c = omega`) inequalities.
pub fn value_slack(c: f64, d: usize, gamma: f64, zeta: f64) -> f64 {
    let d = d as f64;
    (2.0 * c * d * (1.0 + gamma * gamma * d / (1.0 - gamma).powi(2)) * zeta.max(0.0) / (1.0 - gamma)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BonusConfig {
    pub alpha_scale: f64,
    pub lambda_scale: f64,
    /// With the theory schedule the scales multiply the schedule; otherwise
    /// they are used as constant `alpha` and `lambda`.
    pub use_theory_schedule: bool,
    /// Replaces the theory `zeta` inside the schedule.
    pub zeta_override: Option<f64>,
    pub zeta_scale: f64,
    pub delta: f64,
    pub refit_interval: usize,
}

impl Default for BonusConfig {
    fn default() -> Self {
        Self {
            alpha_scale: 1.0,
            lambda_scale: 1.0,
            use_theory_schedule: true,
            zeta_override: None,
            zeta_scale: 1.0,
            delta: 0.1,
            refit_interval: 10,
        }
    }
}

impl BonusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_scale >= 0.0 && self.alpha_scale.is_finite()) {
            return Err(Error::validation("alpha_scale must be nonnegative"));
        }
        if !(self.lambda_scale > 0.0 && self.lambda_scale.is_finite()) {
            return Err(Error::validation("lambda_scale must be positive"));
        }
        if !(self.zeta_scale > 0.0) {
            return Err(Error::validation("zeta_scale must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::validation("delta must lie in (0,1)"));
        }
        if self.refit_interval == 0 {
            return Err(Error::validation("refit_interval must be positive"));
        }
        if let Some(z) = self.zeta_override {
            if !(z >= 0.0) {
                return Err(Error::validation("zeta_override must be nonnegative"));
            }
        }
        Ok(())
    }

    /// Schedule after `n` samples.
    pub fn schedule(&self, d: usize, num_actions: usize, n: usize, gamma: f64, class_size: usize) -> Schedule {
        if !self.use_theory_schedule {
            let zeta = self.zeta_override.unwrap_or(0.0);
            return Schedule { alpha: self.alpha_scale, lambda: self.lambda_scale, zeta };
        }
        let scales = ScheduleScales { alpha_scale: self.alpha_scale, lambda_scale: self.lambda_scale, zeta_scale: self.zeta_scale };
        let mut s = theory_schedule(d, num_actions, n, gamma, class_size as f64, self.delta, scales);
        if let Some(z) = self.zeta_override {
            s.zeta = z;
            s.alpha = self.alpha_scale * d as f64 * (num_actions as f64 * n.max(1) as f64 * z).sqrt() / (1.0 - gamma);
        }
        s
    }
}

// ── planning ──

/// Planning reward `clamp(r + signed_bonus, 0, ceiling)`.
pub fn shaped_reward(reward: &Matrix, signed_bonus: &Matrix, ceiling: f64) -> Matrix {
    reward.zip_map(signed_bonus, |r, b| (r + b).max(0.0).min(ceiling))
}

/// A plan on a learned model: the projected kernel, the shaped reward and
/// the optimal values and greedy policy in that model.
#[derive(Clone, Debug)]
pub struct ModelPlan {
    pub kernel: Matrix,
    pub reward: Matrix,
    pub values: ValueFunctions,
    pub policy: Policy,
}

/// Value iteration on the simplex-projected model kernel with reward
/// `clamp(r + signed_bonus, 0, ceiling)`. Online exploration passes `+b`,
/// offline optimization `-b`; both go through this function.
pub fn plan_on_model(
    model: &FeatureModel,
    reward: &Matrix,
    signed_bonus: &Matrix,
    ceiling: f64,
    gamma: f64,
    warm_start: Option<&Matrix>,
) -> Result<ModelPlan> {
    let kernel = model_to_kernel(model, true);
    let shaped = shaped_reward(reward, signed_bonus, ceiling);
    let zeros;
    let q0 = match warm_start {
        Some(q) => q,
        None => {
            zeros = Matrix::zeros(reward.nrows(), reward.ncols());
            &zeros
        }
    };
    let (values, policy) =
        mdp::value_iteration_from(&kernel, &shaped, gamma, mdp::DEFAULT_VI_TOL, mdp::DEFAULT_VI_MAX_ITER, q0)?;
    Ok(ModelPlan { kernel, reward: shaped, values, policy })
}

/// Reward ceiling `1 + alpha / sqrt(lambda)`.
pub fn reward_ceiling(alpha: f64, lambda: f64) -> f64 {
    1.0 + alpha / lambda.sqrt()
}

// ── run loop ──

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub episode: usize,
    pub value_optimal: f64,
    pub value_current: f64,
    pub regret_cumulative: f64,
    pub bonus_mean: f64,
    pub l2_model_error: f64,
    pub optimism_margin: f64,
}

/// Column names of the run CSV, in order.
pub const RUN_RECORD_COLUMNS: [&str; 7] =
    ["episode", "value_optimal", "value_current", "regret_cumulative", "bonus_mean", "l2_model_error", "optimism_margin"];

#[derive(Clone, Debug)]
pub struct OnlineRun {
    pub records: Vec<RunRecord>,
    /// Policy planned after the last episode.
    pub policy: Policy,
    pub model: FeatureModel,
}

/// `max(E_{rho_n x U} ||P_hat - P||^2, E_{rho'_n x U} ||P_hat - P||^2)` where
/// `rho_n` is a state distribution and `rho'_n` its one-step successor
/// distribution under uniform actions.
pub fn model_error_under(mdp: &LowRankMdp, model_kernel: &Matrix, rho_n: &Vector) -> Result<f64> {
    let na = mdp.num_actions();
    let ns = mdp.num_states();
    let w = Vector::from_fn(ns * na, |i, _| rho_n[i / na] / na as f64);
    let next = mdp.kernel().transpose() * &w;
    let w_next = Vector::from_fn(ns * na, |i, _| next[i / na] / na as f64);
    let a = objective::kernel_l2_error(model_kernel, mdp.kernel(), &w)?;
    let b = objective::kernel_l2_error(model_kernel, mdp.kernel(), &w_next)?;
    Ok(a.max(b))
}

/// Runs `episodes` rounds of optimistic exploration. Metrics use exact
/// evaluation on the true MDP, which the agent never sees.
pub fn run_online(
    mdp: &LowRankMdp,
    config: &BonusConfig,
    learner_config: &LearnerConfig,
    episodes: usize,
    seed: u64,
) -> Result<OnlineRun> {
    config.validate()?;
    if episodes == 0 {
        return Err(Error::validation("episodes must be at least 1"));
    }
    let (ns, na, gamma) = (mdp.num_states(), mdp.num_actions(), mdp.gamma());
    let mut learner = Learner::new(learner_config, mdp, rng::derive_seed(seed, streams::DECOYS))?;
    let d = learner.dim();
    let class_size = learner.class_size();
    let mut rng = rng::child_rng(seed, streams::ONLINE_EPISODES);
    let reward = mdp.reward();
    let (optimal_values, optimal_policy) = mdp.solve()?;
    let v_opt = optimal_values.value_at(mdp.rho());

    let mut policy = Policy::uniform(ns, na);
    let mut data = TransitionDataset::default();
    let mut model: Option<FeatureModel> = None;
    let mut q_warm: Option<Matrix> = None;
    let mut rho_sum = Vector::zeros(ns);
    let mut regret = 0.0;
    let mut records = Vec::with_capacity(episodes);

    for episode in 1..=episodes {
        let v_current = mdp.policy_value(&policy)?;
        regret += (v_opt - v_current).max(0.0);
        rho_sum += &mdp::occupancy(mdp, &policy)?.d_s;

        data.push(mdp::sample_episode_transition_with(mdp, &policy, &mut rng));
        if model.is_none() || episode % config.refit_interval == 0 {
            model = Some(learner.fit(&data)?);
        }
        let m = model.as_ref().expect("fitted above");

        let sched = config.schedule(d, na, data.len(), gamma, class_size);
        let acc = dataset_covariance(m.phi_hat(), &data, na, sched.lambda)?;
        let bonus = bonus_matrix(&acc, m.phi_hat(), sched.alpha, na)?;
        let ceiling = reward_ceiling(sched.alpha, sched.lambda);
        let plan = plan_on_model(m, &reward, &bonus, ceiling, gamma, q_warm.as_ref())?;

        let rho_n = &rho_sum / episode as f64;
        let l2 = model_error_under(mdp, &m.raw_kernel(), &rho_n)?;
        let optimistic = mdp::policy_evaluation(&plan.kernel, &plan.reward, &optimal_policy, gamma)?.value_at(mdp.rho());
        let margin = optimistic - v_opt + value_slack(na as f64, d, gamma, l2);

        records.push(RunRecord {
            episode,
            value_optimal: v_opt,
            value_current: v_current,
            regret_cumulative: regret,
            bonus_mean: bonus.mean(),
            l2_model_error: l2,
            optimism_margin: margin,
        });
        q_warm = Some(plan.values.q.clone());
        policy = plan.policy;
    }
    Ok(OnlineRun { records, policy, model: model.expect("at least one episode") })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::LearnerMethod;
    use crate::mdp::{generate_random_mdp, gridworld};
    use proptest::prelude::*;
    use rand::Rng as _;

    #[test]
    fn covariance_examples() {
        let acc = CovarianceAccumulator::new(3, 1.0).unwrap();
        assert_eq!(update_covariance(&acc, &[]).unwrap(), acc);
        let e1 = Vector::from_vec(vec![1.0, 0.0, 0.0]);
        let one = update_covariance(&acc, &[e1.clone()]).unwrap();
        assert_eq!(one.sigma(), &Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 1.0, 1.0])));
        assert_eq!(one.count(), 1);
        assert!(matches!(update_covariance(&acc, &[Vector::zeros(2)]), Err(Error::DimensionMismatch { .. })));
        assert!(CovarianceAccumulator::new(3, 0.0).is_err());
    }

    #[test]
    fn bonus_examples() {
        let mut acc = CovarianceAccumulator::new(2, 4.0).unwrap();
        let phi = Vector::from_vec(vec![0.6, 0.8]);
        assert!((elliptical_bonus(&acc, &phi, 2.0) - 1.0).abs() < 1e-15);
        assert_eq!(elliptical_bonus(&acc, &Vector::zeros(2), 2.0), 0.0);
        acc.push(&phi).unwrap();
        let m = bonus_matrix(&acc, &Matrix::from_row_slice(2, 2, &[0.6, 0.8, 0.0, 0.0]), 2.0, 2).unwrap();
        assert!((m[(0, 0)] - elliptical_bonus(&acc, &phi, 2.0)).abs() < 1e-14);
        assert_eq!(m[(0, 1)], 0.0);
    }

    #[test]
    fn bonus_never_grows_when_its_direction_is_added() {
        let mut r = rng::rng_from_seed(17);
        for _ in 0..1000 {
            let d = r.random_range(1..=6);
            let lambda = r.random_range(0.1..5.0);
            let mut acc = CovarianceAccumulator::new(d, lambda).unwrap();
            for _ in 0..r.random_range(0..10) {
                acc.push(&Vector::from_fn(d, |_, _| r.random::<f64>() - 0.5)).unwrap();
            }
            let phi = Vector::from_fn(d, |_, _| r.random::<f64>() * 2.0 - 1.0);
            let before = elliptical_bonus(&acc, &phi, 1.5);
            acc.push(&phi).unwrap();
            assert!(elliptical_bonus(&acc, &phi, 1.5) <= before + 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn covariance_is_order_free(seed in 0u64..10_000) {
            let mut r = rng::rng_from_seed(seed);
            let rows: Vec<Vector> = (0..20).map(|_| Vector::from_fn(4, |_, _| r.random::<f64>() - 0.5)).collect();
            let mut rev = rows.clone();
            rev.reverse();
            let acc = CovarianceAccumulator::new(4, 1.0).unwrap();
            let a = update_covariance(&acc, &rows).unwrap();
            let b = update_covariance(&acc, &rev).unwrap();
            prop_assert!((a.sigma() - b.sigma()).amax() <= 1e-14);
            prop_assert!(a.sigma() == &a.sigma().transpose());
            let min_eig = (a.sigma() - Matrix::identity(4, 4)).symmetric_eigenvalues().min();
            prop_assert!(min_eig >= -1e-10);
        }

        #[test]
        fn bonus_is_bounded_by_alpha_over_sqrt_lambda(seed in 0u64..10_000) {
            let mut r = rng::rng_from_seed(seed);
            let lambda = r.random_range(0.5..4.0);
            let mut acc = CovarianceAccumulator::new(3, lambda).unwrap();
            for _ in 0..5 {
                acc.push(&Vector::from_fn(3, |_, _| r.random::<f64>())).unwrap();
            }
            let mut phi = Vector::from_fn(3, |_, _| r.random::<f64>() - 0.5);
            phi /= phi.norm().max(1.0);
            prop_assert!(elliptical_bonus(&acc, &phi, 2.0) <= 2.0 / lambda.sqrt() + 1e-12);
        }
    }

    #[test]
    fn schedule_examples() {
        let e = std::f64::consts::E;
        let s = theory_schedule(1, 1, 1, 0.5, e, 1.0 / e, ScheduleScales::default());
        assert!((s.zeta - 2.0).abs() < 1e-14);
        assert!((s.lambda - 2.0).abs() < 1e-14);
        assert!((s.alpha - 2.0 * 2f64.sqrt()).abs() < 1e-14);
        let a1 = theory_schedule(3, 4, 10, 0.9, 32.0, 0.1, ScheduleScales::default());
        let a2 = theory_schedule(3, 4, 1000, 0.9, 32.0, 0.1, ScheduleScales::default());
        assert!((a1.alpha - a2.alpha).abs() < 1e-12);
        let b = theory_schedule(3, 4, 10, 0.9, 64.0, 0.1, ScheduleScales::default());
        assert!((b.lambda - a1.lambda - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rebuilt_covariance_matches_incremental() {
        let mdp = generate_random_mdp(8, 3, 2, 5).unwrap();
        let data = mdp::sample_occupancy_dataset(&mdp, &Policy::uniform(8, 3), 200, 1).unwrap();
        let phi = mdp.phi_star();
        let mut inc = CovarianceAccumulator::new(2, 1.5).unwrap();
        for t in &data.primary {
            inc = update_covariance(&inc, &[phi.row(mdp::sa_index(t.s, t.a, 3)).transpose()]).unwrap();
        }
        let rebuilt = dataset_covariance(phi, &data, 3, 1.5).unwrap();
        assert!((inc.sigma() - rebuilt.sigma()).amax() <= 1e-10);
    }

    fn oracle_config(dim: Option<usize>) -> LearnerConfig {
        LearnerConfig { method: LearnerMethod::SvdOracle, dim, ..LearnerConfig::default() }
    }

    #[test]
    fn single_state_has_no_regret() {
        let mdp = crate::mdp::tests::one_state();
        let run = run_online(&mdp, &BonusConfig::default(), &oracle_config(None), 20, 1).unwrap();
        assert!(run.records.iter().all(|r| r.regret_cumulative == 0.0));
    }

    #[test]
    fn exact_model_without_bonus_is_optimal_after_one_episode() {
        let mdp = generate_random_mdp(10, 3, 3, 8).unwrap();
        let cfg = BonusConfig { alpha_scale: 0.0, ..BonusConfig::default() };
        let run = run_online(&mdp, &cfg, &oracle_config(Some(3)), 5, 2).unwrap();
        for r in &run.records[1..] {
            assert!((r.value_current - r.value_optimal).abs() < 1e-8, "{r:?}");
        }
        assert!((mdp.policy_value(&run.policy).unwrap() - run.records[0].value_optimal).abs() < 1e-8);
    }

    #[test]
    fn records_are_consistent_and_deterministic() {
        let mdp = gridworld(3, 0.1, 0.9).unwrap();
        let cfg = BonusConfig { alpha_scale: 0.05, ..BonusConfig::default() };
        let lc = LearnerConfig { method: LearnerMethod::Erm, num_decoys: 7, ..LearnerConfig::default() };
        let a = run_online(&mdp, &cfg, &lc, 30, 4).unwrap();
        let b = run_online(&mdp, &cfg, &lc, 30, 4).unwrap();
        assert_eq!(a.records, b.records);
        for w in a.records.windows(2) {
            assert!(w[1].regret_cumulative >= w[0].regret_cumulative);
        }
        assert!(a.records.iter().all(|r| r.bonus_mean >= 0.0 && r.l2_model_error >= 0.0));
    }

    #[test]
    fn shaped_reward_stays_in_range() {
        let r = Matrix::from_row_slice(1, 3, &[0.0, 0.5, 1.0]);
        let b = Matrix::from_row_slice(1, 3, &[-0.2, 0.3, 2.0]);
        assert_eq!(shaped_reward(&r, &b, 1.5), Matrix::from_row_slice(1, 3, &[0.0, 0.8, 1.5]));
    }

    #[test]
    fn model_error_of_truth_is_zero() {
        let mdp = generate_random_mdp(6, 2, 2, 3).unwrap();
        let e = model_error_under(&mdp, mdp.kernel(), &objective::uniform(6)).unwrap();
        assert_eq!(e, 0.0);
        let w = linalg::max_abs(&(model_to_kernel(&FeatureModel::from_truth(&mdp, &objective::uniform(6)).unwrap(), true) - mdp.kernel()));
        assert!(w < 1e-12);
    }
}
