//! Pessimistic policy optimization from a fixed behavior dataset, and the
//! coverage diagnostics `omega` and the relative condition number.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{Learner, LearnerConfig};
use crate::linalg::{self, Matrix, Vector};
use crate::mdp::{self, LowRankMdp, Policy, TransitionDataset};
use crate::objective::{model_to_kernel, FeatureModel};
use crate::online::{self, bonus_matrix, plan_on_model, reward_ceiling, value_slack, CovarianceAccumulator};
use crate::rng::{self, streams};

/// Eigenvalue floor of the generalized eigensolve, relative to the largest
/// eigenvalue of the behavior moment.
const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfflineConfig {
    pub alpha_scale: f64,
    pub lambda_scale: f64,
    pub zeta_scale: f64,
    /// `max_{s,a} 1 / pi_b(a|s)`.
    pub omega: f64,
    pub delta: f64,
}

impl OfflineConfig {
    /// Default scales with `omega` computed from `behavior`.
    pub fn for_behavior(behavior: &Policy) -> Self {
        Self { alpha_scale: 1.0, lambda_scale: 1.0, zeta_scale: 1.0, omega: omega(behavior), delta: 0.1 }
    }

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
        if !(self.omega >= 1.0 && self.omega.is_finite()) {
            return Err(Error::validation(format!(
                "omega must be finite and at least 1, got {} (does the behavior policy have full support?)",
                self.omega
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::validation("delta must lie in (0,1)"));
        }
        Ok(())
    }

    /// `zeta = c_z log(|F|/delta)/n`, `lambda = c_l d log(|F|/delta)`,
    /// `alpha = c_a d sqrt(omega n zeta)/(1-gamma)`.
    pub fn schedule(&self, d: usize, n: usize, gamma: f64, class_size: usize) -> online::Schedule {
        let log_f = (class_size as f64 / self.delta).ln();
        let zeta = self.zeta_scale * log_f / n.max(1) as f64;
        let lambda = self.lambda_scale * d as f64 * log_f;
        let alpha = self.alpha_scale * d as f64 * (self.omega * n.max(1) as f64 * zeta).sqrt() / (1.0 - gamma);
        online::Schedule { alpha, lambda, zeta }
    }
}

/// `max_{s,a} 1/pi_b(a|s)`; infinite when some action has zero probability.
pub fn omega(behavior: &Policy) -> f64 {
    behavior.probs().iter().map(|&p| if p > 0.0 { 1.0 / p } else { f64::INFINITY }).fold(1.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfflineRecord {
    pub value_optimal: f64,
    pub value_policy: f64,
    pub value_behavior: f64,
    pub penalty_mean: f64,
    pub l2_model_error: f64,
    pub pessimism_margin: f64,
    #[serde(with = "crate::io::extended_f64")]
    pub relative_condition_number: f64,
    pub omega: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub zeta: f64,
}

#[derive(Clone, Debug)]
pub struct OfflineRun {
    pub policy: Policy,
    pub record: OfflineRecord,
    pub model: FeatureModel,
    pub penalty: Matrix,
}

/// `lambda_max(B^{-1/2} A B^{-1/2})` for PSD moments `A`, `B`; infinite when
/// `A` has mass outside the range of `B`.
pub fn relative_condition_number_moments(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() || a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch { expected: b.len(), actual: a.len() });
    }
    let eig = linalg::symmetrize(b).symmetric_eigen();
    let top = eig.eigenvalues.max().max(0.0);
    let scale = a.trace().abs().max(1e-300);
    let mut keep = Vec::new();
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        let u = eig.eigenvectors.column(k);
        if l > EIGEN_FLOOR * top.max(1e-300) {
            keep.push(k);
        } else if (u.transpose() * a * u)[0] > EIGEN_FLOOR * scale {
            return Ok(f64::INFINITY);
        }
    }
    if keep.is_empty() {
        return Ok(if a.amax() > 0.0 { f64::INFINITY } else { 0.0 });
    }
    let w = Matrix::from_fn(a.nrows(), keep.len(), |i, j| {
        let k = keep[j];
        eig.eigenvectors[(i, k)] / eig.eigenvalues[k].sqrt()
    });
    let whitened = linalg::symmetrize(&(w.transpose() * a * &w));
    Ok(whitened.symmetric_eigenvalues().max().max(0.0))
}

/// `C*` of `target` against a behavior distribution over `(s,a)` rows, with
/// the true features.
pub fn relative_condition_number(mdp: &LowRankMdp, target: &Policy, behavior_occupancy: &Vector) -> Result<f64> {
    if behavior_occupancy.len() != mdp.num_rows() {
        return Err(Error::DimensionMismatch { expected: mdp.num_rows(), actual: behavior_occupancy.len() });
    }
    let d_target = mdp::occupancy(mdp, target)?.d_sa;
    let a = linalg::weighted_second_moment(mdp.phi_star(), &d_target);
    let b = linalg::weighted_second_moment(mdp.phi_star(), behavior_occupancy);
    relative_condition_number_moments(&a, &b)
}

/// `V_{P,r}^pi + slack - V_{P_hat, r - b}^pi` at `rho`, with the projected
/// model kernel and the unclipped penalized reward. `slack` uses `omega` and
/// the measured model error `zeta`.
pub fn pessimism_margin(
    mdp: &LowRankMdp,
    model: &FeatureModel,
    penalty: &Matrix,
    policy: &Policy,
    omega: f64,
    zeta: f64,
) -> Result<f64> {
    let kernel = model_to_kernel(model, true);
    pessimism_margin_kernel(mdp, &kernel, penalty, policy, value_slack(omega, model.dim(), mdp.gamma(), zeta))
}

/// Kernel-level variant of [`pessimism_margin`] with an explicit slack.
pub fn pessimism_margin_kernel(
    mdp: &LowRankMdp,
    model_kernel: &Matrix,
    penalty: &Matrix,
    policy: &Policy,
    slack: f64,
) -> Result<f64> {
    let reward = mdp.reward();
    let pessimistic = mdp::policy_evaluation(model_kernel, &(&reward - penalty), policy, mdp.gamma())?;
    Ok(mdp.policy_value(policy)? + slack - pessimistic.value_at(mdp.rho()))
}

/// Fits the representation on `dataset`, penalizes every `(s,a)` by
/// `alpha ||phi_hat(s,a)||_{Sigma^{-1}}` with `Sigma` built from every
/// `(s,a)` in the dataset, and plans on the projected model with reward
/// `max(r - b, 0)`.
pub fn run_offline(
    mdp: &LowRankMdp,
    dataset: &TransitionDataset,
    behavior: &Policy,
    config: &OfflineConfig,
    learner_config: &LearnerConfig,
    seed: u64,
) -> Result<OfflineRun> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (ns, na, gamma) = (mdp.num_states(), mdp.num_actions(), mdp.gamma());
    dataset.validate(ns, na)?;
    behavior.check_dims(ns, na)?;
    if let Some(t) = dataset.all_triples().find(|t| behavior.prob(t.s, t.a) <= 0.0) {
        return Err(Error::validation(format!(
            "behavior policy gives zero probability to visited pair ({}, {})",
            t.s, t.a
        )));
    }
    let mut learner = Learner::new(learner_config, mdp, rng::derive_seed(seed, streams::DECOYS))?;
    let model = learner.fit(dataset)?;
    let d = learner.dim();
    let n = dataset.all_triples().count();
    let sched = config.schedule(d, n, gamma, learner.class_size());

    let mut acc = CovarianceAccumulator::new(d, sched.lambda)?;
    for t in dataset.all_triples() {
        acc.push(&model.phi_hat().row(mdp::sa_index(t.s, t.a, na)).transpose())?;
    }
    let penalty = bonus_matrix(&acc, model.phi_hat(), sched.alpha, na)?;
    let reward = mdp.reward();
    let plan = plan_on_model(&model, &reward, &(-&penalty), reward_ceiling(sched.alpha, sched.lambda), gamma, None)?;

    let behavior_occ = mdp::occupancy(mdp, behavior)?.d_sa;
    let l2 = crate::objective::kernel_l2_error(&model.raw_kernel(), mdp.kernel(), &behavior_occ)?;
    let (optimal, optimal_policy) = mdp.solve()?;
    let margin = pessimism_margin_kernel(
        mdp,
        &plan.kernel,
        &penalty,
        &plan.policy,
        value_slack(config.omega, d, gamma, l2),
    )?;
    let record = OfflineRecord {
        value_optimal: optimal.value_at(mdp.rho()),
        value_policy: mdp.policy_value(&plan.policy)?,
        value_behavior: mdp.policy_value(behavior)?,
        penalty_mean: penalty.mean(),
        l2_model_error: l2,
        pessimism_margin: margin,
        relative_condition_number: relative_condition_number(mdp, &optimal_policy, &behavior_occ)?,
        omega: config.omega,
        alpha: sched.alpha,
        lambda: sched.lambda,
        zeta: sched.zeta,
    };
    Ok(OfflineRun { policy: plan.policy, record, model, penalty })
}
