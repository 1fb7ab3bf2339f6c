//! Two-phase latent behavior cloning.
//!
//! Pretraining fits an action decoder `pi(a | s, z)` with `z = phi_hat(s, a)`
//! on suboptimal data. The downstream phase fits a per-state Gaussian latent
//! policy `pi_Z(z | s)` on expert data; the cloned policy integrates the
//! decoder over `pi_Z`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::mdp::{self, LowRankMdp, Policy, TransitionDataset};
use crate::objective::FeatureModel;
use crate::rng::{self, streams};

/// Floor on the latent variances fitted from data.
pub const VARIANCE_FLOOR: f64 = 1e-4;
const INIT_SCALE: f64 = 0.01;

/// Softmax of each row of `q / temperature`.
pub fn softmax_policy_from_q(q: &Matrix, temperature: f64) -> Result<Policy> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::validation(format!("temperature must be positive, got {temperature}")));
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation("q has non-finite entries"));
    }
    let mut p = Matrix::zeros(q.nrows(), q.ncols());
    for s in 0..q.nrows() {
        let row: Vec<f64> = q.row(s).iter().map(|x| x / temperature).collect();
        let probs = softmax(&row);
        for (a, v) in probs.into_iter().enumerate() {
            p[(s, a)] = v;
        }
    }
    Policy::new(p)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|x| x / sum).collect()
}

/// Bilinear-softmax decoder: `logit(a) = w_a^T [onehot(s); z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModel {
    /// `|A| x (|S| + d)`
    weights: Matrix,
    num_states: usize,
    dim: usize,
}

impl DecoderModel {
    pub fn new(weights: Matrix, num_states: usize, dim: usize) -> Result<Self> {
        if weights.ncols() != num_states + dim {
            return Err(Error::DimensionMismatch { expected: num_states + dim, actual: weights.ncols() });
        }
        if weights.nrows() == 0 {
            return Err(Error::validation("decoder needs at least one action"));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::validation("decoder weights must be finite"));
        }
        Ok(Self { weights, num_states, dim })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn num_actions(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn logits(&self, s: usize, z: &[f64]) -> Vec<f64> {
        (0..self.num_actions())
            .map(|a| {
                let w = self.weights.row(a);
                w[s] + z.iter().enumerate().map(|(k, zk)| w[self.num_states + k] * zk).sum::<f64>()
            })
            .collect()
    }

    /// `pi(. | s, z)`.
    pub fn action_probs(&self, s: usize, z: &[f64]) -> Vec<f64> {
        softmax(&self.logits(s, z))
    }
}

/// Distinct observed `(s, a)` pairs of the primary triples with their
/// latent codes and normalized counts.
struct PairBatch {
    states: Vec<usize>,
    actions: Vec<usize>,
    weights: Vec<f64>,
    /// `pairs x d`
    z: Matrix,
}

impl PairBatch {
    fn new(model: &FeatureModel, data: &TransitionDataset) -> Result<Self> {
        let (ns, na) = (model.num_states(), model.num_actions());
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        data.validate(ns, na)?;
        let mut counts = vec![0.0; ns * na];
        for t in &data.primary {
            counts[mdp::sa_index(t.s, t.a, na)] += 1.0;
        }
        let rows: Vec<usize> = (0..ns * na).filter(|&i| counts[i] > 0.0).collect();
        let total = data.len() as f64;
        Ok(Self {
            states: rows.iter().map(|i| i / na).collect(),
            actions: rows.iter().map(|i| i % na).collect(),
            weights: rows.iter().map(|&i| counts[i] / total).collect(),
            z: model.phi_hat().select_rows(&rows),
        })
    }

    /// Weighted mean NLL and, if asked, its gradient in the decoder weights.
    fn nll(&self, decoder: &DecoderModel, with_grad: bool) -> (f64, Option<Matrix>) {
        let ns = decoder.num_states;
        let wz = decoder.weights.columns(ns, decoder.dim);
        let mut logits = &self.z * wz.transpose();
        let mut nll = 0.0;
        for (p, mut row) in logits.row_iter_mut().enumerate() {
            for a in 0..row.len() {
                row[a] += decoder.weights[(a, self.states[p])];
            }
            let max = row.max();
            let label = row[self.actions[p]] - max;
            row.apply(|x| *x = (*x - max).exp());
            let sum = row.sum();
            nll += self.weights[p] * (sum.ln() - label);
            // row now holds the residual softmax - onehot, scaled by the weight
            row /= sum;
            row[self.actions[p]] -= 1.0;
            row *= self.weights[p];
        }
        if !with_grad {
            return (nll, None);
        }
        let mut grad = Matrix::zeros(decoder.num_actions(), ns + decoder.dim);
        grad.columns_mut(ns, decoder.dim).copy_from(&(logits.transpose() * &self.z));
        for (p, row) in logits.row_iter().enumerate() {
            for a in 0..row.len() {
                grad[(a, self.states[p])] += row[a];
            }
        }
        (nll, Some(grad))
    }
}

/// Mean `-log pi(a_i | s_i, phi_hat(s_i, a_i))` over the primary triples of `data`.
pub fn decoder_nll(decoder: &DecoderModel, model: &FeatureModel, data: &TransitionDataset) -> Result<f64> {
    if decoder.num_states != model.num_states() || decoder.dim != model.dim() {
        return Err(Error::DimensionMismatch { expected: decoder.num_states + decoder.dim, actual: model.num_states() + model.dim() });
    }
    Ok(PairBatch::new(model, data)?.nll(decoder, false).0)
}

/// Result of decoder pretraining.
#[derive(Clone, Debug)]
pub struct DecoderFit {
    pub decoder: DecoderModel,
    pub initial_nll: f64,
    pub final_nll: f64,
}

/// Full-batch gradient descent on the mean decoder NLL over the primary
/// triples of `offline_data`, starting from a seeded small random
/// initialization. `steps = 0` returns the initialization.
pub fn pretrain_decoder(
    model: &FeatureModel,
    offline_data: &TransitionDataset,
    steps: usize,
    step_size: f64,
    seed: u64,
) -> Result<DecoderFit> {
    let (ns, na, d) = (model.num_states(), model.num_actions(), model.dim());
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(Error::validation("step_size must be positive"));
    }
    let batch = PairBatch::new(model, offline_data)?;
    let mut r = rng::child_rng(seed, streams::DECODER_INIT);
    let normal = StandardNormal;
    let w = Matrix::from_fn(na, ns + d, |_, _| INIT_SCALE * Distribution::<f64>::sample(&normal, &mut r));
    let mut decoder = DecoderModel::new(w, ns, d)?;
    let (initial_nll, mut grad) = batch.nll(&decoder, steps > 0);
    let mut nll = initial_nll;
    for step in 0..steps {
        decoder.weights -= grad.expect("gradient requested") * step_size;
        let (value, g) = batch.nll(&decoder, step + 1 < steps);
        if !value.is_finite() || decoder.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::DivergenceDetected { step, total: value });
        }
        nll = value;
        grad = g;
    }
    Ok(DecoderFit { decoder, initial_nll, final_nll: nll })
}

/// Per-state Gaussian latent policy with a shared diagonal variance.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPolicyModel {
    /// `|S| x d`
    means: Matrix,
    variance: Vector,
}

impl LatentPolicyModel {
    /// Zero variances are allowed and make `pi_Z(. | s)` a point mass.
    pub fn new(means: Matrix, variance: Vector) -> Result<Self> {
        if variance.len() != means.ncols() {
            return Err(Error::DimensionMismatch { expected: means.ncols(), actual: variance.len() });
        }
        if variance.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::validation("latent variances must be finite and nonnegative"));
        }
        Ok(Self { means, variance })
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn variance(&self) -> &Vector {
        &self.variance
    }

    /// Mean Gaussian negative log-density of the targets `z = phi_hat(s, a)`
    /// of the primary triples of `data`.
    pub fn nll(&self, model: &FeatureModel, data: &TransitionDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.variance.iter().any(|&v| v <= 0.0) {
            return Err(Error::validation("density needs positive variances"));
        }
        let na = model.num_actions();
        let log_norm: f64 = self.variance.iter().map(|v| 0.5 * (2.0 * std::f64::consts::PI * v).ln()).sum();
        let mut acc = 0.0;
        for t in &data.primary {
            let z = model.phi_hat().row(mdp::sa_index(t.s, t.a, na));
            let q: f64 = (0..z.len()).map(|k| (z[k] - self.means[(t.s, k)]).powi(2) / (2.0 * self.variance[k])).sum();
            acc += q + log_norm;
        }
        Ok(acc / data.len() as f64)
    }
}

/// Maximum-likelihood latent policy: per-state sample means of
/// `z = phi_hat(s, a)` over expert visits (global mean for unvisited
/// states) and the pooled within-state variance per coordinate, floored at
/// [`VARIANCE_FLOOR`].
pub fn fit_latent_policy(model: &FeatureModel, expert_data: &TransitionDataset) -> Result<LatentPolicyModel> {
    let (ns, na, d) = (model.num_states(), model.num_actions(), model.dim());
    if expert_data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    expert_data.validate(ns, na)?;
    let mut sums = Matrix::zeros(ns, d);
    let mut visits = vec![0usize; ns];
    for t in &expert_data.primary {
        let z = model.phi_hat().row(mdp::sa_index(t.s, t.a, na));
        let mut row = sums.row_mut(t.s);
        row += z;
        visits[t.s] += 1;
    }
    let global = sums.row_sum() / expert_data.len() as f64;
    let mut means = Matrix::zeros(ns, d);
    for s in 0..ns {
        if visits[s] > 0 {
            means.set_row(s, &(sums.row(s) / visits[s] as f64));
        } else {
            means.set_row(s, &global);
        }
    }
    let mut variance = Vector::zeros(d);
    for t in &expert_data.primary {
        let z = model.phi_hat().row(mdp::sa_index(t.s, t.a, na));
        for k in 0..d {
            variance[k] += (z[k] - means[(t.s, k)]).powi(2);
        }
    }
    variance /= expert_data.len() as f64;
    variance.apply(|v| *v = v.max(VARIANCE_FLOOR));
    LatentPolicyModel::new(means, variance)
}

/// `pi(a|s) = E_{z ~ pi_Z(.|s)} pi(a|s,z)` estimated with `num_z_samples`
/// draws per state; exact when every variance is zero.
pub fn compose_policy(
    latent: &LatentPolicyModel,
    decoder: &DecoderModel,
    num_z_samples: usize,
    seed: u64,
) -> Result<Policy> {
    if num_z_samples == 0 {
        return Err(Error::validation("num_z_samples must be at least 1"));
    }
    let (ns, d) = (latent.means.nrows(), latent.means.ncols());
    if decoder.num_states() != ns || decoder.dim() != d {
        return Err(Error::DimensionMismatch { expected: decoder.num_states() + decoder.dim(), actual: ns + d });
    }
    let na = decoder.num_actions();
    let point_mass = latent.variance.iter().all(|&v| v == 0.0);
    let sd: Vec<f64> = latent.variance.iter().map(|v| v.sqrt()).collect();
    let mut r = rng::child_rng(seed, streams::LATENT_SAMPLES);
    let normal = StandardNormal;
    let mut probs = Matrix::zeros(ns, na);
    for s in 0..ns {
        let mean: Vec<f64> = latent.means.row(s).iter().copied().collect();
        if point_mass {
            for (a, p) in decoder.action_probs(s, &mean).into_iter().enumerate() {
                probs[(s, a)] = p;
            }
            continue;
        }
        let mut z = vec![0.0; d];
        for _ in 0..num_z_samples {
            for k in 0..d {
                let e: f64 = Distribution::<f64>::sample(&normal, &mut r);
                z[k] = mean[k] + sd[k] * e;
            }
            for (a, p) in decoder.action_probs(s, &z).into_iter().enumerate() {
                probs[(s, a)] += p / num_z_samples as f64;
            }
        }
    }
    Ok(Policy::from_weights(probs))
}

/// Behavior cloning directly on actions: empirical action frequencies per
/// visited state, uniform elsewhere.
pub fn direct_bc_policy(expert_data: &TransitionDataset, num_states: usize, num_actions: usize) -> Result<Policy> {
    expert_data.validate(num_states, num_actions)?;
    let mut counts = Matrix::zeros(num_states, num_actions);
    for t in &expert_data.primary {
        counts[(t.s, t.a)] += 1.0;
    }
    for s in 0..num_states {
        if counts.row(s).sum() == 0.0 {
            counts.row_mut(s).fill(1.0);
        }
    }
    Ok(Policy::from_weights(counts))
}

/// `epsilon`-greedy version of the optimal policy.
pub fn expert_policy(mdp: &LowRankMdp, epsilon: f64) -> Result<Policy> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::validation("epsilon must lie in [0,1]"));
    }
    Ok(mdp.solve()?.1.epsilon_mix(epsilon))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcConfig {
    pub decoder_steps: usize,
    pub decoder_step_size: f64,
    pub num_z_samples: usize,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self { decoder_steps: 50_000, decoder_step_size: 3.0, num_z_samples: 256, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcMetrics {
    /// Final decoder NLL on the offline data.
    pub pretrain_nll: f64,
    /// Latent Gaussian NLL of the expert targets.
    pub bc_nll: f64,
    pub return_expert: f64,
    pub return_cloned: f64,
    pub return_bc_baseline: f64,
}

/// Both phases plus exact evaluation of the expert (`expert_policy`), the
/// cloned and the direct-BC policies.
pub fn run_latent_bc(
    mdp: &LowRankMdp,
    model: &FeatureModel,
    expert_policy: &Policy,
    expert_data: &TransitionDataset,
    offline_data: &TransitionDataset,
    config: &BcConfig,
) -> Result<(BcMetrics, Policy)> {
    model.check_compatible(mdp.num_states(), mdp.num_actions())?;
    let fit = pretrain_decoder(model, offline_data, config.decoder_steps, config.decoder_step_size, config.seed)?;
    let latent = fit_latent_policy(model, expert_data)?;
    let cloned = compose_policy(&latent, &fit.decoder, config.num_z_samples, config.seed)?;
    let baseline = direct_bc_policy(expert_data, mdp.num_states(), mdp.num_actions())?;
    let metrics = BcMetrics {
        pretrain_nll: fit.final_nll,
        bc_nll: latent.nll(model, expert_data)?,
        return_expert: mdp.policy_value(expert_policy)?,
        return_cloned: mdp.policy_value(&cloned)?,
        return_bc_baseline: mdp.policy_value(&baseline)?,
    };
    Ok((metrics, cloned))
}
