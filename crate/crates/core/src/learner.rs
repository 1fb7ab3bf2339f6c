//! Learners producing a [`FeatureModel`]: exact ERM over a finite candidate
//! class, penalty-method gradient descent, and the exact SVD oracle.

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::mdp::{self, LowRankMdp, TransitionDataset};
use crate::objective::{self, FeatureModel, MassHandling, Penalties, TransitionMoments};
use crate::rng::{self, streams};

// ── configuration ──

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerMethod {
    Erm,
    Gradient,
    SvdOracle,
}

impl std::str::FromStr for LearnerMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(Self::Erm),
            "gradient" => Ok(Self::Gradient),
            "svd-oracle" | "svd_oracle" => Ok(Self::SvdOracle),
            other => Err(Error::validation(format!("unknown learner '{other}'"))),
        }
    }
}

/// Update rule of the gradient learner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Full-batch Adam with exponentially decaying step size.
    Adam,
    /// Plain full-batch gradient descent with a fixed step size.
    Gd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub method: LearnerMethod,
    pub step_size: f64,
    pub max_steps: usize,
    pub lambda_ortho: f64,
    pub lambda_prob: f64,
    pub init_seed: u64,
    /// The gradient learner stops once every gradient entry is below `tol`.
    pub tol: f64,
    pub optimizer: Optimizer,
    /// Ratio of the final to the initial Adam step size.
    pub final_step_fraction: f64,
    /// Feature dimension; `None` uses the MDP's rank.
    pub dim: Option<usize>,
    /// Decoys of the ERM candidate class.
    pub num_decoys: usize,
    pub perturbation_scale: f64,
    /// Loss-curve sampling period in steps.
    pub record_every: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            method: LearnerMethod::Gradient,
            step_size: 0.05,
            max_steps: 20_000,
            lambda_ortho: 1.0,
            lambda_prob: 1.0,
            init_seed: 0,
            tol: 1e-12,
            optimizer: Optimizer::Adam,
            final_step_fraction: 1e-2,
            dim: None,
            num_decoys: 31,
            perturbation_scale: 0.3,
            record_every: 100,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::validation("step_size must be nonnegative"));
        }
        if self.max_steps == 0 {
            return Err(Error::validation("max_steps must be positive"));
        }
        if self.record_every == 0 {
            return Err(Error::validation("record_every must be positive"));
        }
        if !(self.final_step_fraction > 0.0 && self.final_step_fraction <= 1.0) {
            return Err(Error::validation("final_step_fraction must lie in (0,1]"));
        }
        if !(self.perturbation_scale >= 0.0 && self.perturbation_scale <= 1.0) {
            return Err(Error::validation("perturbation_scale must lie in [0,1]"));
        }
        if self.dim == Some(0) {
            return Err(Error::validation("dim must be positive"));
        }
        Penalties::new(self.lambda_ortho, self.lambda_prob)?;
        Ok(())
    }

    pub fn penalties(&self) -> Penalties {
        Penalties { lambda_ortho: self.lambda_ortho, lambda_prob: self.lambda_prob }
    }
}

// ── candidate classes and ERM ──

/// Finite model class with precomputed kernels.
#[derive(Clone, Debug)]
pub struct CandidateClass {
    candidates: Vec<FeatureModel>,
    contains_truth: bool,
    kernels: Vec<Matrix>,
}

impl CandidateClass {
    pub fn new(candidates: Vec<FeatureModel>, contains_truth: bool) -> Result<Self> {
        let first = candidates.first().ok_or(Error::EmptyClass)?;
        let dims = (first.num_states(), first.num_actions(), first.dim());
        for c in &candidates {
            if (c.num_states(), c.num_actions(), c.dim()) != dims {
                return Err(Error::validation("candidates must share (|S|, |A|, d)"));
            }
        }
        let kernels = candidates.iter().map(|c| objective::model_to_kernel(c, false)).collect();
        Ok(Self { candidates, contains_truth, kernels })
    }

    pub fn candidates(&self) -> &[FeatureModel] {
        &self.candidates
    }
    pub fn contains_truth(&self) -> bool {
        self.contains_truth
    }
    pub fn len(&self) -> usize {
        self.candidates.len()
    }
    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
    pub fn kernel(&self, index: usize) -> &Matrix {
        &self.kernels[index]
    }

    /// Same class with the candidate at `index` removed.
    pub fn without(&self, index: usize) -> Result<Self> {
        let mut c = self.candidates.clone();
        c.remove(index);
        Self::new(c, self.contains_truth && index != 0)
    }
}

#[derive(Clone, Debug)]
pub struct ErmFit {
    pub index: usize,
    pub model: FeatureModel,
    /// Per-sample mean of `-2 f(x, y) + sum_y' f(x, y')^2` at the selected model.
    pub erm_loss: f64,
}

/// Count matrix `N(i, s')` of all triples in `data`.
pub(crate) fn triple_counts(data: &TransitionDataset, num_states: usize, num_actions: usize) -> Matrix {
    let mut n = Matrix::zeros(num_states * num_actions, num_states);
    for t in data.all_triples() {
        n[(mdp::sa_index(t.s, t.a, num_actions), t.s_next)] += 1.0;
    }
    n
}

/// Mean ERM objective of kernel `f` against triple counts.
pub(crate) fn erm_objective(f: &Matrix, counts: &Matrix, total: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..f.nrows() {
        let row_count: f64 = counts.row(i).sum();
        if row_count == 0.0 {
            continue;
        }
        let mut cross = 0.0;
        let mut sq = 0.0;
        for j in 0..f.ncols() {
            let v = f[(i, j)];
            cross += counts[(i, j)] * v;
            sq += v * v;
        }
        acc += row_count * sq - 2.0 * cross;
    }
    acc / total
}

/// Candidate minimizing the empirical least-squares density objective;
/// ties go to the lowest index.
pub fn erm_fit(class: &CandidateClass, data: &TransitionDataset) -> Result<ErmFit> {
    if class.is_empty() {
        return Err(Error::EmptyClass);
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let first = &class.candidates[0];
    let (ns, na) = (first.num_states(), first.num_actions());
    data.validate(ns, na)?;
    let counts = triple_counts(data, ns, na);
    let total = data.all_triples().count() as f64;
    let mut best = (0, f64::INFINITY);
    for (k, f) in class.kernels.iter().enumerate() {
        let v = erm_objective(f, &counts, total);
        if v < best.1 {
            best = (k, v);
        }
    }
    Ok(ErmFit { index: best.0, model: class.candidates[best.0].clone(), erm_loss: best.1 })
}

/// Geometric decay of the decoy mixing weights.
const DECOY_RATIO: f64 = 0.94;
const DECOY_CONCENTRATION: f64 = 1.0;

fn dirichlet_vec(dim: usize, rng: &mut rng::Rng) -> Vector {
    let g = Gamma::new(DECOY_CONCENTRATION, 1.0).expect("positive shape");
    loop {
        let x = Vector::from_fn(dim, |_, _| g.sample(rng));
        let s = x.sum();
        if s > 0.0 && s.is_finite() {
            return x / s;
        }
    }
}

/// Realizable class: the true factorization followed by `num_decoys` decoys.
///
/// Writing the truth as `phi* = a` (rows on the simplex after absorbing the
/// column masses of `mu*`) and `mu*_k = m_k nu_k` with distributions `nu_k`,
/// decoy `k` mixes every row of `a` and every `nu_k` towards fresh Dirichlet
/// draws with weight `s_k = perturbation_scale * 0.94^k`. Mixtures stay on the
/// simplex, so every decoy kernel is a valid transition matrix and decoys are
/// ordered from most to least distinguishable.
pub fn build_candidate_class(
    mdp: &LowRankMdp,
    num_decoys: usize,
    perturbation_scale: f64,
    seed: u64,
) -> Result<CandidateClass> {
    let p = objective::uniform(mdp.num_states());
    let truth = FeatureModel::from_truth(mdp, &p)?;
    let d = mdp.rank();
    let mass = Vector::from_fn(d, |k, _| mdp.mu_star().column(k).sum());
    let fail = |reason: &str| Error::GenerationFailure { attempts: 1, reason: reason.into() };
    if mdp.phi_star().iter().chain(mdp.mu_star().iter()).any(|&x| x < -1e-12) {
        return Err(fail("decoys require nonnegative factors"));
    }
    if mass.iter().any(|&m| m <= 1e-12) {
        return Err(fail("a column of mu_star has no mass"));
    }
    let mut a = mdp.phi_star().clone();
    let mut nu = mdp.mu_star().clone();
    for k in 0..d {
        a.column_mut(k).scale_mut(mass[k]);
        nu.column_mut(k).unscale_mut(mass[k]);
    }
    let mut rng = rng::child_rng(seed, streams::DECOYS);
    let mut candidates = vec![truth];
    for k in 0..num_decoys {
        let s = perturbation_scale * DECOY_RATIO.powi(k as i32);
        let mut a_k = a.clone();
        for i in 0..a_k.nrows() {
            let u = dirichlet_vec(d, &mut rng);
            let row = a.row(i) * (1.0 - s) + u.transpose() * s;
            a_k.set_row(i, &row);
        }
        let mut nu_k = nu.clone();
        for c in 0..d {
            let v = dirichlet_vec(mdp.num_states(), &mut rng);
            let col = nu.column(c) * (1.0 - s) + v * s;
            nu_k.set_column(c, &col);
        }
        let model = FeatureModel::new(a_k, objective::mu_to_mu_prime(&nu_k, &p), p.clone(), mdp.num_actions())?;
        mdp::validate_kernel_rows(&model.raw_kernel(), mdp.num_actions())
            .map_err(|e| fail(&format!("decoy {k}: {e}")))?;
        candidates.push(model);
    }
    CandidateClass::new(candidates, true)
}

// ── gradient learner ──

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub main: f64,
    pub ortho: f64,
    pub prob: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct GradientFit {
    pub model: FeatureModel,
    pub best_step: usize,
    pub steps_run: usize,
    /// Loss of sampled iterates (every `record_every` steps, plus the last).
    pub curve: Vec<CurvePoint>,
}

/// Seeded initialization: i.i.d. uniform[-1,1] entries scaled by
/// `1/sqrt(d * rows)`, then `phi` whitened to `E_w[phi phi^T] = I/d`.
pub fn initial_model(
    num_states: usize,
    num_actions: usize,
    dim: usize,
    weights: &Vector,
    p: &Vector,
    seed: u64,
) -> Result<FeatureModel> {
    let mut r = rng::child_rng(seed, streams::LEARNER_INIT);
    let rows = num_states * num_actions;
    let sp = 1.0 / ((dim * rows) as f64).sqrt();
    let phi = Matrix::from_fn(rows, dim, |_, _| r.random_range(-1.0..=1.0) * sp);
    let sm = 1.0 / ((dim * num_states) as f64).sqrt();
    let mu = Matrix::from_fn(num_states, dim, |_, _| r.random_range(-1.0..=1.0) * sm);
    let phi = objective::whiten(&phi, weights, 1.0 / dim as f64).unwrap_or(phi);
    FeatureModel::new(phi, mu, p.clone(), num_actions)
}

/// Full-batch gradient fit on a dataset with base measure uniform over states.
pub fn gradient_fit(
    config: &LearnerConfig,
    data: &TransitionDataset,
    base_samples: &[usize],
    dims: (usize, usize, usize),
) -> Result<GradientFit> {
    let (ns, na, d) = dims;
    let m = TransitionMoments::from_dataset(data, base_samples, ns, na)?;
    let init = initial_model(ns, na, d, m.row_weights(), &objective::uniform(ns), config.init_seed)?;
    gradient_fit_moments(config, &m, init)
}

const DIVERGENCE_LIMIT: f64 = 1e6;

/// Minimizes the penalized objective from `init`; returns the iterate with
/// the lowest total.
///
/// Inside the loop the normalization penalty is continued linearly below a
/// small positive mass (see [`MassHandling::Extended`]), so iterates with
/// negative mass get pushed back instead of aborting the run. For iterates
/// whose masses all exceed that floor the tracked total is the exact loss.
pub fn gradient_fit_moments(config: &LearnerConfig, m: &TransitionMoments, init: FeatureModel) -> Result<GradientFit> {
    config.validate()?;
    let pen = config.penalties();
    let mut phi = init.phi_hat().clone();
    let mut mu = init.mu_prime_hat().clone();
    let mut adam = AdamState::new(&phi, &mu);
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, Matrix, Matrix)> = None;
    let mut steps_run = 0;
    for step in 0..=config.max_steps {
        let model = init.with_factors(phi.clone(), mu.clone());
        let (loss, grad) = objective::evaluate(&model, m, pen, MassHandling::Extended, true)?;
        let grad = grad.expect("gradient requested");
        if !loss.total.is_finite() || loss.total.abs() > DIVERGENCE_LIMIT {
            return Err(Error::DivergenceDetected { step, total: loss.total });
        }
        let last = step == config.max_steps || grad.phi.amax().max(grad.mu_prime.amax()) <= config.tol;
        if step % config.record_every == 0 || last {
            curve.push(CurvePoint {
                step,
                main: loss.main_term,
                ortho: loss.ortho_penalty,
                prob: loss.prob_penalty,
                total: loss.total,
            });
        }
        if best.as_ref().is_none_or(|b| loss.total < b.0) {
            best = Some((loss.total, step, phi.clone(), mu.clone()));
        }
        steps_run = step;
        if last {
            break;
        }
        match config.optimizer {
            Optimizer::Gd => {
                phi -= &grad.phi * config.step_size;
                mu -= &grad.mu_prime * config.step_size;
            }
            Optimizer::Adam => {
                let frac = step as f64 / config.max_steps as f64;
                let lr = config.step_size * config.final_step_fraction.powf(frac);
                adam.step(&mut phi, &mut mu, &grad.phi, &grad.mu_prime, lr);
            }
        }
    }
    let (_, best_step, phi, mu) = best.expect("at least one iterate");
    Ok(GradientFit { model: init.with_factors(phi, mu), best_step, steps_run, curve })
}

struct AdamState {
    m_phi: Matrix,
    v_phi: Matrix,
    m_mu: Matrix,
    v_mu: Matrix,
    t: i32,
}

impl AdamState {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-12;

    fn new(phi: &Matrix, mu: &Matrix) -> Self {
        Self {
            m_phi: Matrix::zeros(phi.nrows(), phi.ncols()),
            v_phi: Matrix::zeros(phi.nrows(), phi.ncols()),
            m_mu: Matrix::zeros(mu.nrows(), mu.ncols()),
            v_mu: Matrix::zeros(mu.nrows(), mu.ncols()),
            t: 0,
        }
    }

    fn step(&mut self, phi: &mut Matrix, mu: &mut Matrix, g_phi: &Matrix, g_mu: &Matrix, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let upd = |x: &mut Matrix, m: &mut Matrix, v: &mut Matrix, g: &Matrix| {
            for k in 0..x.len() {
                m[k] = Self::B1 * m[k] + (1.0 - Self::B1) * g[k];
                v[k] = Self::B2 * v[k] + (1.0 - Self::B2) * g[k] * g[k];
                x[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + Self::EPS);
            }
        };
        upd(phi, &mut self.m_phi, &mut self.v_phi, g_phi);
        upd(mu, &mut self.m_mu, &mut self.v_mu, g_mu);
    }
}

// ── SVD oracle ──

/// Top-`d` SVD factorization of `W^{1/2} P` with base measure uniform over states.
pub fn svd_oracle_fit(mdp: &LowRankMdp, weighting: &Vector, d: usize) -> Result<FeatureModel> {
    svd_oracle_fit_kernel(mdp.kernel(), weighting, d, mdp.num_actions(), &objective::uniform(mdp.num_states()))
}

/// Oracle factorization of an arbitrary kernel.
///
/// With `W^{1/2} P = U S V^T`, returns `phi = P V_d S_d^{-1} / sqrt(d)`
/// (so `E_w[phi phi^T] = I/d`, also for rows of zero weight) and
/// `mu = sqrt(d) V_d S_d`, giving `phi mu^T = P V_d V_d^T`.
pub fn svd_oracle_fit_kernel(
    kernel: &Matrix,
    weighting: &Vector,
    d: usize,
    num_actions: usize,
    p: &Vector,
) -> Result<FeatureModel> {
    if d == 0 || d > kernel.nrows().min(kernel.ncols()) {
        return Err(Error::validation(format!(
            "oracle dimension {d} must lie in [1, {}]",
            kernel.nrows().min(kernel.ncols())
        )));
    }
    if weighting.len() != kernel.nrows() {
        return Err(Error::DimensionMismatch { expected: kernel.nrows(), actual: weighting.len() });
    }
    if weighting.iter().any(|&w| w < 0.0) {
        return Err(Error::validation("weighting must be nonnegative"));
    }
    let mut scaled = kernel.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= weighting[i].sqrt();
    }
    let svd = linalg::sorted_svd(&scaled);
    let s = &svd.singular_values;
    if s[d - 1] <= 1e-12 * s[0] {
        let rank = s.iter().filter(|&&x| x > 1e-12 * s[0]).count();
        return Err(Error::RankDeficient { rank, required: d });
    }
    let v = svd.v.columns(0, d).into_owned();
    let sd = Vector::from_fn(d, |k, _| s[k]);
    let sqrt_d = (d as f64).sqrt();
    let phi = kernel * &v * Matrix::from_diagonal(&sd.map(|x| 1.0 / x)) / sqrt_d;
    let mu = &v * Matrix::from_diagonal(&sd) * sqrt_d;
    FeatureModel::new(phi, objective::mu_to_mu_prime(&mu, p), p.clone(), num_actions)
}

/// Singular values (descending) of `W^{1/2} P`.
pub fn weighted_singular_values(kernel: &Matrix, weighting: &Vector) -> Vec<f64> {
    let mut scaled = kernel.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= weighting[i].max(0.0).sqrt();
    }
    linalg::singular_values_desc(&scaled)
}

// ── dispatch ──

/// A configured learner bound to one MDP (the ERM class and the oracle need it).
#[derive(Clone, Debug)]
pub struct Learner {
    config: LearnerConfig,
    dim: usize,
    num_states: usize,
    num_actions: usize,
    class: Option<CandidateClass>,
    oracle_kernel: Option<Matrix>,
    last: Option<FeatureModel>,
}

impl Learner {
    pub fn new(config: &LearnerConfig, mdp: &LowRankMdp, class_seed: u64) -> Result<Self> {
        config.validate()?;
        let dim = config.dim.unwrap_or(mdp.rank());
        let class = match config.method {
            LearnerMethod::Erm => {
                if dim != mdp.rank() {
                    return Err(Error::validation("the ERM class lives in the true feature dimension"));
                }
                Some(build_candidate_class(mdp, config.num_decoys, config.perturbation_scale, class_seed)?)
            }
            _ => None,
        };
        let oracle_kernel = (config.method == LearnerMethod::SvdOracle).then(|| mdp.kernel().clone());
        Ok(Self {
            config: config.clone(),
            dim,
            num_states: mdp.num_states(),
            num_actions: mdp.num_actions(),
            class,
            oracle_kernel,
            last: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn method(&self) -> LearnerMethod {
        self.config.method
    }

    /// Size of the model class used by the theory schedules (nominal for
    /// learners without an explicit class).
    pub fn class_size(&self) -> usize {
        self.class.as_ref().map_or(self.config.num_decoys + 1, |c| c.len())
    }

    /// Fits on `data`. The oracle ignores the data and factorizes the true
    /// kernel under uniform weighting; the gradient learner warm-starts from
    /// its previous fit.
    pub fn fit(&mut self, data: &TransitionDataset) -> Result<FeatureModel> {
        let p = objective::uniform(self.num_states);
        let model = match self.config.method {
            LearnerMethod::Erm => erm_fit(self.class.as_ref().expect("class built for ERM"), data)?.model,
            LearnerMethod::SvdOracle => {
                let k = self.oracle_kernel.as_ref().expect("kernel stored for the oracle");
                let w = objective::uniform(k.nrows());
                svd_oracle_fit_kernel(k, &w, self.dim, self.num_actions, &p)?
            }
            LearnerMethod::Gradient => {
                let base: Vec<usize> = (0..self.num_states).collect();
                let m = TransitionMoments::from_dataset(data, &base, self.num_states, self.num_actions)?;
                let init = match &self.last {
                    Some(prev) => prev.clone(),
                    None => initial_model(self.num_states, self.num_actions, self.dim, m.row_weights(), &p, self.config.init_seed)?,
                };
                gradient_fit_moments(&self.config, &m, init)?.model
            }
        };
        self.last = Some(model.clone());
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{generate_random_mdp, Transition};
    use crate::objective::{population_l2_loss, uniform};

    #[test]
    fn erm_examples() {
        let mdp = generate_random_mdp(6, 2, 2, 1).unwrap();
        let truth = FeatureModel::from_truth(&mdp, &uniform(6)).unwrap();
        let single = CandidateClass::new(vec![truth.clone()], true).unwrap();
        let data = mdp::sample_occupancy_dataset(&mdp, &mdp::Policy::uniform(6, 2), 20, 3).unwrap();
        assert_eq!(erm_fit(&single, &data).unwrap().model, truth);
        assert!(matches!(CandidateClass::new(vec![], true), Err(Error::EmptyClass)));

        // f(x, .) = (1/2, 1/2), one sample with outcome 0.
        let half = FeatureModel::new(Matrix::from_element(2, 1, 1.0), Matrix::from_element(2, 1, 1.0), uniform(2), 1).unwrap();
        let class = CandidateClass::new(vec![half], false).unwrap();
        let one = TransitionDataset::from_triples(vec![Transition { s: 0, a: 0, s_next: 0 }]);
        assert!((erm_fit(&class, &one).unwrap().erm_loss + 0.5).abs() < 1e-15);
    }

    #[test]
    fn erm_agrees_with_independent_scorer() {
        let mdp = generate_random_mdp(20, 4, 3, 42).unwrap();
        let class = build_candidate_class(&mdp, 31, 0.3, 7).unwrap();
        let w = uniform(80);
        let mut r = rng::rng_from_seed(7);
        let data = TransitionDataset::from_triples(mdp::sample_iid_triples(&mdp, &w, 4096, &mut r));
        let fit = erm_fit(&class, &data).unwrap();
        // Score each candidate sample by sample.
        let mut best = (0, f64::INFINITY);
        for (k, c) in class.candidates().iter().enumerate() {
            let f = c.phi_hat() * c.mu_hat().transpose();
            let mut total = 0.0;
            for t in &data.primary {
                let i = t.s * 4 + t.a;
                total += -2.0 * f[(i, t.s_next)] + f.row(i).norm_squared();
            }
            if total < best.1 {
                best = (k, total);
            }
        }
        assert_eq!(fit.index, best.0);
        assert!((fit.erm_loss - best.1 / 4096.0).abs() < 1e-10);
        let chosen = population_l2_loss(&fit.model, &mdp, &w).unwrap();
        let min_decoy = class.candidates()[1..]
            .iter()
            .map(|c| population_l2_loss(c, &mdp, &w).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!(chosen == 0.0 || chosen <= min_decoy * 10.0);
    }

    #[test]
    fn candidate_class_contract() {
        let mdp = generate_random_mdp(20, 4, 3, 42).unwrap();
        let single = build_candidate_class(&mdp, 0, 0.3, 7).unwrap();
        assert_eq!(single.len(), 1);
        assert!(single.contains_truth());
        let class = build_candidate_class(&mdp, 31, 0.3, 7).unwrap();
        assert_eq!(class.len(), 32);
        let w = uniform(80);
        let mut min_loss = f64::INFINITY;
        for k in 1..class.len() {
            mdp::validate_kernel_rows(class.kernel(k), 4).unwrap();
            min_loss = min_loss.min(population_l2_loss(&class.candidates()[k], &mdp, &w).unwrap());
        }
        assert!(min_loss > 1e-4, "{min_loss}");
    }

    #[test]
    fn oracle_examples() {
        // Rank-1 kernel: all rows identical.
        let row = [0.2, 0.5, 0.3];
        let k = Matrix::from_fn(6, 3, |_, j| row[j]);
        let model = svd_oracle_fit_kernel(&k, &uniform(6), 1, 2, &uniform(3)).unwrap();
        assert!((model.raw_kernel() - &k).amax() < 1e-14);

        let mdp = generate_random_mdp(20, 4, 3, 42).unwrap();
        let mut r = rng::rng_from_seed(1);
        let raw = Vector::from_fn(80, |_, _| r.random::<f64>() + 0.1);
        let w = &raw / raw.sum();
        let model = svd_oracle_fit(&mdp, &w, 3).unwrap();
        assert!(population_l2_loss(&model, &mdp, &w).unwrap() <= 1e-18);
        let cov = linalg::weighted_second_moment(model.phi_hat(), &w);
        assert!((cov - Matrix::identity(3, 3) / 3.0).amax() < 1e-10);

        let model = svd_oracle_fit(&mdp, &w, 2).unwrap();
        let s = weighted_singular_values(mdp.kernel(), &w);
        let tail: f64 = s[2..].iter().map(|x| x * x).sum();
        assert!((population_l2_loss(&model, &mdp, &w).unwrap() - tail).abs() < 1e-12);
        assert!(matches!(svd_oracle_fit(&mdp, &w, 5), Err(Error::RankDeficient { .. })));
    }

    fn exact_moments(mdp: &LowRankMdp) -> TransitionMoments {
        let w = uniform(mdp.num_rows());
        TransitionMoments::exact(mdp.kernel(), &w, &uniform(mdp.num_states()), mdp.num_actions()).unwrap()
    }

    #[test]
    fn zero_step_size_returns_initialization() {
        let mdp = generate_random_mdp(8, 2, 2, 3).unwrap();
        let m = exact_moments(&mdp);
        let init = initial_model(8, 2, 2, m.row_weights(), &uniform(8), 5).unwrap();
        let cfg = LearnerConfig { step_size: 0.0, max_steps: 50, ..Default::default() };
        let fit = gradient_fit_moments(&cfg, &m, init.clone()).unwrap();
        assert_eq!(fit.model, init);
    }

    #[test]
    fn fit_from_truth_never_exceeds_initial_loss() {
        let mdp = generate_random_mdp(10, 2, 3, 8).unwrap();
        let m = exact_moments(&mdp);
        let truth = FeatureModel::from_truth(&mdp, &uniform(10)).unwrap();
        let cfg = LearnerConfig { lambda_prob: 0.0, max_steps: 500, record_every: 1, ..Default::default() };
        let fit = gradient_fit_moments(&cfg, &m, truth).unwrap();
        let initial = fit.curve[0].total;
        let mut best = f64::INFINITY;
        for p in &fit.curve {
            best = best.min(p.total);
        }
        let final_total = objective::moments_loss(&fit.model, &m, cfg.penalties()).unwrap().total;
        assert!(final_total <= initial + 1e-9);
        assert!((final_total - best).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_detected() {
        let mdp = generate_random_mdp(8, 2, 2, 3).unwrap();
        let m = exact_moments(&mdp);
        let init = initial_model(8, 2, 2, m.row_weights(), &uniform(8), 5).unwrap();
        let cfg = LearnerConfig { optimizer: Optimizer::Gd, step_size: 1e3, max_steps: 200, ..Default::default() };
        assert!(matches!(gradient_fit_moments(&cfg, &m, init), Err(Error::DivergenceDetected { .. })));
    }

    #[test]
    fn learner_parses_method_names() {
        assert_eq!("svd-oracle".parse::<LearnerMethod>().unwrap(), LearnerMethod::SvdOracle);
        assert!("mle".parse::<LearnerMethod>().is_err());
    }
}
