//! Spectral least-squares objectives over learned factorizations.
//!
//! A [`FeatureModel`] holds `phi` (one row per state-action pair), the
//! reparameterized right factor `mu'` and a base measure `p`, with
//! `mu(s') = p(s') mu'(s')` and `P_hat(s'|s,a) = phi(s,a)^T mu(s')`.
//!
//! Losses are evaluated against [`TransitionMoments`], an aggregated view of
//! either a dataset or exact expectations:
//!
//! * `w(i)`: weight of state-action row `i`,
//! * `q(i, j)`: weight of the triple `(i, s' = j)`,
//! * `beta(j)`: weight of base sample `j`.
//!
//! With these,
//!
//! ```text
//! main  = -sum_ij q(i,j) p(j) phi_i^T mu'_j + (1/2d) sum_j beta(j) p(j) |mu'_j|^2
//! ortho = || sum_i w(i) phi_i phi_i^T - I/d ||_F^2
//! prob  = sum_i w(i) (log Z_i)^2,   Z_i = sum_j pi(j) phi_i^T mu'_j
//! ```
//!
//! where `pi = p` (exact enumeration) for up to [`ENUMERATION_LIMIT`] states
//! and `pi = beta` (Monte-Carlo estimate from the base samples) beyond that.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::mdp::{self, LowRankMdp, TransitionDataset};

/// Above this many states the mass integral is estimated from base samples.
pub const ENUMERATION_LIMIT: usize = 10_000;

/// Learned factorization `(phi, mu')` with base measure `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureModel {
    phi_hat: Matrix,
    mu_prime_hat: Matrix,
    base_measure_p: Vector,
    num_actions: usize,
}

impl FeatureModel {
    pub fn new(phi_hat: Matrix, mu_prime_hat: Matrix, base_measure_p: Vector, num_actions: usize) -> Result<Self> {
        let ns = mu_prime_hat.nrows();
        if num_actions == 0 || ns == 0 || phi_hat.ncols() == 0 {
            return Err(Error::validation("feature model dimensions must be positive"));
        }
        if phi_hat.nrows() != ns * num_actions {
            return Err(Error::DimensionMismatch { expected: ns * num_actions, actual: phi_hat.nrows() });
        }
        if mu_prime_hat.ncols() != phi_hat.ncols() {
            return Err(Error::DimensionMismatch { expected: phi_hat.ncols(), actual: mu_prime_hat.ncols() });
        }
        if base_measure_p.len() != ns {
            return Err(Error::DimensionMismatch { expected: ns, actual: base_measure_p.len() });
        }
        if base_measure_p.iter().any(|&x| !(x > 0.0) || !x.is_finite())
            || (base_measure_p.sum() - 1.0).abs() > 1e-9
        {
            return Err(Error::validation("base measure must be a strictly positive distribution"));
        }
        if phi_hat.iter().chain(mu_prime_hat.iter()).any(|x| !x.is_finite()) {
            return Err(Error::validation("feature model has non-finite entries"));
        }
        Ok(Self { phi_hat, mu_prime_hat, base_measure_p, num_actions })
    }

    /// The ground-truth factorization of `mdp` expressed against base measure `p`.
    pub fn from_truth(mdp: &LowRankMdp, p: &Vector) -> Result<Self> {
        let mu_prime = mu_to_mu_prime(mdp.mu_star(), p);
        Self::new(mdp.phi_star().clone(), mu_prime, p.clone(), mdp.num_actions())
    }

    pub fn phi_hat(&self) -> &Matrix {
        &self.phi_hat
    }
    pub fn mu_prime_hat(&self) -> &Matrix {
        &self.mu_prime_hat
    }
    pub fn base_measure_p(&self) -> &Vector {
        &self.base_measure_p
    }
    pub fn dim(&self) -> usize {
        self.phi_hat.ncols()
    }
    pub fn num_states(&self) -> usize {
        self.mu_prime_hat.nrows()
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn num_rows(&self) -> usize {
        self.phi_hat.nrows()
    }

    /// `mu(s') = p(s') mu'(s')`.
    pub fn mu_hat(&self) -> Matrix {
        mu_prime_to_mu(&self.mu_prime_hat, &self.base_measure_p)
    }

    /// Unprojected kernel `phi mu^T`.
    pub fn raw_kernel(&self) -> Matrix {
        &self.phi_hat * self.mu_hat().transpose()
    }

    /// Same model with `phi` scaled by `c` and `mu'` by `1/c`.
    pub fn rescaled(&self, c: f64) -> Self {
        Self {
            phi_hat: &self.phi_hat * c,
            mu_prime_hat: &self.mu_prime_hat / c,
            ..self.clone()
        }
    }

    pub(crate) fn with_factors(&self, phi_hat: Matrix, mu_prime_hat: Matrix) -> Self {
        Self { phi_hat, mu_prime_hat, ..self.clone() }
    }

    pub(crate) fn check_compatible(&self, num_states: usize, num_actions: usize) -> Result<()> {
        if self.num_states() != num_states {
            return Err(Error::DimensionMismatch { expected: num_states, actual: self.num_states() });
        }
        if self.num_actions != num_actions {
            return Err(Error::DimensionMismatch { expected: num_actions, actual: self.num_actions });
        }
        Ok(())
    }
}

pub(crate) fn mu_prime_to_mu(mu_prime: &Matrix, p: &Vector) -> Matrix {
    let mut mu = mu_prime.clone();
    for (j, mut row) in mu.row_iter_mut().enumerate() {
        row *= p[j];
    }
    mu
}

pub(crate) fn mu_to_mu_prime(mu: &Matrix, p: &Vector) -> Matrix {
    let mut out = mu.clone();
    for (j, mut row) in out.row_iter_mut().enumerate() {
        row /= p[j];
    }
    out
}

/// Uniform distribution over `n` outcomes.
pub fn uniform(n: usize) -> Vector {
    Vector::from_element(n, 1.0 / n as f64)
}

/// Learned kernel `phi(s,a)^T mu'(s') p(s')`, optionally projected onto valid distributions.
pub fn model_to_kernel(model: &FeatureModel, project: bool) -> Matrix {
    let raw = model.raw_kernel();
    if project {
        mdp::simplex_project_kernel(&raw)
    } else {
        raw
    }
}

// ── aggregated measures ──

/// Aggregated weights over rows, triples and base samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMoments {
    num_actions: usize,
    row_weights: Vector,
    joint: Matrix,
    base_weights: Vector,
}

impl TransitionMoments {
    /// Empirical measure of every triple in `data` (primary then secondary)
    /// and of the base samples.
    pub fn from_dataset(
        data: &TransitionDataset,
        base_samples: &[usize],
        num_states: usize,
        num_actions: usize,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if base_samples.is_empty() {
            return Err(Error::validation("base samples must be nonempty"));
        }
        data.validate(num_states, num_actions)?;
        let mut joint = Matrix::zeros(num_states * num_actions, num_states);
        let mut count = 0usize;
        for t in data.all_triples() {
            joint[(mdp::sa_index(t.s, t.a, num_actions), t.s_next)] += 1.0;
            count += 1;
        }
        joint /= count as f64;
        let mut base = Vector::zeros(num_states);
        for &j in base_samples {
            if j >= num_states {
                return Err(Error::validation(format!("base sample {j} out of range")));
            }
            base[j] += 1.0;
        }
        base /= base_samples.len() as f64;
        Ok(Self::from_joint(joint, base, num_actions))
    }

    /// Exact expectations: rows from `weighting`, next states from `kernel`,
    /// base samples distributed as `base`.
    pub fn exact(kernel: &Matrix, weighting: &Vector, base: &Vector, num_actions: usize) -> Result<Self> {
        if weighting.len() != kernel.nrows() {
            return Err(Error::DimensionMismatch { expected: kernel.nrows(), actual: weighting.len() });
        }
        if base.len() != kernel.ncols() {
            return Err(Error::DimensionMismatch { expected: kernel.ncols(), actual: base.len() });
        }
        let mut joint = kernel.clone();
        for (i, mut row) in joint.row_iter_mut().enumerate() {
            row *= weighting[i];
        }
        Ok(Self::from_joint(joint, base.clone(), num_actions))
    }

    fn from_joint(joint: Matrix, base_weights: Vector, num_actions: usize) -> Self {
        let row_weights = Vector::from_fn(joint.nrows(), |i, _| joint.row(i).sum());
        Self { num_actions, row_weights, joint, base_weights }
    }

    pub fn num_states(&self) -> usize {
        self.joint.ncols()
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn row_weights(&self) -> &Vector {
        &self.row_weights
    }
    pub fn joint(&self) -> &Matrix {
        &self.joint
    }
    pub fn base_weights(&self) -> &Vector {
        &self.base_weights
    }

    /// Weights `pi(j)` of the mass integral `Z_i = sum_j pi(j) phi_i^T mu'_j`.
    fn mass_weights(&self, p: &Vector) -> Vector {
        if self.num_states() <= ENUMERATION_LIMIT {
            p.clone()
        } else {
            self.base_weights.clone()
        }
    }
}

// ── losses ──

/// Penalty weights of the practical objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Penalties {
    pub lambda_ortho: f64,
    pub lambda_prob: f64,
}

impl Default for Penalties {
    fn default() -> Self {
        Self { lambda_ortho: 1.0, lambda_prob: 1.0 }
    }
}

impl Penalties {
    pub fn new(lambda_ortho: f64, lambda_prob: f64) -> Result<Self> {
        if !(lambda_ortho >= 0.0 && lambda_prob >= 0.0) {
            return Err(Error::validation("penalty weights must be nonnegative"));
        }
        Ok(Self { lambda_ortho, lambda_prob })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main_term: f64,
    pub ortho_penalty: f64,
    /// Not part of the objective when `lambda_prob == 0`; reported as NaN if
    /// the model then has non-positive mass somewhere.
    pub prob_penalty: f64,
    pub lambda_ortho: f64,
    pub lambda_prob: f64,
    pub total: f64,
}

/// Gradient of [`LossBreakdown::total`] with the shapes of `(phi, mu')`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradient {
    pub phi: Matrix,
    pub mu_prime: Matrix,
}

/// How non-positive mass is treated by the normalization penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum MassHandling {
    /// Report [`Error::NonPositiveMass`].
    Strict,
    /// Continue `(log z)^2` linearly below `MASS_FLOOR` so that iterates with
    /// small or negative mass receive a finite restoring gradient.
    Extended,
}

pub(crate) const MASS_FLOOR: f64 = 0.05;

fn log_sq(z: f64, handling: MassHandling, row: usize) -> Result<(f64, f64)> {
    if z > 0.0 && (handling == MassHandling::Strict || z >= MASS_FLOOR) {
        let l = z.ln();
        return Ok((l * l, 2.0 * l / z));
    }
    match handling {
        MassHandling::Strict => Err(Error::NonPositiveMass { row, mass: z }),
        MassHandling::Extended => {
            let l = MASS_FLOOR.ln();
            let slope = 2.0 * l / MASS_FLOOR;
            Ok((l * l + slope * (z - MASS_FLOOR), slope))
        }
    }
}

fn check_model_moments(model: &FeatureModel, m: &TransitionMoments) -> Result<()> {
    model.check_compatible(m.num_states(), m.num_actions())
}

/// `sum_i w(i) phi_i phi_i^T - I/d`.
pub fn ortho_residual(phi: &Matrix, w: &Vector) -> Matrix {
    let d = phi.ncols();
    linalg::weighted_second_moment(phi, w) - Matrix::identity(d, d) / d as f64
}

/// Loss and, when requested, its gradient.
pub(crate) fn evaluate(
    model: &FeatureModel,
    m: &TransitionMoments,
    penalties: Penalties,
    handling: MassHandling,
    with_gradient: bool,
) -> Result<(LossBreakdown, Option<ModelGradient>)> {
    check_model_moments(model, m)?;
    let d = model.dim() as f64;
    let p = &model.base_measure_p;
    let phi = &model.phi_hat;
    let mu_p = &model.mu_prime_hat;

    // mu = diag(p) mu'
    let mu = mu_prime_to_mu(mu_p, p);
    // Q mu : row i is sum_j q(i,j) p(j) mu'_j
    let q_mu = &m.joint * &mu;
    let cross: f64 = phi.component_mul(&q_mu).sum();
    let bp = m.base_weights.component_mul(p);
    let mu_sq: f64 = (0..mu_p.nrows()).map(|j| bp[j] * mu_p.row(j).norm_squared()).sum();
    let main_term = -cross + mu_sq / (2.0 * d);

    let resid = ortho_residual(phi, &m.row_weights);
    let ortho = resid.norm_squared();

    let pi = m.mass_weights(p);
    let mass_dir = mu_p.transpose() * &pi;
    let z = phi * &mass_dir;
    let mut prob = 0.0;
    let mut dz = Vector::zeros(z.len());
    let mut prob_defined = true;
    for i in 0..z.len() {
        let wi = m.row_weights[i];
        if wi == 0.0 {
            continue;
        }
        match log_sq(z[i], handling, i) {
            Ok((v, dv)) => {
                prob += wi * v;
                dz[i] = wi * dv;
            }
            Err(e) if penalties.lambda_prob > 0.0 => return Err(e),
            Err(_) => prob_defined = false,
        }
    }
    let prob_penalty = if prob_defined { prob } else { f64::NAN };
    let mut total = main_term + penalties.lambda_ortho * ortho;
    if penalties.lambda_prob > 0.0 {
        total += penalties.lambda_prob * prob;
    }
    let breakdown = LossBreakdown {
        main_term,
        ortho_penalty: ortho,
        prob_penalty,
        lambda_ortho: penalties.lambda_ortho,
        lambda_prob: penalties.lambda_prob,
        total,
    };
    if !with_gradient {
        return Ok((breakdown, None));
    }

    let mut g_phi = -q_mu;
    // d main / d mu'_j = -p(j) sum_i q(i,j) phi_i + beta(j) p(j) mu'_j / d
    let qt_phi = m.joint.transpose() * phi;
    let mut g_mu = Matrix::zeros(mu_p.nrows(), mu_p.ncols());
    for j in 0..mu_p.nrows() {
        let row = qt_phi.row(j) * (-p[j]) + mu_p.row(j) * (bp[j] / d);
        g_mu.set_row(j, &row);
    }
    if penalties.lambda_ortho > 0.0 {
        let mut scaled = phi * &resid;
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= 4.0 * penalties.lambda_ortho * m.row_weights[i];
        }
        g_phi += scaled;
    }
    if penalties.lambda_prob > 0.0 {
        let lp = penalties.lambda_prob;
        // dZ_i/dphi_i = mass_dir ; dZ_i/dmu'_j = pi(j) phi_i
        g_phi += (&dz * mass_dir.transpose()) * lp;
        let phi_dz = phi.transpose() * &dz;
        g_mu += (&pi * phi_dz.transpose()) * lp;
    }
    Ok((breakdown, Some(ModelGradient { phi: g_phi, mu_prime: g_mu })))
}

/// Full loss against aggregated moments.
pub fn moments_loss(model: &FeatureModel, m: &TransitionMoments, penalties: Penalties) -> Result<LossBreakdown> {
    Ok(evaluate(model, m, penalties, MassHandling::Strict, false)?.0)
}

/// Gradient of the full loss against aggregated moments.
pub fn moments_gradient(model: &FeatureModel, m: &TransitionMoments, penalties: Penalties) -> Result<ModelGradient> {
    Ok(evaluate(model, m, penalties, MassHandling::Strict, true)?.1.expect("gradient requested"))
}

/// Empirical loss on `data` with base samples drawn from `p`, default penalties.
pub fn speder_empirical_loss(
    model: &FeatureModel,
    data: &TransitionDataset,
    base_samples: &[usize],
) -> Result<LossBreakdown> {
    speder_empirical_loss_with(model, data, base_samples, Penalties::default())
}

pub fn speder_empirical_loss_with(
    model: &FeatureModel,
    data: &TransitionDataset,
    base_samples: &[usize],
    penalties: Penalties,
) -> Result<LossBreakdown> {
    let m = TransitionMoments::from_dataset(data, base_samples, model.num_states(), model.num_actions())?;
    moments_loss(model, &m, penalties)
}

/// Analytic gradient of the empirical loss.
pub fn loss_gradient(
    model: &FeatureModel,
    data: &TransitionDataset,
    base_samples: &[usize],
    penalties: Penalties,
) -> Result<ModelGradient> {
    let m = TransitionMoments::from_dataset(data, base_samples, model.num_states(), model.num_actions())?;
    moments_gradient(model, &m, penalties)
}

/// Mean of `(log Z(s,a))^2` over the listed pairs.
pub fn normalization_regularizer(
    model: &FeatureModel,
    states_actions: &[(usize, usize)],
    base_samples: &[usize],
) -> Result<f64> {
    if states_actions.is_empty() || base_samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let masses = mass_values(model, base_samples)?;
    let mut acc = 0.0;
    for &(s, a) in states_actions {
        if s >= model.num_states() || a >= model.num_actions() {
            return Err(Error::validation(format!("pair ({s}, {a}) out of range")));
        }
        let i = mdp::sa_index(s, a, model.num_actions());
        acc += log_sq(masses[i], MassHandling::Strict, i)?.0;
    }
    Ok(acc / states_actions.len() as f64)
}

/// `Z(s,a)` for every row: exact enumeration for small state spaces,
/// otherwise the base-sample average of `phi^T mu'`.
pub fn mass_values(model: &FeatureModel, base_samples: &[usize]) -> Result<Vector> {
    let pi = if model.num_states() <= ENUMERATION_LIMIT {
        model.base_measure_p.clone()
    } else {
        if base_samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut b = Vector::zeros(model.num_states());
        for &j in base_samples {
            if j >= model.num_states() {
                return Err(Error::validation(format!("base sample {j} out of range")));
            }
            b[j] += 1.0 / base_samples.len() as f64;
        }
        b
    };
    Ok(&model.phi_hat * (model.mu_prime_hat.transpose() * pi))
}

/// `E_w sum_s' (P(s'|s,a) - P_hat(s'|s,a))^2` computed exactly.
pub fn population_l2_loss(model: &FeatureModel, mdp: &LowRankMdp, weighting: &Vector) -> Result<f64> {
    model.check_compatible(mdp.num_states(), mdp.num_actions())?;
    kernel_l2_error(&model.raw_kernel(), mdp.kernel(), weighting)
}

/// `sum_i w(i) |a_i - b_i|^2` over kernel rows.
pub fn kernel_l2_error(a: &Matrix, b: &Matrix, weighting: &Vector) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch { expected: b.nrows(), actual: a.nrows() });
    }
    if weighting.len() != a.nrows() {
        return Err(Error::DimensionMismatch { expected: a.nrows(), actual: weighting.len() });
    }
    Ok((0..a.nrows()).map(|i| weighting[i] * (a.row(i) - b.row(i)).norm_squared()).sum())
}

/// `sum_s' || E_w[P(s'|s,a) phi(s,a)] ||^2` for `phi` whitened to `E_w[phi phi^T] = I`.
pub fn svd_primal_value(model_phi: &Matrix, mdp: &LowRankMdp, weighting: &Vector) -> Result<f64> {
    svd_primal_value_kernel(model_phi, mdp.kernel(), weighting)
}

pub fn svd_primal_value_kernel(phi: &Matrix, kernel: &Matrix, weighting: &Vector) -> Result<f64> {
    if phi.nrows() != kernel.nrows() {
        return Err(Error::DimensionMismatch { expected: kernel.nrows(), actual: phi.nrows() });
    }
    if weighting.len() != kernel.nrows() {
        return Err(Error::DimensionMismatch { expected: kernel.nrows(), actual: weighting.len() });
    }
    let d = phi.ncols();
    let deviation = (linalg::weighted_second_moment(phi, weighting) - Matrix::identity(d, d)).norm();
    if deviation > 1e-6 {
        return Err(Error::ConstraintViolation { deviation });
    }
    let mut wk = kernel.clone();
    for (i, mut row) in wk.row_iter_mut().enumerate() {
        row *= weighting[i];
    }
    Ok((phi.transpose() * wk).norm_squared())
}

/// Minimizer of the main term over `mu'` for fixed `phi`:
/// `mu'_j = d sum_i q(i,j) phi_i / beta(j)`; columns with `beta(j) = 0` are set to 0.
pub fn closed_form_mu_prime(phi: &Matrix, m: &TransitionMoments) -> Matrix {
    let d = phi.ncols() as f64;
    let mut out = m.joint.transpose() * phi;
    for (j, mut row) in out.row_iter_mut().enumerate() {
        let b = m.base_weights[j];
        if b > 0.0 {
            row *= d / b;
        } else {
            row.fill(0.0);
        }
    }
    out
}

/// Main term at the closed-form `mu'` (independent of the base measure).
pub fn minimized_main_term(phi: &Matrix, m: &TransitionMoments) -> f64 {
    let d = phi.ncols() as f64;
    let qt_phi = m.joint.transpose() * phi;
    let s: f64 = (0..qt_phi.nrows())
        .filter(|&j| m.base_weights[j] > 0.0)
        .map(|j| qt_phi.row(j).norm_squared() / m.base_weights[j])
        .sum();
    -0.5 * d * s
}

/// Rescales `phi` so that `E_w[phi phi^T] = target I` (symmetric whitening).
pub fn whiten(phi: &Matrix, w: &Vector, target: f64) -> Result<Matrix> {
    let cov = linalg::weighted_second_moment(phi, w);
    let svs = linalg::singular_values_desc(&cov);
    if svs.is_empty() || svs[svs.len() - 1] <= 1e-12 * svs[0].max(1e-300) {
        return Err(Error::RankDeficient {
            rank: svs.iter().filter(|&&s| s > 1e-12 * svs[0]).count(),
            required: phi.ncols(),
        });
    }
    Ok(phi * linalg::sym_power(&cov, -0.5, 0.0) * target.sqrt())
}
