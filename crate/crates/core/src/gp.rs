//! Exact Gaussian-process regression with a squared-exponential ARD kernel.
//!
//! The world model maps `phi(s, a)` to the next reward. Targets can be
//! standardized before fitting (zero prior mean on unit-variance data);
//! [`FittedGp::predict`] always reports mean and variance in the original
//! target units.
//!
//! Hyperparameters are chosen by [`select_hyperparams`]: multistart projected
//! gradient ascent on the log marginal likelihood produces candidates, and a
//! k-fold held-out predictive score picks among them.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{phi, ActionPair, FeatureError, State};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal jitter tried, in order, when the Gram matrix fails to factor.
pub const JITTER_SCHEDULE: [f64; 4] = [1e-10, 1e-8, 1e-6, 1e-4];

const DOCUMENT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{inputs} inputs but {targets} targets")]
    LengthMismatch { inputs: usize, targets: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),
    #[error("Gram matrix is ill-conditioned; factorization failed with jitter levels {attempted:?}")]
    IllConditioned { attempted: Vec<f64> },
    #[error("operation requires at least one training point")]
    EmptyTrainingSet,
    #[error("exploration weights must be non-negative, got beta1={beta1}, beta2={beta2}")]
    NegativeBeta { beta1: f64, beta2: f64 },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("model document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported model document version {0}")]
    UnsupportedVersion(u32),
}

/// Signal variance, per-dimension length-scales and observation noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperParams {
    pub signal_variance: f64,
    pub length_scales: Vec<f64>,
    pub noise_variance: f64,
}

impl GpHyperParams {
    /// Unit signal variance, unit length-scales, noise variance 0.1.
    pub fn default_for(dim: usize) -> Self {
        GpHyperParams {
            signal_variance: 1.0,
            length_scales: vec![1.0; dim],
            noise_variance: 0.1,
        }
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    pub fn validate(&self, dim: usize) -> Result<(), GpError> {
        if self.length_scales.len() != dim {
            return Err(GpError::DimensionMismatch {
                expected: dim,
                found: self.length_scales.len(),
            });
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.signal_variance)
            || !positive(self.noise_variance)
            || !self.length_scales.iter().all(|&l| positive(l))
        {
            return Err(GpError::InvalidHyperParams(format!("{self:?}")));
        }
        Ok(())
    }

    /// `[ln a2, ln l_1, .., ln l_m, ln w2]`.
    pub fn to_log_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.dim() + 2);
        p.push(self.signal_variance.ln());
        p.extend(self.length_scales.iter().map(|l| l.ln()));
        p.push(self.noise_variance.ln());
        p
    }

    pub fn from_log_params(p: &[f64]) -> Self {
        let m = p.len() - 2;
        GpHyperParams {
            signal_variance: p[0].exp(),
            length_scales: p[1..=m].iter().map(|v| v.exp()).collect(),
            noise_variance: p[m + 1].exp(),
        }
    }
}

/// Training inputs `X` (one row per observation) and targets `y`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl TrainingSet {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self, GpError> {
        if inputs.len() != targets.len() {
            return Err(GpError::LengthMismatch {
                inputs: inputs.len(),
                targets: targets.len(),
            });
        }
        if let Some(first) = inputs.first() {
            let dim = first.len();
            if let Some(bad) = inputs.iter().find(|r| r.len() != dim) {
                return Err(GpError::DimensionMismatch {
                    expected: dim,
                    found: bad.len(),
                });
            }
        }
        Ok(TrainingSet { inputs, targets })
    }

    pub fn push(&mut self, input: &[f64], target: f64) {
        self.inputs.push(input.to_vec());
        self.targets.push(target);
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.inputs.first().map(Vec::len)
    }

    fn subset(&self, indices: &[usize]) -> TrainingSet {
        TrainingSet {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

/// Affine map between original and standardized target units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaling {
    pub offset: f64,
    pub scale: f64,
}

impl TargetScaling {
    pub const IDENTITY: TargetScaling = TargetScaling {
        offset: 0.0,
        scale: 1.0,
    };

    /// Zero mean, unit (population) variance. Constant targets keep scale 1.
    pub fn standardizing(targets: &[f64]) -> Self {
        if targets.is_empty() {
            return Self::IDENTITY;
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        TargetScaling {
            offset: mean,
            scale: if sd > 1e-12 { sd } else { 1.0 },
        }
    }

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.offset) / self.scale
    }
}

/// One-step predictive distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

/// SE-ARD covariance `a2 * exp(-0.5 * sum_d (x_d - x2_d)^2 / l_d^2)`.
pub fn kernel(x: &[f64], x2: &[f64], hp: &GpHyperParams) -> Result<f64, GpError> {
    for v in [x, x2] {
        if v.len() != hp.dim() {
            return Err(GpError::DimensionMismatch {
                expected: hp.dim(),
                found: v.len(),
            });
        }
    }
    let inv: Vec<f64> = hp.length_scales.iter().map(|l| 1.0 / (l * l)).collect();
    Ok(se(x, x2, &inv, hp.signal_variance))
}

#[inline]
fn se(x: &[f64], x2: &[f64], inv_sq: &[f64], signal: f64) -> f64 {
    let mut d2 = 0.0;
    for ((a, b), w) in x.iter().zip(x2).zip(inv_sq) {
        let d = a - b;
        d2 += d * d * w;
    }
    signal * (-0.5 * d2).exp()
}

/// A GP conditioned on a training set, ready for repeated prediction.
#[derive(Debug, Clone)]
pub struct FittedGp {
    training_set: TrainingSet,
    hyperparams: GpHyperParams,
    scaling: TargetScaling,
    dim: usize,
    // row-major n x dim copy of the inputs
    x: Vec<f64>,
    inv_sq_ls: Vec<f64>,
    chol: DMatrix<f64>,
    // row-major copy of the lower factor for forward substitution
    chol_rows: Vec<f64>,
    weights: DVector<f64>,
    jitter: f64,
}

struct Factor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

fn gram(inputs: &[Vec<f64>], hp: &GpHyperParams) -> DMatrix<f64> {
    let n = inputs.len();
    let inv: Vec<f64> = hp.length_scales.iter().map(|l| 1.0 / (l * l)).collect();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hp.signal_variance;
        for j in 0..i {
            let v = se(&inputs[i], &inputs[j], &inv, hp.signal_variance);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Factors `K + w2 I`, escalating diagonal jitter on failure.
fn factor(k_noisy: &DMatrix<f64>) -> Result<Factor, GpError> {
    if let Some(chol) = Cholesky::new(k_noisy.clone()) {
        return Ok(Factor { chol, jitter: 0.0 });
    }
    let mut attempted = Vec::new();
    for &jitter in &JITTER_SCHEDULE {
        attempted.push(jitter);
        let mut m = k_noisy.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(Factor { chol, jitter });
        }
    }
    Err(GpError::IllConditioned { attempted })
}

fn noisy_gram(data: &TrainingSet, hp: &GpHyperParams) -> DMatrix<f64> {
    let mut k = gram(&data.inputs, hp);
    for i in 0..k.nrows() {
        k[(i, i)] += hp.noise_variance;
    }
    k
}

fn check(data: &TrainingSet, hp: &GpHyperParams) -> Result<(), GpError> {
    let data = TrainingSet::new(data.inputs.clone(), data.targets.clone())?;
    hp.validate(data.dim().unwrap_or(hp.dim()))
}

impl FittedGp {
    /// Conditions the GP on `data` without rescaling the targets.
    pub fn fit(data: TrainingSet, hp: GpHyperParams) -> Result<Self, GpError> {
        Self::fit_scaled(data, hp, TargetScaling::IDENTITY)
    }

    /// Standardizes the targets first; `hp` is interpreted in standardized units.
    pub fn fit_standardized(data: TrainingSet, hp: GpHyperParams) -> Result<Self, GpError> {
        let scaling = TargetScaling::standardizing(&data.targets);
        Self::fit_scaled(data, hp, scaling)
    }

    pub fn fit_scaled(
        data: TrainingSet,
        hp: GpHyperParams,
        scaling: TargetScaling,
    ) -> Result<Self, GpError> {
        check(&data, &hp)?;
        let n = data.len();
        let dim = hp.dim();
        let y = DVector::from_iterator(n, data.targets.iter().map(|&t| scaling.forward(t)));
        let (chol, weights, jitter) = if n == 0 {
            (DMatrix::zeros(0, 0), DVector::zeros(0), 0.0)
        } else {
            let f = factor(&noisy_gram(&data, &hp))?;
            let w = f.chol.solve(&y);
            (f.chol.l(), w, f.jitter)
        };
        let mut chol_rows = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                chol_rows[i * n + j] = chol[(i, j)];
            }
        }
        let x = data.inputs.iter().flatten().copied().collect();
        let inv_sq_ls = hp.length_scales.iter().map(|l| 1.0 / (l * l)).collect();
        Ok(FittedGp {
            training_set: data,
            hyperparams: hp,
            scaling,
            dim,
            x,
            inv_sq_ls,
            chol,
            chol_rows,
            weights,
            jitter,
        })
    }

    pub fn training_set(&self) -> &TrainingSet {
        &self.training_set
    }

    pub fn hyperparams(&self) -> &GpHyperParams {
        &self.hyperparams
    }

    pub fn scaling(&self) -> TargetScaling {
        self.scaling
    }

    pub fn len(&self) -> usize {
        self.training_set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.training_set.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Lower Cholesky factor of `K + w2 I + jitter I`.
    pub fn chol_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// `(K + w2 I)^-1 y` in the fitted (possibly standardized) target units.
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Prior variance `a2` expressed in original target units.
    pub fn prior_variance(&self) -> f64 {
        self.hyperparams.signal_variance * self.scaling.scale * self.scaling.scale
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction, GpError> {
        if x.len() != self.dim {
            return Err(GpError::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(self.predict_unchecked(x))
    }

    fn cross_cov(&self, x: &[f64]) -> Vec<f64> {
        let a2 = self.hyperparams.signal_variance;
        self.x
            .chunks_exact(self.dim.max(1))
            .take(self.len())
            .map(|row| se(row, x, &self.inv_sq_ls, a2))
            .collect()
    }

    // L^-1 k in place
    fn forward_solve(&self, k: &mut [f64]) {
        let n = k.len();
        for i in 0..n {
            let row = &self.chol_rows[i * n..i * n + i];
            let s: f64 = row.iter().zip(&k[..i]).map(|(l, v)| l * v).sum();
            k[i] = (k[i] - s) / self.chol_rows[i * n + i];
        }
    }

    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> Prediction {
        let a2 = self.hyperparams.signal_variance;
        let s = self.scaling;
        if self.is_empty() {
            return Prediction {
                mean: s.offset,
                variance: a2 * s.scale * s.scale,
            };
        }
        let mut k = self.cross_cov(x);
        let mean: f64 = k.iter().zip(self.weights.iter()).map(|(a, b)| a * b).sum();
        self.forward_solve(&mut k);
        let reduction: f64 = k.iter().map(|v| v * v).sum();
        let var = (a2 - reduction).clamp(0.0, a2);
        Prediction {
            mean: mean * s.scale + s.offset,
            variance: var * s.scale * s.scale,
        }
    }

    pub(crate) fn predict_mean_unchecked(&self, x: &[f64]) -> f64 {
        if self.is_empty() {
            return self.scaling.offset;
        }
        let a2 = self.hyperparams.signal_variance;
        let mean: f64 = self
            .x
            .chunks_exact(self.dim.max(1))
            .zip(self.weights.iter())
            .map(|(row, w)| se(row, x, &self.inv_sq_ls, a2) * w)
            .sum();
        mean * self.scaling.scale + self.scaling.offset
    }

    /// Joint posterior of several test inputs: means and covariance in original units.
    pub fn predict_joint(&self, xs: &[&[f64]]) -> Result<(Vec<f64>, DMatrix<f64>), GpError> {
        for x in xs {
            if x.len() != self.dim {
                return Err(GpError::DimensionMismatch {
                    expected: self.dim,
                    found: x.len(),
                });
            }
        }
        let q = xs.len();
        let a2 = self.hyperparams.signal_variance;
        let s2 = self.scaling.scale * self.scaling.scale;
        let mut means = Vec::with_capacity(q);
        let mut solved = Vec::with_capacity(q);
        for x in xs {
            let mut k = self.cross_cov(x);
            let m: f64 = k.iter().zip(self.weights.iter()).map(|(a, b)| a * b).sum();
            means.push(m * self.scaling.scale + self.scaling.offset);
            self.forward_solve(&mut k);
            solved.push(k);
        }
        let mut cov = DMatrix::zeros(q, q);
        for i in 0..q {
            for j in 0..=i {
                let prior = se(xs[i], xs[j], &self.inv_sq_ls, a2);
                let red: f64 = solved[i].iter().zip(&solved[j]).map(|(a, b)| a * b).sum();
                let mut c = prior - red;
                if i == j {
                    c = c.clamp(0.0, a2);
                }
                cov[(i, j)] = c * s2;
                cov[(j, i)] = c * s2;
            }
        }
        Ok((means, cov))
    }

    /// Serializes hyperparameters and data; factors are rebuilt by [`FittedGp::from_json`].
    pub fn to_json(&self) -> Result<String, GpError> {
        let doc = GpDocument {
            version: DOCUMENT_VERSION,
            standardized: self.scaling != TargetScaling::IDENTITY,
            hyperparams: self.hyperparams.clone(),
            inputs: self.training_set.inputs.clone(),
            targets: self.training_set.targets.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self, GpError> {
        let doc: GpDocument = serde_json::from_str(text)?;
        if doc.version != DOCUMENT_VERSION {
            return Err(GpError::UnsupportedVersion(doc.version));
        }
        let data = TrainingSet::new(doc.inputs, doc.targets)?;
        if doc.standardized {
            Self::fit_standardized(data, doc.hyperparams)
        } else {
            Self::fit(data, doc.hyperparams)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GpDocument {
    version: u32,
    standardized: bool,
    hyperparams: GpHyperParams,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

/// `log p(y | X, hp)` for the targets exactly as given (no standardization).
pub fn log_marginal_likelihood(data: &TrainingSet, hp: &GpHyperParams) -> Result<f64, GpError> {
    check(data, hp)?;
    if data.is_empty() {
        return Err(GpError::EmptyTrainingSet);
    }
    let f = factor(&noisy_gram(data, hp))?;
    let y = DVector::from_column_slice(&data.targets);
    Ok(lml_from_factor(&f.chol, &y))
}

fn lml_from_factor(chol: &Cholesky<f64, Dyn>, y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let w = chol.solve(y);
    let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    -0.5 * y.dot(&w) - log_det_half - 0.5 * n * LN_2PI
}

/// Log marginal likelihood and its gradient with respect to
/// [`GpHyperParams::to_log_params`].
pub fn log_marginal_likelihood_with_gradient(
    data: &TrainingSet,
    hp: &GpHyperParams,
) -> Result<(f64, Vec<f64>), GpError> {
    check(data, hp)?;
    if data.is_empty() {
        return Err(GpError::EmptyTrainingSet);
    }
    let n = data.len();
    let m = hp.dim();
    let kf = gram(&data.inputs, hp);
    let mut k = kf.clone();
    for i in 0..n {
        k[(i, i)] += hp.noise_variance;
    }
    let f = factor(&k)?;
    let y = DVector::from_column_slice(&data.targets);
    let value = lml_from_factor(&f.chol, &y);
    let w = f.chol.solve(&y);
    // dL/dtheta = 0.5 tr((w w^T - K^-1) dK/dtheta)
    let mut a = f.chol.inverse();
    a.neg_mut();
    a.ger(1.0, &w, &w, 1.0);

    let mut grad = vec![0.0; m + 2];
    let mut inv_sq = vec![0.0; m];
    for (d, l) in hp.length_scales.iter().enumerate() {
        inv_sq[d] = 1.0 / (l * l);
    }
    for i in 0..n {
        let xi = &data.inputs[i];
        for j in 0..n {
            let aij = a[(i, j)];
            let kij = kf[(i, j)];
            let c = aij * kij;
            grad[0] += c;
            if i != j {
                let xj = &data.inputs[j];
                for d in 0..m {
                    let diff = xi[d] - xj[d];
                    grad[1 + d] += c * diff * diff * inv_sq[d];
                }
            }
        }
        grad[m + 1] += a[(i, i)] * hp.noise_variance;
    }
    for g in &mut grad {
        *g *= 0.5;
    }
    Ok((value, grad))
}

/// Box constraints on the hyperparameters (standardized target units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperBounds {
    pub length_scale: (f64, f64),
    pub signal_variance: (f64, f64),
    pub noise_variance: (f64, f64),
}

impl Default for HyperBounds {
    fn default() -> Self {
        HyperBounds {
            length_scale: (1e-2, 1e3),
            signal_variance: (1e-3, 1e2),
            noise_variance: (1e-6, 1e1),
        }
    }
}

impl HyperBounds {
    fn log_box(&self, dim: usize) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![self.signal_variance.0.ln()];
        let mut hi = vec![self.signal_variance.1.ln()];
        lo.extend(std::iter::repeat(self.length_scale.0.ln()).take(dim));
        hi.extend(std::iter::repeat(self.length_scale.1.ln()).take(dim));
        lo.push(self.noise_variance.0.ln());
        hi.push(self.noise_variance.1.ln());
        (lo, hi)
    }
}

/// How the folds are used when scoring a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldScheme {
    /// Fit on one fold, validate on the remaining ones.
    TrainOnOne,
    /// Conventional k-fold: fit on all but one fold, validate on it.
    TrainOnRest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub min_points: usize,
    pub folds: usize,
    pub fold_scheme: FoldScheme,
    /// Random starting points in addition to the default and data-scaled starts.
    pub random_starts: usize,
    pub max_ascent_steps: usize,
    pub bounds: HyperBounds,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            min_points: 5,
            folds: 5,
            fold_scheme: FoldScheme::TrainOnOne,
            random_starts: 2,
            max_ascent_steps: 40,
            bounds: HyperBounds::default(),
            seed: 0,
        }
    }
}

/// Result of [`select_hyperparams`].
#[derive(Debug, Clone, PartialEq)]
pub struct HyperparamChoice {
    pub hyperparams: GpHyperParams,
    /// Mean held-out log predictive density of the winner (`-inf` when skipped).
    pub score: f64,
    /// Set when too few points were available and defaults were returned.
    pub used_defaults: bool,
}

/// Index of the largest score; the earliest wins ties. NaN never wins.
pub fn best_candidate(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        match best {
            Some(b) if s <= scores[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Mean held-out Gaussian log predictive density under the configured folding.
pub fn cross_validation_score(
    data: &TrainingSet,
    hp: &GpHyperParams,
    folds: usize,
    scheme: FoldScheme,
    seed: u64,
) -> f64 {
    let n = data.len();
    let folds = folds.clamp(2, n.max(2));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (pos, &idx) in order.iter().enumerate() {
        assignment[idx] = pos % folds;
    }
    let mut total = 0.0;
    let mut counted = 0;
    for k in 0..folds {
        let (train, valid): (Vec<usize>, Vec<usize>) = match scheme {
            FoldScheme::TrainOnOne => (0..n).partition(|&i| assignment[i] == k),
            FoldScheme::TrainOnRest => (0..n).partition(|&i| assignment[i] != k),
        };
        if train.is_empty() || valid.is_empty() {
            continue;
        }
        let gp = match FittedGp::fit(data.subset(&train), hp.clone()) {
            Ok(gp) => gp,
            Err(_) => return f64::NEG_INFINITY,
        };
        let mut fold_sum = 0.0;
        for &i in &valid {
            let p = gp.predict_unchecked(&data.inputs[i]);
            let var = p.variance + hp.noise_variance;
            let r = data.targets[i] - p.mean;
            fold_sum += -0.5 * (LN_2PI + var.ln() + r * r / var);
        }
        total += fold_sum / valid.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        f64::NEG_INFINITY
    } else {
        total / counted as f64
    }
}

fn ascend(data: &TrainingSet, start: Vec<f64>, lo: &[f64], hi: &[f64], steps: usize) -> Vec<f64> {
    let clamp = |p: &mut Vec<f64>| {
        for ((v, l), h) in p.iter_mut().zip(lo).zip(hi) {
            *v = v.clamp(*l, *h);
        }
    };
    let eval = |p: &[f64]| {
        log_marginal_likelihood_with_gradient(data, &GpHyperParams::from_log_params(p)).ok()
    };
    let mut theta = start;
    clamp(&mut theta);
    let Some((mut value, mut grad)) = eval(&theta) else {
        return theta;
    };
    let mut step = 0.5;
    for _ in 0..steps {
        // drop components pushing against an active bound
        let dir: Vec<f64> = grad
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                if (theta[i] <= lo[i] && g < 0.0) || (theta[i] >= hi[i] && g > 0.0) {
                    0.0
                } else {
                    g
                }
            })
            .collect();
        let norm = dir.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if norm < 1e-8 {
            break;
        }
        let mut improved = false;
        while step > 1e-4 {
            let mut cand: Vec<f64> = theta
                .iter()
                .zip(&dir)
                .map(|(t, d)| t + step * d / norm)
                .collect();
            clamp(&mut cand);
            match eval(&cand) {
                Some((v, g)) if v > value => {
                    let gain = v - value;
                    theta = cand;
                    value = v;
                    grad = g;
                    improved = gain > 1e-9;
                    step = (step * 1.5).min(2.0);
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !improved {
            break;
        }
    }
    theta
}

fn data_scaled_start(data: &TrainingSet, dim: usize, bounds: &HyperBounds) -> GpHyperParams {
    let n = data.len() as f64;
    let length_scales = (0..dim)
        .map(|d| {
            let mean = data.inputs.iter().map(|r| r[d]).sum::<f64>() / n;
            let var = data.inputs.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            let l = if sd > 1e-9 { 2.0 * sd } else { bounds.length_scale.1 };
            l.clamp(bounds.length_scale.0, bounds.length_scale.1)
        })
        .collect();
    GpHyperParams {
        signal_variance: 1.0,
        length_scales,
        noise_variance: 0.1,
    }
}

/// Chooses hyperparameters for standardized targets.
///
/// Candidates, in evaluation order: the defaults, then local LML maxima
/// reached from the defaults, from a data-scaled start, and from
/// `random_starts` random starts. The candidate with the highest
/// cross-validation score wins; earlier candidates win ties.
pub fn select_hyperparams(data: &TrainingSet, search: &SearchConfig) -> HyperparamChoice {
    let dim = data.dim().unwrap_or(0);
    let defaults = GpHyperParams::default_for(dim);
    if data.len() < search.min_points.max(2) {
        return HyperparamChoice {
            hyperparams: defaults,
            score: f64::NEG_INFINITY,
            used_defaults: true,
        };
    }
    let scaling = TargetScaling::standardizing(&data.targets);
    let std_data = TrainingSet {
        inputs: data.inputs.clone(),
        targets: data.targets.iter().map(|&y| scaling.forward(y)).collect(),
    };
    let (lo, hi) = search.bounds.log_box(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(search.seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut starts = vec![
        defaults.to_log_params(),
        data_scaled_start(&std_data, dim, &search.bounds).to_log_params(),
    ];
    for _ in 0..search.random_starts {
        let mut p = Vec::with_capacity(dim + 2);
        p.push(rng.random_range(-1.0f64..1.0));
        for _ in 0..dim {
            p.push(rng.random_range(-1.5f64..3.0));
        }
        p.push(rng.random_range(-6.0f64..0.0));
        starts.push(p);
    }

    let mut candidates = vec![defaults];
    for start in starts {
        let theta = ascend(&std_data, start, &lo, &hi, search.max_ascent_steps);
        candidates.push(GpHyperParams::from_log_params(&theta));
    }
    let scores: Vec<f64> = candidates
        .iter()
        .map(|hp| {
            cross_validation_score(&std_data, hp, search.folds, search.fold_scheme, search.seed)
        })
        .collect();
    let best = best_candidate(&scores).unwrap_or(0);
    HyperparamChoice {
        hyperparams: candidates.swap_remove(best),
        score: scores[best],
        used_defaults: false,
    }
}

/// Predicted mean reward plus `(beta1 + beta2)` times the predicted variance.
///
/// The model's target is the scalar next reward, so the reward variance and
/// the next-state variance are the same quantity.
pub fn variance_bonus_reward(
    gp: &FittedGp,
    state: &State,
    action: ActionPair,
    beta1: f64,
    beta2: f64,
) -> Result<f64, GpError> {
    if beta1 < 0.0 || beta2 < 0.0 || beta1.is_nan() || beta2.is_nan() {
        return Err(GpError::NegativeBeta { beta1, beta2 });
    }
    let p = gp.predict(phi(state, action)?.as_slice())?;
    Ok(p.mean + (beta1 + beta2) * p.variance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hp(a2: f64, ls: Vec<f64>, w2: f64) -> GpHyperParams {
        GpHyperParams {
            signal_variance: a2,
            length_scales: ls,
            noise_variance: w2,
        }
    }

    #[test]
    fn kernel_examples() {
        let h = hp(1.0, vec![1.0, 1.0], 0.1);
        assert_eq!(kernel(&[0.3, 0.4], &[0.3, 0.4], &h).unwrap(), 1.0);
        assert_relative_eq!(
            kernel(&[2.0, 0.0], &[0.0, 0.0], &h).unwrap(),
            (-2.0f64).exp(),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            kernel(&[0.135335], &[0.135335], &hp(3.0, vec![1.0], 0.1)).unwrap(),
            3.0
        );
        // Lambda = diag(4) means l = 2
        let v = kernel(&[2.0], &[0.0], &hp(2.0, vec![2.0], 0.1)).unwrap();
        assert_relative_eq!(v, 2.0 * (-0.5f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(v, 1.213061, epsilon = 1e-6);
        assert!(matches!(
            kernel(&[1.0], &[1.0, 2.0], &h),
            Err(GpError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn fit_weights_small_systems() {
        let empty = FittedGp::fit(TrainingSet::default(), hp(1.0, vec![1.0], 0.1)).unwrap();
        assert_eq!(empty.chol_factor().nrows(), 0);
        let p = empty.predict(&[0.7]).unwrap();
        assert_eq!((p.mean, p.variance), (0.0, 1.0));

        let one = TrainingSet::new(vec![vec![0.0]], vec![2.0]).unwrap();
        let gp = FittedGp::fit(one, hp(1.0, vec![1.0], 0.25)).unwrap();
        assert_relative_eq!(gp.weights()[0], 1.6, epsilon = 1e-12);
        let p = gp.predict(&[0.0]).unwrap();
        assert_relative_eq!(p.mean, 1.6, epsilon = 1e-12);
        assert_relative_eq!(p.variance, 0.2, epsilon = 1e-12);

        let dup = TrainingSet::new(vec![vec![0.5]; 3], vec![1.0; 3]).unwrap();
        let gp = FittedGp::fit(dup, hp(1.0, vec![1.0], 0.5)).unwrap();
        for w in gp.weights().iter() {
            assert_relative_eq!(*w, 1.0 / 3.5, epsilon = 1e-12);
        }
        let p = gp.predict(&[0.5]).unwrap();
        assert_relative_eq!(p.mean, 6.0 / 7.0, epsilon = 1e-12);
        assert_relative_eq!(p.variance, 1.0 / 7.0, epsilon = 1e-12);
    }

    #[test]
    fn factor_reconstructs_gram_and_weights_solve_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..3).map(|_| rng.random::<f64>()).collect())
            .collect();
        let targets: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
        let data = TrainingSet::new(inputs, targets).unwrap();
        let h = hp(1.3, vec![0.4, 0.9, 2.0], 0.05);
        let gp = FittedGp::fit(data.clone(), h.clone()).unwrap();
        let k = noisy_gram(&data, &h);
        let l = gp.chol_factor();
        let rec = l * l.transpose();
        assert!((rec - &k).abs().max() < 1e-10 + gp.jitter());
        let resid = &k * gp.weights() - DVector::from_column_slice(&data.targets);
        assert!(resid.abs().max() < 1e-8);
    }

    #[test]
    fn duplicate_rows_with_tiny_noise_need_jitter() {
        let data = TrainingSet::new(vec![vec![0.1, 0.2]; 6], vec![1.0; 6]).unwrap();
        let gp = FittedGp::fit(data, hp(1.0, vec![1.0, 1.0], 1e-18)).unwrap();
        assert!(gp.jitter() > 0.0);
        assert!(JITTER_SCHEDULE.contains(&gp.jitter()));
    }

    #[test]
    fn ill_conditioning_reports_attempted_jitter() {
        let data = TrainingSet::new(vec![vec![0.0], vec![0.0]], vec![1.0, 1.0]).unwrap();
        match factor(&gram(&data.inputs, &hp(-1.0, vec![1.0], 1.0))) {
            Err(GpError::IllConditioned { attempted }) => assert_eq!(attempted, JITTER_SCHEDULE),
            _ => panic!("expected ill-conditioning"),
        }
        assert!(FittedGp::fit(data, hp(-1.0, vec![1.0], 1.0)).is_err());
    }

    #[test]
    fn lml_examples() {
        let d0 = TrainingSet::new(vec![vec![0.0]], vec![0.0]).unwrap();
        let v = log_marginal_likelihood(&d0, &hp(1.0, vec![1.0], 1.0)).unwrap();
        let expect = -0.5 * 2f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(v, expect, epsilon = 1e-12);
        assert_relative_eq!(v, -1.26551, epsilon = 1e-5);

        let d2 = TrainingSet::new(vec![vec![0.0]], vec![2.0]).unwrap();
        let v = log_marginal_likelihood(&d2, &hp(1.0, vec![1.0], 1e-12)).unwrap();
        assert_relative_eq!(v, -2.91894, epsilon = 1e-5);

        // zero targets: only the log-determinant and constant remain
        let z = TrainingSet::new(vec![vec![0.0], vec![1.0], vec![3.0]], vec![0.0; 3]).unwrap();
        let h = hp(0.7, vec![0.8], 0.3);
        let f = factor(&noisy_gram(&z, &h)).unwrap();
        let logdet_half: f64 = f.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        let v = log_marginal_likelihood(&z, &h).unwrap();
        assert_eq!(v, -logdet_half - 1.5 * LN_2PI);

        assert!(matches!(
            log_marginal_likelihood(&TrainingSet::default(), &h),
            Err(GpError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(3..15);
            let m = rng.random_range(1..5);
            let inputs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
            let data = TrainingSet::new(inputs, targets).unwrap();
            let h = hp(
                rng.random_range(0.3..3.0),
                (0..m).map(|_| rng.random_range(0.3..3.0)).collect(),
                rng.random_range(0.05..1.0),
            );
            let (_, grad) = log_marginal_likelihood_with_gradient(&data, &h).unwrap();
            let theta = h.to_log_params();
            let step = 1e-5;
            for i in 0..theta.len() {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[i] += step;
                dn[i] -= step;
                let fu =
                    log_marginal_likelihood(&data, &GpHyperParams::from_log_params(&up)).unwrap();
                let fd =
                    log_marginal_likelihood(&data, &GpHyperParams::from_log_params(&dn)).unwrap();
                let fd_grad = (fu - fd) / (2.0 * step);
                let denom = fd_grad.abs().max(grad[i].abs()).max(1e-6);
                assert!(
                    (fd_grad - grad[i]).abs() / denom < 1e-4,
                    "param {i}: analytic {} vs fd {}",
                    grad[i],
                    fd_grad
                );
            }
        }
    }

    #[test]
    fn best_candidate_rules() {
        assert_eq!(best_candidate(&[-3.0, -1.0]), Some(1));
        assert_eq!(best_candidate(&[-2.0, -2.0]), Some(0));
        assert_eq!(best_candidate(&[f64::NAN, -5.0]), Some(1));
        assert_eq!(best_candidate(&[]), None);
    }

    #[test]
    fn selection_skips_small_data() {
        let data = TrainingSet::new(vec![vec![0.0; 3]; 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = select_hyperparams(&data, &SearchConfig::default());
        assert!(c.used_defaults);
        assert_eq!(c.hyperparams, GpHyperParams::default_for(3));
    }

    #[test]
    fn selection_beats_or_matches_defaults() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..2).map(|_| rng.random_range(0.0..4.0)).collect())
            .collect();
        let targets: Vec<f64> = inputs.iter().map(|x| 10.0 * (x[0]).sin() + 50.0).collect();
        let data = TrainingSet::new(inputs, targets).unwrap();
        let search = SearchConfig::default();
        let c = select_hyperparams(&data, &search);
        assert!(!c.used_defaults);
        let scaling = TargetScaling::standardizing(&data.targets);
        let std_data = TrainingSet {
            inputs: data.inputs.clone(),
            targets: data.targets.iter().map(|&y| scaling.forward(y)).collect(),
        };
        let default_score = cross_validation_score(
            &std_data,
            &GpHyperParams::default_for(2),
            search.folds,
            search.fold_scheme,
            search.seed,
        );
        assert!(c.score >= default_score);
        c.hyperparams.validate(2).unwrap();
    }

    #[test]
    fn standardized_fit_reports_original_units() {
        let data = TrainingSet::new(
            vec![vec![0.0], vec![1.0], vec![2.0]],
            vec![100.0, 120.0, 140.0],
        )
        .unwrap();
        let gp = FittedGp::fit_standardized(data, hp(1.0, vec![1.0], 1e-8)).unwrap();
        let p = gp.predict(&[1.0]).unwrap();
        assert_relative_eq!(p.mean, 120.0, epsilon = 1e-4);
        let far = gp.predict(&[100.0]).unwrap();
        assert_relative_eq!(far.mean, 120.0, epsilon = 1e-9);
        assert_relative_eq!(far.variance, gp.prior_variance(), epsilon = 1e-9);
        assert!(gp.prior_variance() > 200.0);
    }

    #[test]
    fn joint_prediction_agrees_with_marginals() {
        let data = TrainingSet::new(
            vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![2.0, 1.0]],
            vec![1.0, -1.0, 0.5],
        )
        .unwrap();
        let gp = FittedGp::fit_standardized(data, hp(1.0, vec![1.0, 1.0], 0.1)).unwrap();
        let a = [0.5, 0.5];
        let b = [3.0, 0.0];
        let (means, cov) = gp.predict_joint(&[&a, &b]).unwrap();
        for (i, x) in [&a[..], &b[..]].iter().enumerate() {
            let p = gp.predict(x).unwrap();
            assert_relative_eq!(means[i], p.mean, epsilon = 1e-12);
            assert_relative_eq!(cov[(i, i)], p.variance, epsilon = 1e-12);
        }
        assert_eq!(cov[(0, 1)], cov[(1, 0)]);
    }

    #[test]
    fn json_round_trip_rebuilds_factor() {
        let data = TrainingSet::new(vec![vec![0.0], vec![1.0]], vec![3.0, 5.0]).unwrap();
        let gp = FittedGp::fit_standardized(data, hp(1.0, vec![0.7], 0.2)).unwrap();
        let text = gp.to_json().unwrap();
        let back = FittedGp::from_json(&text).unwrap();
        assert_eq!(back.predict(&[0.4]).unwrap(), gp.predict(&[0.4]).unwrap());
        let bumped = text.replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(
            FittedGp::from_json(&bumped),
            Err(GpError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn variance_bonus_examples() {
        let gp = FittedGp::fit(
            TrainingSet::default(),
            GpHyperParams::default_for(crate::features::FEATURE_DIM),
        )
        .unwrap();
        let a = ActionPair::new(0.5, 0.5).unwrap();
        let s = State::start();
        assert_relative_eq!(variance_bonus_reward(&gp, &s, a, 3.5, 0.0).unwrap(), 3.5);
        assert_relative_eq!(variance_bonus_reward(&gp, &s, a, 0.0, 0.0).unwrap(), 0.0);
        assert!(matches!(
            variance_bonus_reward(&gp, &s, a, -1.0, 0.0),
            Err(GpError::NegativeBeta { .. })
        ));

        // prior with offset 10 and variance 2: mean 10, variance 2 everywhere
        let shifted = FittedGp::fit_scaled(
            TrainingSet::default(),
            GpHyperParams {
                signal_variance: 2.0,
                ..GpHyperParams::default_for(14)
            },
            TargetScaling {
                offset: 10.0,
                scale: 1.0,
            },
        )
        .unwrap();
        assert_relative_eq!(
            variance_bonus_reward(&shifted, &s, a, 2.0, 1.5).unwrap(),
            17.0,
            epsilon = 1e-12
        );
    }
}
