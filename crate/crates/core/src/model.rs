//! Core domain types: observation sequences, Gaussian emissions and the
//! left-right HMM parameter set, plus model validation and JSON persistence.
//!
//! Probabilities are held in log space throughout. A left-right model has
//! one hidden state per time step of the training trajectories; transitions
//! may only stay put or move forward by at most `band_width` states.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{HmmError, Result};
use crate::logspace::ln_prob;

/// Absolute lower bound on the diagonal loading added to every estimated covariance.
pub const COVARIANCE_ABS_FLOOR: f64 = 1e-9;

const STOCHASTIC_TOL: f64 = 1e-9;
const SYMMETRY_RTOL: f64 = 1e-12;

/// One recorded or synthesized trial: `len` time steps of `n_dims` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSequence {
    values: Vec<f64>,
    len: usize,
    n_dims: usize,
    pub dt: f64,
    pub label: Option<u8>,
    pub sensor_id: String,
    pub trial_id: u64,
}

impl ObservationSequence {
    /// Builds a sequence from row-major samples (`rows[t][channel]`).
    pub fn new(rows: Vec<Vec<f64>>, dt: f64, sensor_id: impl Into<String>) -> Result<Self> {
        let len = rows.len();
        if len == 0 {
            return Err(HmmError::usage("observation sequence must have at least one time step"));
        }
        let n_dims = rows[0].len();
        if n_dims == 0 {
            return Err(HmmError::usage("observation sequence must have at least one channel"));
        }
        let mut values = Vec::with_capacity(len * n_dims);
        for (t, row) in rows.into_iter().enumerate() {
            if row.len() != n_dims {
                return Err(HmmError::usage(format!(
                    "ragged sequence: step {t} has {} channels, expected {n_dims}",
                    row.len()
                )));
            }
            values.extend(row);
        }
        Self::from_flat(values, n_dims, dt, sensor_id)
    }

    pub fn from_flat(
        values: Vec<f64>,
        n_dims: usize,
        dt: f64,
        sensor_id: impl Into<String>,
    ) -> Result<Self> {
        if n_dims == 0 || values.is_empty() || values.len() % n_dims != 0 {
            return Err(HmmError::usage(format!(
                "cannot shape {} values into rows of {n_dims} channels",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(HmmError::usage(format!(
                "non-finite value at step {}, channel {}",
                pos / n_dims,
                pos % n_dims
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(HmmError::usage(format!("sampling interval must be positive, got {dt}")));
        }
        Ok(Self {
            len: values.len() / n_dims,
            values,
            n_dims,
            dt,
            label: None,
            sensor_id: sensor_id.into(),
            trial_id: 0,
        })
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_trial_id(mut self, trial_id: u64) -> Self {
        self.trial_id = trial_id;
        self
    }

    /// Number of time steps T.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of channels M.
    pub fn n_dims(&self) -> usize {
        self.n_dims
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_dims..(t + 1) * self.n_dims]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_dims)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows().map(move |r| r[c])
    }

    /// The first `steps` time steps, keeping metadata.
    pub fn truncated(&self, steps: usize) -> Result<Self> {
        if steps == 0 || steps > self.len {
            return Err(HmmError::usage(format!(
                "cannot truncate a {}-step sequence to {steps} steps",
                self.len
            )));
        }
        let mut out = self.clone();
        out.values.truncate(steps * self.n_dims);
        out.len = steps;
        Ok(out)
    }

    /// Steps `from..` of the sequence, keeping metadata.
    pub fn tail_from(&self, from: usize) -> Result<Self> {
        if from >= self.len {
            return Err(HmmError::usage(format!(
                "cannot take the tail from step {from} of a {}-step sequence",
                self.len
            )));
        }
        let mut out = self.clone();
        out.values = self.values[from * self.n_dims..].to_vec();
        out.len = self.len - from;
        Ok(out)
    }

    pub fn duration_s(&self) -> f64 {
        self.len as f64 * self.dt
    }
}

/// A multivariate normal emission density with its Cholesky factor cached.
#[derive(Debug, Clone)]
pub struct GaussianEmission {
    mean: Vec<f64>,
    covariance: DMatrix<f64>,
    // row-major lower-triangular Cholesky factor
    chol: Vec<f64>,
    log_norm: f64,
}

impl PartialEq for GaussianEmission {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.covariance == other.covariance
    }
}

impl GaussianEmission {
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let m = mean.len();
        if m == 0 {
            return Err(HmmError::usage("emission mean must have at least one dimension"));
        }
        if covariance.nrows() != m || covariance.ncols() != m {
            return Err(HmmError::usage(format!(
                "covariance is {}x{}, mean has length {m}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(HmmError::invalid("emission parameters must be finite"));
        }
        if !is_symmetric(&covariance) {
            return Err(HmmError::invalid("covariance is not symmetric"));
        }
        let factor = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| HmmError::invalid("covariance is not positive definite"))?;
        let l = factor.l();
        let mut chol = vec![0.0; m * m];
        let mut log_det = 0.0;
        for i in 0..m {
            for j in 0..=i {
                chol[i * m + j] = l[(i, j)];
            }
            log_det += 2.0 * l[(i, i)].ln();
        }
        let log_norm = -0.5 * (m as f64 * (2.0 * PI).ln() + log_det);
        Ok(Self {
            mean,
            covariance,
            chol,
            log_norm,
        })
    }

    /// Diagonal covariance from per-channel variances.
    pub fn diagonal(mean: Vec<f64>, variances: &[f64]) -> Result<Self> {
        let cov = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(variances));
        Self::new(mean, cov)
    }

    pub fn n_dims(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Per-channel standard deviations (square roots of the covariance diagonal).
    pub fn std_devs(&self) -> Vec<f64> {
        (0..self.n_dims())
            .map(|i| self.covariance[(i, i)].sqrt())
            .collect()
    }

    /// Log-density without dimension checks; `x.len()` must equal `n_dims`.
    #[inline]
    pub(crate) fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        let m = self.mean.len();
        if m == 1 {
            let z = (x[0] - self.mean[0]) / self.chol[0];
            return self.log_norm - 0.5 * z * z;
        }
        // forward substitution L z = x - mean
        let mut z = vec![0.0; m];
        let mut quad = 0.0;
        for i in 0..m {
            let mut acc = x[i] - self.mean[i];
            for k in 0..i {
                acc -= self.chol[i * m + k] * z[k];
            }
            z[i] = acc / self.chol[i * m + i];
            quad += z[i] * z[i];
        }
        self.log_norm - 0.5 * quad
    }
}

/// `ln N(x; mean, covariance)` via the cached Cholesky factorization.
pub fn gaussian_log_density(x: &[f64], g: &GaussianEmission) -> Result<f64> {
    if x.len() != g.n_dims() {
        return Err(HmmError::usage(format!(
            "observation has {} channels, emission expects {}",
            x.len(),
            g.n_dims()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(HmmError::usage("observation contains non-finite values"));
    }
    Ok(g.log_density_unchecked(x))
}

/// Adds `eps * I` with `eps = max(rel_eps * trace / M, COVARIANCE_ABS_FLOOR)`.
pub fn regularize_covariance(mut cov: DMatrix<f64>, rel_eps: f64) -> DMatrix<f64> {
    let m = cov.nrows();
    let eps = (rel_eps * cov.trace() / m as f64).max(COVARIANCE_ABS_FLOOR);
    for i in 0..m {
        cov[(i, i)] += eps;
    }
    cov
}

fn is_symmetric(cov: &DMatrix<f64>) -> bool {
    let m = cov.nrows();
    let scale = cov.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    for i in 0..m {
        for j in (i + 1)..m {
            if (cov[(i, j)] - cov[(j, i)]).abs() > SYMMETRY_RTOL * scale {
                return false;
            }
        }
    }
    true
}

/// A violated model invariant, as reported by [`validate_model`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ShapeMismatch(String),
    InitialNotNormalized { sum: f64 },
    RowNotStochastic { row: usize, sum: f64 },
    BackwardTransition { from: usize, to: usize },
    BeyondBand { from: usize, to: usize },
    InvalidProbability { what: String },
    EmissionDimension { state: usize, n_dims: usize },
    CovarianceNotSymmetric { state: usize },
    CovarianceNotPositiveDefinite { state: usize, min_eigenvalue: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ShapeMismatch(s) => write!(f, "shape mismatch: {s}"),
            Violation::InitialNotNormalized { sum } => {
                write!(f, "initial distribution sums to {sum}")
            }
            Violation::RowNotStochastic { row, sum } => {
                write!(f, "transition row {row} sums to {sum}")
            }
            Violation::BackwardTransition { from, to } => {
                write!(f, "backward transition {from} -> {to} has non-zero probability")
            }
            Violation::BeyondBand { from, to } => {
                write!(f, "transition {from} -> {to} exceeds the band width")
            }
            Violation::InvalidProbability { what } => write!(f, "invalid probability: {what}"),
            Violation::EmissionDimension { state, n_dims } => {
                write!(f, "emission {state} has {n_dims} dimensions")
            }
            Violation::CovarianceNotSymmetric { state } => {
                write!(f, "covariance of state {state} is not symmetric")
            }
            Violation::CovarianceNotPositiveDefinite {
                state,
                min_eigenvalue,
            } => write!(
                f,
                "covariance of state {state} is not positive definite (min eigenvalue {min_eigenvalue:e})"
            ),
        }
    }
}

/// Left-right HMM parameters `{pi, A, B}` in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct LrHmmModel {
    n_states: usize,
    n_dims: usize,
    band_width: usize,
    log_pi: Vec<f64>,
    // row-major N x N
    log_a: Vec<f64>,
    emissions: Vec<GaussianEmission>,
}

impl LrHmmModel {
    /// Builds a model and rejects it if any invariant is violated.
    pub fn new(
        log_pi: Vec<f64>,
        log_a: Vec<f64>,
        emissions: Vec<GaussianEmission>,
        band_width: usize,
    ) -> Result<Self> {
        let model = Self::from_parts_unchecked(log_pi, log_a, emissions, band_width)?;
        let violations = validate_model(&model);
        if !violations.is_empty() {
            let msg = violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ");
            return Err(HmmError::invalid(msg));
        }
        Ok(model)
    }

    /// Builds a model checking only array shapes; use [`validate_model`] to audit it.
    pub fn from_parts_unchecked(
        log_pi: Vec<f64>,
        log_a: Vec<f64>,
        emissions: Vec<GaussianEmission>,
        band_width: usize,
    ) -> Result<Self> {
        let n = log_pi.len();
        if n == 0 {
            return Err(HmmError::usage("model must have at least one state"));
        }
        if log_a.len() != n * n {
            return Err(HmmError::usage(format!(
                "transition matrix has {} entries, expected {}",
                log_a.len(),
                n * n
            )));
        }
        if emissions.len() != n {
            return Err(HmmError::usage(format!(
                "{} emissions for {n} states",
                emissions.len()
            )));
        }
        if band_width == 0 {
            return Err(HmmError::usage("band width must be at least 1"));
        }
        let n_dims = emissions[0].n_dims();
        Ok(Self {
            n_states: n,
            n_dims,
            band_width,
            log_pi,
            log_a,
            emissions,
        })
    }

    /// Canonical left-right model: all initial mass on the first state and
    /// uniform transitions within the band (the last state absorbs).
    pub fn canonical(emissions: Vec<GaussianEmission>, band_width: usize) -> Result<Self> {
        let n = emissions.len();
        if n == 0 {
            return Err(HmmError::usage("model must have at least one state"));
        }
        let mut log_pi = vec![f64::NEG_INFINITY; n];
        log_pi[0] = 0.0;
        let mut log_a = vec![f64::NEG_INFINITY; n * n];
        for i in 0..n {
            let hi = (i + band_width).min(n - 1);
            let p = ((hi - i + 1) as f64).recip().ln();
            for j in i..=hi {
                log_a[i * n + j] = p;
            }
        }
        Self::new(log_pi, log_a, emissions, band_width)
    }

    /// Builds a model from linear-space probabilities.
    pub fn from_probabilities(
        pi: &[f64],
        a: &[Vec<f64>],
        emissions: Vec<GaussianEmission>,
        band_width: usize,
    ) -> Result<Self> {
        let log_pi = pi.iter().map(|&p| ln_prob(p)).collect();
        let log_a = a.iter().flat_map(|r| r.iter().map(|&p| ln_prob(p))).collect();
        if a.iter().any(|r| r.len() != pi.len()) || a.len() != pi.len() {
            return Err(HmmError::usage("transition matrix must be N x N"));
        }
        Self::new(log_pi, log_a, emissions, band_width)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_dims(&self) -> usize {
        self.n_dims
    }

    pub fn band_width(&self) -> usize {
        self.band_width
    }

    pub fn log_pi(&self) -> &[f64] {
        &self.log_pi
    }

    #[inline]
    pub fn log_transition(&self, from: usize, to: usize) -> f64 {
        self.log_a[from * self.n_states + to]
    }

    pub fn log_transition_row(&self, from: usize) -> &[f64] {
        &self.log_a[from * self.n_states..(from + 1) * self.n_states]
    }

    pub fn log_a(&self) -> &[f64] {
        &self.log_a
    }

    pub fn emissions(&self) -> &[GaussianEmission] {
        &self.emissions
    }

    pub fn emission(&self, state: usize) -> &GaussianEmission {
        &self.emissions[state]
    }

    /// Highest state index reachable after `steps` transitions from the initial support.
    pub(crate) fn reach_limit(&self, steps: usize) -> usize {
        let start = self
            .log_pi
            .iter()
            .rposition(|&p| p > f64::NEG_INFINITY)
            .unwrap_or(0);
        start
            .saturating_add(steps.saturating_mul(self.band_width))
            .min(self.n_states - 1)
    }

    /// Same-shape check used by every scoring routine.
    pub(crate) fn check_sequence(&self, seq: &ObservationSequence) -> Result<()> {
        if seq.n_dims() != self.n_dims {
            return Err(HmmError::usage(format!(
                "sequence has {} channels, model expects {}",
                seq.n_dims(),
                self.n_dims
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        doc.into_model()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| e.context(format!("loading {}", path.display())))
    }
}

/// Lists every violated invariant; an empty list means the model is valid.
pub fn validate_model(m: &LrHmmModel) -> Vec<Violation> {
    let n = m.n_states;
    let mut out = Vec::new();
    if m.log_pi.len() != n || m.log_a.len() != n * n || m.emissions.len() != n {
        out.push(Violation::ShapeMismatch(format!(
            "pi {}, A {}, emissions {} for {n} states",
            m.log_pi.len(),
            m.log_a.len(),
            m.emissions.len()
        )));
        return out;
    }

    if m.log_pi.iter().any(|p| p.is_nan() || *p > 0.0) {
        out.push(Violation::InvalidProbability {
            what: "initial distribution".into(),
        });
    } else {
        let sum: f64 = m.log_pi.iter().map(|p| p.exp()).sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            out.push(Violation::InitialNotNormalized { sum });
        }
    }

    for i in 0..n {
        let row = m.log_transition_row(i);
        if row.iter().any(|p| p.is_nan() || *p > 0.0) {
            out.push(Violation::InvalidProbability {
                what: format!("transition row {i}"),
            });
            continue;
        }
        for (j, &lp) in row.iter().enumerate() {
            if lp > f64::NEG_INFINITY {
                if j < i {
                    out.push(Violation::BackwardTransition { from: i, to: j });
                } else if j > i + m.band_width {
                    out.push(Violation::BeyondBand { from: i, to: j });
                }
            }
        }
        let sum: f64 = row.iter().map(|p| p.exp()).sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            out.push(Violation::RowNotStochastic { row: i, sum });
        }
    }

    for (state, e) in m.emissions.iter().enumerate() {
        if e.n_dims() != m.n_dims {
            out.push(Violation::EmissionDimension {
                state,
                n_dims: e.n_dims(),
            });
            continue;
        }
        if !is_symmetric(&e.covariance) {
            out.push(Violation::CovarianceNotSymmetric { state });
            continue;
        }
        let min_eigenvalue = SymmetricEigen::new(e.covariance.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if !(min_eigenvalue > 0.0) {
            out.push(Violation::CovarianceNotPositiveDefinite {
                state,
                min_eigenvalue,
            });
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct EmissionDocument {
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelDocument {
    n_states: usize,
    n_dims: usize,
    band_width: usize,
    pi: Vec<f64>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    emissions: Vec<EmissionDocument>,
}

impl From<&LrHmmModel> for ModelDocument {
    fn from(m: &LrHmmModel) -> Self {
        let n = m.n_states;
        Self {
            n_states: n,
            n_dims: m.n_dims,
            band_width: m.band_width,
            pi: m.log_pi.iter().map(|p| p.exp()).collect(),
            a: (0..n)
                .map(|i| m.log_transition_row(i).iter().map(|p| p.exp()).collect())
                .collect(),
            emissions: m
                .emissions
                .iter()
                .map(|e| EmissionDocument {
                    mean: e.mean.clone(),
                    covariance: (0..e.n_dims())
                        .map(|i| e.covariance.row(i).iter().copied().collect())
                        .collect(),
                })
                .collect(),
        }
    }
}

impl ModelDocument {
    fn into_model(self) -> Result<LrHmmModel> {
        if self.pi.len() != self.n_states {
            return Err(HmmError::invalid(format!(
                "pi has {} entries, n_states is {}",
                self.pi.len(),
                self.n_states
            )));
        }
        let emissions = self
            .emissions
            .into_iter()
            .enumerate()
            .map(|(state, e)| {
                let m = e.mean.len();
                if m != self.n_dims || e.covariance.iter().any(|r| r.len() != m) || e.covariance.len() != m {
                    return Err(HmmError::invalid(format!(
                        "emission {state} does not match n_dims {}",
                        self.n_dims
                    )));
                }
                let cov = DMatrix::from_fn(m, m, |i, j| e.covariance[i][j]);
                GaussianEmission::new(e.mean, cov)
                    .map_err(|err| err.context(format!("emission {state}")))
            })
            .collect::<Result<Vec<_>>>()?;
        LrHmmModel::from_probabilities(&self.pi, &self.a, emissions, self.band_width)
    }
}
