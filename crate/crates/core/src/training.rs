//! Baum-Welch estimation of left-right Gaussian HMMs.
//!
//! The E-step is a log-space forward-backward pass restricted to the states
//! reachable under the left-right band; the M-step re-estimates the initial
//! distribution and transitions from the posteriors and fits each state's
//! Gaussian by posterior-weighted maximum likelihood.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{HmmError, Result};
use crate::logspace::{ln_prob, log_add, log_sum_exp};
use crate::model::{regularize_covariance, GaussianEmission, LrHmmModel, ObservationSequence};

/// States whose summed posterior falls below this abort training.
pub const DEGENERATE_MASS: f64 = 1e-12;

/// Relative scale of the seeded perturbation applied to initial emission means.
const INIT_MEAN_JITTER: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub max_iterations: usize,
    pub loglik_rel_tolerance: f64,
    /// Relative diagonal loading: `eps = covariance_floor_eps * trace / M`.
    pub covariance_floor_eps: f64,
    pub rng_seed: u64,
    pub band_width: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            loglik_rel_tolerance: 1e-6,
            covariance_floor_eps: 1e-6,
            rng_seed: 0,
            band_width: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(HmmError::usage("max_iterations must be at least 1"));
        }
        if !(self.loglik_rel_tolerance > 0.0) {
            return Err(HmmError::usage("loglik_rel_tolerance must be positive"));
        }
        if !(self.covariance_floor_eps > 0.0) {
            return Err(HmmError::usage("covariance_floor_eps must be positive"));
        }
        if self.band_width < 1 {
            return Err(HmmError::usage("band_width must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    /// Total log-likelihood of the training set under each successive model,
    /// starting with the initial model.
    pub log_likelihoods: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
}

/// Forward-backward quantities for one sequence under one model.
///
/// `log_alpha`, `log_beta` and `gamma` are `len x n_states`, row-major.
/// Entries for states the band makes unreachable at a step hold `-inf`
/// (`0.0` in `gamma`); `log_beta` is only evaluated on reachable states.
#[derive(Debug, Clone)]
pub struct ForwardBackwardCache {
    pub len: usize,
    pub n_states: usize,
    pub log_alpha: Vec<f64>,
    pub log_beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// `ln sum_t xi_t(i, j)` over consecutive step pairs, `n_states x n_states`.
    pub log_xi_sums: Vec<f64>,
    pub log_likelihood: f64,
    // highest reachable state per step
    reach: Vec<usize>,
}

impl ForwardBackwardCache {
    pub fn gamma_row(&self, t: usize) -> &[f64] {
        &self.gamma[t * self.n_states..(t + 1) * self.n_states]
    }

    pub fn alpha_row(&self, t: usize) -> &[f64] {
        &self.log_alpha[t * self.n_states..(t + 1) * self.n_states]
    }

    pub fn reach(&self, t: usize) -> usize {
        self.reach[t]
    }
}

/// Per-step emission log-densities for the reachable states, row-major `len x n_states`.
pub(crate) fn emission_table(
    seq: &ObservationSequence,
    m: &LrHmmModel,
    reach: &[usize],
) -> Vec<f64> {
    let n = m.n_states();
    let mut table = vec![f64::NEG_INFINITY; reach.len() * n];
    for (t, &hi) in reach.iter().enumerate() {
        let x = seq.row(t);
        let row = &mut table[t * n..(t + 1) * n];
        for (j, slot) in row.iter_mut().enumerate().take(hi + 1) {
            *slot = m.emission(j).log_density_unchecked(x);
        }
    }
    table
}

pub(crate) fn reach_profile(m: &LrHmmModel, len: usize) -> Vec<usize> {
    (0..len).map(|t| m.reach_limit(t)).collect()
}

/// Log forward variables; returns `(log_alpha, log_likelihood)`.
pub(crate) fn forward_pass(
    m: &LrHmmModel,
    log_b: &[f64],
    reach: &[usize],
) -> (Vec<f64>, f64) {
    let n = m.n_states();
    let band = m.band_width();
    let len = reach.len();
    let mut alpha = vec![f64::NEG_INFINITY; len * n];
    for j in 0..=reach[0] {
        alpha[j] = m.log_pi()[j] + log_b[j];
    }
    for t in 1..len {
        let (prev, cur) = alpha.split_at_mut(t * n);
        let prev = &prev[(t - 1) * n..];
        let prev_hi = reach[t - 1];
        for j in 0..=reach[t] {
            let lo = j.saturating_sub(band);
            let mut acc = f64::NEG_INFINITY;
            for i in lo..=j.min(prev_hi) {
                acc = log_add(acc, prev[i] + m.log_transition(i, j));
            }
            cur[j] = acc + log_b[t * n + j];
        }
    }
    let last = &alpha[(len - 1) * n..(len - 1) * n + reach[len - 1] + 1];
    let ll = log_sum_exp(last);
    (alpha, ll)
}

fn backward_pass(m: &LrHmmModel, log_b: &[f64], reach: &[usize]) -> Vec<f64> {
    let n = m.n_states();
    let band = m.band_width();
    let len = reach.len();
    let mut beta = vec![f64::NEG_INFINITY; len * n];
    for j in 0..=reach[len - 1] {
        beta[(len - 1) * n + j] = 0.0;
    }
    for t in (0..len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * n);
        let cur = &mut cur[t * n..];
        let next_b = &log_b[(t + 1) * n..(t + 2) * n];
        let next_hi = reach[t + 1];
        for i in 0..=reach[t] {
            let mut acc = f64::NEG_INFINITY;
            for j in i..=(i + band).min(next_hi) {
                acc = log_add(acc, m.log_transition(i, j) + next_b[j] + next[j]);
            }
            cur[i] = acc;
        }
    }
    beta
}

/// Log-space forward-backward pass. Histories shorter than the model horizon
/// are allowed; longer ones are not, because the chain cannot extend past its
/// last state.
pub fn forward_backward(seq: &ObservationSequence, m: &LrHmmModel) -> Result<ForwardBackwardCache> {
    m.check_sequence(seq)?;
    let n = m.n_states();
    let band = m.band_width();
    let len = seq.len();
    let reach = reach_profile(m, len);
    let log_b = emission_table(seq, m, &reach);
    let (log_alpha, log_likelihood) = forward_pass(m, &log_b, &reach);
    if !log_likelihood.is_finite() {
        return Err(HmmError::invalid(format!(
            "sequence has zero likelihood under the model (log-likelihood {log_likelihood})"
        )));
    }
    let log_beta = backward_pass(m, &log_b, &reach);

    // sum_j alpha_t(j) beta_t(j) equals the likelihood at every step
    let mut gamma = vec![0.0; len * n];
    for t in 0..len {
        for j in 0..=reach[t] {
            gamma[t * n + j] = (log_alpha[t * n + j] + log_beta[t * n + j] - log_likelihood).exp();
        }
    }

    // xi is a posterior (<= 1), so it is summed in linear space; the largest
    // log term is kept for transitions whose every term underflows
    let mut xi_sums = vec![0.0; n * n];
    let mut xi_max = vec![f64::NEG_INFINITY; n * n];
    for t in 0..len.saturating_sub(1) {
        let next_hi = reach[t + 1];
        for i in 0..=reach[t] {
            let a = log_alpha[t * n + i];
            if a == f64::NEG_INFINITY {
                continue;
            }
            for j in i..=(i + band).min(next_hi) {
                let lt = m.log_transition(i, j);
                if lt == f64::NEG_INFINITY {
                    continue;
                }
                let v = a + lt + log_b[(t + 1) * n + j] + log_beta[(t + 1) * n + j]
                    - log_likelihood;
                xi_sums[i * n + j] += v.exp();
                let slot = &mut xi_max[i * n + j];
                if v > *slot {
                    *slot = v;
                }
            }
        }
    }
    let log_xi_sums = xi_sums
        .iter()
        .zip(&xi_max)
        .map(|(&s, &mx)| if s > 0.0 { s.ln() } else { mx })
        .collect();

    Ok(ForwardBackwardCache {
        len,
        n_states: n,
        log_alpha,
        log_beta,
        gamma,
        log_xi_sums,
        log_likelihood,
        reach,
    })
}

/// Sorts sequences by trial id (then by values) so accumulation order does
/// not depend on the order the caller supplied them in.
fn canonical_order(sequences: &[ObservationSequence]) -> Vec<&ObservationSequence> {
    let mut refs: Vec<&ObservationSequence> = sequences.iter().collect();
    refs.sort_by(|a, b| {
        a.trial_id.cmp(&b.trial_id).then_with(|| {
            a.values()
                .iter()
                .zip(b.values())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.len().cmp(&b.len()))
        })
    });
    refs
}

fn check_shapes(sequences: &[&ObservationSequence]) -> Result<(usize, usize)> {
    let first = sequences
        .first()
        .ok_or_else(|| HmmError::usage("at least one training sequence is required"))?;
    let (len, dims) = (first.len(), first.n_dims());
    for s in sequences {
        if s.len() != len || s.n_dims() != dims {
            return Err(HmmError::usage(format!(
                "training sequences must share shape: trial {} is {}x{}, expected {len}x{dims}",
                s.trial_id,
                s.len(),
                s.n_dims()
            )));
        }
    }
    Ok((len, dims))
}

/// Seeded initial model: one state per time step, canonical left-right
/// transitions, emissions centred on the cross-sequence mean at each step.
pub fn initialize_model(
    sequences: &[ObservationSequence],
    config: &TrainingConfig,
) -> Result<LrHmmModel> {
    config.validate()?;
    let ordered = canonical_order(sequences);
    let (len, dims) = check_shapes(&ordered)?;
    let k = ordered.len() as f64;

    // global per-channel standard deviation sets the jitter scale
    let total = k * len as f64;
    let mut global_std = vec![0.0; dims];
    for c in 0..dims {
        let mean = ordered.iter().flat_map(|s| s.channel(c)).sum::<f64>() / total;
        let var = ordered
            .iter()
            .flat_map(|s| s.channel(c))
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / total;
        global_std[c] = var.sqrt();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut emissions = Vec::with_capacity(len);
    for t in 0..len {
        let mut mean = vec![0.0; dims];
        for s in &ordered {
            for (m, v) in mean.iter_mut().zip(s.row(t)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= k);
        let mut var = vec![0.0; dims];
        for s in &ordered {
            for ((acc, v), m) in var.iter_mut().zip(s.row(t)).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= k);
        for (m, sd) in mean.iter_mut().zip(&global_std) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *m += INIT_MEAN_JITTER * sd * z;
        }
        let cov = regularize_covariance(
            DMatrix::from_diagonal(&nalgebra::DVector::from_vec(var)),
            config.covariance_floor_eps,
        );
        emissions.push(GaussianEmission::new(mean, cov)?);
    }
    LrHmmModel::canonical(emissions, config.band_width)
}

fn e_step(model: &LrHmmModel, sequences: &[&ObservationSequence]) -> Result<Vec<ForwardBackwardCache>> {
    sequences
        .par_iter()
        .map(|s| {
            forward_backward(s, model)
                .map_err(|e| e.context(format!("trial {}", s.trial_id)))
        })
        .collect()
}

fn total_log_likelihood(caches: &[ForwardBackwardCache]) -> f64 {
    caches.iter().map(|c| c.log_likelihood).sum()
}

fn m_step(
    model: &LrHmmModel,
    sequences: &[&ObservationSequence],
    caches: &[ForwardBackwardCache],
    config: &TrainingConfig,
) -> Result<LrHmmModel> {
    let n = model.n_states();
    let dims = model.n_dims();

    // posterior mass per state, in sequence order
    let mut mass = vec![0.0; n];
    for c in caches {
        for t in 0..c.len {
            for (j, g) in c.gamma_row(t).iter().enumerate().take(c.reach(t) + 1) {
                mass[j] += g;
            }
        }
    }
    if let Some((state, &m)) = mass
        .iter()
        .enumerate()
        .find(|(_, &m)| !(m >= DEGENERATE_MASS))
    {
        return Err(HmmError::DegenerateState { state, mass: m });
    }

    let mut pi = vec![0.0; n];
    for c in caches {
        for (p, g) in pi.iter_mut().zip(c.gamma_row(0)) {
            *p += g;
        }
    }
    // sum_k gamma_1 / K, renormalized against rounding in gamma
    let total: f64 = pi.iter().sum();
    let log_pi: Vec<f64> = pi.iter().map(|p| ln_prob(p / total)).collect();

    let mut log_a = model.log_a().to_vec();
    let mut row = vec![f64::NEG_INFINITY; n];
    for i in 0..n {
        row.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        for c in caches {
            for (acc, v) in row.iter_mut().zip(&c.log_xi_sums[i * n..(i + 1) * n]) {
                *acc = log_add(*acc, *v);
            }
        }
        let norm = log_sum_exp(&row);
        if norm == f64::NEG_INFINITY {
            // never left from: keep the previous row
            continue;
        }
        for (dst, v) in log_a[i * n..(i + 1) * n].iter_mut().zip(&row) {
            *dst = if *v == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                v - norm
            };
        }
    }

    // posterior-weighted first and second moments, accumulated per state in
    // (sequence, step) order
    let mut means = vec![0.0; n * dims];
    for (s, c) in sequences.iter().zip(caches) {
        for t in 0..c.len {
            let x = s.row(t);
            for j in 0..=c.reach(t) {
                let g = c.gamma[t * n + j];
                for (m, v) in means[j * dims..(j + 1) * dims].iter_mut().zip(x) {
                    *m += g * v;
                }
            }
        }
    }
    for (j, chunk) in means.chunks_exact_mut(dims).enumerate() {
        chunk.iter_mut().for_each(|m| *m /= mass[j]);
    }
    let mut scatter = vec![0.0; n * dims * dims];
    for (s, c) in sequences.iter().zip(caches) {
        for t in 0..c.len {
            let x = s.row(t);
            for j in 0..=c.reach(t) {
                let g = c.gamma[t * n + j];
                let mean = &means[j * dims..(j + 1) * dims];
                let acc = &mut scatter[j * dims * dims..(j + 1) * dims * dims];
                for a in 0..dims {
                    let da = g * (x[a] - mean[a]);
                    for b in 0..=a {
                        acc[a * dims + b] += da * (x[b] - mean[b]);
                    }
                }
            }
        }
    }

    let mut emissions = Vec::with_capacity(n);
    for j in 0..n {
        let acc = &scatter[j * dims * dims..(j + 1) * dims * dims];
        let cov = DMatrix::from_fn(dims, dims, |a, b| {
            let (a, b) = if a >= b { (a, b) } else { (b, a) };
            acc[a * dims + b] / mass[j]
        });
        let cov = regularize_covariance(cov, config.covariance_floor_eps);
        let mean = means[j * dims..(j + 1) * dims].to_vec();
        emissions.push(
            GaussianEmission::new(mean, cov).map_err(|e| e.context(format!("state {j}")))?,
        );
    }

    // valid by construction: normalized rows, band preserved, SPD emissions
    let updated = LrHmmModel::from_parts_unchecked(log_pi, log_a, emissions, model.band_width())?;
    debug_assert!(crate::model::validate_model(&updated).is_empty());
    Ok(updated)
}

/// Runs Baum-Welch from a seeded initial model.
pub fn baum_welch(
    sequences: &[ObservationSequence],
    config: &TrainingConfig,
) -> Result<(LrHmmModel, TrainingTrace)> {
    let init = initialize_model(sequences, config)?;
    baum_welch_from(init, sequences, config)
}

/// Runs Baum-Welch starting from an existing model.
pub fn baum_welch_from(
    model: LrHmmModel,
    sequences: &[ObservationSequence],
    config: &TrainingConfig,
) -> Result<(LrHmmModel, TrainingTrace)> {
    config.validate()?;
    let ordered = canonical_order(sequences);
    let (len, _) = check_shapes(&ordered)?;
    if len > model.n_states() {
        return Err(HmmError::usage(format!(
            "training sequences have {len} steps but the model has {} states",
            model.n_states()
        )));
    }

    let mut model = model;
    let mut caches = e_step(&model, &ordered)?;
    let mut trace = TrainingTrace {
        log_likelihoods: vec![total_log_likelihood(&caches)],
        iterations_run: 0,
        converged: false,
    };
    for iteration in 1..=config.max_iterations {
        model = m_step(&model, &ordered, &caches, config)?;
        caches = e_step(&model, &ordered)?;
        let ll = total_log_likelihood(&caches);
        let prev = *trace.log_likelihoods.last().unwrap();
        trace.log_likelihoods.push(ll);
        trace.iterations_run = iteration;
        if (ll - prev).abs() < config.loglik_rel_tolerance * prev.abs() {
            trace.converged = true;
            break;
        }
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gaussian_log_density, validate_model};

    fn seq(vals: &[f64], trial: u64) -> ObservationSequence {
        ObservationSequence::new(vals.iter().map(|&v| vec![v]).collect(), 0.1, "s")
            .unwrap()
            .with_trial_id(trial)
    }

    #[test]
    fn initialize_shapes_and_band() {
        let seqs: Vec<_> = (0..3)
            .map(|k| seq(&[0.0, 1.0, 2.0, 3.0, 4.0].map(|v| v + 0.1 * k as f64), k))
            .collect();
        let m = initialize_model(&seqs, &TrainingConfig::default()).unwrap();
        assert_eq!(m.n_states(), 5);
        let pi: Vec<f64> = m.log_pi().iter().map(|p| p.exp()).collect();
        assert_eq!(pi, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let row0: Vec<f64> = m.log_transition_row(0).iter().map(|p| p.exp()).collect();
        assert_eq!(row0, vec![0.5, 0.5, 0.0, 0.0, 0.0]);
        assert_eq!(m.log_transition(4, 4), 0.0);
    }

    #[test]
    fn initialize_is_deterministic_and_seed_sensitive() {
        let seqs: Vec<_> = (0..4)
            .map(|k| seq(&[0.0, 0.5, 1.0, 1.5].map(|v| v * (1.0 + 0.2 * k as f64)), k))
            .collect();
        let cfg = TrainingConfig {
            rng_seed: 42,
            ..Default::default()
        };
        let a = initialize_model(&seqs, &cfg).unwrap();
        let b = initialize_model(&seqs, &cfg).unwrap();
        assert_eq!(a, b);
        let c = initialize_model(
            &seqs,
            &TrainingConfig {
                rng_seed: 43,
                ..Default::default()
            },
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn initialize_rejects_mixed_lengths() {
        let seqs = vec![seq(&[0.0, 1.0], 0), seq(&[0.0], 1)];
        assert!(initialize_model(&seqs, &TrainingConfig::default())
            .unwrap_err()
            .is_usage());
        assert!(initialize_model(&[], &TrainingConfig::default())
            .unwrap_err()
            .is_usage());
    }

    #[test]
    fn single_state_forward_backward() {
        let g = GaussianEmission::diagonal(vec![0.5], &[2.0]).unwrap();
        let m = LrHmmModel::canonical(vec![g.clone()], 1).unwrap();
        let s = seq(&[0.1, -0.3, 1.2], 0);
        let fb = forward_backward(&s, &m).unwrap();
        let expected: f64 = s
            .rows()
            .map(|x| gaussian_log_density(x, &g).unwrap())
            .sum();
        assert!((fb.log_likelihood - expected).abs() < 1e-12);
        assert!(fb.gamma.iter().all(|&g| (g - 1.0).abs() < 1e-12));
    }

    #[test]
    fn gamma_zero_outside_reach() {
        let emissions = (0..4)
            .map(|i| GaussianEmission::diagonal(vec![i as f64], &[1.0]).unwrap())
            .collect();
        let m = LrHmmModel::canonical(emissions, 1).unwrap();
        let fb = forward_backward(&seq(&[0.0, 1.0, 2.0], 0), &m).unwrap();
        for t in 0..3 {
            let row = fb.gamma_row(t);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (j, &g) in row.iter().enumerate() {
                if j > t {
                    assert_eq!(g, 0.0);
                }
            }
        }
    }

    #[test]
    fn single_state_recovers_sample_moments() {
        let seqs = vec![seq(&[1.0], 0), seq(&[2.0], 1), seq(&[4.5], 2)];
        let (m, trace) = baum_welch(&seqs, &TrainingConfig::default()).unwrap();
        let mean = (1.0 + 2.0 + 4.5) / 3.0;
        let var = [1.0f64, 2.0, 4.5]
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / 3.0;
        let var = var + 1e-6 * var;
        assert!((m.emission(0).mean()[0] - mean).abs() < 1e-12);
        assert!((m.emission(0).covariance()[(0, 0)] - var).abs() < 1e-12);
        assert!(trace.converged);
        assert!(validate_model(&m).is_empty());
    }

    #[test]
    fn degenerate_state_reported() {
        // deterministic chain with a 3rd state that two-step sequences never reach
        let emissions: Vec<_> = (0..3)
            .map(|i| GaussianEmission::diagonal(vec![i as f64], &[1.0]).unwrap())
            .collect();
        let m = LrHmmModel::canonical(emissions, 1).unwrap();
        let seqs = vec![seq(&[0.0, 1.0], 0), seq(&[0.1, 0.9], 1)];
        let err = baum_welch_from(m, &seqs, &TrainingConfig::default()).unwrap_err();
        assert!(matches!(err, HmmError::DegenerateState { state: 2, .. }), "{err}");
    }
}
