//! Scoring of (possibly truncated) histories, the two-class decision rule and
//! Viterbi decoding. Every argmax breaks ties toward the lowest index.

use crate::error::{HmmError, Result};
use crate::model::{LrHmmModel, ObservationSequence};
use crate::training::{emission_table, forward_pass, reach_profile};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassDecision {
    /// 1 or 2.
    pub label: u8,
    pub log_likelihoods: [f64; 2],
    /// Winner minus loser; never negative.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViterbiResult {
    /// Zero-based state index per time step.
    pub path: Vec<usize>,
    pub log_prob: f64,
}

fn check_history(seq: &ObservationSequence, m: &LrHmmModel) -> Result<()> {
    m.check_sequence(seq)?;
    if seq.is_empty() {
        return Err(HmmError::usage("history must contain at least one time step"));
    }
    if seq.len() > m.n_states() {
        return Err(HmmError::usage(format!(
            "history of {} steps is longer than the model horizon of {} states",
            seq.len(),
            m.n_states()
        )));
    }
    Ok(())
}

/// Forward-algorithm log-likelihood of a history; the termination sums over
/// every state reachable at the last observed step.
pub fn log_likelihood(seq: &ObservationSequence, m: &LrHmmModel) -> Result<f64> {
    check_history(seq, m)?;
    let reach = reach_profile(m, seq.len());
    let log_b = emission_table(seq, m, &reach);
    let (_, ll) = forward_pass(m, &log_b, &reach);
    Ok(ll)
}

/// Picks the model with the larger log-likelihood; ties go to model 1.
pub fn classify(
    history: &ObservationSequence,
    m1: &LrHmmModel,
    m2: &LrHmmModel,
) -> Result<ClassDecision> {
    let l1 = log_likelihood(history, m1).map_err(|e| e.context("scoring under model 1"))?;
    let l2 = log_likelihood(history, m2).map_err(|e| e.context("scoring under model 2"))?;
    Ok(decide(l1, l2))
}

pub(crate) fn decide(l1: f64, l2: f64) -> ClassDecision {
    let (label, margin) = if l1 >= l2 { (1, l1 - l2) } else { (2, l2 - l1) };
    ClassDecision {
        label,
        log_likelihoods: [l1, l2],
        margin,
    }
}

/// Max-product (log max-plus) decoding of the most likely state path.
pub fn viterbi(seq: &ObservationSequence, m: &LrHmmModel) -> Result<ViterbiResult> {
    check_history(seq, m)?;
    let n = m.n_states();
    let band = m.band_width();
    let len = seq.len();
    let reach = reach_profile(m, len);
    let log_b = emission_table(seq, m, &reach);

    let mut delta = vec![f64::NEG_INFINITY; len * n];
    let mut psi = vec![0usize; len * n];
    for j in 0..=reach[0] {
        delta[j] = m.log_pi()[j] + log_b[j];
    }
    for t in 1..len {
        let prev_hi = reach[t - 1];
        for j in 0..=reach[t] {
            let mut best = f64::NEG_INFINITY;
            let mut arg = j.saturating_sub(band);
            for i in j.saturating_sub(band)..=j.min(prev_hi) {
                let v = delta[(t - 1) * n + i] + m.log_transition(i, j);
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            delta[t * n + j] = best + log_b[t * n + j];
            psi[t * n + j] = arg;
        }
    }

    let last = &delta[(len - 1) * n..(len - 1) * n + reach[len - 1] + 1];
    let (mut state, log_prob) = last
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        });
    if log_prob == f64::NEG_INFINITY {
        return Err(HmmError::invalid("no feasible state path for the history"));
    }
    let mut path = vec![0; len];
    path[len - 1] = state;
    for t in (1..len).rev() {
        state = psi[t * n + state];
        path[t - 1] = state;
    }
    Ok(ViterbiResult { path, log_prob })
}
