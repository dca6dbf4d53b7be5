//! Probabilistic trajectory forecasting from a classified history.
//!
//! The history is classified, its partial Viterbi path is decoded under the
//! winning model, and the path is extended to the model horizon by greedily
//! following the most probable in-band transition. Each future step carries
//! the emission mean and per-channel standard deviation of its state.

use std::io::Write;

use serde::Serialize;

use crate::error::{HmmError, Result};
use crate::inference::{classify, viterbi, ClassDecision};
use crate::model::{LrHmmModel, ObservationSequence};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilisticTrajectory {
    /// Number of observed history steps; future row `r` is step `split_index + r`.
    pub split_index: usize,
    pub means: Vec<Vec<f64>>,
    pub stddevs: Vec<Vec<f64>>,
    pub class_label: u8,
    /// Full state path over the model horizon: decoded prefix plus greedy extension.
    pub state_path: Vec<usize>,
    pub decision: ClassDecision,
}

impl ProbabilisticTrajectory {
    pub fn n_future(&self) -> usize {
        self.means.len()
    }
}

/// Most probable in-band successor of `state`, lowest index on ties.
pub fn greedy_successor(m: &LrHmmModel, state: usize) -> usize {
    let hi = (state + m.band_width()).min(m.n_states() - 1);
    let mut best = state;
    let mut best_lp = m.log_transition(state, state);
    for j in state + 1..=hi {
        let lp = m.log_transition(state, j);
        if lp > best_lp {
            best = j;
            best_lp = lp;
        }
    }
    best
}

pub fn forecast(
    history: &ObservationSequence,
    m1: &LrHmmModel,
    m2: &LrHmmModel,
) -> Result<ProbabilisticTrajectory> {
    if m1.n_states() != m2.n_states()
        || m1.n_dims() != m2.n_dims()
        || m1.band_width() != m2.band_width()
    {
        return Err(HmmError::usage(
            "forecasting requires both class models to share states, dimensions and band width",
        ));
    }
    let n = m1.n_states();
    let t = history.len();
    if t >= n {
        return Err(HmmError::NothingToForecast {
            history: t,
            n_states: n,
        });
    }
    let decision = classify(history, m1, m2)?;
    let winner = if decision.label == 1 { m1 } else { m2 };
    let decoded = viterbi(history, winner)?;

    let mut state_path = decoded.path;
    state_path.reserve(n - t);
    let mut state = *state_path.last().expect("history is non-empty");
    for _ in t..n {
        state = greedy_successor(winner, state);
        state_path.push(state);
    }

    let (means, stddevs) = state_path[t..]
        .iter()
        .map(|&s| {
            let e = winner.emission(s);
            (e.mean().to_vec(), e.std_devs())
        })
        .unzip();

    Ok(ProbabilisticTrajectory {
        split_index: t,
        means,
        stddevs,
        class_label: decision.label,
        state_path,
        decision,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForecastRow {
    pub time_s: f64,
    pub channel: usize,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    #[serde(rename = "class")]
    pub class_label: u8,
}

/// Flattens a forecast into one row per (future step, channel) with a ±1 s.d. band.
pub fn export_forecast(pt: &ProbabilisticTrajectory, dt: f64) -> Vec<ForecastRow> {
    let mut rows = Vec::with_capacity(pt.n_future() * pt.means.first().map_or(0, Vec::len));
    for (r, (means, sds)) in pt.means.iter().zip(&pt.stddevs).enumerate() {
        let time_s = (pt.split_index + r) as f64 * dt;
        for (channel, (&mean, &sd)) in means.iter().zip(sds).enumerate() {
            rows.push(ForecastRow {
                time_s,
                channel,
                mean,
                lower: mean - sd,
                upper: mean + sd,
                class_label: pt.class_label,
            });
        }
    }
    rows
}

/// Writes rows under the header `time_s,channel,mean,lower,upper,class`.
pub fn write_forecast_csv<W: Write>(rows: &[ForecastRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["time_s", "channel", "mean", "lower", "upper", "class"])?;
    }
    w.flush()?;
    Ok(())
}
