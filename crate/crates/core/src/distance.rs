//! Cross-fitness distance between two class models.

use crate::error::Result;
use crate::inference::log_likelihood;
use crate::model::{LrHmmModel, ObservationSequence};

/// The four summed log-likelihood terms and the resulting distance.
///
/// `ll_ab` is the total log-likelihood of observation set `a` under model `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossFitnessReport {
    pub ll_11: f64,
    pub ll_22: f64,
    pub ll_12: f64,
    pub ll_21: f64,
    pub distance: f64,
}

impl CrossFitnessReport {
    pub fn from_terms(ll_11: f64, ll_22: f64, ll_12: f64, ll_21: f64) -> Self {
        Self {
            ll_11,
            ll_22,
            ll_12,
            ll_21,
            // grouped so the joint swap of sets and models is bit-exact
            distance: (ll_11 + ll_22) - (ll_12 + ll_21),
        }
    }
}

fn set_log_likelihood(set: &[ObservationSequence], m: &LrHmmModel, set_name: &str) -> Result<f64> {
    let mut total = 0.0;
    for (idx, s) in set.iter().enumerate() {
        total += log_likelihood(s, m).map_err(|e| {
            e.context(format!("{set_name}, sequence {idx} (trial {})", s.trial_id))
        })?;
    }
    Ok(total)
}

/// `D = ln P(O1|m1) + ln P(O2|m2) - ln P(O1|m2) - ln P(O2|m1)`, each term summed
/// over the sequences of its set with the forward algorithm.
pub fn cross_fitness_distance(
    set1: &[ObservationSequence],
    set2: &[ObservationSequence],
    m1: &LrHmmModel,
    m2: &LrHmmModel,
) -> Result<CrossFitnessReport> {
    let ll_11 = set_log_likelihood(set1, m1, "set 1 under model 1")?;
    let ll_22 = set_log_likelihood(set2, m2, "set 2 under model 2")?;
    let ll_12 = set_log_likelihood(set1, m2, "set 1 under model 2")?;
    let ll_21 = set_log_likelihood(set2, m1, "set 2 under model 1")?;
    Ok(CrossFitnessReport::from_terms(ll_11, ll_22, ll_12, ll_21))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussianEmission;

    fn model(offset: f64) -> LrHmmModel {
        let emissions = (0..3)
            .map(|i| GaussianEmission::diagonal(vec![i as f64 + offset], &[0.7]).unwrap())
            .collect();
        LrHmmModel::canonical(emissions, 1).unwrap()
    }

    fn set(offset: f64) -> Vec<ObservationSequence> {
        (0..4)
            .map(|k| {
                let rows = (0..3)
                    .map(|t| vec![t as f64 + offset + 0.1 * k as f64])
                    .collect();
                ObservationSequence::new(rows, 0.1, "s")
                    .unwrap()
                    .with_trial_id(k)
            })
            .collect()
    }

    #[test]
    fn identical_pairs_give_exact_zero() {
        let m = model(0.0);
        let s = set(0.0);
        let r = cross_fitness_distance(&s, &s, &m, &m).unwrap();
        assert_eq!(r.distance, 0.0);
    }

    #[test]
    fn joint_swap_is_symmetric() {
        let (m1, m2) = (model(0.0), model(0.8));
        let (s1, s2) = (set(0.0), set(1.0));
        let a = cross_fitness_distance(&s1, &s2, &m1, &m2).unwrap();
        let b = cross_fitness_distance(&s2, &s1, &m2, &m1).unwrap();
        assert_eq!(a.distance, b.distance);
        assert!(a.distance > 0.0);
    }

    #[test]
    fn scoring_errors_name_the_set() {
        let m = model(0.0);
        let long = vec![ObservationSequence::new(vec![vec![0.0]; 5], 0.1, "s").unwrap()];
        let err = cross_fitness_distance(&long, &long, &m, &m).unwrap_err();
        assert!(err.to_string().contains("set 1 under model 1"));
        assert!(err.is_usage());
    }
}
