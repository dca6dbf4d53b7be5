//! Independent oracles shared by the integration tests: literal Gaussian
//! densities and brute-force enumeration over state paths.

#![allow(dead_code)]

use std::f64::consts::PI;

use lrhmm::{GaussianEmission, LrHmmModel, ObservationSequence};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `log N(x; mu, sigma)` from an LU determinant and explicit inverse.
pub fn literal_log_density(x: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> f64 {
    let m = x.len();
    let d = DMatrix::from_fn(m, 1, |i, _| x[i] - mean[i]);
    let inv = cov.clone().try_inverse().expect("invertible covariance");
    let quad = (d.transpose() * inv * &d)[(0, 0)];
    -0.5 * (m as f64 * (2.0 * PI).ln() + cov.determinant().ln() + quad)
}

pub fn random_spd(rng: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
    let l = DMatrix::from_fn(m, m, |i, j| {
        if j <= i {
            rng.gen_range(-1.0..1.0)
        } else {
            0.0
        }
    });
    &l * l.transpose() + DMatrix::identity(m, m) * rng.gen_range(0.05..1.0)
}

/// Random left-right model: random start distribution over the first states,
/// random in-band transitions with occasional in-band zeros.
pub fn random_lr_model(rng: &mut ChaCha8Rng, n: usize, m: usize, band: usize) -> LrHmmModel {
    let mut pi: Vec<f64> = (0..n)
        .map(|i| if i == 0 || rng.gen_bool(0.3) { rng.gen_range(0.1..1.0) } else { 0.0 })
        .collect();
    let s: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= s);

    let a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let hi = (i + band).min(n - 1);
            let mut row = vec![0.0; n];
            for (j, p) in row.iter_mut().enumerate().take(hi + 1).skip(i) {
                if j == i || rng.gen_bool(0.85) {
                    *p = rng.gen_range(0.05..1.0);
                }
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
            row
        })
        .collect();

    let emissions = (0..n)
        .map(|_| {
            let mean = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
            GaussianEmission::new(mean, random_spd(rng, m)).unwrap()
        })
        .collect();
    LrHmmModel::from_probabilities(&pi, &a, emissions, band).unwrap()
}

pub fn random_sequence(rng: &mut ChaCha8Rng, t: usize, m: usize) -> ObservationSequence {
    let rows = (0..t)
        .map(|_| (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect())
        .collect();
    ObservationSequence::new(rows, 0.025, "test").unwrap()
}

pub struct BruteForce {
    pub log_likelihood: f64,
    pub best_path: Vec<usize>,
    pub best_log_prob: f64,
}

/// Enumerates all `N^T` paths in lexicographic order; the first maximal path wins.
pub fn brute_force(seq: &ObservationSequence, m: &LrHmmModel) -> BruteForce {
    let n = m.n_states();
    let t = seq.len();
    let dens: Vec<Vec<f64>> = (0..t)
        .map(|k| {
            (0..n)
                .map(|s| {
                    let e = m.emission(s);
                    literal_log_density(seq.row(k), e.mean(), e.covariance())
                })
                .collect()
        })
        .collect();

    let mut joint = Vec::new();
    let mut best_path = vec![0; t];
    let mut best = f64::NEG_INFINITY;
    let mut path = vec![0usize; t];
    loop {
        let mut lp = m.log_pi()[path[0]] + dens[0][path[0]];
        for k in 1..t {
            lp += m.log_transition(path[k - 1], path[k]) + dens[k][path[k]];
        }
        if lp > best {
            best = lp;
            best_path.copy_from_slice(&path);
        }
        joint.push(lp);

        let mut k = t;
        loop {
            if k == 0 {
                let max = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = joint.iter().map(|v| (v - max).exp()).sum();
                return BruteForce {
                    log_likelihood: max + sum.ln(),
                    best_path,
                    best_log_prob: best,
                };
            }
            k -= 1;
            path[k] += 1;
            if path[k] < n {
                break;
            }
            path[k] = 0;
        }
    }
}

/// Draws a length-`t` trajectory from a model with diagonal covariances.
pub fn sample_sequence(rng: &mut ChaCha8Rng, m: &LrHmmModel, t: usize) -> ObservationSequence {
    use rand_distr::{Distribution, StandardNormal, WeightedIndex};
    let pi: Vec<f64> = m.log_pi().iter().map(|l| l.exp()).collect();
    let mut state = WeightedIndex::new(&pi).unwrap().sample(rng);
    let mut rows = Vec::with_capacity(t);
    for k in 0..t {
        if k > 0 {
            let row: Vec<f64> = m.log_transition_row(state).iter().map(|l| l.exp()).collect();
            state = WeightedIndex::new(&row).unwrap().sample(rng);
        }
        let e = m.emission(state);
        rows.push(
            e.mean()
                .iter()
                .zip(e.std_devs())
                .map(|(mu, sd)| {
                    let z: f64 = StandardNormal.sample(rng);
                    mu + sd * z
                })
                .collect(),
        );
    }
    ObservationSequence::new(rows, 0.025, "sampled").unwrap()
}
