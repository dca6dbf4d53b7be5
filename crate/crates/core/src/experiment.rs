//! Experiment protocol: leave-one-out accuracy versus history duration,
//! repeated cross-fitness distances and forecast exports.
//!
//! Every run is a pure function of its configuration. Repetition `r` draws
//! from an RNG seeded with `seed ^ r`, so serial and parallel runs agree.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataio::{
    self, alignment_shifts, generate_synthetic, preprocess, rotate, SyntheticConfig,
    RIGID_SENSOR_ID,
};
use crate::distance::cross_fitness_distance;
use crate::error::{HmmError, Result};
use crate::forecast::{export_forecast, forecast, write_forecast_csv};
use crate::inference::classify;
use crate::model::{LrHmmModel, ObservationSequence};
use crate::training::{baum_welch, TrainingConfig};

/// Attempts per repetition before a run of degenerate trainings becomes fatal.
const MAX_RESAMPLES: usize = 25;

/// Fabric response delay. Largest onset difference between the two default
/// classes among delays where the artifact also widens whole-trial separation.
pub const DEFAULT_ARTIFACT_DELAY_S: f64 = 1.25;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub class1: SyntheticConfig,
    pub class2: SyntheticConfig,
    pub artifact_levels: Vec<f64>,
}

impl Default for SyntheticPair {
    fn default() -> Self {
        Self::with_delay(DEFAULT_ARTIFACT_DELAY_S)
    }
}

impl SyntheticPair {
    /// Two classes at 1.05π and 1.48π rad/s whose fabric artifacts lag the
    /// rigid motion by a fixed time delay, i.e. a phase lag of `omega * delay`.
    pub fn with_delay(artifact_delay_s: f64) -> Self {
        let class1 = SyntheticConfig {
            omega: 1.05 * PI,
            label: 1,
            ..Default::default()
        };
        let class2 = SyntheticConfig {
            omega: 1.48 * PI,
            label: 2,
            rng_seed: 1 << 32,
            ..Default::default()
        };
        let mut pair = Self {
            class1,
            class2,
            artifact_levels: vec![0.0, 0.3, 0.6, 1.0],
        };
        pair.set_artifact_delay(artifact_delay_s);
        pair
    }

    pub fn set_artifact_delay(&mut self, delay_s: f64) {
        self.class1.artifact_phase_lag = self.class1.omega * delay_s;
        self.class2.artifact_phase_lag = self.class2.omega * delay_s;
    }

    fn classes_mut(&mut self) -> [&mut SyntheticConfig; 2] {
        [&mut self.class1, &mut self.class2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticPair),
    /// Sequence CSV files (recursively); class from each trial's label.
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_repetitions: usize,
    pub history_durations: Vec<f64>,
    pub rng_seed: u64,
    pub source: DataSource,
    pub training: TrainingConfig,
    pub scale_divisor: f64,
    pub align: bool,
    pub motion_type: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_repetitions: 100,
            history_durations: parse_durations("0.025:0.4:0.025").expect("valid literal"),
            rng_seed: 0,
            source: DataSource::Synthetic(SyntheticPair::default()),
            training: TrainingConfig::default(),
            scale_divisor: 100.0,
            align: true,
            motion_type: "simple_harmonic".into(),
        }
    }
}

impl ExperimentConfig {
    /// Seeds every random component from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self.training.rng_seed = seed;
        if let DataSource::Synthetic(pair) = &mut self.source {
            pair.class1.rng_seed = seed;
            pair.class2.rng_seed = seed ^ (1 << 32);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_repetitions < 1 {
            return Err(HmmError::usage("n_repetitions must be at least 1"));
        }
        if let Some(d) = self.history_durations.iter().find(|d| !(**d > 0.0)) {
            return Err(HmmError::usage(format!("history duration {d} must be positive")));
        }
        self.training.validate()?;
        if let DataSource::Synthetic(pair) = &self.source {
            pair.class1.validate()?;
            pair.class2.validate()?;
            if pair.class1.dt != pair.class2.dt || pair.class1.n_samples() != pair.class2.n_samples()
            {
                return Err(HmmError::usage("both classes must share dt and duration"));
            }
        }
        Ok(())
    }
}

/// Parses `start:stop:step` (inclusive) or a comma-separated list of seconds.
pub fn parse_durations(text: &str) -> Result<Vec<f64>> {
    let bad = || HmmError::usage(format!("invalid durations {text:?}"));
    let text = text.trim();
    if text.contains(':') {
        let parts: Vec<f64> = text
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [start, stop, step] = parts[..] else {
            return Err(bad());
        };
        if !(step > 0.0) || !(start > 0.0) || stop < start {
            return Err(bad());
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        Ok((0..count).map(|i| start + i as f64 * step).collect())
    } else {
        let v: Vec<f64> = text
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if v.is_empty() || v.iter().any(|d| !(*d > 0.0)) {
            return Err(bad());
        }
        Ok(v)
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(HmmError::usage(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| HmmError::usage(format!("{key}: cannot parse {v:?}")))
}

/// Reads a `key = value` configuration; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut pair = SyntheticPair::default();
    let mut delay: Option<f64> = None;
    let mut data_dir: Option<PathBuf> = None;
    let mut seed: Option<u64> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            HmmError::usage(format!("config line {}: expected key=value", idx + 1))
        })?;
        let (key, v) = (key.trim(), value.trim());
        match key {
            "n_repetitions" => cfg.n_repetitions = parse_num(key, v)?,
            "durations" | "history_durations" => cfg.history_durations = parse_durations(v)?,
            "seed" | "rng_seed" => seed = Some(parse_num(key, v)?),
            "scale_divisor" => cfg.scale_divisor = parse_num(key, v)?,
            "align" => cfg.align = parse_bool(key, v)?,
            "motion_type" => cfg.motion_type = v.to_string(),
            "data_dir" => data_dir = Some(PathBuf::from(v)),
            "max_iterations" => cfg.training.max_iterations = parse_num(key, v)?,
            "loglik_rel_tolerance" => cfg.training.loglik_rel_tolerance = parse_num(key, v)?,
            "covariance_floor_eps" => cfg.training.covariance_floor_eps = parse_num(key, v)?,
            "band_width" => cfg.training.band_width = parse_num(key, v)?,
            "omega1" => pair.class1.omega = parse_num(key, v)?,
            "omega2" => pair.class2.omega = parse_num(key, v)?,
            "artifact_delay_s" => delay = Some(parse_num(key, v)?),
            "artifact_levels" => {
                pair.artifact_levels = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "amplitude" | "artifact_amplitude" | "noise_std" | "duration_s" | "dt" => {
                let x: f64 = parse_num(key, v)?;
                for c in pair.classes_mut() {
                    match key {
                        "amplitude" => c.amplitude = x,
                        "artifact_amplitude" => c.artifact_amplitude = x,
                        "noise_std" => c.noise_std = x,
                        "duration_s" => c.duration_s = x,
                        _ => c.dt = x,
                    }
                }
            }
            "n_sequences" => {
                let n: usize = parse_num(key, v)?;
                pair.classes_mut().into_iter().for_each(|c| c.n_sequences = n);
            }
            "random_start_phase" => {
                let b = parse_bool(key, v)?;
                pair.classes_mut()
                    .into_iter()
                    .for_each(|c| c.random_start_phase = b);
            }
            _ => return Err(HmmError::usage(format!("unknown config key {key:?}"))),
        }
    }
    pair.set_artifact_delay(delay.unwrap_or(DEFAULT_ARTIFACT_DELAY_S));
    cfg.source = match data_dir {
        Some(dir) => DataSource::Directory(dir),
        None => DataSource::Synthetic(pair),
    };
    if let Some(seed) = seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Preprocessed trials of one sensor, split by class.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorData {
    pub sensor_id: String,
    pub artifact_level: Option<f64>,
    pub classes: [Vec<ObservationSequence>; 2],
}

impl SensorData {
    pub fn n_samples(&self) -> usize {
        self.classes[0][0].len()
    }

    pub fn dt(&self) -> f64 {
        self.classes[0][0].dt
    }
}

/// Loads or synthesizes the experiment data and applies scaling and alignment.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Vec<SensorData>> {
    cfg.validate()?;
    let data = match &cfg.source {
        DataSource::Synthetic(pair) => prepare_synthetic(pair, cfg.scale_divisor, cfg.align)?,
        DataSource::Directory(dir) => {
            prepare_sequences(dataio::load_dir(dir)?, cfg.scale_divisor, cfg.align)?
        }
    };
    for s in &data {
        for (c, seqs) in s.classes.iter().enumerate() {
            if seqs.len() < 2 {
                return Err(HmmError::usage(format!(
                    "sensor {} class {} needs at least 2 trials, found {}",
                    s.sensor_id,
                    c + 1,
                    seqs.len()
                )));
            }
        }
    }
    Ok(data)
}

/// Synthesizes both classes with at least one extra period per trial, aligns
/// every trial to a noiseless reference starting at phase zero and keeps the
/// first `n_samples` steps, so no wrapped samples reach the kept window.
pub fn prepare_synthetic(
    pair: &SyntheticPair,
    scale_divisor: f64,
    align: bool,
) -> Result<Vec<SensorData>> {
    let mut per_class = Vec::with_capacity(2);
    for cfg in [&pair.class1, &pair.class2] {
        let keep = cfg.n_samples();
        let mut padded = cfg.clone();
        if align {
            // whole number of periods (to the nearest sample) so the circular
            // correlation sees no phase jump at the wrap
            let period = TAU / cfg.omega.abs() / cfg.dt;
            let periods = ((keep as f64 + period) / period).ceil();
            padded.duration_s = (periods * period).round() * cfg.dt;
        }
        let sets = generate_synthetic(&padded, &pair.artifact_levels)?;
        let n_sensors = sets.len();
        // stack sensors as channels so one shift per trial applies to all of them
        let mut trials: Vec<ObservationSequence> = (0..cfg.n_sequences)
            .map(|k| {
                let len = sets[0].sequences[k].len();
                let values = (0..len)
                    .flat_map(|t| sets.iter().map(move |s| s.sequences[k].values()[t]))
                    .collect();
                Ok(ObservationSequence::from_flat(values, n_sensors, cfg.dt, "stack")?
                    .with_label(cfg.label)
                    .with_trial_id(k as u64))
            })
            .collect::<Result<_>>()?;
        if align {
            let reference = SyntheticConfig {
                noise_std: 0.0,
                random_start_phase: false,
                n_sequences: 1,
                ..padded.clone()
            };
            let template = generate_synthetic(&reference, &[])?.remove(0).sequences.remove(0);
            let mut with_ref = Vec::with_capacity(trials.len() + 1);
            let template_values: Vec<f64> = template
                .values()
                .iter()
                .flat_map(|&v| std::iter::repeat(v).take(n_sensors))
                .collect();
            with_ref.push(ObservationSequence::from_flat(
                template_values,
                n_sensors,
                cfg.dt,
                "reference",
            )?);
            with_ref.extend(trials);
            let channels: Vec<usize> = (0..n_sensors).collect();
            let mut aligned = preprocess(&with_ref, scale_divisor, &channels, true)?;
            aligned.remove(0);
            trials = aligned
                .iter()
                .map(|s| s.truncated(keep))
                .collect::<Result<_>>()?;
        } else {
            let channels: Vec<usize> = (0..n_sensors).collect();
            trials = preprocess(&trials, scale_divisor, &channels, false)?;
        }
        let split: Vec<Vec<ObservationSequence>> = (0..n_sensors)
            .map(|s| {
                trials
                    .iter()
                    .map(|tr| {
                        let mut seq = ObservationSequence::from_flat(
                            tr.channel(s).collect(),
                            1,
                            tr.dt,
                            sets[s].sensor_id.clone(),
                        )?
                        .with_trial_id(tr.trial_id);
                        seq.label = tr.label;
                        Ok(seq)
                    })
                    .collect::<Result<_>>()
            })
            .collect::<Result<_>>()?;
        per_class.push((sets, split));
    }
    let (sets1, split1) = per_class.remove(0);
    let (_, split2) = per_class.remove(0);
    Ok(sets1
        .into_iter()
        .zip(split1.into_iter().zip(split2))
        .map(|(set, (c1, c2))| SensorData {
            sensor_id: set.sensor_id,
            artifact_level: set.artifact_level,
            classes: [c1, c2],
        })
        .collect())
}

/// Groups loaded trials by sensor and label. When alignment is requested and
/// a rigid reference sensor is present, its shifts are applied to the trial
/// with the same label and trial id on every sensor.
pub fn prepare_sequences(
    seqs: Vec<ObservationSequence>,
    scale_divisor: f64,
    align: bool,
) -> Result<Vec<SensorData>> {
    let mut groups: BTreeMap<String, [Vec<ObservationSequence>; 2]> = BTreeMap::new();
    for s in seqs {
        let class = match s.label {
            Some(1) => 0,
            Some(2) => 1,
            other => {
                return Err(HmmError::usage(format!(
                    "trial {} of sensor {} has label {other:?}; expected 1 or 2",
                    s.trial_id, s.sensor_id
                )))
            }
        };
        groups.entry(s.sensor_id.clone()).or_default()[class].push(s);
    }
    for classes in groups.values_mut() {
        for c in classes.iter_mut() {
            c.sort_by_key(|s| s.trial_id);
        }
    }

    let mut shifts: BTreeMap<(u8, u64), usize> = BTreeMap::new();
    if align {
        if let Some(rigid) = groups.get(RIGID_SENSOR_ID) {
            let all: Vec<ObservationSequence> = rigid.iter().flatten().cloned().collect();
            for (s, shift) in all.iter().zip(alignment_shifts(&all)) {
                shifts.insert((s.label.unwrap_or(0), s.trial_id), shift);
            }
        }
    }

    let mut out = Vec::new();
    for (sensor_id, classes) in groups {
        let mut prepared: [Vec<ObservationSequence>; 2] = Default::default();
        for (c, seqs) in classes.iter().enumerate() {
            if seqs.is_empty() {
                continue;
            }
            let channels: Vec<usize> = (0..seqs[0].n_dims()).collect();
            prepared[c] = preprocess(seqs, scale_divisor, &channels, false)?;
        }
        if align {
            let mut all: Vec<ObservationSequence> = prepared.iter().flatten().cloned().collect();
            if shifts.is_empty() {
                let own = alignment_shifts(&all);
                all = all
                    .iter()
                    .zip(own)
                    .map(|(s, k)| rotate(s, k))
                    .collect::<Result<_>>()?;
            } else {
                all = all
                    .iter()
                    .map(|s| {
                        let k = shifts
                            .get(&(s.label.unwrap_or(0), s.trial_id))
                            .copied()
                            .unwrap_or(0);
                        rotate(s, k)
                    })
                    .collect::<Result<_>>()?;
            }
            let common = all.iter().map(|s| s.len()).min().unwrap_or(0);
            let n1 = prepared[0].len();
            let mut all: Vec<ObservationSequence> = all
                .iter()
                .map(|s| s.truncated(common))
                .collect::<Result<_>>()?;
            let second = all.split_off(n1);
            prepared = [all, second];
        } else {
            let common = prepared.iter().flatten().map(|s| s.len()).min().unwrap_or(0);
            for c in prepared.iter_mut() {
                *c = c.iter().map(|s| s.truncated(common)).collect::<Result<_>>()?;
            }
        }
        out.push(SensorData {
            sensor_id,
            artifact_level: None,
            classes: prepared,
        });
    }
    // rigid reference first, then the rest in id order
    out.sort_by_key(|s| (s.sensor_id != RIGID_SENSOR_ID, s.sensor_id.clone()));
    Ok(out)
}

fn without(seqs: &[ObservationSequence], holdout: usize) -> Vec<ObservationSequence> {
    seqs.iter()
        .enumerate()
        .filter(|(i, _)| *i != holdout)
        .map(|(_, s)| s.clone())
        .collect()
}

fn is_training_failure(e: &HmmError) -> bool {
    match e {
        HmmError::DegenerateState { .. } | HmmError::InvalidModel(_) => true,
        HmmError::Context { source, .. } => is_training_failure(source),
        _ => false,
    }
}

/// Trains both class models of every sensor with one trial per class held out.
fn train_all(
    data: &[SensorData],
    holdouts: [usize; 2],
    training: &TrainingConfig,
) -> Result<Vec<[LrHmmModel; 2]>> {
    data.iter()
        .map(|s| {
            let m1 = baum_welch(&without(&s.classes[0], holdouts[0]), training)
                .map_err(|e| e.context(format!("sensor {} class 1", s.sensor_id)))?
                .0;
            let m2 = baum_welch(&without(&s.classes[1], holdouts[1]), training)
                .map_err(|e| e.context(format!("sensor {} class 2", s.sensor_id)))?
                .0;
            Ok([m1, m2])
        })
        .collect()
}

/// Draws hold-outs and trains, redrawing after degenerate trainings.
fn train_with_resampling(
    data: &[SensorData],
    rng: &mut ChaCha8Rng,
    training: &TrainingConfig,
) -> Result<([usize; 2], Vec<[LrHmmModel; 2]>, usize)> {
    let k1 = data[0].classes[0].len();
    let k2 = data[0].classes[1].len();
    let mut last = None;
    for attempt in 0..MAX_RESAMPLES {
        let holdouts = [rng.gen_range(0..k1), rng.gen_range(0..k2)];
        // a redraw also re-seeds initialization; attempt 0 keeps the base seed
        let reseeded = TrainingConfig {
            rng_seed: training.rng_seed ^ ((attempt as u64) << 40),
            ..training.clone()
        };
        match train_all(data, holdouts, &reseeded) {
            Ok(models) => return Ok((holdouts, models, attempt)),
            Err(e) if is_training_failure(&e) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last
        .expect("at least one attempt")
        .context(format!("training failed {MAX_RESAMPLES} times in a row")))
}

fn check_consistent(data: &[SensorData]) -> Result<()> {
    let first = data
        .first()
        .ok_or_else(|| HmmError::usage("experiment has no sensors"))?;
    for s in data {
        if s.classes[0].len() != first.classes[0].len()
            || s.classes[1].len() != first.classes[1].len()
        {
            return Err(HmmError::usage(format!(
                "sensor {} has a different number of trials than {}",
                s.sensor_id, first.sensor_id
            )));
        }
    }
    Ok(())
}

fn rep_training(cfg: &ExperimentConfig, rep: u64) -> TrainingConfig {
    TrainingConfig {
        rng_seed: cfg.training.rng_seed ^ rep,
        ..cfg.training.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyPoint {
    pub sensor_id: String,
    pub duration_s: f64,
    pub history_steps: usize,
    pub correct: usize,
    pub total: usize,
}

impl AccuracyPoint {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyCurve {
    pub points: Vec<AccuracyPoint>,
    pub n_repetitions: usize,
    /// Repetitions whose first hold-out draw failed to train and was redrawn.
    pub resampled: usize,
}

impl AccuracyCurve {
    pub fn sensor(&self, sensor_id: &str) -> Vec<&AccuracyPoint> {
        self.points
            .iter()
            .filter(|p| p.sensor_id == sensor_id)
            .collect()
    }

    /// Shortest duration at which `sensor_id` reaches `threshold`.
    pub fn first_duration_reaching(&self, sensor_id: &str, threshold: f64) -> Option<f64> {
        self.sensor(sensor_id)
            .into_iter()
            .find(|p| p.accuracy() >= threshold)
            .map(|p| p.duration_s)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sensor", "duration_s", "accuracy", "n_total"])?;
        for p in &self.points {
            w.write_record([
                p.sensor_id.clone(),
                fmt_seconds(p.duration_s),
                p.accuracy().to_string(),
                p.total.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt_seconds(s: f64) -> String {
    ((s * 1e9).round() / 1e9).to_string()
}

fn duration_steps(d: f64, dt: f64, n: usize) -> Result<usize> {
    let steps = (d / dt).round() as usize;
    if steps < 1 || steps > n {
        return Err(HmmError::usage(format!(
            "history duration {d} s is {steps} steps; must be within 1..={n}"
        )));
    }
    Ok(steps)
}

pub fn run_accuracy_experiment(cfg: &ExperimentConfig) -> Result<AccuracyCurve> {
    let data = prepare_data(cfg)?;
    run_accuracy_on(&data, cfg)
}

/// Leave-one-out accuracy per sensor and history duration.
pub fn run_accuracy_on(data: &[SensorData], cfg: &ExperimentConfig) -> Result<AccuracyCurve> {
    cfg.validate()?;
    check_consistent(data)?;
    let steps: Vec<Vec<usize>> = data
        .iter()
        .map(|s| {
            cfg.history_durations
                .iter()
                .map(|&d| duration_steps(d, s.dt(), s.n_samples()))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    let per_rep: Vec<(Vec<Vec<usize>>, usize)> = (0..cfg.n_repetitions as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ rep);
            let (holdouts, models, resampled) =
                train_with_resampling(data, &mut rng, &rep_training(cfg, rep))?;
            let correct = data
                .iter()
                .zip(&models)
                .zip(&steps)
                .map(|((s, [m1, m2]), steps)| {
                    steps
                        .iter()
                        .map(|&t| {
                            let mut hits = 0;
                            for (c, m) in [0usize, 1].iter().zip([1u8, 2]) {
                                let history = s.classes[*c][holdouts[*c]].truncated(t)?;
                                if classify(&history, m1, m2)?.label == m {
                                    hits += 1;
                                }
                            }
                            Ok(hits)
                        })
                        .collect::<Result<Vec<usize>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((correct, resampled))
        })
        .collect::<Result<_>>()?;

    let mut points = Vec::new();
    for (si, s) in data.iter().enumerate() {
        for (di, &d) in cfg.history_durations.iter().enumerate() {
            let correct = per_rep.iter().map(|(c, _)| c[si][di]).sum();
            points.push(AccuracyPoint {
                sensor_id: s.sensor_id.clone(),
                duration_s: d,
                history_steps: steps[si][di],
                correct,
                total: 2 * cfg.n_repetitions,
            });
        }
    }
    Ok(AccuracyCurve {
        points,
        n_repetitions: cfg.n_repetitions,
        resampled: per_rep.iter().filter(|(_, r)| *r > 0).count(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceRow {
    pub sensor_id: String,
    pub artifact_level: Option<f64>,
    pub motion_type: String,
    pub mean_distance: f64,
    pub n_repetitions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTable {
    pub rows: Vec<DistanceRow>,
    pub resampled: usize,
}

impl DistanceTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sensor_id", "motion_type", "mean_distance", "n_repetitions"])?;
        for r in &self.rows {
            w.write_record([
                r.sensor_id.clone(),
                r.motion_type.clone(),
                r.mean_distance.to_string(),
                r.n_repetitions.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn run_distance_experiment(cfg: &ExperimentConfig) -> Result<DistanceTable> {
    let data = prepare_data(cfg)?;
    run_distance_on(&data, cfg)
}

/// Mean cross-fitness distance per sensor over repeated random (K-1)-of-K retrainings,
/// evaluated on the training sets.
pub fn run_distance_on(data: &[SensorData], cfg: &ExperimentConfig) -> Result<DistanceTable> {
    cfg.validate()?;
    check_consistent(data)?;
    let per_rep: Vec<(Vec<f64>, usize)> = (0..cfg.n_repetitions as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ rep);
            let (holdouts, models, resampled) =
                train_with_resampling(data, &mut rng, &rep_training(cfg, rep))?;
            let d = data
                .iter()
                .zip(&models)
                .map(|(s, [m1, m2])| {
                    let set1 = without(&s.classes[0], holdouts[0]);
                    let set2 = without(&s.classes[1], holdouts[1]);
                    Ok(cross_fitness_distance(&set1, &set2, m1, m2)
                        .map_err(|e| e.context(format!("sensor {}", s.sensor_id)))?
                        .distance)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((d, resampled))
        })
        .collect::<Result<_>>()?;

    let rows = data
        .iter()
        .enumerate()
        .map(|(si, s)| DistanceRow {
            sensor_id: s.sensor_id.clone(),
            artifact_level: s.artifact_level,
            motion_type: cfg.motion_type.clone(),
            mean_distance: per_rep.iter().map(|(d, _)| d[si]).sum::<f64>()
                / cfg.n_repetitions as f64,
            n_repetitions: cfg.n_repetitions,
        })
        .collect();
    Ok(DistanceTable {
        rows,
        resampled: per_rep.iter().filter(|(_, r)| *r > 0).count(),
    })
}

/// Forecast of one held-out trial together with its true future.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastCase {
    pub sensor_id: String,
    pub true_class: u8,
    pub trial_id: u64,
    pub trajectory: crate::forecast::ProbabilisticTrajectory,
    pub truth: ObservationSequence,
}

impl ForecastCase {
    pub fn correctly_classified(&self) -> bool {
        self.trajectory.class_label == self.true_class
    }

    /// `(covered, total)` future points inside the ±1 s.d. band.
    pub fn coverage(&self) -> (usize, usize) {
        let mut covered = 0;
        let mut total = 0;
        for (r, row) in self.truth.rows().enumerate() {
            for (c, &x) in row.iter().enumerate() {
                let m = self.trajectory.means[r][c];
                let sd = self.trajectory.stddevs[r][c];
                total += 1;
                if (x - m).abs() <= sd {
                    covered += 1;
                }
            }
        }
        (covered, total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDemo {
    pub cases: Vec<ForecastCase>,
    pub files: Vec<PathBuf>,
}

impl ForecastDemo {
    /// Band coverage pooled over correctly classified cases.
    pub fn coverage(&self) -> (usize, usize) {
        self.cases
            .iter()
            .filter(|c| c.correctly_classified())
            .map(ForecastCase::coverage)
            .fold((0, 0), |(a, b), (c, d)| (a + c, b + d))
    }
}

/// Hold out one trial per class, train on the rest and forecast each held-out
/// trial from its first `history_steps` steps.
pub fn forecast_cases(
    data: &[SensorData],
    cfg: &ExperimentConfig,
    history_steps: usize,
    repetitions: usize,
) -> Result<Vec<ForecastCase>> {
    check_consistent(data)?;
    let per_rep: Vec<Vec<ForecastCase>> = (0..repetitions as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ rep);
            let (holdouts, models, _) =
                train_with_resampling(data, &mut rng, &rep_training(cfg, rep))?;
            let mut cases = Vec::new();
            for (s, [m1, m2]) in data.iter().zip(&models) {
                for c in 0..2 {
                    let trial = &s.classes[c][holdouts[c]];
                    let history = trial.truncated(history_steps)?;
                    let trajectory = forecast(&history, m1, m2)?;
                    cases.push(ForecastCase {
                        sensor_id: s.sensor_id.clone(),
                        true_class: c as u8 + 1,
                        trial_id: trial.trial_id,
                        trajectory,
                        truth: trial.tail_from(history_steps)?,
                    });
                }
            }
            Ok(cases)
        })
        .collect::<Result<_>>()?;
    Ok(per_rep.into_iter().flatten().collect())
}

pub fn run_forecast_demo(cfg: &ExperimentConfig, history_s: f64, out_dir: &Path) -> Result<ForecastDemo> {
    let data = prepare_data(cfg)?;
    run_forecast_demo_on(&data, cfg, history_s, out_dir)
}

/// Writes `forecast_<sensor>_class<c>.csv` and `truth_<sensor>_class<c>.csv`
/// for one held-out trial per sensor and class.
pub fn run_forecast_demo_on(
    data: &[SensorData],
    cfg: &ExperimentConfig,
    history_s: f64,
    out_dir: &Path,
) -> Result<ForecastDemo> {
    cfg.validate()?;
    check_consistent(data)?;
    let n = data[0].n_samples();
    let dt = data[0].dt();
    let steps = duration_steps(history_s, dt, n)?;
    if steps >= n {
        return Err(HmmError::usage(format!(
            "history of {history_s} s covers the whole {} s trial",
            n as f64 * dt
        )));
    }
    let cases = forecast_cases(data, cfg, steps, 1)?;
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    for case in &cases {
        let stem = format!("{}_class{}", case.sensor_id, case.true_class);
        let path = out_dir.join(format!("forecast_{stem}.csv"));
        let rows = export_forecast(&case.trajectory, dt);
        write_forecast_csv(&rows, std::fs::File::create(&path)?)?;
        files.push(path);

        let path = out_dir.join(format!("truth_{stem}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["time_s", "channel", "value"])?;
        for (r, row) in case.truth.rows().enumerate() {
            let time_s = (steps + r) as f64 * dt;
            for (c, v) in row.iter().enumerate() {
                w.write_record([time_s.to_string(), c.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        files.push(path);
    }
    Ok(ForecastDemo { cases, files })
}
