//! Sequence CSV ingestion, preprocessing (scaling, channel selection, time
//! alignment) and the synthetic rigid/fabric sensor generator.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{HmmError, Result};
use crate::model::ObservationSequence;

pub const RIGID_SENSOR_ID: &str = "dr1";

/// Synthetic scotch-yoke style trial generator settings for one motion class.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    /// Angular frequency in rad/s.
    pub omega: f64,
    pub amplitude: f64,
    /// Scale of the fabric artifact harmonic; multiplied by each artifact level.
    pub artifact_amplitude: f64,
    pub artifact_phase_lag: f64,
    pub noise_std: f64,
    pub duration_s: f64,
    pub dt: f64,
    pub n_sequences: usize,
    pub rng_seed: u64,
    pub random_start_phase: bool,
    pub label: u8,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            omega: 1.05 * std::f64::consts::PI,
            amplitude: 100.0,
            artifact_amplitude: 100.0,
            artifact_phase_lag: 0.0,
            noise_std: 10.0,
            duration_s: 5.0,
            dt: 0.025,
            n_sequences: 30,
            rng_seed: 0,
            random_start_phase: true,
            label: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(HmmError::usage("dt must be positive"));
        }
        if !(self.duration_s >= self.dt) {
            return Err(HmmError::usage("duration_s must be at least dt"));
        }
        if self.n_sequences < 1 {
            return Err(HmmError::usage("n_sequences must be at least 1"));
        }
        if !(self.noise_std >= 0.0) || !(self.artifact_amplitude >= 0.0) {
            return Err(HmmError::usage("noise_std and artifact_amplitude must be non-negative"));
        }
        if !self.omega.is_finite() || !self.amplitude.is_finite() {
            return Err(HmmError::usage("omega and amplitude must be finite"));
        }
        Ok(())
    }

    /// Samples per trial: `round(duration_s / dt)`.
    pub fn n_samples(&self) -> usize {
        ((self.duration_s / self.dt).round() as usize).max(1)
    }
}

/// All trials recorded by one sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSet {
    pub sensor_id: String,
    /// `None` for the rigid reference sensor.
    pub artifact_level: Option<f64>,
    pub sequences: Vec<ObservationSequence>,
}

/// Fabric sensor id for the artifact level at `index`: `df2`, `df3`, ...
pub fn fabric_sensor_id(index: usize) -> String {
    format!("df{}", index + 2)
}

/// Generates one rigid sensor set plus one fabric set per artifact level.
///
/// The rigid channel is `amplitude * cos(omega t + phi0)` plus noise; a fabric
/// channel adds `level * artifact_amplitude * cos(omega t + phi0 + lag)` and
/// its own noise. `phi0` is uniform per trial when `random_start_phase` is set.
pub fn generate_synthetic(cfg: &SyntheticConfig, artifact_levels: &[f64]) -> Result<Vec<SensorSet>> {
    cfg.validate()?;
    if let Some(a) = artifact_levels.iter().find(|a| !(**a >= 0.0)) {
        return Err(HmmError::usage(format!("artifact level {a} must be non-negative")));
    }
    let n = cfg.n_samples();
    let noise = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| HmmError::usage(format!("noise_std: {e}")))?;

    // per trial: rigid trace followed by one trace per level
    let trials: Vec<Vec<Vec<f64>>> = (0..cfg.n_sequences as u64)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ trial);
            let phi0 = if cfg.random_start_phase {
                rng.gen_range(0.0..TAU)
            } else {
                0.0
            };
            let rigid: Vec<f64> = (0..n)
                .map(|k| {
                    let t = k as f64 * cfg.dt;
                    cfg.amplitude * (cfg.omega * t + phi0).cos() + noise.sample(&mut rng)
                })
                .collect();
            let mut traces = vec![rigid];
            for &level in artifact_levels {
                let fabric = (0..n)
                    .map(|k| {
                        let t = k as f64 * cfg.dt;
                        let clean = cfg.amplitude * (cfg.omega * t + phi0).cos();
                        let artifact = level
                            * cfg.artifact_amplitude
                            * (cfg.omega * t + phi0 + cfg.artifact_phase_lag).cos();
                        clean + artifact + noise.sample(&mut rng)
                    })
                    .collect();
                traces.push(fabric);
            }
            traces
        })
        .collect();

    let ids: Vec<(String, Option<f64>)> = std::iter::once((RIGID_SENSOR_ID.to_string(), None))
        .chain(
            artifact_levels
                .iter()
                .enumerate()
                .map(|(i, &a)| (fabric_sensor_id(i), Some(a))),
        )
        .collect();

    ids.into_iter()
        .enumerate()
        .map(|(s, (sensor_id, artifact_level))| {
            let sequences = trials
                .iter()
                .enumerate()
                .map(|(trial, traces)| {
                    Ok(ObservationSequence::from_flat(
                        traces[s].clone(),
                        1,
                        cfg.dt,
                        sensor_id.clone(),
                    )?
                    .with_label(cfg.label)
                    .with_trial_id(trial as u64))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SensorSet {
                sensor_id,
                artifact_level,
                sequences,
            })
        })
        .collect()
}

/// Circular shift per sequence that maximizes the cross-correlation of its
/// first channel against the first sequence's first channel (smallest shift on ties).
pub fn alignment_shifts(seqs: &[ObservationSequence]) -> Vec<usize> {
    let Some(reference) = seqs.first() else {
        return Vec::new();
    };
    let common = seqs.iter().map(|s| s.len()).min().unwrap_or(0);
    let r: Vec<f64> = reference.channel(0).take(common).collect();
    seqs.iter()
        .map(|s| {
            let x: Vec<f64> = s.channel(0).collect();
            let len = x.len();
            let mut best = f64::NEG_INFINITY;
            let mut best_shift = 0;
            for shift in 0..len {
                let c: f64 = r
                    .iter()
                    .enumerate()
                    .map(|(t, rv)| rv * x[(t + shift) % len])
                    .sum();
                if c > best {
                    best = c;
                    best_shift = shift;
                }
            }
            best_shift
        })
        .collect()
}

/// Selects `channels`, divides them by `scale_divisor` and optionally time-aligns.
///
/// Alignment circularly shifts each sequence by its [`alignment_shifts`] lag,
/// computed on the first selected channel, then truncates all sequences to
/// their common length.
pub fn preprocess(
    seqs: &[ObservationSequence],
    scale_divisor: f64,
    channels: &[usize],
    align: bool,
) -> Result<Vec<ObservationSequence>> {
    if channels.is_empty() {
        return Err(HmmError::usage("channel selection is empty"));
    }
    if scale_divisor == 0.0 || !scale_divisor.is_finite() {
        return Err(HmmError::usage("scale divisor must be finite and non-zero"));
    }
    let mut out = seqs
        .iter()
        .map(|s| {
            if let Some(&c) = channels.iter().find(|&&c| c >= s.n_dims()) {
                return Err(HmmError::usage(format!(
                    "channel {c} out of range for trial {} with {} channels",
                    s.trial_id,
                    s.n_dims()
                )));
            }
            let values: Vec<f64> = s
                .rows()
                .flat_map(|row| channels.iter().map(move |&c| row[c] / scale_divisor))
                .collect();
            let mut seq = ObservationSequence::from_flat(values, channels.len(), s.dt, s.sensor_id.clone())?
                .with_trial_id(s.trial_id);
            seq.label = s.label;
            Ok(seq)
        })
        .collect::<Result<Vec<_>>>()?;

    if align && !out.is_empty() {
        let shifts = alignment_shifts(&out);
        let common = out.iter().map(|s| s.len()).min().unwrap_or(0);
        out = out
            .iter()
            .zip(shifts)
            .map(|(s, shift)| {
                let rotated = rotate(s, shift)?;
                rotated.truncated(common)
            })
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(out)
}

/// `out[t] = s[(t + shift) mod len]`.
pub fn rotate(s: &ObservationSequence, shift: usize) -> Result<ObservationSequence> {
    let len = s.len();
    let m = s.n_dims();
    let values: Vec<f64> = (0..len)
        .flat_map(|t| s.row((t + shift) % len).to_vec())
        .collect();
    let mut out = ObservationSequence::from_flat(values, m, s.dt, s.sensor_id.clone())?
        .with_trial_id(s.trial_id);
    out.label = s.label;
    Ok(out)
}

/// Serializes one trial: header `t,<sensor>_c0,...`, metadata comments, then samples.
pub fn sequence_to_csv(seq: &ObservationSequence) -> String {
    let mut out = String::from("t");
    for c in 0..seq.n_dims() {
        let _ = write!(out, ",{}_c{c}", seq.sensor_id);
    }
    out.push('\n');
    let _ = writeln!(out, "# trial_id={}", seq.trial_id);
    if let Some(label) = seq.label {
        let _ = writeln!(out, "# label={label}");
    }
    let _ = writeln!(out, "# dt={}", seq.dt);
    for (t, row) in seq.rows().enumerate() {
        let _ = write!(out, "{}", t as f64 * seq.dt);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn save_csv(seq: &ObservationSequence, path: &Path) -> Result<()> {
    std::fs::write(path, sequence_to_csv(seq))?;
    Ok(())
}

#[derive(Default)]
struct PendingTrial {
    trial_id: Option<u64>,
    label: Option<u8>,
    dt: Option<f64>,
    times: Vec<f64>,
    values: Vec<f64>,
    first_line: u64,
}

/// Loads every trial in a sequence CSV file.
///
/// A `# trial_id=` comment after data rows starts a new trial, so several
/// trials may share one file.
pub fn load_csv(path: &Path) -> Result<Vec<ObservationSequence>> {
    let text = std::fs::read_to_string(path).map_err(|e| HmmError::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    parse_csv(&text, path)
}

pub fn parse_csv(text: &str, path: &Path) -> Result<Vec<ObservationSequence>> {
    let err = |line: u64, msg: String| HmmError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut header: Option<(String, usize)> = None;
    let mut trials = Vec::new();
    let mut cur = PendingTrial::default();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx as u64 + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let Some((key, value)) = comment.split_once('=') else {
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "trial_id" => {
                    if !cur.values.is_empty() {
                        trials.push(std::mem::take(&mut cur));
                    }
                    cur.trial_id = Some(
                        value
                            .parse()
                            .map_err(|_| err(lineno, format!("bad trial_id {value:?}")))?,
                    );
                }
                "label" => {
                    cur.label = Some(
                        value
                            .parse()
                            .map_err(|_| err(lineno, format!("bad label {value:?}")))?,
                    )
                }
                "dt" => {
                    cur.dt = Some(
                        value
                            .parse()
                            .map_err(|_| err(lineno, format!("bad dt {value:?}")))?,
                    )
                }
                _ => {}
            }
            continue;
        }
        let Some((_, n_channels)) = &header else {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() < 2 || cols[0] != "t" {
                return Err(err(lineno, "expected header `t,<sensor>_c0,...`".into()));
            }
            let sensor = cols[1]
                .rsplit_once("_c")
                .map(|(s, _)| s)
                .unwrap_or(cols[1])
                .to_string();
            header = Some((sensor, cols.len() - 1));
            continue;
        };
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != n_channels + 1 {
            return Err(err(
                lineno,
                format!("expected {} columns, found {}", n_channels + 1, cells.len()),
            ));
        }
        if cur.values.is_empty() {
            cur.first_line = lineno;
        }
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| err(lineno, format!("non-numeric cell {cell:?} in column {c}")))?;
            if !v.is_finite() {
                return Err(err(lineno, format!("non-finite cell {cell:?} in column {c}")));
            }
            if c == 0 {
                cur.times.push(v);
            } else {
                cur.values.push(v);
            }
        }
    }
    if !cur.values.is_empty() {
        trials.push(cur);
    }
    let Some((sensor, n_channels)) = header else {
        return Err(err(0, "missing header".into()));
    };
    if trials.is_empty() {
        return Err(err(0, "no data rows".into()));
    }

    trials
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let dt = match p.dt {
                Some(dt) => dt,
                None if p.times.len() >= 2 => p.times[1] - p.times[0],
                None => {
                    return Err(err(
                        p.first_line,
                        "cannot infer dt from a single row without a `# dt=` comment".into(),
                    ))
                }
            };
            let mut seq = ObservationSequence::from_flat(p.values, n_channels, dt, sensor.clone())
                .map_err(|e| err(p.first_line, e.to_string()))?
                .with_trial_id(p.trial_id.unwrap_or(i as u64));
            seq.label = p.label;
            Ok(seq)
        })
        .collect()
}

/// Loads every `.csv` file under `dir` (recursively, in sorted path order).
pub fn load_dir(dir: &Path) -> Result<Vec<ObservationSequence>> {
    let mut files = Vec::new();
    collect_csv(dir, &mut files)?;
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(load_csv(&f)?);
    }
    Ok(out)
}

fn collect_csv(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_csv(&path, files)?;
        } else if path.extension().is_some_and(|e| e == "csv") {
            files.push(path);
        }
    }
    Ok(())
}
