//! Full-batch gradient descent on collegial ensembles, with NTK drift
//! tracking, and initialization-time statistics of the ensemble NTK.
//!
//! The ensemble output is `F^e = m^{-1/2} Σ_j F(θ_j)` and the loss
//! `L = ½ ‖F^e − y‖²`, so member `j` follows `−μ m^{-1/2} Σ_i r_i ∇F(θ_j, x_i)`
//! with residuals `r = F^e − y`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::DynamicsError;
use crate::ntk::{self, EnsembleParams};
use crate::stats::{derive_seed, fit_line, pairwise_sum, sample_variance, variance_stderr, LineFit};
use crate::topology::Topology;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// NTK index pairs recorded along the trajectory.
    pub tracked_entries: Vec<(usize, usize)>,
    pub record_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            steps: 100,
            tracked_entries: vec![(0, 1)],
            record_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    /// `K^e_t` at each tracked entry.
    pub entries: Vec<f64>,
    /// `|K^e_t − K^e_0|` at each tracked entry.
    pub drift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub config: TrainConfig,
    pub m: usize,
    pub width: Option<usize>,
    pub seed: u64,
    pub records: Vec<TraceRecord>,
    pub final_fingerprint: u64,
}

impl TrainingTrace {
    pub fn final_record(&self) -> &TraceRecord {
        self.records.last().expect("step 0 is always recorded")
    }

    /// Drift of the first tracked entry at the last record.
    pub fn final_drift(&self) -> f64 {
        self.final_record().drift[0]
    }
}

fn check_config(config: &TrainConfig, dataset: &Dataset) -> Result<(), DynamicsError> {
    if !(config.learning_rate.is_finite() && config.learning_rate >= 0.0) {
        return Err(DynamicsError::LearningRate(config.learning_rate));
    }
    if config.record_every == 0 {
        return Err(DynamicsError::RecordEvery);
    }
    if config.tracked_entries.is_empty() {
        return Err(DynamicsError::EmptyList("tracked_entries"));
    }
    let len = dataset.len();
    for &(row, col) in &config.tracked_entries {
        if row >= len || col >= len {
            return Err(DynamicsError::TrackedEntry { row, col, len });
        }
    }
    Ok(())
}

fn tracked_values(
    topology: &Topology,
    ens: &EnsembleParams,
    dataset: &Dataset,
    entries: &[(usize, usize)],
) -> Result<Vec<f64>, DynamicsError> {
    entries
        .iter()
        .map(|&(i, j)| {
            let xs = [dataset.inputs()[i].clone(), dataset.inputs()[j].clone()];
            Ok(ntk::ensemble_ntk(topology, ens, &xs)?.get(0, 1))
        })
        .collect()
}

/// Trains `m` members drawn from `seed` (member `j` on stream `j`).
pub fn train(
    topology: &Topology,
    m: usize,
    dataset: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainingTrace, DynamicsError> {
    check_config(config, dataset)?;
    let mut ens = EnsembleParams::init(topology, m, seed)?;
    let xs = dataset.inputs();
    let ys = dataset.labels();
    let scale = 1.0 / (m as f64).sqrt();
    let k0 = tracked_values(topology, &ens, dataset, &config.tracked_entries)?;
    let mut records = Vec::new();

    for step in 0..=config.steps {
        let member_outputs = ens
            .members()
            .iter()
            .map(|p| ntk::forward_batch(topology, p, xs))
            .collect::<Result<Vec<_>, _>>()?;
        let residual: Vec<f64> = (0..xs.len())
            .map(|i| {
                let f: Vec<f64> = member_outputs.iter().map(|o| o[i]).collect();
                pairwise_sum(&f) * scale - ys[i]
            })
            .collect();
        let loss = 0.5 * pairwise_sum(&residual.iter().map(|r| r * r).collect::<Vec<_>>());
        if !loss.is_finite() {
            return Err(DynamicsError::Diverged { step, loss });
        }
        if step % config.record_every == 0 || step == config.steps {
            let entries = if step == 0 {
                k0.clone()
            } else {
                tracked_values(topology, &ens, dataset, &config.tracked_entries)?
            };
            let drift = entries.iter().zip(&k0).map(|(k, k0)| (k - k0).abs()).collect();
            records.push(TraceRecord {
                step,
                loss,
                entries,
                drift,
            });
        }
        if step == config.steps {
            break;
        }
        let lr = config.learning_rate;
        for member in ens.members_mut() {
            let (_, grads) = ntk::outputs_and_weighted_gradient(topology, member, xs, |_| {
                residual.iter().map(|r| r * scale).collect()
            })?;
            for (w, g) in member.layers_mut().iter_mut().zip(grads) {
                for (wi, gi) in w.iter_mut().zip(g) {
                    *wi -= lr * gi;
                }
            }
        }
    }
    Ok(TrainingTrace {
        config: config.clone(),
        m,
        width: topology.search_width(),
        seed,
        records,
        final_fingerprint: ens.fingerprint(),
    })
}

/// One drift observation for the scaling fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftRun {
    pub m: usize,
    pub n: usize,
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub used: usize,
    pub excluded: usize,
}

/// Least squares of `ln drift` against `ln(m·n)`. Runs with zero drift are
/// dropped with a warning.
pub fn drift_scaling_fit(runs: &[DriftRun]) -> Result<DriftFit, DynamicsError> {
    let used: Vec<&DriftRun> = runs
        .iter()
        .filter(|r| {
            let ok = r.drift > 0.0 && r.drift.is_finite();
            if !ok {
                log::warn!("excluding run m={} n={} with drift {}", r.m, r.n, r.drift);
            }
            ok
        })
        .collect();
    if used.len() < 3 {
        return Err(DynamicsError::TooFewRuns {
            needed: 3,
            got: used.len(),
        });
    }
    let x: Vec<f64> = used.iter().map(|r| ((r.m * r.n) as f64).ln()).collect();
    let y: Vec<f64> = used.iter().map(|r| r.drift.ln()).collect();
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo) / std::f64::consts::LN_10;
    if span < 1.0 {
        return Err(DynamicsError::NarrowSpan { span });
    }
    let LineFit { slope, intercept, r2 } = fit_line(&x, &y);
    Ok(DriftFit {
        slope,
        intercept,
        r2,
        used: used.len(),
        excluded: runs.len() - used.len(),
    })
}

/// Across-draw statistics of one kernel entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryStats {
    pub i: usize,
    pub j: usize,
    pub mean: f64,
    pub variance: f64,
    pub stderr_mean: f64,
    pub stderr_variance: f64,
}

fn entry_stats(samples: &[Vec<f64>], size: usize) -> Vec<EntryStats> {
    let mut out = Vec::new();
    for i in 0..size {
        for j in i..size {
            let v: Vec<f64> = samples.iter().map(|k| k[i * size + j]).collect();
            let variance = sample_variance(&v);
            out.push(EntryStats {
                i,
                j,
                mean: pairwise_sum(&v) / v.len() as f64,
                variance,
                stderr_mean: (variance / v.len() as f64).sqrt(),
                stderr_variance: variance_stderr(&v),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmkPoint {
    pub m: usize,
    pub seeds: usize,
    /// Upper triangle of `K^e`, row-major.
    pub entries: Vec<EntryStats>,
}

/// Samples `K^e` at initialization for every `m`; draw `s` seeds its
/// ensemble with `derive_seed(seed, s)`.
pub fn nmk_convergence(
    topology: &Topology,
    m_values: &[usize],
    inputs: &[Vec<f64>],
    seeds_per_point: usize,
    seed: u64,
) -> Result<Vec<NmkPoint>, DynamicsError> {
    if m_values.is_empty() {
        return Err(DynamicsError::EmptyList("m_values"));
    }
    if seeds_per_point < 2 {
        return Err(DynamicsError::TooFewSeeds(seeds_per_point));
    }
    m_values
        .iter()
        .map(|&m| {
            let samples: Vec<Vec<f64>> = (0..seeds_per_point as u64)
                .into_par_iter()
                .map(|s| {
                    let ens = EnsembleParams::init(topology, m, derive_seed(seed, s))?;
                    Ok(ntk::ensemble_ntk(topology, &ens, inputs)?.entries().to_vec())
                })
                .collect::<Result<_, DynamicsError>>()?;
            Ok(NmkPoint {
                m,
                seeds: seeds_per_point,
                entries: entry_stats(&samples, inputs.len()),
            })
        })
        .collect()
}

/// Slope of `ln Var(K^e_entry)` against `ln m`.
pub fn variance_decay_slope(curve: &[NmkPoint], entry: usize) -> LineFit {
    let x: Vec<f64> = curve.iter().map(|p| (p.m as f64).ln()).collect();
    let y: Vec<f64> = curve.iter().map(|p| p.entries[entry].variance.ln()).collect();
    fit_line(&x, &y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthMeans {
    pub width: usize,
    pub entries: Vec<EntryStats>,
}

/// Pair of widths whose means at one entry differ by more than three
/// combined standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthDisagreement {
    pub widths: (usize, usize),
    pub entry: (usize, usize),
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthReport {
    pub widths: Vec<WidthMeans>,
    pub flagged: Vec<WidthDisagreement>,
    /// Largest `|Δmean| / combined stderr` over all pairs and entries.
    pub max_z: f64,
}

/// Monte Carlo NTK means at each width of `base`'s family.
pub fn nmk_width_independence(
    base: &Topology,
    widths: &[usize],
    inputs: &[Vec<f64>],
    trials: usize,
    seed: u64,
) -> Result<WidthReport, DynamicsError> {
    if widths.len() < 2 {
        return Err(DynamicsError::EmptyList("widths (need at least 2)"));
    }
    if trials < 2 {
        return Err(DynamicsError::TooFewSeeds(trials));
    }
    let per_width = widths
        .iter()
        .map(|&w| {
            let t = base.with_search_width(w).map_err(|e| DynamicsError::Ntk(e.into()))?;
            let samples: Vec<Vec<f64>> = (0..trials as u64)
                .into_par_iter()
                .map(|s| {
                    let p = ntk::ParamSet::init_stream(&t, seed, s);
                    Ok(ntk::ntk_matrix(&t, &p, inputs)?.entries().to_vec())
                })
                .collect::<Result<_, DynamicsError>>()?;
            Ok(WidthMeans {
                width: w,
                entries: entry_stats(&samples, inputs.len()),
            })
        })
        .collect::<Result<Vec<_>, DynamicsError>>()?;
    let mut flagged = Vec::new();
    let mut max_z: f64 = 0.0;
    for a in 0..per_width.len() {
        for b in a + 1..per_width.len() {
            for (ea, eb) in per_width[a].entries.iter().zip(&per_width[b].entries) {
                let se = ea.stderr_mean.hypot(eb.stderr_mean);
                let diff = (ea.mean - eb.mean).abs();
                let z = if se > 0.0 {
                    diff / se
                } else if diff == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                };
                max_z = max_z.max(z);
                if z > 3.0 {
                    flagged.push(WidthDisagreement {
                        widths: (per_width[a].width, per_width[b].width),
                        entry: (ea.i, ea.j),
                        z,
                    });
                }
            }
        }
    }
    Ok(WidthReport {
        widths: per_width,
        flagged,
        max_z,
    })
}
