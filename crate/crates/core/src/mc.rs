//! Monte Carlo moments of single NTK entries and the log-linear fit of the
//! variance-law exponent `α`.
//!
//! The normalized second moment `E[K²] / E[K]²` of an NTK entry is modeled as
//! `exp(α S)` with `S` the topology's inverse fan-in sum, so `ln` of it is a
//! line through the origin in `S`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::McError;
use crate::ntk::{self, EnsembleParams, ParamSet};
use crate::stats::{derive_seed, pairwise_sum, r_squared, sample_variance};
use crate::topology::Topology;

/// Which NTK entry to sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntrySelector {
    Diagonal(usize),
    OffDiagonal(usize, usize),
}

impl EntrySelector {
    pub fn indices(self) -> (usize, usize) {
        match self {
            EntrySelector::Diagonal(i) => (i, i),
            EntrySelector::OffDiagonal(i, j) => (i, j),
        }
    }

    fn check(self, len: usize) -> Result<(), McError> {
        let (row, col) = self.indices();
        if row >= len || col >= len {
            return Err(McError::EntryOutOfRange { row, col, len });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub entry: EntrySelector,
    pub trials: usize,
    /// Sample mean `Ê[K]`.
    pub mean: f64,
    /// Raw second moment `Ê[K²]`.
    pub second_moment: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    pub stderr_mean: f64,
    /// Delta-method standard error of `Ê[K²] / Ê[K]²`.
    pub stderr_normalized: f64,
}

impl McEstimate {
    /// Moments of a sample, reduced in the order given.
    pub fn from_samples(entry: EntrySelector, samples: &[f64]) -> Result<Self, McError> {
        let t = samples.len();
        if t < 2 {
            return Err(McError::TooFewTrials(t));
        }
        let n = t as f64;
        let mean = pairwise_sum(samples) / n;
        let squares: Vec<f64> = samples.iter().map(|k| k * k).collect();
        let second_moment = pairwise_sum(&squares) / n;
        let variance = sample_variance(samples);
        let stderr_mean = (variance / n).sqrt();
        let stderr_normalized = ratio_stderr(samples, mean, second_moment);
        Ok(Self {
            entry,
            trials: t,
            mean,
            second_moment,
            variance,
            stderr_mean,
            stderr_normalized,
        })
    }
}

/// Delta method for `y = M2 / M1²`: the influence of sample `k` is
/// `(k² − M2)/M1² − 2 M2 (k − M1)/M1³`; its spread over the sample gives the
/// standard error.
fn ratio_stderr(samples: &[f64], m1: f64, m2: f64) -> f64 {
    if m1 == 0.0 {
        return f64::INFINITY;
    }
    let infl: Vec<f64> = samples
        .iter()
        .map(|k| (k * k - m2) / (m1 * m1) - 2.0 * m2 * (k - m1) / (m1 * m1 * m1))
        .collect();
    (sample_variance(&infl) / samples.len() as f64).sqrt()
}

/// NTK entry of `params` for the selected pair of inputs.
pub fn ntk_entry(
    topology: &Topology,
    params: &ParamSet,
    entry: EntrySelector,
    inputs: &[Vec<f64>],
) -> Result<f64, McError> {
    let (i, j) = entry.indices();
    let k = if i == j {
        ntk::ntk_matrix(topology, params, std::slice::from_ref(&inputs[i]))?.get(0, 0)
    } else {
        ntk::ntk_matrix(topology, params, &[inputs[i].clone(), inputs[j].clone()])?.get(0, 1)
    };
    Ok(k)
}

/// Samples the selected entry over `trials` independent weight draws; trial
/// `t` draws its weights from stream `t` of `seed`.
pub fn estimate_ntk_moments(
    topology: &Topology,
    entry: EntrySelector,
    inputs: &[Vec<f64>],
    trials: usize,
    seed: u64,
) -> Result<McEstimate, McError> {
    if trials < 2 {
        return Err(McError::TooFewTrials(trials));
    }
    entry.check(inputs.len())?;
    let samples: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| ntk_entry(topology, &ParamSet::init_stream(topology, seed, t), entry, inputs))
        .collect::<Result<_, _>>()?;
    McEstimate::from_samples(entry, &samples)
}

/// Samples the ensemble-NTK entry at initialization; draw `s` seeds its
/// members from `derive_seed(seed, s)`, member `j` on stream `j`.
pub fn sample_ensemble_entry(
    topology: &Topology,
    m: usize,
    entry: EntrySelector,
    inputs: &[Vec<f64>],
    draws: usize,
    seed: u64,
) -> Result<Vec<f64>, McError> {
    entry.check(inputs.len())?;
    (0..draws as u64)
        .into_par_iter()
        .map(|s| {
            let ens = EnsembleParams::init(topology, m, derive_seed(seed, s))?;
            let mut total = Vec::with_capacity(m);
            for member in ens.members() {
                total.push(ntk_entry(topology, member, entry, inputs)?);
            }
            Ok(pairwise_sum(&total) / m as f64)
        })
        .collect()
}

/// `Ê[K²] / Ê[K]²`.
pub fn normalized_second_moment(est: &McEstimate) -> Result<f64, McError> {
    if est.mean == 0.0 || est.mean.abs() <= est.stderr_mean {
        return Err(McError::IllConditioned {
            mean: est.mean,
            stderr: est.stderr_mean,
        });
    }
    Ok(est.second_moment / (est.mean * est.mean))
}

/// One point of the α fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    /// Inverse fan-in sum of the topology.
    #[serde(rename = "S")]
    pub s: f64,
    /// Normalized second moment.
    pub y: f64,
    pub stderr: f64,
}

/// Fitted variance law `E[K²]/E[K]² = exp(α S)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceModel {
    pub alpha: f64,
    /// Optional prefactor `C` of `Var(K) ≈ C (exp(α S) − 1)`; informational,
    /// cancels in both search objectives.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub prefactor_c: Option<f64>,
    /// R² of the fit on `ln y`.
    #[serde(rename = "r2")]
    pub fit_r2: f64,
    pub points: Vec<FitPoint>,
}

const ONE_TOL: f64 = 1e-9;

/// Least squares of `ln y = α S` through the origin.
pub fn fit_alpha_points(points: &[FitPoint]) -> Result<VarianceModel, McError> {
    if points.is_empty() {
        return Err(McError::NoPoints);
    }
    for (index, p) in points.iter().enumerate() {
        // y may sit a rounding error below 1; such points pull α toward 0 and
        // surface as NegativeAlpha rather than being rejected here.
        let ok = p.y.is_finite() && p.s.is_finite() && p.s >= 0.0 && p.y >= 1.0 - ONE_TOL;
        if !ok || (p.s == 0.0 && (p.y - 1.0).abs() > ONE_TOL) {
            return Err(McError::InadmissiblePoint {
                index,
                value: p.y,
                s: p.s,
            });
        }
    }
    let sxx = pairwise_sum(&points.iter().map(|p| p.s * p.s).collect::<Vec<_>>());
    if sxx == 0.0 {
        return Err(McError::DegenerateFit);
    }
    let logs: Vec<f64> = points.iter().map(|p| p.y.ln()).collect();
    let sxy = pairwise_sum(&points.iter().zip(&logs).map(|(p, l)| p.s * l).collect::<Vec<_>>());
    let alpha = sxy / sxx;
    if alpha <= 0.0 {
        return Err(McError::NegativeAlpha(alpha));
    }
    let resid: Vec<f64> = points
        .iter()
        .zip(&logs)
        .map(|(p, l)| (l - alpha * p.s).powi(2))
        .collect();
    let fit_r2 = r_squared(pairwise_sum(&resid), &logs);
    Ok(VarianceModel {
        alpha,
        prefactor_c: None,
        fit_r2,
        points: points.to_vec(),
    })
}

/// Fits α from Monte Carlo estimates over a family of topologies. The
/// prefactor is the geometric mean of `Var / (E[K]² (exp(α S) − 1))`.
pub fn fit_alpha(points: &[(Topology, McEstimate)]) -> Result<VarianceModel, McError> {
    let fit_points = points
        .iter()
        .map(|(t, est)| {
            Ok(FitPoint {
                s: t.inverse_fanin_sum(),
                y: normalized_second_moment(est)?,
                stderr: est.stderr_normalized,
            })
        })
        .collect::<Result<Vec<_>, McError>>()?;
    let mut model = fit_alpha_points(&fit_points)?;
    let logs: Vec<f64> = points
        .iter()
        .filter(|(t, est)| est.variance > 0.0 && t.inverse_fanin_sum() > 0.0)
        .map(|(t, est)| {
            let excess = (model.alpha * t.inverse_fanin_sum()).exp_m1();
            (est.variance / (est.mean * est.mean * excess)).ln()
        })
        .collect();
    if !logs.is_empty() {
        model.prefactor_c = Some((pairwise_sum(&logs) / logs.len() as f64).exp());
    }
    Ok(model)
}

/// Monte Carlo estimates over a width ladder (rescaled copies of `base`).
pub fn estimate_ladder(
    base: &Topology,
    widths: &[usize],
    entry: EntrySelector,
    inputs: &[Vec<f64>],
    trials: usize,
    seed: u64,
) -> Result<Vec<(Topology, McEstimate)>, McError> {
    if widths.is_empty() {
        return Err(McError::EmptyLadder);
    }
    widths
        .iter()
        .map(|&n| {
            let t = base.with_search_width(n)?;
            let est = estimate_ntk_moments(&t, entry, inputs, trials, seed)?;
            Ok((t, est))
        })
        .collect()
}

/// Width ladder, Monte Carlo at every rung, then the log-linear fit.
pub fn fit_alpha_ladder(
    base: &Topology,
    widths: &[usize],
    entry: EntrySelector,
    inputs: &[Vec<f64>],
    trials: usize,
    seed: u64,
) -> Result<VarianceModel, McError> {
    fit_alpha(&estimate_ladder(base, widths, entry, inputs, trials, seed)?)
}

/// `(exp(α S) − 1) / m` with unit prefactor.
pub fn predicted_variance(alpha: f64, topology: &Topology, m: usize) -> f64 {
    predicted_variance_for_sum(alpha, topology.inverse_fanin_sum(), m as f64)
}

pub fn predicted_variance_for_sum(alpha: f64, inverse_fanin_sum: f64, m: f64) -> f64 {
    (alpha * inverse_fanin_sum).exp_m1() / m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(mean: f64, second: f64) -> McEstimate {
        McEstimate {
            entry: EntrySelector::Diagonal(0),
            trials: 100,
            mean,
            second_moment: second,
            variance: second - mean * mean,
            stderr_mean: 0.01,
            stderr_normalized: 0.0,
        }
    }

    #[test]
    fn linear_net_has_constant_entry() {
        let t = Topology::mlp(2, &[]).unwrap();
        let e = estimate_ntk_moments(&t, EntrySelector::Diagonal(0), &[vec![1.0, 0.0]], 50, 1).unwrap();
        assert_eq!(e.mean, 0.5);
        assert_eq!(e.variance, 0.0);
        assert_eq!(normalized_second_moment(&e).unwrap(), 1.0);
    }

    #[test]
    fn too_few_trials() {
        let t = Topology::mlp(2, &[]).unwrap();
        let r = estimate_ntk_moments(&t, EntrySelector::Diagonal(0), &[vec![1.0, 0.0]], 1, 1);
        assert_eq!(r, Err(McError::TooFewTrials(1)));
        let r = estimate_ntk_moments(&t, EntrySelector::OffDiagonal(0, 3), &[vec![1.0, 0.0]], 5, 1);
        assert!(matches!(r, Err(McError::EntryOutOfRange { .. })));
    }

    #[test]
    fn normalized_second_moment_arithmetic() {
        assert_eq!(normalized_second_moment(&est(2.0, 5.0)).unwrap(), 1.25);
        let mut bad = est(0.001, 1.0);
        bad.stderr_mean = 0.1;
        assert!(matches!(
            normalized_second_moment(&bad),
            Err(McError::IllConditioned { .. })
        ));
    }

    #[test]
    fn noiseless_fit_recovers_alpha() {
        let pts: Vec<FitPoint> = [0.05, 0.1, 0.2, 0.4]
            .iter()
            .map(|&s| FitPoint {
                s,
                y: (2.0 * s).exp(),
                stderr: 0.0,
            })
            .collect();
        let m = fit_alpha_points(&pts).unwrap();
        assert!((m.alpha - 2.0).abs() < 1e-12);
        assert!((m.fit_r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_point_fit() {
        let m = fit_alpha_points(&[FitPoint {
            s: 0.25,
            y: 1.7,
            stderr: 0.0,
        }])
        .unwrap();
        assert!((m.alpha - 1.7f64.ln() / 0.25).abs() < 1e-12);
    }

    #[test]
    fn fit_errors() {
        assert_eq!(fit_alpha_points(&[]), Err(McError::NoPoints));
        let zero = [FitPoint {
            s: 0.0,
            y: 1.0,
            stderr: 0.0,
        }];
        assert_eq!(fit_alpha_points(&zero), Err(McError::DegenerateFit));
        let below = [FitPoint {
            s: 0.1,
            y: 0.9,
            stderr: 0.0,
        }];
        assert!(matches!(
            fit_alpha_points(&below),
            Err(McError::InadmissiblePoint { .. })
        ));
        let off = [FitPoint {
            s: 0.0,
            y: 1.5,
            stderr: 0.0,
        }];
        assert!(matches!(fit_alpha_points(&off), Err(McError::InadmissiblePoint { .. })));
        let neg = [FitPoint {
            s: 0.1,
            y: 1.0 - 1e-12,
            stderr: 0.0,
        }];
        assert!(matches!(fit_alpha_points(&neg), Err(McError::NegativeAlpha(_))));
    }

    #[test]
    fn predicted_variance_properties() {
        let t = Topology::bottleneck(256, 10, 256, None).unwrap();
        let s = 1.0 / 256.0 + 1.0 / 90.0 + 1.0 / 10.0;
        assert!((t.inverse_fanin_sum() - s).abs() < 1e-15);
        assert!((t.inverse_fanin_sum() - 0.11502).abs() < 1e-5);
        let v1 = predicted_variance(1.6, &t, 1);
        assert!((v1 - (1.6 * s).exp_m1()).abs() < 1e-15);
        assert!((v1 - 0.2020).abs() < 1e-4);
        assert_eq!(predicted_variance(1.6, &t, 2), v1 / 2.0);
        for m in 1..20 {
            assert_eq!(predicted_variance(1.6, &t, m) * m as f64, v1);
        }
        assert_eq!(predicted_variance_for_sum(3.0, 0.0, 4.0), 0.0);
    }

    #[test]
    fn estimate_is_deterministic() {
        let t = Topology::mlp(3, &[8, 8]).unwrap();
        let xs = vec![vec![0.2, 0.4, -1.0], vec![1.0, 0.0, 0.5]];
        let a = estimate_ntk_moments(&t, EntrySelector::OffDiagonal(0, 1), &xs, 64, 5).unwrap();
        let b = estimate_ntk_moments(&t, EntrySelector::OffDiagonal(0, 1), &xs, 64, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.second_moment >= a.mean * a.mean - 1e-12);
    }
}
