//! Closed-form search over the scalar width `n` of an ensemble member.
//!
//! Primal: at the baseline's budget `β_s`, `m_p(n) = β_s / β(n)` members of
//! width `n` fit, with predicted variance `(e^{αS(n)} − 1) / m_p(n)`.
//! Dual: `m_d(n)` members match the baseline's predicted variance, costing
//! `m_d(n) β(n)`; efficiency is `ρ = β_s / (m_d β(n))`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::SearchError;
use crate::mc::predicted_variance_for_sum;
use crate::topology::Topology;

/// Budget measure for efficiency and primal matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EfficiencyMetric {
    #[default]
    Params,
    Flops,
}

impl EfficiencyMetric {
    pub fn cost(self, topology: &Topology) -> Result<u64, SearchError> {
        Ok(match self {
            EfficiencyMetric::Params => topology.param_count(),
            EfficiencyMetric::Flops => topology.flop_count()?,
        })
    }
}

impl std::str::FromStr for EfficiencyMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "params" => Ok(Self::Params),
            "flops" => Ok(Self::Flops),
            other => Err(format!("unknown metric {other:?}; expected params or flops")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub topology: Topology,
    pub alpha: f64,
    pub beta_s: u64,
    /// `None` when the topology has no spatial size to count FLOPs on.
    pub betaflop_s: Option<u64>,
    #[serde(rename = "S_baseline")]
    pub s_baseline: f64,
}

impl BaselineSpec {
    pub fn new(topology: Topology, alpha: f64) -> Result<Self, SearchError> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(SearchError::InvalidAlpha(alpha));
        }
        topology
            .search_width()
            .ok_or(crate::error::TopologyError::NotSearchable)?;
        let beta_s = topology.param_count();
        let betaflop_s = topology.flop_count().ok();
        let s_baseline = topology.inverse_fanin_sum();
        Ok(Self {
            topology,
            alpha,
            beta_s,
            betaflop_s,
            s_baseline,
        })
    }

    /// Baseline width `ñ`.
    pub fn width(&self) -> usize {
        self.topology.search_width().expect("checked in new")
    }

    pub fn budget(&self, metric: EfficiencyMetric) -> Result<u64, SearchError> {
        match metric {
            EfficiencyMetric::Params => Ok(self.beta_s),
            EfficiencyMetric::Flops => self
                .betaflop_s
                .ok_or(SearchError::Topology(crate::error::TopologyError::MissingSpatial)),
        }
    }

    /// `e^{αS(ñ)} − 1`, the variance budget of the dual.
    pub fn baseline_excess(&self) -> f64 {
        predicted_variance_for_sum(self.alpha, self.s_baseline, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePoint {
    pub n: usize,
    pub m_primal: f64,
    pub m_dual: f64,
    pub primal_objective: f64,
    pub rho_dual: f64,
    /// Cost of one member under the search metric.
    pub beta_n: u64,
    #[serde(rename = "S_n")]
    pub s_n: f64,
}

impl CandidatePoint {
    /// Square root of the primal objective, the predicted NTK standard
    /// deviation; plotted beside the objective on the primal curve.
    pub fn error_proxy(&self) -> f64 {
        self.primal_objective.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub efficiency_metric: EfficiencyMetric,
    pub alpha: f64,
    pub baseline_width: usize,
    pub baseline_budget: u64,
    pub curve: Vec<CandidatePoint>,
    pub n_primal: usize,
    pub m_primal: f64,
    pub m_primal_int: u64,
    /// `m_primal_int · β(n_primal)`.
    pub realized_budget: u64,
    pub n_dual: usize,
    pub m_dual: f64,
    pub m_dual_int: u64,
    /// Dual ρ before rounding.
    pub rho_at_optimum: f64,
    /// `β_s / (m_dual_int · β(n_dual))`.
    pub realized_rho: f64,
    /// Network-level ρ with a fixed count of unsearched parameters added to
    /// both sides; absent unless an overhead was given.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub network_rho: Option<f64>,
}

impl SearchResult {
    pub fn optimum(&self) -> &CandidatePoint {
        self.curve
            .iter()
            .find(|c| c.n == self.n_primal)
            .expect("optimum lies on the curve")
    }
}

/// `β_s / (m · β(n))` under `metric`.
pub fn efficiency_rho(
    m: f64,
    topology_n: &Topology,
    baseline: &BaselineSpec,
    metric: EfficiencyMetric,
) -> Result<f64, SearchError> {
    if !(m.is_finite() && m > 0.0) {
        return Err(SearchError::InvalidMultiplicity(m));
    }
    let beta_s = baseline.budget(metric)? as f64;
    Ok(beta_s / (m * metric.cost(topology_n)? as f64))
}

fn evaluate(
    n: usize,
    baseline: &BaselineSpec,
    metric: EfficiencyMetric,
) -> Result<(Topology, CandidatePoint), SearchError> {
    let t = baseline.topology.with_search_width(n)?;
    let beta_n = metric.cost(&t)?;
    let beta_s = baseline.budget(metric)?;
    let s_n = t.inverse_fanin_sum();
    let excess = predicted_variance_for_sum(baseline.alpha, s_n, 1.0);
    let m_primal = beta_s as f64 / beta_n as f64;
    let point = CandidatePoint {
        n,
        m_primal,
        m_dual: f64::NAN,
        primal_objective: excess / m_primal,
        rho_dual: f64::NAN,
        beta_n,
        s_n,
    };
    Ok((t, point))
}

/// Primal fields at width `n`; dual fields are left NaN.
pub fn primal_point(
    n: usize,
    baseline: &BaselineSpec,
    metric: EfficiencyMetric,
) -> Result<CandidatePoint, SearchError> {
    Ok(evaluate(n, baseline, metric)?.1)
}

/// Primal and dual fields at width `n`.
pub fn dual_point(n: usize, baseline: &BaselineSpec, metric: EfficiencyMetric) -> Result<CandidatePoint, SearchError> {
    let (t, mut point) = evaluate(n, baseline, metric)?;
    let base_excess = baseline.baseline_excess();
    if baseline.s_baseline == 0.0 || base_excess == 0.0 {
        return Err(SearchError::DegenerateBaseline);
    }
    point.m_dual = predicted_variance_for_sum(baseline.alpha, point.s_n, 1.0) / base_excess;
    point.rho_dual = efficiency_rho(point.m_dual, &t, baseline, metric)?;
    Ok(point)
}

/// Index of the best value; values within a relative `1e-12` of the best
/// count as ties and resolve to the earliest (smallest) width.
fn select(values: impl Iterator<Item = f64> + Clone, better: Ordering) -> usize {
    let best = values
        .clone()
        .reduce(|a, b| if b.total_cmp(&a) == better { b } else { a })
        .expect("nonempty grid");
    values
        .into_iter()
        .position(|v| (v - best).abs() <= 1e-12 * best.abs())
        .expect("best is attained")
}

fn round_multiplicity(m: f64) -> u64 {
    (m.round() as u64).max(1)
}

/// Exhaustive primal and dual search over `grid` (defaults to
/// `1..=baseline width`).
pub fn grid_search(
    baseline: &BaselineSpec,
    grid: Option<&[usize]>,
    metric: EfficiencyMetric,
    network_overhead: Option<u64>,
) -> Result<SearchResult, SearchError> {
    let default: Vec<usize>;
    let grid = match grid {
        Some(g) => g,
        None => {
            default = (1..=baseline.width()).collect();
            &default
        }
    };
    if grid.is_empty() {
        return Err(SearchError::EmptyGrid);
    }
    let curve = grid
        .iter()
        .map(|&n| dual_point(n, baseline, metric))
        .collect::<Result<Vec<_>, _>>()?;
    let ip = select(curve.iter().map(|c| c.primal_objective), Ordering::Less);
    let id = select(curve.iter().map(|c| c.rho_dual), Ordering::Greater);
    let (primal, dual) = (&curve[ip], &curve[id]);
    if primal.n != dual.n {
        return Err(SearchError::DualityMismatch {
            primal: primal.n,
            dual: dual.n,
        });
    }
    let budget = baseline.budget(metric)?;
    let m_primal_int = round_multiplicity(primal.m_primal);
    let m_dual_int = round_multiplicity(dual.m_dual);
    let network_rho =
        network_overhead.map(|o| (budget as f64 + o as f64) / (dual.m_dual * dual.beta_n as f64 + o as f64));
    Ok(SearchResult {
        efficiency_metric: metric,
        alpha: baseline.alpha,
        baseline_width: baseline.width(),
        baseline_budget: budget,
        n_primal: primal.n,
        m_primal: primal.m_primal,
        m_primal_int,
        realized_budget: m_primal_int * primal.beta_n,
        n_dual: dual.n,
        m_dual: dual.m_dual,
        m_dual_int,
        rho_at_optimum: dual.rho_dual,
        realized_rho: budget as f64 / (m_dual_int * dual.beta_n) as f64,
        network_rho,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn baseline(alpha: f64) -> BaselineSpec {
        BaselineSpec::new(Topology::bottleneck(256, 128, 256, Some((4, 4))).unwrap(), alpha).unwrap()
    }

    #[test]
    fn baseline_fields() {
        let b = baseline(1.6);
        assert_eq!(b.beta_s, 212_992);
        assert_eq!(b.betaflop_s, Some(2 * 212_992 * 16));
        assert_eq!(b.width(), 128);
    }

    #[test]
    fn rho_examples() {
        let b = baseline(1.6);
        let same = efficiency_rho(1.0, &b.topology, &b, EfficiencyMetric::Params).unwrap();
        assert_eq!(same, 1.0);
        let t10 = b.topology.with_search_width(10).unwrap();
        assert_eq!(t10.param_count(), 6_020);
        let r = efficiency_rho(10.0, &t10, &b, EfficiencyMetric::Params).unwrap();
        assert!((r - 212_992.0 / 60_200.0).abs() < 1e-12);
        assert!((r - 3.54).abs() < 0.005);
        let half = efficiency_rho(5.0, &t10, &b, EfficiencyMetric::Params).unwrap();
        assert_eq!(half, 2.0 * r);
        assert!(matches!(
            efficiency_rho(0.0, &t10, &b, EfficiencyMetric::Params),
            Err(SearchError::InvalidMultiplicity(_))
        ));
    }

    #[test]
    fn primal_examples() {
        let b = baseline(1.6);
        let p = primal_point(128, &b, EfficiencyMetric::Params).unwrap();
        assert_eq!(p.m_primal, 1.0);
        assert_eq!(p.primal_objective, (1.6 * b.s_baseline).exp_m1());
        let p = primal_point(10, &b, EfficiencyMetric::Params).unwrap();
        assert!((p.m_primal - 35.38).abs() < 0.01);
    }

    #[test]
    fn dual_examples() {
        let b = baseline(1.6);
        let d = dual_point(128, &b, EfficiencyMetric::Params).unwrap();
        assert_eq!(d.m_dual, 1.0);
        assert_eq!(d.rho_dual, 1.0);
    }

    #[test]
    fn single_point_grid() {
        let b = baseline(1.6);
        let r = grid_search(&b, Some(&[12]), EfficiencyMetric::Params, None).unwrap();
        assert_eq!((r.n_primal, r.n_dual), (12, 12));
        let p = dual_point(12, &b, EfficiencyMetric::Params).unwrap();
        assert_eq!(r.m_primal, p.m_primal);
        assert_eq!(r.m_dual, p.m_dual);
        assert_eq!(r.m_primal_int, p.m_primal.round() as u64);
    }

    #[test]
    fn errors() {
        let t = Topology::bottleneck(256, 128, 256, None).unwrap();
        assert!(matches!(
            BaselineSpec::new(t.clone(), 0.0),
            Err(SearchError::InvalidAlpha(_))
        ));
        assert!(matches!(
            BaselineSpec::new(t.clone(), f64::NAN),
            Err(SearchError::InvalidAlpha(_))
        ));
        let b = BaselineSpec::new(t, 1.6).unwrap();
        assert_eq!(
            grid_search(&b, Some(&[]), EfficiencyMetric::Params, None),
            Err(SearchError::EmptyGrid)
        );
        assert!(matches!(
            grid_search(&b, None, EfficiencyMetric::Flops, None),
            Err(SearchError::Topology(_))
        ));
    }

    #[test]
    fn network_overhead_dilutes_rho() {
        let b = baseline(1.6);
        let plain = grid_search(&b, None, EfficiencyMetric::Params, None).unwrap();
        assert_eq!(plain.network_rho, None);
        let net = grid_search(&b, None, EfficiencyMetric::Params, Some(100_000)).unwrap();
        let rho = net.network_rho.unwrap();
        assert!(rho > 1.0 && rho < net.rho_at_optimum);
    }

    #[test]
    fn metric_parses() {
        assert_eq!("flops".parse::<EfficiencyMetric>().unwrap(), EfficiencyMetric::Flops);
        assert!("area".parse::<EfficiencyMetric>().is_err());
    }
}
