use std::path::Path;

use anyhow::{ensure, Result};
use collegial::dataio::{self, Table};
use collegial::dynamics::{self, DriftRun, TrainConfig};
use collegial::mc::{self, VarianceModel};
use collegial::ntk::{self, EnsembleParams};
use collegial::search::{self, BaselineSpec, SearchResult};
use collegial::stats::{derive_seed, pairwise_sum};
use collegial::{EntrySelector, Topology};
use serde::Serialize;

use crate::config::{usage, AlphaSpec, Objective, RunConfig};

/// JSON artifact: the resolved config followed by the result.
#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    config: &'a RunConfig,
    result: T,
}

fn write_artifact<T: Serialize>(dir: &Path, name: &str, cfg: &RunConfig, result: T) -> Result<()> {
    dataio::export_json(&Artifact { config: cfg, result }, &dir.join(name))?;
    Ok(())
}

/// Inputs for the Monte Carlo entry: deterministic draws keyed by the seed.
fn probe_inputs(t: &Topology, entry: EntrySelector, seed: u64) -> Result<Vec<Vec<f64>>> {
    let (i, j) = entry.indices();
    (0..=i.max(j) as u64)
        .map(|k| Ok(ntk::random_input(t, derive_seed(seed, k))?))
        .collect()
}

pub fn fit(cfg: &RunConfig) -> Result<VarianceModel> {
    let t = cfg.topology();
    let seed = cfg.seed()?;
    let entry = cfg.entry.expect("resolved");
    let ladder = cfg.ladder.as_deref().expect("resolved");
    let inputs = probe_inputs(t, entry, seed)?;
    Ok(mc::fit_alpha_ladder(
        t,
        ladder,
        entry,
        &inputs,
        cfg.trials.expect("resolved"),
        seed,
    )?)
}

fn fit_curve(model: &VarianceModel) -> Table {
    let mut table = Table::new(["S", "y", "stderr", "ln_y", "fit_ln_y"]);
    for p in &model.points {
        table.push(vec![p.s, p.y, p.stderr, p.y.ln(), model.alpha * p.s]);
    }
    table
}

pub fn fit_alpha(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = fit(cfg)?;
    dataio::export_csv(&fit_curve(&model), &out.join("fit_alpha_curve.csv"))?;
    write_artifact(out, "fit_alpha.json", cfg, &model)?;
    println!("{:>6} {:>12} {:>14} {:>12}", "n", "S", "E[K^2]/E[K]^2", "stderr");
    for (n, p) in cfg.ladder.as_deref().unwrap_or_default().iter().zip(&model.points) {
        println!("{n:>6} {:>12.6} {:>14.6} {:>12.2e}", p.s, p.y, p.stderr);
    }
    println!("alpha = {:.6}  R^2 = {:.4}", model.alpha, model.fit_r2);
    Ok(())
}

#[derive(Serialize)]
struct SearchOutput<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    variance_model: Option<&'a VarianceModel>,
    #[serde(flatten)]
    search: &'a SearchResult,
}

pub fn run_search(cfg: &RunConfig) -> Result<(SearchResult, Option<VarianceModel>)> {
    let (alpha, model) = match cfg.alpha.expect("resolved") {
        AlphaSpec::Value(a) => (a, None),
        AlphaSpec::Fit => {
            let m = fit(cfg)?;
            (m.alpha, Some(m))
        }
    };
    let baseline = BaselineSpec::new(cfg.topology().clone(), alpha)?;
    let [lo, hi] = cfg.grid.expect("resolved");
    ensure!(lo >= 1 && lo <= hi, usage(format!("invalid grid [{lo}, {hi}]")));
    let grid: Vec<usize> = (lo..=hi).collect();
    let result = search::grid_search(
        &baseline,
        Some(&grid),
        cfg.metric.expect("resolved"),
        cfg.network_overhead,
    )?;
    Ok((result, model))
}

pub fn search(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (r, model) = run_search(cfg)?;
    let objective = cfg.objective.unwrap_or_default();
    if objective != Objective::Dual {
        let mut t = Table::new(["n", "m_primal", "objective", "error_proxy"]);
        for c in &r.curve {
            t.push(vec![c.n as f64, c.m_primal, c.primal_objective, c.error_proxy()]);
        }
        dataio::export_csv(&t, &out.join("search_primal.csv"))?;
    }
    if objective != Objective::Primal {
        let mut t = Table::new(["n", "m_dual", "rho"]);
        for c in &r.curve {
            t.push(vec![c.n as f64, c.m_dual, c.rho_dual]);
        }
        dataio::export_csv(&t, &out.join("search_dual.csv"))?;
    }
    write_artifact(
        out,
        "search.json",
        cfg,
        SearchOutput {
            variance_model: model.as_ref(),
            search: &r,
        },
    )?;
    let opt = r.optimum();
    println!(
        "metric {:?}  alpha {:.6}  baseline width {}  budget {}",
        r.efficiency_metric, r.alpha, r.baseline_width, r.baseline_budget
    );
    if objective != Objective::Dual {
        println!(
            "primal: n = {:<4} m = {:.3} (rounded {})  objective {:.6e}  realized budget {}",
            r.n_primal, r.m_primal, r.m_primal_int, opt.primal_objective, r.realized_budget
        );
    }
    if objective != Objective::Primal {
        println!(
            "dual:   n = {:<4} m = {:.3} (rounded {})  rho {:.4}  realized rho {:.4}",
            r.n_dual, r.m_dual, r.m_dual_int, r.rho_at_optimum, r.realized_rho
        );
    }
    if let Some(rho) = r.network_rho {
        println!("network-level rho {rho:.4}");
    }
    Ok(())
}

#[derive(Serialize)]
struct DynamicsOutput {
    runs: Vec<RunSummary>,
    fit: Option<dynamics::DriftFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit_error: Option<String>,
}

#[derive(Serialize)]
struct RunSummary {
    m: usize,
    n: usize,
    /// Mean over seeds of the final drift of the first tracked entry.
    mean_drift: f64,
    drifts: Vec<f64>,
    final_loss: Vec<f64>,
}

pub fn verify_dynamics(cfg: &RunConfig, out: &Path) -> Result<()> {
    let sec = cfg.dynamics.as_ref().expect("resolved");
    let data = cfg.dataset.as_ref().expect("resolved").load()?;
    let base = cfg.topology();
    let seed = cfg.seed()?;
    let train_cfg = TrainConfig {
        learning_rate: sec.learning_rate,
        steps: sec.steps,
        tracked_entries: sec.tracked_entries.clone(),
        record_every: sec.record_every,
    };
    ensure!(sec.seeds >= 1, usage("dynamics.seeds must be positive"));
    let mut summaries = Vec::new();
    println!("{:>5} {:>6} {:>14} {:>12}", "m", "n", "mean drift", "final loss");
    for (k, &[m, n]) in sec.runs.iter().enumerate() {
        let t = base.with_search_width(n)?;
        let mut drifts = Vec::new();
        let mut losses = Vec::new();
        for s in 0..sec.seeds as u64 {
            let run_seed = derive_seed(derive_seed(seed, k as u64), s);
            let trace = dynamics::train(&t, m, &data, &train_cfg, run_seed)?;
            let mut cols = vec!["step".to_string(), "loss".to_string()];
            for (i, j) in &sec.tracked_entries {
                cols.push(format!("K_{i}_{j}"));
            }
            for (i, j) in &sec.tracked_entries {
                cols.push(format!("drift_{i}_{j}"));
            }
            let mut table = Table::new(cols);
            for r in &trace.records {
                let mut row = vec![r.step as f64, r.loss];
                row.extend(&r.entries);
                row.extend(&r.drift);
                table.push(row);
            }
            dataio::export_csv(&table, &out.join(format!("trace_m{m}_n{n}_s{s}.csv")))?;
            drifts.push(trace.final_drift());
            losses.push(trace.final_record().loss);
        }
        let mean_drift = pairwise_sum(&drifts) / drifts.len() as f64;
        println!(
            "{m:>5} {n:>6} {mean_drift:>14.4e} {:>12.4e}",
            pairwise_sum(&losses) / losses.len() as f64
        );
        summaries.push(RunSummary {
            m,
            n,
            mean_drift,
            drifts,
            final_loss: losses,
        });
    }
    let runs: Vec<DriftRun> = summaries
        .iter()
        .map(|s| DriftRun {
            m: s.m,
            n: s.n,
            drift: s.mean_drift,
        })
        .collect();
    let (fit, fit_error) = match dynamics::drift_scaling_fit(&runs) {
        Ok(f) => {
            println!("slope of ln drift vs ln(mn): {:.4}  (R^2 {:.4})", f.slope, f.r2);
            (Some(f), None)
        }
        Err(e) => {
            println!("no slope fit: {e}");
            (None, Some(e.to_string()))
        }
    };
    write_artifact(
        out,
        "dynamics.json",
        cfg,
        DynamicsOutput {
            runs: summaries,
            fit,
            fit_error,
        },
    )
}

#[derive(Serialize)]
struct NmkOutput {
    curve: Vec<dynamics::NmkPoint>,
    slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    widths: Option<dynamics::WidthReport>,
}

pub fn nmk(cfg: &RunConfig, out: &Path) -> Result<()> {
    let sec = cfg.nmk.as_ref().expect("resolved");
    let data = cfg.dataset.as_ref().expect("resolved").load()?;
    let t = cfg.topology();
    let seed = cfg.seed()?;
    let (ei, ej) = cfg.entry.expect("resolved").indices();
    let size = data.len();
    ensure!(
        ei < size && ej < size,
        usage(format!("entry ({ei}, {ej}) outside {size} inputs"))
    );
    let (ei, ej) = (ei.min(ej), ei.max(ej));
    // index of (ei, ej) in the row-major upper triangle
    let idx = (0..ei).map(|r| size - r).sum::<usize>() + (ej - ei);
    let curve = dynamics::nmk_convergence(t, &sec.m_values, data.inputs(), sec.seeds_per_point, seed)?;
    let mut table = Table::new(["m", "i", "j", "mean", "variance", "stderr_mean", "stderr_variance"]);
    for p in &curve {
        for e in &p.entries {
            table.push(vec![
                p.m as f64,
                e.i as f64,
                e.j as f64,
                e.mean,
                e.variance,
                e.stderr_mean,
                e.stderr_variance,
            ]);
        }
    }
    dataio::export_csv(&table, &out.join("nmk_curve.csv"))?;
    println!("{:>5} {:>14} {:>14}   entry ({ei}, {ej})", "m", "mean", "variance");
    for p in &curve {
        let e = &p.entries[idx];
        println!("{:>5} {:>14.6e} {:>14.6e}", p.m, e.mean, e.variance);
    }
    let slope = (curve.len() >= 2).then(|| dynamics::variance_decay_slope(&curve, idx).slope);
    if let Some(s) = slope {
        println!("variance slope vs m (log-log): {s:.4}");
    }
    let widths = if sec.widths.len() >= 2 {
        let report = dynamics::nmk_width_independence(t, &sec.widths, data.inputs(), sec.seeds_per_point, seed)?;
        println!(
            "width check {:?}: max |z| = {:.3}, {} pair(s) beyond 3 stderr",
            sec.widths,
            report.max_z,
            report.flagged.len()
        );
        Some(report)
    } else {
        None
    };
    write_artifact(out, "nmk.json", cfg, NmkOutput { curve, slope, widths })
}

#[derive(Serialize)]
struct ExportOutput {
    size: usize,
    multiplicity: usize,
    dataset_fingerprint: u64,
    params_fingerprint: u64,
    min_eigenvalue: f64,
    trace: f64,
}

pub fn export(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = cfg.dataset.as_ref().expect("resolved").load()?;
    let t = cfg.topology();
    let m = cfg.multiplicity.expect("resolved");
    ensure!(m >= 1, usage("multiplicity must be positive"));
    let ens = EnsembleParams::init(t, m, cfg.seed()?)?;
    let k = ntk::ensemble_ntk(t, &ens, data.inputs())?;
    let n = k.size();
    let mut table = Table::new((0..n).map(|j| format!("x{j}")));
    for i in 0..n {
        table.push((0..n).map(|j| k.get(i, j)).collect());
    }
    dataio::export_csv(&table, &out.join("ntk.csv"))?;
    let summary = ExportOutput {
        size: n,
        multiplicity: m,
        dataset_fingerprint: k.dataset_fingerprint(),
        params_fingerprint: ens.fingerprint(),
        min_eigenvalue: k.min_eigenvalue(),
        trace: k.trace(),
    };
    println!(
        "NTK {n}x{n} (m = {m})  trace {:.6e}  min eigenvalue {:.3e}",
        summary.trace, summary.min_eigenvalue
    );
    write_artifact(out, "export.json", cfg, summary)
}
