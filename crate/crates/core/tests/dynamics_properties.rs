use collegial::dataio::{circle_dataset, circle_gammas, synthetic_binary, Dataset};
use collegial::dynamics::{self, TrainConfig};
use collegial::ntk::{self, ParamSet};
use collegial::stats::pairwise_sum;
use collegial::Topology;

fn short_run() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.001,
        steps: 20,
        tracked_entries: vec![(0, 1)],
        record_every: 20,
    }
}

fn mean_drift(t: &Topology, m: usize, d: &Dataset, cfg: &TrainConfig, seeds: u64) -> f64 {
    let drifts: Vec<f64> = (0..seeds)
        .map(|s| dynamics::train(t, m, d, cfg, 300 + s).unwrap().final_drift())
        .collect();
    pairwise_sum(&drifts) / seeds as f64
}

#[test]
fn single_member_ensemble_matches_plain_gradient_descent() {
    let d = synthetic_binary(16, 5, 2).unwrap();
    let t = Topology::mlp(5, &[6, 6]).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.01,
        steps: 4,
        tracked_entries: vec![(0, 1)],
        record_every: 1,
    };
    let trace = dynamics::train(&t, 1, &d, &cfg, 41).unwrap();
    // reference: per-sample gradients summed by hand
    let mut p = ParamSet::init(&t, 41);
    for step in 0..=cfg.steps {
        let outs: Vec<f64> = d.inputs().iter().map(|x| ntk::forward(&t, &p, x).unwrap()).collect();
        let loss: f64 = 0.5 * outs.iter().zip(d.labels()).map(|(f, y)| (f - y).powi(2)).sum::<f64>();
        let rec = &trace.records[step];
        assert!((rec.loss - loss).abs() <= 1e-12 * loss, "step {step}");
        let k = ntk::ntk_matrix(&t, &p, &d.inputs()[..2]).unwrap().get(0, 1);
        assert!((rec.entries[0] - k).abs() <= 1e-12 * k.abs().max(1.0));
        let mut flat = p.flatten();
        for (x, (f, y)) in d.inputs().iter().zip(outs.iter().zip(d.labels())) {
            for (w, g) in flat.iter_mut().zip(ntk::gradient(&t, &p, x).unwrap()) {
                *w -= cfg.learning_rate * (f - y) * g;
            }
        }
        p = ParamSet::from_flat(&t, &flat).unwrap();
    }
}

#[test]
fn small_learning_rate_gives_monotone_loss() {
    let d = synthetic_binary(16, 8, 3).unwrap();
    let t = Topology::mlp(8, &[32, 32, 32]).unwrap();
    let mut lr = 1.0;
    let monotone = loop {
        let cfg = TrainConfig {
            learning_rate: lr,
            steps: 60,
            tracked_entries: vec![(0, 1)],
            record_every: 1,
        };
        let ok = match dynamics::train(&t, 2, &d, &cfg, 5) {
            Ok(tr) => tr.records.windows(2).all(|w| w[1].loss < w[0].loss),
            Err(_) => false,
        };
        if ok || lr < 1e-4 {
            break ok.then_some(lr);
        }
        lr /= 2.0;
    };
    assert!(monotone.is_some());
}

#[test]
fn larger_mn_drifts_less_at_matched_budget() {
    // m·n² fixed within each pair; the second member has 4x the m·n
    let d = synthetic_binary(128, 64, 1).unwrap();
    let cfg = short_run();
    for ((m1, n1), (m2, n2)) in [((1, 64), (16, 16)), ((1, 128), (16, 32)), ((1, 256), (16, 64))] {
        assert_eq!(m1 * n1 * n1, m2 * n2 * n2);
        let a = mean_drift(&Topology::mlp(64, &[n1, n1, n1]).unwrap(), m1, &d, &cfg, 8);
        let b = mean_drift(&Topology::mlp(64, &[n2, n2, n2]).unwrap(), m2, &d, &cfg, 8);
        assert!(b < a, "({m1},{n1}) drift {a} vs ({m2},{n2}) drift {b}");
    }
}

#[test]
fn nmk_variance_decays_and_mean_is_flat() {
    let t = Topology::mlp(2, &[16, 16, 16]).unwrap();
    let xs = circle_dataset(&[0.3, 1.9]).unwrap().inputs().to_vec();
    let curve = dynamics::nmk_convergence(&t, &[1, 16], &xs, 400, 12).unwrap();
    // entry 1 is (0, 1)
    let (a, b) = (&curve[0].entries[1], &curve[1].entries[1]);
    let ratio = b.variance / a.variance;
    let se = ratio * ((a.stderr_variance / a.variance).powi(2) + (b.stderr_variance / b.variance).powi(2)).sqrt();
    assert!((ratio - 1.0 / 16.0).abs() <= 3.0 * se, "ratio {ratio} ± {se}");
    assert!((a.mean - b.mean).abs() <= 3.0 * a.stderr_mean.hypot(b.stderr_mean));
}

#[test]
fn single_member_nmk_matches_single_model_statistics() {
    let t = Topology::mlp(2, &[8, 8]).unwrap();
    let xs = circle_dataset(&circle_gammas(3)).unwrap().inputs().to_vec();
    let curve = dynamics::nmk_convergence(&t, &[1], &xs, 50, 9).unwrap();
    let samples: Vec<f64> = (0..50)
        .map(|s| {
            let p = ParamSet::init(&t, collegial::stats::derive_seed(9, s));
            ntk::ntk_matrix(&t, &p, &xs).unwrap().get(0, 2)
        })
        .collect();
    let direct = collegial::McEstimate::from_samples(collegial::EntrySelector::OffDiagonal(0, 2), &samples).unwrap();
    let e = &curve[0].entries[2];
    assert_eq!((e.i, e.j), (0, 2));
    assert!((e.variance - direct.variance).abs() <= 1e-12 * direct.variance);
    assert!((e.mean - direct.mean).abs() <= 1e-12 * direct.mean.abs());
}
