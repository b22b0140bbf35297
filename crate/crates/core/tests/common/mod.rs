//! Oracles shared by the integration targets.
#![allow(dead_code)]

use collegial::ntk::{self, ParamSet};
use collegial::{LayerSpec, Readout, Topology};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random dense or convolutional topology, small enough for finite differences.
pub fn random_topology(rng: &mut ChaCha8Rng) -> Topology {
    if rng.random_bool(0.5) {
        let n0 = rng.random_range(1..6);
        let depth = rng.random_range(1..4);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..7)).collect();
        Topology::mlp(n0, &hidden).unwrap()
    } else {
        let groups = [1, 2][rng.random_range(0..2)];
        let cin = groups * rng.random_range(1..3);
        let mid = groups * rng.random_range(1..3);
        let cout = rng.random_range(1..3);
        let k = [1, 3][rng.random_range(0..2)];
        let h = rng.random_range(1..4);
        let w = rng.random_range(1..4);
        let layers = vec![
            LayerSpec::conv2d(cin, mid, 1, 1, true),
            LayerSpec::conv2d(mid, mid, k, groups, true),
            LayerSpec::conv2d(mid, cout, 1, 1, false),
        ];
        let readout = if rng.random_bool(0.5) {
            Readout::Pooled
        } else {
            Readout::Single {
                index: rng.random_range(0..cout * h * w),
            }
        };
        Topology::new(cin, layers, vec![true, true, false], Some((h, w)), readout).unwrap()
    }
}

pub fn random_inputs(t: &Topology, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let len = t.input_len().unwrap();
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn finite_difference_gradient(t: &Topology, p: &ParamSet, x: &[f64], step: f64) -> Vec<f64> {
    let flat = p.flatten();
    (0..flat.len())
        .map(|i| {
            let mut plus = flat.clone();
            plus[i] += step;
            let mut minus = flat.clone();
            minus[i] -= step;
            let fp = ntk::forward(t, &ParamSet::from_flat(t, &plus).unwrap(), x).unwrap();
            let fm = ntk::forward(t, &ParamSet::from_flat(t, &minus).unwrap(), x).unwrap();
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

pub fn gram_oracle(grads: &[Vec<f64>]) -> DMatrix<f64> {
    let p = grads[0].len();
    let g = DMatrix::from_fn(p, grads.len(), |r, c| grads[c][r]);
    g.transpose() * g
}
