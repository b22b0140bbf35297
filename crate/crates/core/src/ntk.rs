//! Networks under NTK parameterization: parameter sampling, forward pass,
//! reverse-mode gradients and empirical NTK matrices for single models and
//! collegial ensembles.
//!
//! Layer `l` computes `z_l = sqrt(c_l / fan_in_l) · W_l ⋆ h_{l-1}` with
//! `c_l = 2` ahead of a ReLU and `c_l = 1` at the last layer; weights are
//! i.i.d. standard normal and there are no biases. The final layer's output
//! tensor is reduced to a scalar by the topology's [`Readout`].
//!
//! Activations are kept as column-major `rows × channels` matrices. For a
//! dense stack the rows are samples; for a convolution stack the rows are
//! spatial positions of a single sample, so the column-major buffer is the
//! channel-major flattening of the feature map.

use std::borrow::Cow;

use nalgebra::{DMatrix, DMatrixView};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NtkError, TopologyError};
use crate::stats::{derive_seed, stream_rng};
use crate::topology::{LayerSpec, Readout, Topology};

/// Generator coordinates a [`ParamSet`] was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedOrigin {
    pub seed: u64,
    pub stream: u64,
}

/// Per-layer weight tensors, row-major: dense `[out][in]`, convolution
/// `[out][in / groups][k][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    weights: Vec<Vec<f64>>,
    origin: Option<SeedOrigin>,
}

impl ParamSet {
    /// Draws every weight i.i.d. from N(0, 1) on stream 0 of `seed`.
    pub fn init(topology: &Topology, seed: u64) -> Self {
        Self::init_stream(topology, seed, 0)
    }

    pub fn init_stream(topology: &Topology, seed: u64, stream: u64) -> Self {
        let mut rng = stream_rng(seed, stream);
        let weights = topology
            .layers()
            .iter()
            .map(|l| StandardNormal.sample_iter(&mut rng).take(l.param_count()).collect())
            .collect();
        Self {
            weights,
            origin: Some(SeedOrigin { seed, stream }),
        }
    }

    pub fn from_weights(topology: &Topology, weights: Vec<Vec<f64>>) -> Result<Self, NtkError> {
        if weights.len() != topology.layers().len() {
            return Err(NtkError::LayerCount {
                expected: topology.layers().len(),
                got: weights.len(),
            });
        }
        for (layer, (w, spec)) in weights.iter().zip(topology.layers()).enumerate() {
            if w.len() != spec.param_count() {
                return Err(NtkError::ParamShape {
                    layer,
                    expected: spec.param_count(),
                    got: w.len(),
                });
            }
        }
        Ok(Self { weights, origin: None })
    }

    /// Unflattens a canonical gradient-order vector.
    pub fn from_flat(topology: &Topology, flat: &[f64]) -> Result<Self, NtkError> {
        let total = topology.param_count() as usize;
        if flat.len() != total {
            return Err(NtkError::ParamShape {
                layer: 0,
                expected: total,
                got: flat.len(),
            });
        }
        let mut offset = 0;
        let weights = topology
            .layers()
            .iter()
            .map(|l| {
                let w = flat[offset..offset + l.param_count()].to_vec();
                offset += l.param_count();
                w
            })
            .collect();
        Ok(Self { weights, origin: None })
    }

    pub fn origin(&self) -> Option<SeedOrigin> {
        self.origin
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn layers_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum()
    }

    /// Weights in canonical order: layer by layer, row-major within a layer.
    pub fn flatten(&self) -> Vec<f64> {
        self.weights.concat()
    }

    /// FNV-1a over the weight bit patterns.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.weights.iter().flatten().copied())
    }

    fn check(&self, topology: &Topology) -> Result<(), NtkError> {
        if self.weights.len() != topology.layers().len() {
            return Err(NtkError::LayerCount {
                expected: topology.layers().len(),
                got: self.weights.len(),
            });
        }
        for (layer, (w, spec)) in self.weights.iter().zip(topology.layers()).enumerate() {
            if w.len() != spec.param_count() {
                return Err(NtkError::ParamShape {
                    layer,
                    expected: spec.param_count(),
                    got: w.len(),
                });
            }
        }
        Ok(())
    }
}

/// `m ≥ 1` independently drawn members sharing one topology.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleParams {
    members: Vec<ParamSet>,
}

impl EnsembleParams {
    /// Member `j` is drawn from stream `j` of `seed`.
    pub fn init(topology: &Topology, m: usize, seed: u64) -> Result<Self, NtkError> {
        Self::new(
            (0..m as u64)
                .map(|j| ParamSet::init_stream(topology, seed, j))
                .collect(),
        )
    }

    pub fn new(members: Vec<ParamSet>) -> Result<Self, NtkError> {
        if members.is_empty() {
            return Err(NtkError::EmptyEnsemble);
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[ParamSet] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [ParamSet] {
        &mut self.members
    }

    pub fn multiplicity(&self) -> usize {
        self.members.len()
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.members.iter().map(|p| f64::from_bits(p.fingerprint())))
    }
}

/// Gram matrix of output gradients over a dataset, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtkMatrix {
    size: usize,
    entries: Vec<f64>,
    dataset_fingerprint: u64,
}

impl NtkMatrix {
    pub fn from_entries(size: usize, entries: Vec<f64>, dataset_fingerprint: u64) -> Self {
        assert_eq!(entries.len(), size * size, "NTK entries must be size × size");
        Self {
            size,
            entries,
            dataset_fingerprint,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn dataset_fingerprint(&self) -> u64 {
        self.dataset_fingerprint
    }

    pub fn trace(&self) -> f64 {
        (0..self.size).map(|i| self.get(i, i)).sum()
    }

    /// `max |K_ij − K_ji| / max |K_ij|` (0 for the zero matrix).
    pub fn relative_asymmetry(&self) -> f64 {
        let scale = self.entries.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0_f64;
        for i in 0..self.size {
            for j in i + 1..self.size {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst / scale
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let m = DMatrix::from_row_slice(self.size, self.size, &self.entries);
        let sym = (&m + m.transpose()) * 0.5;
        sym.symmetric_eigenvalues().min()
    }

    /// Symmetric within `1e-10` relative and smallest eigenvalue at least
    /// `−1e-8 · trace`.
    pub fn is_symmetric_psd(&self) -> bool {
        self.relative_asymmetry() <= 1e-10 && self.min_eigenvalue() >= -1e-8 * self.trace().abs()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.size, self.size, &self.entries)
    }
}

/// FNV-1a over the bit patterns of a float sequence.
pub fn fnv1a(values: impl IntoIterator<Item = f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

pub fn dataset_fingerprint(inputs: &[Vec<f64>]) -> u64 {
    fnv1a(inputs.iter().flatten().copied())
}

// ---------------------------------------------------------------------------
// Layer kernels
// ---------------------------------------------------------------------------

/// Spatial extent a layer operates on: `(1, 1)` for dense stacks.
fn spatial(topology: &Topology) -> Result<(usize, usize), TopologyError> {
    if topology.is_conv() {
        topology.spatial_size().ok_or(TopologyError::MissingSpatial)
    } else {
        Ok((1, 1))
    }
}

/// im2col for group `g`: rows are output positions, columns are
/// `(ci, ky, kx)` taps of the group's input channels.
fn group_patches<'a>(spec: &LayerSpec, hw: (usize, usize), input: &'a DMatrix<f64>, g: usize) -> Cow<'a, DMatrix<f64>> {
    let cin_g = spec.in_width / spec.groups;
    if spec.kernel == 1 {
        if spec.groups == 1 {
            return Cow::Borrowed(input);
        }
        return Cow::Owned(input.columns(g * cin_g, cin_g).into_owned());
    }
    let (h, w) = hw;
    let k = spec.kernel;
    let pad = (k / 2) as isize;
    let rows = input.nrows();
    let mut out = DMatrix::zeros(rows, cin_g * k * k);
    for ci in 0..cin_g {
        let src = input.column(g * cin_g + ci);
        for ky in 0..k {
            for kx in 0..k {
                let col = (ci * k + ky) * k + kx;
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let mut dst = out.column_mut(col);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + x] = src[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Cow::Owned(out)
}

/// Adjoint of [`group_patches`]: scatter-adds patch cotangents into the
/// group's input-channel columns of `grad_in`.
fn scatter_patches(spec: &LayerSpec, hw: (usize, usize), patches: &DMatrix<f64>, grad_in: &mut DMatrix<f64>, g: usize) {
    let cin_g = spec.in_width / spec.groups;
    let k = spec.kernel;
    if k == 1 {
        grad_in.columns_mut(g * cin_g, cin_g).copy_from(patches);
        return;
    }
    let (h, w) = hw;
    let pad = (k / 2) as isize;
    for ci in 0..cin_g {
        let mut dst = grad_in.column_mut(g * cin_g + ci);
        for ky in 0..k {
            for kx in 0..k {
                let src = patches.column((ci * k + ky) * k + kx);
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[sy as usize * w + sx as usize] += src[y * w + x];
                    }
                }
            }
        }
    }
}

fn layer_forward(spec: &LayerSpec, hw: (usize, usize), weights: &[f64], input: &DMatrix<f64>) -> DMatrix<f64> {
    let cout_g = spec.out_width / spec.groups;
    let taps = spec.fan_in();
    let mut out = DMatrix::zeros(input.nrows(), spec.out_width);
    for g in 0..spec.groups {
        let patches = group_patches(spec, hw, input, g);
        // row-major [out][taps] is column-major taps × out
        let wt = DMatrixView::from_slice(&weights[g * cout_g * taps..(g + 1) * cout_g * taps], taps, cout_g);
        let z = patches.as_ref() * wt;
        out.columns_mut(g * cout_g, cout_g).copy_from(&z);
    }
    out *= spec.weight_scale();
    out
}

/// Returns the weight gradient (row-major, summed over rows of `input`)
/// and, when requested, the cotangent w.r.t. the layer input.
fn layer_backward(
    spec: &LayerSpec,
    hw: (usize, usize),
    weights: &[f64],
    input: &DMatrix<f64>,
    grad_out: &DMatrix<f64>,
    want_input_grad: bool,
) -> (Vec<f64>, Option<DMatrix<f64>>) {
    let cout_g = spec.out_width / spec.groups;
    let taps = spec.fan_in();
    let scale = spec.weight_scale();
    let mut grad_w = vec![0.0; spec.param_count()];
    let mut grad_in = want_input_grad.then(|| DMatrix::zeros(input.nrows(), spec.in_width));
    for g in 0..spec.groups {
        let patches = group_patches(spec, hw, input, g);
        let go = grad_out.columns(g * cout_g, cout_g);
        let dwt = patches.transpose() * go;
        for (dst, src) in grad_w[g * cout_g * taps..(g + 1) * cout_g * taps]
            .iter_mut()
            .zip(dwt.as_slice())
        {
            *dst = scale * src;
        }
        if let Some(gi) = grad_in.as_mut() {
            let wt = DMatrixView::from_slice(&weights[g * cout_g * taps..(g + 1) * cout_g * taps], taps, cout_g);
            let dp = (go * wt.transpose()) * scale;
            scatter_patches(spec, hw, &dp, gi, g);
        }
    }
    (grad_w, grad_in)
}

// ---------------------------------------------------------------------------
// Forward / backward over the whole stack
// ---------------------------------------------------------------------------

/// Activations recorded by a forward pass.
struct Activations {
    /// Input to each layer (`h_{l-1}`).
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activation output of each layer (`z_l`).
    pre: Vec<DMatrix<f64>>,
}

impl Activations {
    fn output(&self) -> &DMatrix<f64> {
        self.pre.last().expect("non-empty topology")
    }
}

fn relu(z: &DMatrix<f64>) -> DMatrix<f64> {
    z.map(|v| if v > 0.0 { v } else { 0.0 })
}

fn run_forward(topology: &Topology, params: &ParamSet, x: DMatrix<f64>) -> Result<Activations, TopologyError> {
    let hw = spatial(topology)?;
    let n = topology.layers().len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut h = x;
    for (spec, w) in topology.layers().iter().zip(params.layers()) {
        let z = layer_forward(spec, hw, w, &h);
        let next = if spec.has_activation { relu(&z) } else { z.clone() };
        inputs.push(h);
        pre.push(z);
        h = next;
    }
    Ok(Activations { inputs, pre })
}

/// Back-propagates `seed = ∂(objective)/∂z_L`; returns per-layer weight
/// gradients and, if `keep_cotangents`, every `∂/∂z_l`.
fn run_backward(
    topology: &Topology,
    params: &ParamSet,
    acts: &Activations,
    seed: DMatrix<f64>,
    keep_cotangents: bool,
) -> Result<(Vec<Vec<f64>>, Vec<DMatrix<f64>>), TopologyError> {
    let hw = spatial(topology)?;
    let layers = topology.layers();
    let mut grads = vec![Vec::new(); layers.len()];
    let mut cotangents = Vec::new();
    let mut g = seed;
    for l in (0..layers.len()).rev() {
        if keep_cotangents {
            cotangents.push(g.clone());
        }
        let (gw, gin) = layer_backward(&layers[l], hw, &params.layers()[l], &acts.inputs[l], &g, l > 0);
        grads[l] = gw;
        if let Some(gin) = gin {
            // ReLU subgradient at exactly zero is zero
            let z_prev = &acts.pre[l - 1];
            g = gin.zip_map(z_prev, |gv, zv| if zv > 0.0 { gv } else { 0.0 });
        }
    }
    cotangents.reverse();
    Ok((grads, cotangents))
}

/// Readout weights `∂F/∂z_L` for one sample, shaped `positions × out_width`.
fn readout_seed(topology: &Topology, rows: usize, cols: usize) -> DMatrix<f64> {
    match topology.readout() {
        Readout::Pooled => DMatrix::from_element(rows, cols, 1.0 / ((rows * cols) as f64).sqrt()),
        Readout::Single { index } => {
            let mut m = DMatrix::zeros(rows, cols);
            m.as_mut_slice()[index] = 1.0;
            m
        }
    }
}

fn readout_value(topology: &Topology, z: &DMatrix<f64>) -> f64 {
    match topology.readout() {
        Readout::Pooled => z.iter().sum::<f64>() / (z.len() as f64).sqrt(),
        Readout::Single { index } => z.as_slice()[index],
    }
}

fn check_input(topology: &Topology, x: &[f64]) -> Result<(), NtkError> {
    let expected = topology.input_len().ok_or(TopologyError::MissingSpatial)?;
    if x.len() != expected {
        return Err(NtkError::InputLength { expected, got: x.len() });
    }
    Ok(())
}

/// Per-sample input matrix: `1 × n0` for dense, `positions × channels` for conv.
fn sample_matrix(topology: &Topology, x: &[f64]) -> DMatrix<f64> {
    let rows = topology.positions().unwrap_or(1);
    DMatrix::from_column_slice(rows, topology.input_width(), x)
}

/// Dense stacks only: `N × n0` matrix with one sample per row.
fn batch_matrix(topology: &Topology, xs: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(xs.len(), topology.input_width(), |i, j| xs[i][j])
}

/// Network output `F(x)`.
pub fn forward(topology: &Topology, params: &ParamSet, x: &[f64]) -> Result<f64, NtkError> {
    params.check(topology)?;
    check_input(topology, x)?;
    let acts = run_forward(topology, params, sample_matrix(topology, x))?;
    Ok(readout_value(topology, acts.output()))
}

/// Exact `∇_θ F(x)` in canonical order (see [`ParamSet::flatten`]).
pub fn gradient(topology: &Topology, params: &ParamSet, x: &[f64]) -> Result<Vec<f64>, NtkError> {
    Ok(layer_gradients(topology, params, x)?.concat())
}

/// `∇_θ F(x)` split per layer.
pub fn layer_gradients(topology: &Topology, params: &ParamSet, x: &[f64]) -> Result<Vec<Vec<f64>>, NtkError> {
    params.check(topology)?;
    check_input(topology, x)?;
    let acts = run_forward(topology, params, sample_matrix(topology, x))?;
    let out = acts.output();
    let seed = readout_seed(topology, out.nrows(), out.ncols());
    let (grads, _) = run_backward(topology, params, &acts, seed, false)?;
    Ok(grads)
}

/// `F(x_i)` for every input; dense stacks run as one batch.
pub fn forward_batch(topology: &Topology, params: &ParamSet, xs: &[Vec<f64>]) -> Result<Vec<f64>, NtkError> {
    params.check(topology)?;
    for x in xs {
        check_input(topology, x)?;
    }
    if topology.is_conv() {
        return xs
            .iter()
            .map(|x| {
                let acts = run_forward(topology, params, sample_matrix(topology, x))?;
                Ok(readout_value(topology, acts.output()))
            })
            .collect();
    }
    let acts = run_forward(topology, params, batch_matrix(topology, xs))?;
    let out = acts.output();
    Ok((0..out.nrows())
        .map(|i| readout_value(topology, &out.rows(i, 1).into_owned()))
        .collect())
}

/// Outputs on every input plus `Σ_i c_i ∇_θ F(x_i)` per layer, where the
/// weights `c` are produced from the outputs by `cotangent`.
pub fn outputs_and_weighted_gradient(
    topology: &Topology,
    params: &ParamSet,
    xs: &[Vec<f64>],
    cotangent: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), NtkError> {
    params.check(topology)?;
    for x in xs {
        check_input(topology, x)?;
    }
    if topology.is_conv() {
        let mut outputs = Vec::with_capacity(xs.len());
        let mut acts_all = Vec::with_capacity(xs.len());
        for x in xs {
            let acts = run_forward(topology, params, sample_matrix(topology, x))?;
            outputs.push(readout_value(topology, acts.output()));
            acts_all.push(acts);
        }
        let c = cotangent(&outputs);
        let mut total: Vec<Vec<f64>> = topology.layers().iter().map(|l| vec![0.0; l.param_count()]).collect();
        for (acts, &ci) in acts_all.iter().zip(&c) {
            if ci == 0.0 {
                continue;
            }
            let out = acts.output();
            let seed = readout_seed(topology, out.nrows(), out.ncols()) * ci;
            let (grads, _) = run_backward(topology, params, acts, seed, false)?;
            for (t, g) in total.iter_mut().zip(grads) {
                for (a, b) in t.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        return Ok((outputs, total));
    }
    let acts = run_forward(topology, params, batch_matrix(topology, xs))?;
    let out = acts.output();
    let outputs: Vec<f64> = (0..out.nrows())
        .map(|i| readout_value(topology, &out.rows(i, 1).into_owned()))
        .collect();
    let c = cotangent(&outputs);
    let row_seed = readout_seed(topology, 1, out.ncols());
    let seed = DMatrix::from_fn(out.nrows(), out.ncols(), |i, j| c[i] * row_seed[(0, j)]);
    let (grads, _) = run_backward(topology, params, &acts, seed, false)?;
    Ok((outputs, grads))
}

/// `K = ∇_θF ∇_θFᵀ` over `xs`.
pub fn ntk_matrix(topology: &Topology, params: &ParamSet, xs: &[Vec<f64>]) -> Result<NtkMatrix, NtkError> {
    if xs.is_empty() {
        return Err(NtkError::EmptyInputs);
    }
    params.check(topology)?;
    for x in xs {
        check_input(topology, x)?;
    }
    let n = xs.len();
    let entries = if topology.is_conv() {
        let grads: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| gradient(topology, params, x))
            .collect::<Result<_, _>>()?;
        let mut e = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v: f64 = grads[i].iter().zip(&grads[j]).map(|(a, b)| a * b).sum();
                e[i * n + j] = v;
                e[j * n + i] = v;
            }
        }
        e
    } else {
        dense_ntk_entries(topology, params, xs)?
    };
    Ok(NtkMatrix::from_entries(n, entries, dataset_fingerprint(xs)))
}

/// Dense stacks: `∂F/∂W_l = s_l g_l ⊗ h_{l-1}`, so
/// `K = Σ_l s_l² (G_l G_lᵀ) ∘ (H_{l-1} H_{l-1}ᵀ)` without materializing
/// gradients.
fn dense_ntk_entries(topology: &Topology, params: &ParamSet, xs: &[Vec<f64>]) -> Result<Vec<f64>, NtkError> {
    let n = xs.len();
    let acts = run_forward(topology, params, batch_matrix(topology, xs))?;
    let out = acts.output();
    let row_seed = readout_seed(topology, 1, out.ncols());
    let seed = DMatrix::from_fn(n, out.ncols(), |_, j| row_seed[(0, j)]);
    let (_, cotangents) = run_backward(topology, params, &acts, seed, true)?;
    // cotangents[l] holds ∂F/∂z_l after scaling; the weight gradient adds s_l.
    let mut k = DMatrix::<f64>::zeros(n, n);
    for (l, spec) in topology.layers().iter().enumerate() {
        let s2 = spec.weight_variance();
        let g = &cotangents[l];
        let h = &acts.inputs[l];
        let gg = g * g.transpose();
        let hh = h * h.transpose();
        k += gg.component_mul(&hh) * s2;
    }
    let mut e = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = 0.5 * (k[(i, j)] + k[(j, i)]);
            e[i * n + j] = v;
            e[j * n + i] = v;
        }
    }
    Ok(e)
}

/// `F^e(x) = m^{-1/2} Σ_j F(θ_j, x)`.
pub fn ensemble_forward(topology: &Topology, ens: &EnsembleParams, x: &[f64]) -> Result<f64, NtkError> {
    let m = ens.multiplicity() as f64;
    let mut total = 0.0;
    for p in ens.members() {
        total += forward(topology, p, x)?;
    }
    Ok(total / m.sqrt())
}

/// `K^e = m^{-1} Σ_j K(θ_j)`.
pub fn ensemble_ntk(topology: &Topology, ens: &EnsembleParams, xs: &[Vec<f64>]) -> Result<NtkMatrix, NtkError> {
    let m = ens.multiplicity() as f64;
    let mut acc: Option<Vec<f64>> = None;
    for p in ens.members() {
        let k = ntk_matrix(topology, p, xs)?;
        match acc.as_mut() {
            None => acc = Some(k.entries),
            Some(a) => a.iter_mut().zip(k.entries).for_each(|(x, y)| *x += y),
        }
    }
    let mut entries = acc.expect("ensemble has at least one member");
    entries.iter_mut().for_each(|v| *v /= m);
    Ok(NtkMatrix::from_entries(xs.len(), entries, dataset_fingerprint(xs)))
}

/// Standard-normal input vector of the topology's input length, drawn from
/// a seed derived from `seed`.
pub fn random_input(topology: &Topology, seed: u64) -> Result<Vec<f64>, NtkError> {
    let len = topology.input_len().ok_or(TopologyError::MissingSpatial)?;
    let mut rng = stream_rng(derive_seed(seed, 0x1A9B_07E5), 0);
    Ok(StandardNormal.sample_iter(&mut rng).take(len).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::LayerSpec;

    fn linear(n0: usize) -> Topology {
        Topology::mlp(n0, &[]).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_standard_normal() {
        let t = Topology::mlp(1000, &[1000]).unwrap();
        let a = ParamSet::init(&t, 42);
        let b = ParamSet::init(&t, 42);
        assert_eq!(a, b);
        assert_ne!(a, ParamSet::init(&t, 43));
        let w = a.flatten();
        assert!(w.len() >= 1_000_000);
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn forward_hand_computed() {
        let t = Topology::mlp(2, &[1]).unwrap();
        let p = ParamSet::from_weights(&t, vec![vec![1.0, 0.0], vec![1.0]]).unwrap();
        assert!((forward(&t, &p, &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        let zero = ParamSet::from_weights(&t, vec![vec![0.0, 0.0], vec![0.0]]).unwrap();
        assert_eq!(forward(&t, &zero, &[1.0, 0.0]).unwrap(), 0.0);
        let q = ParamSet::init(&t, 1);
        assert_eq!(forward(&t, &q, &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn forward_rejects_wrong_length() {
        let t = linear(3);
        let p = ParamSet::init(&t, 0);
        assert_eq!(
            forward(&t, &p, &[1.0]),
            Err(NtkError::InputLength { expected: 3, got: 1 })
        );
    }

    #[test]
    fn conv_requires_spatial_size() {
        let t = Topology::bottleneck(4, 2, 4, None).unwrap();
        let p = ParamSet::init(&t, 0);
        assert_eq!(
            forward(&t, &p, &[0.0; 4]),
            Err(NtkError::Topology(TopologyError::MissingSpatial))
        );
    }

    #[test]
    fn linear_gradient_closed_form() {
        let t = linear(2);
        let p = ParamSet::init(&t, 3);
        let g = gradient(&t, &p, &[1.0, 0.0]).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((g[0] - r).abs() < 1e-15 && g[1].abs() < 1e-15);
        let z = gradient(&t, &p, &[0.0, 0.0]).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_ntk_closed_form() {
        let t = linear(2);
        let p = ParamSet::init(&t, 3);
        let k = ntk_matrix(&t, &p, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((k.get(0, 0) - 0.5).abs() < 1e-15);
        assert!(k.get(0, 1).abs() < 1e-15);
        let one = ntk_matrix(&t, &p, &[vec![3.0, 4.0]]).unwrap();
        assert!((one.get(0, 0) - 12.5).abs() < 1e-12);
    }

    #[test]
    fn ntk_needs_inputs() {
        let t = linear(2);
        let p = ParamSet::init(&t, 3);
        assert_eq!(ntk_matrix(&t, &p, &[]), Err(NtkError::EmptyInputs));
    }

    #[test]
    fn ensemble_identities() {
        let t = Topology::mlp(3, &[5, 4]).unwrap();
        let x = vec![0.3, -1.0, 0.7];
        let one = EnsembleParams::init(&t, 1, 9).unwrap();
        let f = forward(&t, &one.members()[0], &x).unwrap();
        assert_eq!(ensemble_forward(&t, &one, &x).unwrap(), f);
        let four = EnsembleParams::new(vec![one.members()[0].clone(); 4]).unwrap();
        assert!((ensemble_forward(&t, &four, &x).unwrap() - 2.0 * f).abs() < 1e-12);

        let xs = vec![x.clone(), vec![1.0, 0.0, 0.0]];
        let k1 = ntk_matrix(&t, &one.members()[0], &xs).unwrap();
        assert_eq!(ensemble_ntk(&t, &one, &xs).unwrap(), k1);
        let k4 = ensemble_ntk(&t, &four, &xs).unwrap();
        for (a, b) in k4.entries().iter().zip(k1.entries()) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
        assert_eq!(EnsembleParams::new(vec![]), Err(NtkError::EmptyEnsemble));
    }

    #[test]
    fn ensemble_output_is_linear_in_members() {
        let t = Topology::mlp(2, &[4]).unwrap();
        let ens = EnsembleParams::init(&t, 3, 5).unwrap();
        let x = [0.5, -0.25];
        let base = ensemble_forward(&t, &ens, &x).unwrap();
        let mut doubled = ens.clone();
        for m in doubled.members_mut() {
            // last layer is linear in its weights
            let last = m.layers_mut().last_mut().unwrap();
            last.iter_mut().for_each(|w| *w *= 2.0);
        }
        assert!((ensemble_forward(&t, &doubled, &x).unwrap() - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn grouped_conv_matches_per_group_dense_reference() {
        // 1x1 grouped conv on a 1x1 map is a block-diagonal dense layer
        let t = Topology::new(
            4,
            vec![LayerSpec::conv2d(4, 4, 1, 2, false)],
            vec![false],
            Some((1, 1)),
            Readout::Single { index: 3 },
        )
        .unwrap();
        let w: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let p = ParamSet::from_weights(&t, vec![w.clone()]).unwrap();
        let x = [1.0, 2.0, -1.0, 0.5];
        // output channel 3 in group 1 reads inputs 2..4 with weights w[6..8]
        let expected = (w[6] * x[2] + w[7] * x[3]) * (1.0f64 / 2.0).sqrt();
        assert!((forward(&t, &p, &x).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn conv3x3_matches_direct_convolution() {
        let (h, w) = (3, 4);
        let t = Topology::new(
            2,
            vec![LayerSpec::conv2d(2, 1, 3, 1, false)],
            vec![false],
            Some((h, w)),
            Readout::Single { index: 5 },
        )
        .unwrap();
        let p = ParamSet::init(&t, 11);
        let x: Vec<f64> = (0..2 * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        // direct evaluation at output position (1, 1)
        let wt = &p.layers()[0];
        let mut acc = 0.0;
        for c in 0..2 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (y, xx) = (1 + ky - 1, 1 + kx - 1);
                    acc += wt[(c * 3 + ky) * 3 + kx] * x[c * h * w + y * w + xx];
                }
            }
        }
        let expected = acc * (1.0f64 / 18.0).sqrt();
        assert!((forward(&t, &p, &x).unwrap() - expected).abs() < 1e-13);
    }
}
