//! Kernel representation `τ(x) = K τ(α)`.
//!
//! `K` is a sparse row-stochastic matrix over voxels: each row holds the voxel
//! itself plus its nearest neighbours in composite-frame feature space, found
//! inside a spatial search window and weighted with a radial Gaussian.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::FrameProtocol;
use crate::tensor::DynTensor;

/// Per-voxel feature vectors, voxel-major (`data[v·C + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    dims: [usize; 3],
    channels: usize,
    data: Vec<f64>,
}

impl FeatureField {
    pub fn new(dims: [usize; 3], channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || data.len() != dims.iter().product::<usize>() * channels {
            return Err(Error::shape(format!(
                "feature field {:?} x {} channels cannot hold {} values",
                dims,
                channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("feature field has non-finite entries"));
        }
        Ok(Self { dims, channels, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxels(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn feature(&self, v: usize) -> &[f64] {
        &self.data[v * self.channels..(v + 1) * self.channels]
    }

    /// Appends standardized voxel coordinates as three extra channels.
    pub fn with_coordinates(self) -> Self {
        let [m_len, n_len, q_len] = self.dims;
        let c = self.channels;
        let mut cols: Vec<Vec<f64>> = (0..c)
            .map(|k| (0..self.voxels()).map(|v| self.data[v * c + k]).collect())
            .collect();
        let mut coords = [Vec::new(), Vec::new(), Vec::new()];
        for m in 0..m_len {
            for n in 0..n_len {
                for q in 0..q_len {
                    coords[0].push(m as f64);
                    coords[1].push(n as f64);
                    coords[2].push(q as f64);
                }
            }
        }
        for mut col in coords {
            standardize(&mut col);
            cols.push(col);
        }
        interleave(self.dims, cols)
    }
}

fn standardize(col: &mut [f64]) {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd <= 1e-12 * mean.abs().max(1.0) {
        col.iter_mut().for_each(|v| *v = 0.0);
    } else {
        col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
}

fn interleave(dims: [usize; 3], cols: Vec<Vec<f64>>) -> FeatureField {
    let channels = cols.len();
    let voxels = cols[0].len();
    let mut data = Vec::with_capacity(voxels * channels);
    for v in 0..voxels {
        data.extend(cols.iter().map(|c| c[v]));
    }
    FeatureField { dims, channels, data }
}

/// Duration-weighted composite images over `n_comp` equal time windows,
/// each channel standardized across voxels. Frames are assigned to the
/// window containing their start time; the last window absorbs the rest.
pub fn composite_frames(y: &DynTensor, protocol: &FrameProtocol, n_comp: usize) -> Result<FeatureField> {
    if n_comp == 0 {
        return Err(Error::domain("need at least one composite frame"));
    }
    if protocol.frames() != y.frames() {
        return Err(Error::shape(format!(
            "protocol has {} frames, image has {}",
            protocol.frames(),
            y.frames()
        )));
    }
    let window = protocol.total_s() / n_comp as f64;
    let assign: Vec<usize> = protocol
        .intervals_s()
        .iter()
        .map(|(s, _)| (((s / window) + 1e-9).floor() as usize).min(n_comp - 1))
        .collect();
    let durations = protocol.durations_s();
    let t_len = y.frames();
    let mut cols = vec![vec![0.0; y.voxels()]; n_comp];
    let mut weight = vec![0.0; n_comp];
    for (t, &c) in assign.iter().enumerate() {
        weight[c] += durations[t];
    }
    for (v, row) in y.data().chunks(t_len).enumerate() {
        for (t, &c) in assign.iter().enumerate() {
            cols[c][v] += durations[t] * row[t];
        }
    }
    for (col, w) in cols.iter_mut().zip(&weight) {
        if *w > 0.0 {
            col.iter_mut().for_each(|x| *x /= w);
        }
        standardize(col);
    }
    Ok(interleave(y.spatial_dims(), cols))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchWindow {
    /// Box of the given full widths (M, N, Q) centred on the voxel;
    /// half-width is `width / 2` on each side.
    Cube([usize; 3]),
    /// Whole volume.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelParams {
    pub k_nn: usize,
    pub sigma: f64,
    pub window: SearchWindow,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_true() -> bool {
    true
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            k_nn: 50,
            sigma: 1.0,
            window: SearchWindow::Cube([7, 7, 3]),
            normalize: true,
        }
    }
}

/// Compressed sparse rows over voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseKernel {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    weights: Vec<f64>,
}

impl SparseKernel {
    pub fn from_csr(n: usize, indptr: Vec<usize>, indices: Vec<u32>, weights: Vec<f64>) -> Result<Self> {
        let ok = indptr.len() == n + 1
            && indptr[0] == 0
            && indptr.windows(2).all(|w| w[0] <= w[1])
            && indptr[n] == indices.len()
            && indices.len() == weights.len()
            && indices.iter().all(|&i| (i as usize) < n);
        if !ok {
            return Err(Error::shape("malformed CSR arrays"));
        }
        Ok(Self { n, indptr, indices, weights })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            indptr: (0..=n).collect(),
            indices: (0..n as u32).collect(),
            weights: vec![1.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[a..b], &self.weights[a..b])
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).1.iter().sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (r, row) in d.iter_mut().enumerate() {
            let (idx, w) = self.row(r);
            for (&c, &x) in idx.iter().zip(w) {
                row[c as usize] += x;
            }
        }
        d
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.n + 1];
        for &c in &self.indices {
            counts[c as usize + 1] += 1;
        }
        for i in 0..self.n {
            counts[i + 1] += counts[i];
        }
        let indptr = counts.clone();
        let mut next = counts;
        let mut indices = vec![0u32; self.nnz()];
        let mut weights = vec![0.0; self.nnz()];
        for r in 0..self.n {
            let (idx, w) = self.row(r);
            for (&c, &x) in idx.iter().zip(w) {
                let slot = next[c as usize];
                indices[slot] = r as u32;
                weights[slot] = x;
                next[c as usize] += 1;
            }
        }
        Self { n: self.n, indptr, indices, weights }
    }

    /// `out = K·x` for one voxel vector.
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let (idx, w) = self.row(r);
            *o = idx.iter().zip(w).map(|(&c, &k)| k * x[c as usize]).sum();
        }
    }
}

/// Builds `K` from a feature field. Rows always contain the voxel itself;
/// the remaining `k_nn − 1` slots go to the nearest other voxels in the
/// window, ties broken by lower voxel index.
pub fn build_kernel(f: &FeatureField, params: &KernelParams) -> Result<SparseKernel> {
    if params.k_nn == 0 {
        return Err(Error::domain("k_nn must be >= 1"));
    }
    if !(params.sigma > 0.0 && params.sigma.is_finite()) {
        return Err(Error::domain(format!("kernel sigma {} must be > 0", params.sigma)));
    }
    let [m_len, n_len, q_len] = f.dims;
    let half = match params.window {
        SearchWindow::Cube(w) => [w[0] / 2, w[1] / 2, w[2] / 2],
        SearchWindow::Full => [m_len, n_len, q_len],
    };
    let population = (0..3)
        .map(|i| (2 * half[i] + 1).min(f.dims[i]))
        .product::<usize>();
    if params.k_nn > population {
        log::warn!(
            "k_nn = {} exceeds the search window population {}; rows are clamped",
            params.k_nn,
            population
        );
    }
    let inv_two_sigma2 = 1.0 / (2.0 * params.sigma * params.sigma);
    let rows: Vec<(Vec<u32>, Vec<f64>)> = (0..f.voxels())
        .into_par_iter()
        .with_min_len(64)
        .map(|j| {
            let (m, n, q) = (j / (n_len * q_len), (j / q_len) % n_len, j % q_len);
            let fj = f.feature(j);
            let mut cand: Vec<(f64, u32)> = Vec::new();
            for mm in m.saturating_sub(half[0])..(m + half[0] + 1).min(m_len) {
                for nn in n.saturating_sub(half[1])..(n + half[1] + 1).min(n_len) {
                    for qq in q.saturating_sub(half[2])..(q + half[2] + 1).min(q_len) {
                        let l = (mm * n_len + nn) * q_len + qq;
                        if l == j {
                            continue;
                        }
                        let d2: f64 = fj.iter().zip(f.feature(l)).map(|(a, b)| (a - b) * (a - b)).sum();
                        cand.push((d2, l as u32));
                    }
                }
            }
            let keep = (params.k_nn - 1).min(cand.len());
            let by_dist = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if keep < cand.len() && keep > 0 {
                cand.select_nth_unstable_by(keep - 1, by_dist);
            }
            cand.truncate(keep);
            cand.push((0.0, j as u32));
            cand.sort_unstable_by_key(|c| c.1);
            let mut w: Vec<f64> = cand.iter().map(|(d2, _)| (-d2 * inv_two_sigma2).exp()).collect();
            if params.normalize {
                let s: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x /= s);
            }
            (cand.into_iter().map(|c| c.1).collect(), w)
        })
        .collect();
    let mut indptr = Vec::with_capacity(rows.len() + 1);
    indptr.push(0);
    let mut indices = Vec::new();
    let mut weights = Vec::new();
    for (idx, w) in rows {
        indices.extend(idx);
        weights.extend(w);
        indptr.push(indices.len());
    }
    Ok(SparseKernel {
        n: f.voxels(),
        indptr,
        indices,
        weights,
    })
}

/// Frame-wise `τ⁻¹(K τ(a))`.
pub fn apply_kernel(k: &SparseKernel, a: &DynTensor) -> Result<DynTensor> {
    if a.voxels() != k.n {
        return Err(Error::shape(format!(
            "kernel over {} voxels applied to image with {}",
            k.n,
            a.voxels()
        )));
    }
    let t_len = a.frames();
    let src = a.data();
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(t_len).with_min_len(64).enumerate().for_each(|(r, dst)| {
        let (idx, w) = k.row(r);
        for (&c, &x) in idx.iter().zip(w) {
            let s = &src[c as usize * t_len..(c as usize + 1) * t_len];
            for (d, v) in dst.iter_mut().zip(s) {
                *d += x * v;
            }
        }
    });
    DynTensor::from_vec(a.dims(), out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSolve {
    pub alpha: DynTensor,
    /// Largest per-frame `‖Kα − y‖ / ‖y‖` at exit.
    pub relative_residual: f64,
    pub iterations: Vec<usize>,
    /// Per frame: `‖r_k‖ / ‖y‖` for k = 0, 1, …
    pub residual_history: Vec<Vec<f64>>,
}

/// Least-squares coefficients `α ≈ τ⁻¹(K⁺ τ(y))` by CGLS, one frame column at a
/// time. A column stops when its relative residual or relative normal-equation
/// residual falls to `tol`, or after `max_iter` iterations.
pub fn solve_coefficients(k: &SparseKernel, y: &DynTensor, max_iter: usize, tol: f64) -> Result<CoefficientSolve> {
    if max_iter == 0 || !(tol > 0.0) {
        return Err(Error::domain("CGLS needs max_iter >= 1 and tol > 0"));
    }
    if y.voxels() != k.n {
        return Err(Error::shape(format!(
            "kernel over {} voxels, image has {}",
            k.n,
            y.voxels()
        )));
    }
    let kt = k.transpose();
    let t_len = y.frames();
    let cols: Vec<(Vec<f64>, usize, Vec<f64>)> = (0..t_len)
        .into_par_iter()
        .map(|t| cgls(k, &kt, &y.frame(t), max_iter, tol))
        .collect::<Result<_>>()?;
    let mut alpha = DynTensor::zeros(y.dims())?;
    let mut iterations = Vec::with_capacity(t_len);
    let mut history = Vec::with_capacity(t_len);
    let mut worst: f64 = 0.0;
    for (t, (x, iters, hist)) in cols.into_iter().enumerate() {
        alpha.set_frame(t, &x)?;
        iterations.push(iters);
        worst = worst.max(*hist.last().expect("history starts with r0"));
        history.push(hist);
    }
    Ok(CoefficientSolve {
        alpha,
        relative_residual: worst,
        iterations,
        residual_history: history,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cgls(k: &SparseKernel, kt: &SparseKernel, b: &[f64], max_iter: usize, tol: f64) -> Result<(Vec<f64>, usize, Vec<f64>)> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok((x, 0, vec![0.0]));
    }
    let mut r = b.to_vec();
    let mut s = vec![0.0; n];
    kt.matvec(&r, &mut s);
    let s0 = norm(&s);
    let mut p = s.clone();
    let mut gamma = s0 * s0;
    let mut q = vec![0.0; n];
    let mut history = vec![1.0];
    let mut iters = 0;
    while iters < max_iter && gamma > 0.0 {
        k.matvec(&p, &mut q);
        let qq: f64 = q.iter().map(|v| v * v).sum();
        if qq == 0.0 {
            break;
        }
        let step = gamma / qq;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * q[i];
        }
        kt.matvec(&r, &mut s);
        let gamma_next: f64 = s.iter().map(|v| v * v).sum();
        iters += 1;
        let rel = norm(&r) / b_norm;
        if !rel.is_finite() || !gamma_next.is_finite() {
            return Err(Error::Divergence {
                step: "cgls",
                detail: format!("non-finite residual after {} iterations", iters),
            });
        }
        history.push(rel);
        if rel <= tol || gamma_next.sqrt() <= tol * s0 {
            break;
        }
        let beta = gamma_next / gamma;
        for i in 0..n {
            p[i] = s[i] + beta * p[i];
        }
        gamma = gamma_next;
    }
    Ok((x, iters, history))
}
