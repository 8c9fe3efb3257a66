//! Dense 4-D tensors (M×N×Q×T) and the handful of multilinear operations the
//! denoiser is built from.
//!
//! Storage is row-major with the frame index fastest:
//! `data[((m·N + n)·Q + q)·T + t]`. A spatial voxel is linearized as
//! `v = (m·N + n)·Q + q`, so the spatial unfolding τ(x) ∈ R^{MNQ×T} shares
//! its buffer layout with the tensor itself.
//!
//! Vectorization for the Kronecker oracle uses the opposite convention
//! (mode 1 fastest), which is the order in which
//! `vec(β ×₁ D₁ ×₂ D₂ ×₃ D₃ ×₄ D₄) = (D₄ ⊗ D₃ ⊗ D₂ ⊗ D₁) vec(β)` holds.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Upper bound on entries of a dense Kronecker oracle matrix.
pub const KRON_ORACLE_MAX_ENTRIES: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct DynTensor {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl DynTensor {
    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        check_dims(&dims)?;
        Ok(Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        })
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        check_dims(&dims)?;
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "tensor {:?} needs {} values, got {}",
                dims,
                expected,
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        let [m_len, n_len, q_len, t_len] = dims;
        let mut k = 0;
        for m in 0..m_len {
            for n in 0..n_len {
                for q in 0..q_len {
                    for tt in 0..t_len {
                        t.data[k] = f([m, n, q, tt]);
                        k += 1;
                    }
                }
            }
        }
        Ok(t)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.dims[0], self.dims[1], self.dims[2]]
    }

    /// Number of spatial voxels, M·N·Q.
    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn frames(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, n_len, q_len, t_len] = self.dims;
        ((idx[0] * n_len + idx[1]) * q_len + idx[2]) * t_len + idx[3]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 4]) -> f64 {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], value: f64) {
        let k = self.offset(idx);
        self.data[k] = value;
    }

    /// Voxel values of frame `t`, in voxel-linearization order.
    pub fn frame(&self, t: usize) -> Vec<f64> {
        let t_len = self.dims[3];
        self.data.iter().skip(t).step_by(t_len).copied().collect()
    }

    pub fn set_frame(&mut self, t: usize, values: &[f64]) -> Result<()> {
        if values.len() != self.voxels() || t >= self.dims[3] {
            return Err(Error::shape(format!(
                "frame {} with {} voxels does not fit tensor {:?}",
                t,
                values.len(),
                self.dims
            )));
        }
        let t_len = self.dims[3];
        for (v, &x) in values.iter().enumerate() {
            self.data[v * t_len + t] = x;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.require_same_dims(other)?;
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.require_same_dims(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.require_same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn require_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

fn check_dims(dims: &[usize; 4]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("all dims must be >= 1, got {:?}", dims)));
    }
    Ok(())
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{}x{} matrix cannot hold {} values",
                rows,
                cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(format!(
                "vector of length {} against {} columns",
                x.len(),
                self.cols
            )));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Gram matrix AᵀA.
    pub fn gram(&self) -> Self {
        let n = self.cols;
        let mut g = Self::zeros(n, n);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..n {
                for j in 0..n {
                    g.data[i * n + j] += row[i] * row[j];
                }
            }
        }
        g
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// The four per-mode dictionaries D₁ (M×I₁) … D₄ (T×I₄).
#[derive(Debug, Clone, PartialEq)]
pub struct DictionarySet {
    mats: [Matrix2D; 4],
}

impl DictionarySet {
    pub fn new(d1: Matrix2D, d2: Matrix2D, d3: Matrix2D, d4: Matrix2D) -> Result<Self> {
        let mats = [d1, d2, d3, d4];
        for (i, d) in mats.iter().enumerate() {
            if d.cols() > d.rows() {
                return Err(Error::shape(format!(
                    "dictionary D{} is {}x{}; atoms must not exceed the mode size",
                    i + 1,
                    d.rows(),
                    d.cols()
                )));
            }
        }
        Ok(Self { mats })
    }

    pub fn identity(dims: [usize; 4]) -> Self {
        Self {
            mats: dims.map(Matrix2D::identity),
        }
    }

    pub fn get(&self, mode: usize) -> &Matrix2D {
        &self.mats[mode - 1]
    }

    pub fn matrices(&self) -> &[Matrix2D; 4] {
        &self.mats
    }

    /// Signal-side dims (M, N, Q, T).
    pub fn signal_dims(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.mats[i].rows())
    }

    /// Coefficient-side dims (I₁, I₂, I₃, I₄).
    pub fn atom_dims(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.mats[i].cols())
    }

    /// Largest deviation of any column l2 norm from 1.
    pub fn column_norm_error(&self) -> f64 {
        self.mats
            .iter()
            .flat_map(|d| {
                (0..d.cols()).map(move |c| {
                    let n: f64 = d.column(c).iter().map(|v| v * v).sum::<f64>().sqrt();
                    (n - 1.0).abs()
                })
            })
            .fold(0.0, f64::max)
    }

    pub fn transposed(&self) -> [Matrix2D; 4] {
        [0, 1, 2, 3].map(|i| self.mats[i].transpose())
    }
}

/// Spatial unfolding τ: M×N×Q×T → (MNQ)×T.
pub fn unfold_spatial(x: &DynTensor) -> Matrix2D {
    Matrix2D {
        rows: x.voxels(),
        cols: x.frames(),
        data: x.data.clone(),
    }
}

/// Inverse spatial unfolding τ⁻¹.
pub fn fold_spatial(m: &Matrix2D, dims: [usize; 4]) -> Result<DynTensor> {
    if m.rows != dims[0] * dims[1] * dims[2] || m.cols != dims[3] {
        return Err(Error::shape(format!(
            "{}x{} matrix does not fold into {:?}",
            m.rows, m.cols, dims
        )));
    }
    DynTensor::from_vec(dims, m.data.clone())
}

/// Mode-n product `t ×ₙ d` for `mode` in 1..=4.
pub fn mode_product(t: &DynTensor, d: &Matrix2D, mode: usize) -> Result<DynTensor> {
    if !(1..=4).contains(&mode) {
        return Err(Error::shape(format!("mode must be 1..=4, got {}", mode)));
    }
    let k = mode - 1;
    let dims = t.dims;
    if d.cols != dims[k] {
        return Err(Error::shape(format!(
            "mode-{} product: matrix has {} columns but tensor mode size is {}",
            mode, d.cols, dims[k]
        )));
    }
    let len = dims[k];
    let inner: usize = dims[k + 1..].iter().product();
    let rows = d.rows;
    let mut out_dims = dims;
    out_dims[k] = rows;
    let mut out = vec![0.0; out_dims.iter().product()];

    // One output fiber slab per (outer, r); each is written by exactly one task.
    let min_len = (4096 / inner).max(1);
    out.par_chunks_mut(inner)
        .with_min_len(min_len)
        .enumerate()
        .for_each(|(slab, dst)| {
            let o = slab / rows;
            let r = slab % rows;
            let coeffs = d.row(r);
            for (j, &w) in coeffs.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let start = (o * len + j) * inner;
                let src = &t.data[start..start + inner];
                for (a, &b) in dst.iter_mut().zip(src) {
                    *a += w * b;
                }
            }
        });
    Ok(DynTensor {
        dims: out_dims,
        data: out,
    })
}

/// Applies all four mode products in ascending order: `t ×₁ D₁ ×₂ D₂ ×₃ D₃ ×₄ D₄`,
/// or with each `Dᵢᵀ` when `transpose` is set.
pub fn multi_mode_product(t: &DynTensor, dicts: &DictionarySet, transpose: bool) -> Result<DynTensor> {
    let expected = if transpose {
        dicts.signal_dims()
    } else {
        dicts.atom_dims()
    };
    if t.dims != expected {
        return Err(Error::shape(format!(
            "tensor {:?} does not chain with dictionaries (expected {:?})",
            t.dims, expected
        )));
    }
    let mut cur = t.clone();
    if transpose {
        for (i, dt) in dicts.transposed().iter().enumerate() {
            cur = mode_product(&cur, dt, i + 1)?;
        }
    } else {
        for (i, d) in dicts.mats.iter().enumerate() {
            cur = mode_product(&cur, d, i + 1)?;
        }
    }
    Ok(cur)
}

/// Vectorizes with mode 1 fastest.
pub fn vectorize(t: &DynTensor) -> Vec<f64> {
    let [m_len, n_len, q_len, t_len] = t.dims;
    let mut v = Vec::with_capacity(t.len());
    for tt in 0..t_len {
        for q in 0..q_len {
            for n in 0..n_len {
                for m in 0..m_len {
                    v.push(t.get([m, n, q, tt]));
                }
            }
        }
    }
    v
}

/// Inverse of [`vectorize`].
pub fn devectorize(v: &[f64], dims: [usize; 4]) -> Result<DynTensor> {
    let mut t = DynTensor::zeros(dims)?;
    if v.len() != t.len() {
        return Err(Error::shape(format!(
            "vector of length {} does not devectorize into {:?}",
            v.len(),
            dims
        )));
    }
    let [m_len, n_len, q_len, _] = dims;
    for (k, &x) in v.iter().enumerate() {
        let m = k % m_len;
        let n = (k / m_len) % n_len;
        let q = (k / (m_len * n_len)) % q_len;
        let tt = k / (m_len * n_len * q_len);
        t.set([m, n, q, tt], x);
    }
    Ok(t)
}

/// Dense `D₄ ⊗ D₃ ⊗ D₂ ⊗ D₁`, so that
/// `vectorize(multi_mode_product(β, dicts, false)) = oracle · vectorize(β)`.
/// Test-scale only.
pub fn kron_oracle(dicts: &DictionarySet) -> Result<Matrix2D> {
    let sig = dicts.signal_dims();
    let atoms = dicts.atom_dims();
    let rows: usize = sig.iter().product();
    let cols: usize = atoms.iter().product();
    if rows.saturating_mul(cols) > KRON_ORACLE_MAX_ENTRIES {
        return Err(Error::Capacity(format!(
            "kron oracle would need {}x{} entries (limit {})",
            rows, cols, KRON_ORACLE_MAX_ENTRIES
        )));
    }
    let [d1, d2, d3, d4] = &dicts.mats;
    let mut out = Matrix2D::zeros(rows, cols);
    for r in 0..rows {
        let m = r % sig[0];
        let n = (r / sig[0]) % sig[1];
        let q = (r / (sig[0] * sig[1])) % sig[2];
        let t = r / (sig[0] * sig[1] * sig[2]);
        for c in 0..cols {
            let i1 = c % atoms[0];
            let i2 = (c / atoms[0]) % atoms[1];
            let i3 = (c / (atoms[0] * atoms[1])) % atoms[2];
            let i4 = c / (atoms[0] * atoms[1] * atoms[2]);
            out.data[r * cols + c] =
                d1.get(m, i1) * d2.get(n, i2) * d3.get(q, i3) * d4.get(t, i4);
        }
    }
    Ok(out)
}

pub fn frob_norm(t: &DynTensor) -> f64 {
    t.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn l1_norm(t: &DynTensor) -> f64 {
    t.data.iter().map(|v| v.abs()).sum()
}

/// Number of entries with `|v| > eps`.
pub fn l0_count(t: &DynTensor, eps: f64) -> usize {
    t.data.iter().filter(|v| v.abs() > eps).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng) -> DynTensor {
        DynTensor::from_fn(dims, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix2D {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix2D::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn unfold_degenerate_spatial() {
        let x = DynTensor::from_vec([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let m = unfold_spatial(&x);
        assert_eq!((m.rows(), m.cols()), (1, 3));
        assert_eq!(m.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(fold_spatial(&m, [1, 1, 1, 3]).unwrap(), x);
    }

    #[test]
    fn unfold_columns_are_flattened_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor([3, 2, 2, 4], &mut rng);
        let u = unfold_spatial(&x);
        assert_eq!((u.rows(), u.cols()), (12, 4));
        for t in 0..4 {
            // naive triple-loop flattening of frame t
            let mut flat = Vec::new();
            for m in 0..3 {
                for n in 0..2 {
                    for q in 0..2 {
                        flat.push(x.get([m, n, q, t]));
                    }
                }
            }
            assert_eq!(u.column(t), flat);
        }
    }

    #[test]
    fn fold_rejects_mismatch() {
        let m = Matrix2D::zeros(12, 4);
        assert!(matches!(fold_spatial(&m, [3, 2, 2, 5]), Err(Error::Shape(_))));
        assert!(matches!(fold_spatial(&m, [3, 3, 2, 4]), Err(Error::Shape(_))));
    }

    #[test]
    fn unfold_fold_matrix_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_matrix(12, 4, &mut rng);
        let t = fold_spatial(&m, [3, 2, 2, 4]).unwrap();
        assert_eq!(unfold_spatial(&t), m);
    }

    #[test]
    fn fold_unfold_roundtrip_many() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let dims = [0; 4].map(|_| rng.random_range(1..5));
            let x = random_tensor(dims, &mut rng);
            let back = fold_spatial(&unfold_spatial(&x), dims).unwrap();
            assert!(x.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn identity_along_any_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor([3, 2, 4, 5], &mut rng);
        for mode in 1..=4 {
            let id = Matrix2D::identity(x.dims()[mode - 1]);
            assert_eq!(mode_product(&x, &id, mode).unwrap(), x);
        }
    }

    #[test]
    fn mode_product_rejects_bad_inputs() {
        let x = DynTensor::zeros([2, 3, 1, 1]).unwrap();
        assert!(mode_product(&x, &Matrix2D::identity(3), 1).is_err());
        assert!(mode_product(&x, &Matrix2D::identity(2), 0).is_err());
        assert!(mode_product(&x, &Matrix2D::identity(2), 5).is_err());
    }

    #[test]
    fn mode_one_hadamard_matches_matricization() {
        let x = DynTensor::from_vec([2, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = Matrix2D::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let y = mode_product(&x, &d, 1).unwrap();
        // mode-1 matricization of x is [[1,2],[3,4]] (rows = m, cols = n)
        let x1 = Matrix2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let expect = d.matmul(&x1).unwrap();
        assert_eq!(y.data(), expect.data());
        let oracle = kron_oracle(
            &DictionarySet::new(d.clone(), Matrix2D::identity(2), Matrix2D::identity(1), Matrix2D::identity(1))
                .unwrap(),
        )
        .unwrap();
        let via = devectorize(&oracle.matvec(&vectorize(&x)).unwrap(), [2, 2, 1, 1]).unwrap();
        assert_eq!(via, y);
    }

    #[test]
    fn distinct_modes_commute() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = random_tensor([3, 4, 2, 3], &mut rng);
            let a = random_matrix(2, 3, &mut rng);
            let b = random_matrix(5, 4, &mut rng);
            let ab = mode_product(&mode_product(&x, &a, 1).unwrap(), &b, 2).unwrap();
            let ba = mode_product(&mode_product(&x, &b, 2).unwrap(), &a, 1).unwrap();
            let scale = frob_norm(&ab).max(1.0);
            assert!(ab.max_abs_diff(&ba).unwrap() / scale <= 1e-12);
        }
    }

    #[test]
    fn multi_mode_identity_and_orthonormal_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor([3, 3, 2, 2], &mut rng);
        let id = DictionarySet::identity(x.dims());
        assert_eq!(multi_mode_product(&x, &id, false).unwrap(), x);
        assert_eq!(multi_mode_product(&x, &id, true).unwrap(), x);

        // 2-D rotations / reflections are orthonormal
        let rot = |th: f64| {
            Matrix2D::from_rows(&[vec![th.cos(), -th.sin()], vec![th.sin(), th.cos()]]).unwrap()
        };
        let h = 1.0 / 2f64.sqrt();
        let d3 = Matrix2D::from_rows(&[
            vec![h, h, 0.0],
            vec![h, -h, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let dicts = DictionarySet::new(d3.clone(), d3, rot(0.3), rot(-1.1)).unwrap();
        let fwd = multi_mode_product(&x, &dicts, true).unwrap();
        let back = multi_mode_product(&fwd, &dicts, false).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() <= 1e-12);
    }

    #[test]
    fn multi_mode_matches_kron_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..25 {
            let sig = [rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..4), rng.random_range(1..4)];
            let atoms = sig.map(|s| rng.random_range(1..=s));
            let mats = [0, 1, 2, 3].map(|i| random_matrix(sig[i], atoms[i], &mut rng));
            let [a, b, c, d] = mats;
            let dicts = DictionarySet::new(a, b, c, d).unwrap();
            let beta = random_tensor(atoms, &mut rng);
            let oracle = kron_oracle(&dicts).unwrap();
            let direct = multi_mode_product(&beta, &dicts, false).unwrap();
            let via = devectorize(&oracle.matvec(&vectorize(&beta)).unwrap(), sig).unwrap();
            assert!(direct.max_abs_diff(&via).unwrap() <= 1e-12);

            let alpha = random_tensor(sig, &mut rng);
            let back = multi_mode_product(&alpha, &dicts, true).unwrap();
            let via_t = devectorize(&oracle.transpose().matvec(&vectorize(&alpha)).unwrap(), atoms).unwrap();
            assert!(back.max_abs_diff(&via_t).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn multi_mode_rejects_bad_chain() {
        let dicts = DictionarySet::identity([2, 2, 2, 2]);
        let x = DynTensor::zeros([2, 2, 2, 3]).unwrap();
        assert!(multi_mode_product(&x, &dicts, false).is_err());
    }

    #[test]
    fn kron_identity_and_outer_product() {
        let id = kron_oracle(&DictionarySet::identity([2, 3, 1, 2])).unwrap();
        assert_eq!(id, Matrix2D::identity(12));

        let atoms = [[1.0, 2.0], [3.0, -1.0], [0.5, 4.0], [-2.0, 1.5]];
        let mats = atoms.map(|a| Matrix2D::from_vec(2, 1, a.to_vec()).unwrap());
        let [a, b, c, d] = mats;
        let k = kron_oracle(&DictionarySet::new(a, b, c, d).unwrap()).unwrap();
        assert_eq!((k.rows(), k.cols()), (16, 1));
        // hand-computed outer product, mode-1 fastest
        let mut expect = Vec::new();
        for t in 0..2 {
            for q in 0..2 {
                for n in 0..2 {
                    for m in 0..2 {
                        expect.push(atoms[0][m] * atoms[1][n] * atoms[2][q] * atoms[3][t]);
                    }
                }
            }
        }
        assert_eq!(k.column(0), expect);
    }

    #[test]
    fn kron_guard() {
        let dicts = DictionarySet::identity([60, 60, 1, 1]);
        assert!(matches!(kron_oracle(&dicts), Err(Error::Capacity(_))));
    }

    #[test]
    fn norms() {
        let z = DynTensor::zeros([2, 2, 1, 1]).unwrap();
        assert_eq!((frob_norm(&z), l1_norm(&z), l0_count(&z, 0.0)), (0.0, 0.0, 0));
        let v = DynTensor::from_vec([1, 1, 1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(frob_norm(&v), 5.0);
        assert_eq!(l1_norm(&v), 7.0);
        assert_eq!(l0_count(&v, 0.0), 2);
        assert_eq!(l0_count(&v, 3.5), 1);
    }

    #[test]
    fn frob_squared_is_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor([4, 3, 2, 5], &mut rng);
        let mut direct = 0.0;
        for m in 0..4 {
            for n in 0..3 {
                for q in 0..2 {
                    for t in 0..5 {
                        direct += x.get([m, n, q, t]).powi(2);
                    }
                }
            }
        }
        assert!((frob_norm(&x).powi(2) - direct).abs() <= 1e-12 * direct);
        assert!((frob_norm(&x).powi(2) - x.dot(&x).unwrap()).abs() <= 1e-12 * direct);
    }

    proptest! {
        #[test]
        fn prop_fold_unfold_identity(dims in [1usize..5, 1..5, 1..4, 1..6], seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(dims, &mut rng);
            prop_assert_eq!(fold_spatial(&unfold_spatial(&x), dims).unwrap(), x.clone());
            prop_assert_eq!(devectorize(&vectorize(&x), dims).unwrap(), x);
        }
    }
}
