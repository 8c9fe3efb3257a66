//! Tucker-structured sparse coding of the coefficient image.
//!
//! Solves `min_β ½‖α − β ×₁ D₁ ×₂ D₂ ×₃ D₃ ×₄ D₄‖²_F + λ₂‖β‖₁` with tensor ISTA:
//!
//! ```text
//! ς_k = α − β_{k−1} ×ᵢ Dᵢ
//! ξ_k = β_{k−1} + (1/L) ς_k ×ᵢ Dᵢᵀ
//! β_k = S_{λ₂/L}(ξ_k)
//! ```
//!
//! starting from `β₀ = α ×ᵢ Dᵢᵀ`, with a constant step `1/L`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{apply_kernel, SparseKernel};
use crate::tensor::{frob_norm, l0_count, l1_norm, multi_mode_product, DictionarySet, DynTensor, Matrix2D};

/// First `atoms` columns of the orthonormal DCT-II basis of size `dim`.
pub fn dct_dictionary(dim: usize, atoms: usize) -> Result<Matrix2D> {
    if atoms == 0 || atoms > dim {
        return Err(Error::shape(format!("DCT dictionary needs 1 <= atoms <= dim, got {} of {}", atoms, dim)));
    }
    let n = dim as f64;
    Ok(Matrix2D::from_fn(dim, atoms, |i, k| {
        let c = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        c * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n).cos()
    }))
}

/// One truncated DCT dictionary per mode.
pub fn dct_dictionaries(signal_dims: [usize; 4], atoms: [usize; 4]) -> Result<DictionarySet> {
    let [a, b, c, d] = [0, 1, 2, 3].map(|i| dct_dictionary(signal_dims[i], atoms[i]));
    DictionarySet::new(a?, b?, c?, d?)
}

const POWER_ITERATIONS: usize = 50;
const POWER_TOL: f64 = 1e-10;
/// The Gram matrix is squared this many times before iterating, so each
/// iteration advances the eigenvector like 2^k plain ones.
const GRAM_SQUARINGS: usize = 3;

/// Largest eigenvalue of a symmetric positive semi-definite matrix by power
/// iteration.
pub fn largest_eigenvalue(g: &Matrix2D) -> f64 {
    let n = g.rows();
    let mut h = g.clone();
    for _ in 0..GRAM_SQUARINGS {
        let tr: f64 = (0..n).map(|i| h.get(i, i)).sum();
        if !(tr > 0.0) {
            return 0.0;
        }
        h = h.matmul(&h).expect("square").scale(1.0 / (tr * tr));
    }
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.618_033_988_75).fract()).collect();
    normalize(&mut v);
    for _ in 0..POWER_ITERATIONS {
        let mut w = h.matvec(&v).expect("square");
        if normalize(&mut w) == 0.0 {
            return 0.0;
        }
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if delta <= POWER_TOL {
            break;
        }
    }
    let gv = g.matvec(&v).expect("square");
    v.iter().zip(&gv).map(|(a, b)| a * b).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// `L = Πᵢ σ_max(Dᵢ)²`, the spectral norm of the Kronecker Gram operator.
pub fn lipschitz(dicts: &DictionarySet) -> f64 {
    dicts.matrices().iter().map(|d| largest_eigenvalue(&d.gram())).product()
}

#[inline]
pub fn soft_threshold(v: f64, rho: f64) -> f64 {
    if v > rho {
        v - rho
    } else if v < -rho {
        v + rho
    } else {
        0.0
    }
}

/// `β₀ = α ×₁ D₁ᵀ ×₂ D₂ᵀ ×₃ D₃ᵀ ×₄ D₄ᵀ`
pub fn init_beta(alpha: &DynTensor, dicts: &DictionarySet) -> Result<DynTensor> {
    multi_mode_product(alpha, dicts, true)
}

/// `α̂ = β ×₁ D₁ ×₂ D₂ ×₃ D₃ ×₄ D₄`
pub fn reconstruct_alpha(beta: &DynTensor, dicts: &DictionarySet) -> Result<DynTensor> {
    multi_mode_product(beta, dicts, false)
}

/// Output of one TISTA iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TistaStep {
    pub beta: DynTensor,
    /// ς_k, the signal-domain residual before the update.
    pub residual: DynTensor,
    /// ξ_k, the gradient step before shrinkage.
    pub xi: DynTensor,
}

pub fn tista_step(
    beta: &DynTensor,
    alpha: &DynTensor,
    dicts: &DictionarySet,
    lipschitz: f64,
    lambda2: f64,
) -> Result<TistaStep> {
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(Error::domain(format!("Lipschitz constant {} must be > 0", lipschitz)));
    }
    if !(lambda2 >= 0.0) {
        return Err(Error::domain(format!("lambda2 {} must be >= 0", lambda2)));
    }
    let residual = alpha.sub(&reconstruct_alpha(beta, dicts)?)?;
    finite_or_diverge(&residual, "residual")?;
    let grad = multi_mode_product(&residual, dicts, true)?;
    let inv_l = 1.0 / lipschitz;
    let xi = beta.zip_map(&grad, |b, g| b + inv_l * g)?;
    finite_or_diverge(&xi, "gradient step")?;
    let rho = lambda2 * inv_l;
    let beta = xi.map(|v| soft_threshold(v, rho));
    finite_or_diverge(&beta, "shrinkage")?;
    Ok(TistaStep { beta, residual, xi })
}

fn finite_or_diverge(t: &DynTensor, step: &'static str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: "non-finite values".into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TistaConfig {
    pub lambda2: f64,
    pub k_iters: usize,
    pub lipschitz_margin: f64,
}

impl Default for TistaConfig {
    fn default() -> Self {
        Self {
            lambda2: 0.0,
            k_iters: 20,
            lipschitz_margin: 1.0,
        }
    }
}

impl TistaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::config(format!("lambda2 = {} must be finite and >= 0", self.lambda2)));
        }
        if self.k_iters == 0 {
            return Err(Error::config("k_iters must be >= 1"));
        }
        if !(self.lipschitz_margin >= 1.0 && self.lipschitz_margin.is_finite()) {
            return Err(Error::config(format!("lipschitz_margin = {} must be >= 1", self.lipschitz_margin)));
        }
        Ok(())
    }
}

/// Terms of the l1-relaxed sparse coding cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    /// ½‖α − β ×ᵢ Dᵢ‖²_F
    pub data_fit: f64,
    /// ‖β‖₁ (unweighted)
    pub l1: f64,
    /// data_fit + λ₂·l1
    pub total: f64,
}

pub fn objective_terms(alpha: &DynTensor, beta: &DynTensor, dicts: &DictionarySet, lambda2: f64) -> Result<ObjectiveTerms> {
    let r = alpha.sub(&reconstruct_alpha(beta, dicts)?)?;
    let data_fit = 0.5 * frob_norm(&r).powi(2);
    let l1 = l1_norm(beta);
    Ok(ObjectiveTerms {
        data_fit,
        l1,
        total: data_fit + lambda2 * l1,
    })
}

pub fn objective(alpha: &DynTensor, beta: &DynTensor, dicts: &DictionarySet, lambda2: f64) -> Result<f64> {
    Ok(objective_terms(alpha, beta, dicts, lambda2)?.total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TistaRun {
    pub beta: DynTensor,
    /// ξ of the last iteration.
    pub last_xi: DynTensor,
    /// Entry 0 is β₀, entry k is β_k.
    pub trace: Vec<ObjectiveTerms>,
    /// Step constant actually used (including margin).
    pub lipschitz: f64,
}

pub fn run_tista(alpha: &DynTensor, dicts: &DictionarySet, cfg: &TistaConfig) -> Result<TistaRun> {
    cfg.validate()?;
    let l = lipschitz(dicts) * cfg.lipschitz_margin;
    if !(l > 0.0) {
        return Err(Error::domain("dictionaries have zero spectral norm"));
    }
    let mut beta = init_beta(alpha, dicts)?;
    let mut trace = Vec::with_capacity(cfg.k_iters + 1);
    trace.push(objective_terms(alpha, &beta, dicts, cfg.lambda2)?);
    let mut last_xi = beta.clone();
    for _ in 0..cfg.k_iters {
        let step = tista_step(&beta, alpha, dicts, l, cfg.lambda2)?;
        beta = step.beta;
        last_xi = step.xi;
        trace.push(objective_terms(alpha, &beta, dicts, cfg.lambda2)?);
    }
    Ok(TistaRun {
        beta,
        last_xi,
        trace,
        lipschitz: l,
    })
}

/// `c · median(|β₀|)`
pub fn median_rule_lambda(beta0: &DynTensor, c: f64) -> f64 {
    let mut mags: Vec<f64> = beta0.data().iter().map(|v| v.abs()).collect();
    let mid = mags.len() / 2;
    let (_, m, _) = mags.select_nth_unstable_by(mid, f64::total_cmp);
    let mut med = *m;
    if mags.len() % 2 == 0 {
        let lower = mags[..mid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        med = 0.5 * (med + lower);
    }
    c * med
}

/// Cost of the joint kernel + sparse model, split into its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FullObjective {
    /// ½‖τ⁻¹(Kτ(α)) − y‖²_F
    pub data_fit: f64,
    /// ½‖α − β ×ᵢ Dᵢ‖²_F
    pub kernel_fit: f64,
    /// λ₂·‖β‖₀
    pub sparsity: f64,
    pub l0: usize,
    /// data_fit + λ₁·(kernel_fit + sparsity)
    pub total: f64,
}

pub fn full_objective(
    y: &DynTensor,
    k: &SparseKernel,
    alpha: &DynTensor,
    beta: &DynTensor,
    dicts: &DictionarySet,
    lambda1: f64,
    lambda2: f64,
) -> Result<FullObjective> {
    let fit = apply_kernel(k, alpha)?.sub(y)?;
    let data_fit = 0.5 * frob_norm(&fit).powi(2);
    let kernel_fit = objective_terms(alpha, beta, dicts, 0.0)?.data_fit;
    let l0 = l0_count(beta, 0.0);
    let sparsity = lambda2 * l0 as f64;
    Ok(FullObjective {
        data_fit,
        kernel_fit,
        sparsity,
        l0,
        total: data_fit + lambda1 * (kernel_fit + sparsity),
    })
}

/// Mode-`mode` matricization: rows index the mode, columns run over the other
/// three modes in row-major order.
fn unfold_mode(t: &DynTensor, mode: usize) -> Matrix2D {
    let dims = t.dims();
    let k = mode - 1;
    let rows = dims[k];
    let cols = t.len() / rows;
    let inner: usize = dims[k + 1..].iter().product();
    let mut out = Matrix2D::zeros(rows, cols);
    for (idx, &v) in t.data().iter().enumerate() {
        let outer = idx / (rows * inner);
        let r = (idx / inner) % rows;
        let i = idx % inner;
        out.set(r, outer * inner + i, v);
    }
    out
}

/// One sweep of alternating least-squares updates of each dictionary with β
/// fixed: `Dᵢ ← α₍ᵢ₎ Bᵀ (B Bᵀ + ridge·I)⁻¹` where `B` is β multiplied by the
/// other three dictionaries, then columns are rescaled to unit norm.
pub fn refine_dictionaries(alpha: &DynTensor, beta: &DynTensor, dicts: &DictionarySet, ridge: f64) -> Result<DictionarySet> {
    if alpha.dims() != dicts.signal_dims() || beta.dims() != dicts.atom_dims() {
        return Err(Error::shape("refinement shapes do not chain"));
    }
    let mut mats = dicts.matrices().clone();
    for mode in 1..=4 {
        let mut b = beta.clone();
        for (j, d) in mats.iter().enumerate() {
            if j + 1 != mode {
                b = crate::tensor::mode_product(&b, d, j + 1)?;
            }
        }
        let a_unf = unfold_mode(alpha, mode);
        let b_unf = unfold_mode(&b, mode);
        let bt = b_unf.transpose();
        let mut gram = b_unf.matmul(&bt)?;
        for i in 0..gram.rows() {
            gram.set(i, i, gram.get(i, i) + ridge);
        }
        let rhs = a_unf.matmul(&bt)?; // dim × atoms
        let Some(solved) = cholesky_solve_right(&gram, &rhs) else {
            continue;
        };
        let old = &mats[mode - 1];
        let mut updated = solved;
        for c in 0..updated.cols() {
            let n: f64 = updated.column(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            for r in 0..updated.rows() {
                let v = if n > 1e-12 { updated.get(r, c) / n } else { old.get(r, c) };
                updated.set(r, c, v);
            }
        }
        mats[mode - 1] = updated;
    }
    let [a, b, c, d] = mats;
    DictionarySet::new(a, b, c, d)
}

/// Solves `X · G = R` for symmetric positive-definite `G`.
fn cholesky_solve_right(g: &Matrix2D, r: &Matrix2D) -> Option<Matrix2D> {
    let n = g.rows();
    let mut l = Matrix2D::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l.get(i, k) * l.get(j, k)).sum();
            if i == j {
                let d = g.get(i, i) - s;
                if !(d > 0.0) {
                    return None;
                }
                l.set(i, i, d.sqrt());
            } else {
                l.set(i, j, (g.get(i, j) - s) / l.get(j, j));
            }
        }
    }
    // each row x of X satisfies G xᵀ = rᵀ
    let mut out = Matrix2D::zeros(r.rows(), n);
    for row in 0..r.rows() {
        let mut z = vec![0.0; n];
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l.get(i, k) * z[k]).sum();
            z[i] = (r.get(row, i) - s) / l.get(i, i);
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l.get(k, i) * out.get(row, k)).sum();
            out.set(row, i, (z[i] - s) / l.get(i, i));
        }
    }
    Some(out)
}
