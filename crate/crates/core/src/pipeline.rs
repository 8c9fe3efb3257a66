//! End-to-end KMDS denoising: composites, kernel, coefficient solve, tensor
//! sparse coding, reconstruction and the kernel map back to image space.

use std::time::Instant;

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::kernel::{apply_kernel, build_kernel, composite_frames, solve_coefficients, KernelParams, SparseKernel};
use crate::kinetics::FrameProtocol;
use crate::sparse::{
    dct_dictionaries, full_objective, init_beta, median_rule_lambda, reconstruct_alpha, refine_dictionaries, run_tista,
    FullObjective, ObjectiveTerms, TistaConfig,
};
use crate::tensor::{DictionarySet, DynTensor};

/// How the shrinkage weight is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum Lambda2Rule {
    Fixed { value: f64 },
    /// `c · median(|β₀|)` of the initial coefficients.
    MedianRule { c: f64 },
}

impl Default for Lambda2Rule {
    fn default() -> Self {
        Lambda2Rule::MedianRule { c: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseConfig {
    pub kernel: KernelParams,
    /// Number of composite frames used as kernel features.
    pub n_comp: usize,
    /// Append scaled voxel coordinates to the kernel features.
    pub include_coords: bool,
    pub cgls_max_iter: usize,
    pub cgls_tol: f64,
    pub lambda2: Lambda2Rule,
    pub k_iters: usize,
    pub lipschitz_margin: f64,
    /// Temporal atoms, capped at the frame count (so any value >= T keeps the
    /// temporal dictionary square); spatial dictionaries stay square. `None`
    /// keeps every mode square and orthonormal.
    pub temporal_atoms: Option<usize>,
    /// Atoms per mode; overrides `temporal_atoms` when set.
    pub atoms: Option<[usize; 4]>,
    /// Alternating dictionary updates after the first sparse-coding pass.
    pub dict_refine_rounds: usize,
    pub dict_ridge: f64,
    /// Weight of the kernel and sparsity terms in the reported joint cost.
    pub lambda1: f64,
    /// Keep α, β and α̂ in the output.
    pub debug_dumps: bool,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            kernel: KernelParams::default(),
            n_comp: 3,
            include_coords: false,
            cgls_max_iter: 100,
            cgls_tol: 1e-6,
            lambda2: Lambda2Rule::default(),
            k_iters: 20,
            lipschitz_margin: 1.0,
            temporal_atoms: Some(6),
            atoms: None,
            dict_refine_rounds: 0,
            dict_ridge: 1e-8,
            lambda1: 1.0,
            debug_dumps: false,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.k_nn == 0 {
            return Err(Error::config("kernel.k_nn must be >= 1"));
        }
        if !(self.kernel.sigma > 0.0 && self.kernel.sigma.is_finite()) {
            return Err(Error::config("kernel.sigma must be > 0"));
        }
        if self.n_comp == 0 {
            return Err(Error::config("n_comp must be >= 1"));
        }
        if self.cgls_max_iter == 0 || !(self.cgls_tol >= 0.0) {
            return Err(Error::config("cgls_max_iter must be >= 1 and cgls_tol >= 0"));
        }
        match self.lambda2 {
            Lambda2Rule::Fixed { value } if !(value >= 0.0 && value.is_finite()) => {
                return Err(Error::config(format!("lambda2 value {} must be finite and >= 0", value)))
            }
            Lambda2Rule::MedianRule { c } if !(c >= 0.0 && c.is_finite()) => {
                return Err(Error::config(format!("lambda2 median-rule factor {} must be >= 0", c)))
            }
            _ => {}
        }
        if self.atoms.is_some_and(|a| a.contains(&0)) || self.temporal_atoms == Some(0) {
            return Err(Error::config("atoms must be >= 1 in every mode"));
        }
        if !(self.dict_ridge > 0.0) || !(self.lambda1 >= 0.0) {
            return Err(Error::config("dict_ridge must be > 0 and lambda1 >= 0"));
        }
        self.tista(0.0).validate()
    }

    pub fn atoms_for(&self, signal: [usize; 4]) -> [usize; 4] {
        match (self.atoms, self.temporal_atoms) {
            (Some(a), _) => a,
            (None, Some(t)) => [signal[0], signal[1], signal[2], t.min(signal[3])],
            (None, None) => signal,
        }
    }

    fn tista(&self, lambda2: f64) -> TistaConfig {
        TistaConfig {
            lambda2,
            k_iters: self.k_iters,
            lipschitz_margin: self.lipschitz_margin,
        }
    }
}

/// Wall-clock seconds spent per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub composites: f64,
    pub kernel: f64,
    pub coefficients: f64,
    pub sparse_coding: f64,
    pub reconstruction: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub dims: [usize; 4],
    pub kernel_nnz: usize,
    pub cgls_relative_residual: f64,
    /// CGLS iterations per frame.
    pub cgls_iterations: Vec<usize>,
    pub lipschitz: f64,
    pub lambda2: f64,
    /// Sparse-coding cost per iteration of the final pass, starting at β₀.
    pub trace: Vec<ObjectiveTerms>,
    pub objective: FullObjective,
    pub negative_voxels: usize,
    /// Not serialized, so reports stay byte-reproducible.
    #[serde(skip)]
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageDumps {
    pub alpha: DynTensor,
    pub beta: DynTensor,
    pub alpha_hat: DynTensor,
    pub kernel: SparseKernel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseOutput {
    pub x_hat: DynTensor,
    pub report: DenoiseReport,
    pub dumps: Option<StageDumps>,
}

/// Denoises with the kernel built from `y`'s own composite frames.
pub fn denoise(y: &DynTensor, protocol: &FrameProtocol, cfg: &DenoiseConfig) -> Result<DenoiseOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let mut timings = StageTimings::default();

    let t0 = Instant::now();
    let mut features = composite_frames(y, protocol, cfg.n_comp).stage("composites")?;
    if cfg.include_coords {
        features = features.with_coordinates();
    }
    timings.composites = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let k = build_kernel(&features, &cfg.kernel).stage("kernel")?;
    timings.kernel = t0.elapsed().as_secs_f64();

    let mut out = denoise_with_kernel(y, &k, cfg).map(|mut o| {
        o.report.timings.composites = timings.composites;
        o.report.timings.kernel = timings.kernel;
        o
    })?;
    out.report.timings.total = start.elapsed().as_secs_f64();
    info!(
        "denoised {:?} in {:.2}s (kernel {:.2}s, coefficients {:.2}s, sparse coding {:.2}s)",
        y.dims(),
        out.report.timings.total,
        out.report.timings.kernel,
        out.report.timings.coefficients,
        out.report.timings.sparse_coding
    );
    Ok(out)
}

/// The chain after kernel construction, for a caller-supplied kernel.
pub fn denoise_with_kernel(y: &DynTensor, k: &SparseKernel, cfg: &DenoiseConfig) -> Result<DenoiseOutput> {
    cfg.validate()?;
    if !y.all_finite() {
        return Err(Error::domain("input contains non-finite values"));
    }
    let negatives_in = y.data().iter().filter(|v| **v < 0.0).count();
    if negatives_in > 0 {
        warn!("input has {} negative voxels", negatives_in);
    }
    let mut timings = StageTimings::default();

    let t0 = Instant::now();
    let solve = solve_coefficients(k, y, cfg.cgls_max_iter, cfg.cgls_tol).stage("coefficients")?;
    timings.coefficients = t0.elapsed().as_secs_f64();
    debug!("coefficient solve relative residual {:.3e}", solve.relative_residual);
    let alpha = solve.alpha;

    let t0 = Instant::now();
    let signal = alpha.dims();
    let atoms = cfg.atoms_for(signal);
    let mut dicts: DictionarySet = dct_dictionaries(signal, atoms).stage("dictionaries")?;
    let lambda2 = match cfg.lambda2 {
        Lambda2Rule::Fixed { value } => value,
        Lambda2Rule::MedianRule { c } => median_rule_lambda(&init_beta(&alpha, &dicts).stage("sparse coding")?, c),
    };
    let mut run = run_tista(&alpha, &dicts, &cfg.tista(lambda2)).stage("sparse coding")?;
    for round in 0..cfg.dict_refine_rounds {
        dicts = refine_dictionaries(&alpha, &run.beta, &dicts, cfg.dict_ridge).stage("dictionary refinement")?;
        run = run_tista(&alpha, &dicts, &cfg.tista(lambda2)).stage("sparse coding")?;
        debug!("refinement round {} cost {:.6e}", round + 1, run.trace.last().map_or(0.0, |t| t.total));
    }
    timings.sparse_coding = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let alpha_hat = reconstruct_alpha(&run.beta, &dicts).stage("reconstruction")?;
    let x_hat = apply_kernel(k, &alpha_hat).stage("reconstruction")?;
    if !x_hat.all_finite() {
        return Err(Error::Divergence {
            step: "reconstruction",
            detail: "estimate has non-finite voxels".into(),
        });
    }
    let objective = full_objective(y, k, &alpha, &run.beta, &dicts, cfg.lambda1, lambda2).stage("reconstruction")?;
    timings.reconstruction = t0.elapsed().as_secs_f64();

    let negative_voxels = x_hat.data().iter().filter(|v| **v < 0.0).count();
    let report = DenoiseReport {
        dims: y.dims(),
        kernel_nnz: k.nnz(),
        cgls_relative_residual: solve.relative_residual,
        cgls_iterations: solve.iterations,
        lipschitz: run.lipschitz,
        lambda2,
        trace: run.trace,
        objective,
        negative_voxels,
        timings,
    };
    let dumps = cfg.debug_dumps.then(|| StageDumps {
        alpha,
        beta: run.beta,
        alpha_hat,
        kernel: k.clone(),
    });
    Ok(DenoiseOutput { x_hat, report, dumps })
}

/// Denoises each realization with its own kernel; results keep input order.
pub fn denoise_batch(realizations: &[DynTensor], protocol: &FrameProtocol, cfg: &DenoiseConfig) -> Result<Vec<DenoiseOutput>> {
    if let Some(first) = realizations.first() {
        if let Some(bad) = realizations.iter().position(|r| r.dims() != first.dims()) {
            return Err(Error::shape(format!(
                "realization {} has dims {:?}, expected {:?}",
                bad,
                realizations[bad].dims(),
                first.dims()
            )));
        }
    }
    realizations.par_iter().map(|y| denoise(y, protocol, cfg)).collect()
}
