//! Self-check of the fast tensor paths against dense Kronecker and
//! elementwise reference implementations on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{apply_kernel, build_kernel, FeatureField, KernelParams, SearchWindow};
use crate::sparse::{dct_dictionaries, init_beta, lipschitz, run_tista, soft_threshold, tista_step, TistaConfig};
use crate::tensor::{
    fold_spatial, kron_oracle, mode_product, multi_mode_product, unfold_spatial, vectorize, DictionarySet,
    DynTensor, Matrix2D, KRON_ORACLE_MAX_ENTRIES,
};

/// Signature of a mode-n product implementation.
pub type ModeProductFn = fn(&DynTensor, &Matrix2D, usize) -> Result<DynTensor>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleCaps {
    /// Largest signal dims drawn per mode.
    pub max_dims: [usize; 4],
    pub instances: usize,
    pub seed: u64,
}

impl Default for OracleCaps {
    fn default() -> Self {
        Self {
            max_dims: [4, 4, 3, 3],
            instances: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub properties: Vec<PropertyResult>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.passed)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.properties.iter().filter(|p| !p.passed).map(|p| p.name.as_str()).collect()
    }

    /// One line per property.
    pub fn to_text(&self) -> String {
        self.properties
            .iter()
            .map(|p| {
                format!(
                    "{} {} max_dev={:.3e} tol={:.1e}\n",
                    if p.passed { "PASS" } else { "FAIL" },
                    p.name,
                    p.max_deviation,
                    p.tolerance
                )
            })
            .collect()
    }
}

struct Tracker {
    name: &'static str,
    tol: f64,
    worst: f64,
}

impl Tracker {
    fn new(name: &'static str, tol: f64) -> Self {
        Self { name, tol, worst: 0.0 }
    }

    fn see(&mut self, dev: f64) {
        // NaN must register as a failure
        if dev.is_nan() || dev > self.worst {
            self.worst = if dev.is_nan() { f64::INFINITY } else { dev };
        }
    }

    fn finish(self) -> PropertyResult {
        PropertyResult {
            name: self.name.into(),
            max_deviation: self.worst,
            tolerance: self.tol,
            passed: self.worst <= self.tol,
        }
    }
}

fn random_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng) -> DynTensor {
    let n = dims.iter().product();
    DynTensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid dims")
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix2D {
    Matrix2D::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid shape")
}

fn random_dims(max: [usize; 4], rng: &mut ChaCha8Rng) -> [usize; 4] {
    max.map(|m| rng.random_range(1..=m.max(1)))
}

fn random_dicts(signal: [usize; 4], rng: &mut ChaCha8Rng) -> DictionarySet {
    let atoms = signal.map(|s| rng.random_range(1..=s));
    let m = |i: usize, rng: &mut ChaCha8Rng| random_matrix(signal[i], atoms[i], rng);
    let (d1, d2, d3, d4) = (m(0, rng), m(1, rng), m(2, rng), m(3, rng));
    DictionarySet::new(d1, d2, d3, d4).expect("atoms within signal dims")
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Dictionary set with `d` in `mode` and identities elsewhere.
fn single_mode(dims: [usize; 4], d: &Matrix2D, mode: usize) -> DictionarySet {
    let mut m: Vec<Matrix2D> = dims.iter().map(|&n| Matrix2D::identity(n)).collect();
    m[mode - 1] = d.clone();
    let mut it = m.into_iter();
    let mut next = || it.next().expect("four modes");
    DictionarySet::new(next(), next(), next(), next()).expect("valid identity set")
}

pub fn run_oracle_checks(caps: &OracleCaps) -> Result<OracleReport> {
    run_oracle_checks_with(caps, mode_product)
}

/// Runs every check, using `mode_product_impl` for the single mode-product
/// property.
pub fn run_oracle_checks_with(caps: &OracleCaps, mode_product_impl: ModeProductFn) -> Result<OracleReport> {
    let cells: usize = caps.max_dims.iter().product();
    if caps.max_dims.contains(&0) || cells * cells > KRON_ORACLE_MAX_ENTRIES || caps.instances == 0 {
        return Err(Error::Capacity(format!(
            "oracle caps {:?} x {} exceed the dense memory guard",
            caps.max_dims, caps.instances
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(caps.seed);
    let mut mp = Tracker::new("mode_product", 1e-12);
    let mut mmp = Tracker::new("multi_mode_product", 1e-10);
    let mut step = Tracker::new("tista_step", 1e-10);
    let mut lip = Tracker::new("lipschitz", 1e-8);
    let mut mono = Tracker::new("objective_monotone", 1e-10);
    let mut shrink = Tracker::new("orthonormal_first_step", 1e-12);
    let mut unfold = Tracker::new("unfold_roundtrip", 0.0);
    let mut kern = Tracker::new("kernel_apply", 1e-12);

    for _ in 0..caps.instances {
        let dims = random_dims(caps.max_dims, &mut rng);
        let t = random_tensor(dims, &mut rng);

        let mode = rng.random_range(1..=4);
        let rows = rng.random_range(dims[mode - 1]..=caps.max_dims[mode - 1]);
        let d = random_matrix(rows, dims[mode - 1], &mut rng);
        let want = kron_oracle(&single_mode(dims, &d, mode))?.matvec(&vectorize(&t))?;
        let mut out_dims = dims;
        out_dims[mode - 1] = rows;
        match mode_product_impl(&t, &d, mode) {
            Ok(got) if got.dims() == out_dims => mp.see(max_abs(&vectorize(&got), &want)),
            _ => mp.see(f64::INFINITY),
        }

        let dicts = random_dicts(dims, &mut rng);
        let k = kron_oracle(&dicts)?;
        let beta = random_tensor(dicts.atom_dims(), &mut rng);
        let got = multi_mode_product(&beta, &dicts, false)?;
        mmp.see(max_abs(&vectorize(&got), &k.matvec(&vectorize(&beta))?));

        let l = lipschitz(&dicts);
        let dense_l = dense_spectral_sq(&k);
        lip.see((l - dense_l).abs() / dense_l.max(f64::MIN_POSITIVE));

        let lambda2 = rng.random_range(0.0..0.5);
        let mut b = beta.clone();
        for _ in 0..3 {
            let s = tista_step(&b, &t, &dicts, l, lambda2)?;
            let want = ista_dense(&vectorize(&b), &vectorize(&t), &k, l, lambda2)?;
            step.see(max_abs(&vectorize(&s.beta), &want));
            b = s.beta;
        }

        let run = run_tista(
            &t,
            &dicts,
            &TistaConfig {
                lambda2,
                k_iters: 50,
                lipschitz_margin: 1.0,
            },
        )?;
        for w in run.trace.windows(2) {
            mono.see((w[1].total - w[0].total).max(0.0));
        }

        let square = dct_dictionaries(dims, dims)?;
        let b0 = init_beta(&t, &square)?;
        let first = tista_step(&b0, &t, &square, 1.0, lambda2)?;
        shrink.see(max_abs(first.beta.data(), b0.map(|v| soft_threshold(v, lambda2)).data()));

        let back = fold_spatial(&unfold_spatial(&t), dims)?;
        unfold.see(if back == t { 0.0 } else { f64::INFINITY });

        let spatial = [dims[0], dims[1], dims[2]];
        let voxels: usize = spatial.iter().product();
        let f = FeatureField::new(spatial, 2, (0..voxels * 2).map(|_| rng.random_range(0.0..1.0)).collect())?;
        let kp = KernelParams {
            k_nn: rng.random_range(1..=voxels),
            sigma: 0.5,
            window: SearchWindow::Full,
            normalize: true,
        };
        let sk = build_kernel(&f, &kp)?;
        let dense = sk.to_dense();
        let applied = apply_kernel(&sk, &t)?;
        let mut dev: f64 = 0.0;
        for v in 0..voxels {
            for tt in 0..dims[3] {
                let want: f64 = (0..voxels).map(|u| dense[v][u] * t.data()[u * dims[3] + tt]).sum();
                dev = dev.max((applied.data()[v * dims[3] + tt] - want).abs());
            }
        }
        kern.see(dev);
    }
    Ok(OracleReport {
        properties: vec![
            mp.finish(),
            mmp.finish(),
            step.finish(),
            lip.finish(),
            mono.finish(),
            shrink.finish(),
            unfold.finish(),
            kern.finish(),
        ],
    })
}

/// One ISTA step on the vectorized problem.
fn ista_dense(beta: &[f64], alpha: &[f64], k: &Matrix2D, l: f64, lambda2: f64) -> Result<Vec<f64>> {
    let kb = k.matvec(beta)?;
    let r: Vec<f64> = alpha.iter().zip(&kb).map(|(a, b)| a - b).collect();
    let g = k.transpose().matvec(&r)?;
    Ok(beta.iter().zip(&g).map(|(b, g)| soft_threshold(b + g / l, lambda2 / l)).collect())
}

/// Largest eigenvalue of `KᵀK` by cyclic Jacobi on the dense Gram.
fn dense_spectral_sq(k: &Matrix2D) -> f64 {
    let g = k.gram();
    let n = g.rows();
    let mut a: Vec<f64> = g.data().to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let (arp, arq) = (a[r * n + p], a[r * n + q]);
                    a[r * n + p] = c * arp - s * arq;
                    a[r * n + q] = s * arp + c * arq;
                }
                for r in 0..n {
                    let (apr, aqr) = (a[p * n + r], a[q * n + r]);
                    a[p * n + r] = c * apr - s * aqr;
                    a[q * n + r] = s * apr + c * aqr;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped(t: &DynTensor, d: &Matrix2D, mode: usize) -> Result<DynTensor> {
        Ok(mode_product(t, d, mode)?.scale(-1.0))
    }

    #[test]
    fn correct_build_passes() {
        let r = run_oracle_checks(&OracleCaps {
            instances: 20,
            ..Default::default()
        })
        .unwrap();
        assert!(r.passed(), "{}", r.to_text());
        assert_eq!(r.properties.len(), 8);
    }

    #[test]
    fn sign_flip_is_named() {
        let r = run_oracle_checks_with(
            &OracleCaps {
                instances: 5,
                ..Default::default()
            },
            flipped,
        )
        .unwrap();
        assert_eq!(r.failed(), vec!["mode_product"]);
        assert!(r.to_text().contains("FAIL mode_product"));
    }

    #[test]
    fn oversized_caps_rejected() {
        let caps = OracleCaps {
            max_dims: [100, 100, 10, 10],
            ..Default::default()
        };
        assert!(matches!(run_oracle_checks(&caps), Err(Error::Capacity(_))));
    }
}
