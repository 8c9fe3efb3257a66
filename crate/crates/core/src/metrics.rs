//! Image-quality and ROI quantification metrics.
//!
//! Frame-level metrics take a frame as a flat voxel slice in the tensor's
//! voxel order; per-frame helpers walk a [`DynTensor`] frame by frame.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DynTensor;

/// Dynamic-range convention for PSNR and the SSIM stabilizers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Peak {
    /// Maximum of the reference frame.
    #[default]
    RefMax,
    /// Each frame divided by its own maximum voxel value; peak 1.
    NormalizedMax,
    Value(f64),
}

fn same_len(x: &[f64], r: &[f64]) -> Result<()> {
    if x.len() != r.len() || x.is_empty() {
        return Err(Error::shape(format!("frames of {} and {} voxels", x.len(), r.len())));
    }
    Ok(())
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Mean squared error, normalized by the number of voxels.
pub fn mse(x: &[f64], r: &[f64]) -> Result<f64> {
    same_len(x, r)?;
    Ok(x.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// Resolves the peak and, for [`Peak::NormalizedMax`], rescales both frames.
fn resolve<'a>(x: &'a [f64], r: &'a [f64], peak: Peak) -> Result<(std::borrow::Cow<'a, [f64]>, std::borrow::Cow<'a, [f64]>, f64)> {
    use std::borrow::Cow;
    match peak {
        Peak::Value(p) if p > 0.0 && p.is_finite() => Ok((Cow::Borrowed(x), Cow::Borrowed(r), p)),
        Peak::Value(p) => Err(Error::domain(format!("peak {} must be > 0", p))),
        Peak::RefMax => {
            let p = max_of(r);
            if !(p > 0.0) {
                return Err(Error::domain("reference frame has no positive maximum"));
            }
            Ok((Cow::Borrowed(x), Cow::Borrowed(r), p))
        }
        Peak::NormalizedMax => {
            let (mx, mr) = (max_of(x), max_of(r));
            if !(mx > 0.0 && mr > 0.0) {
                return Err(Error::domain("normalized peak needs positive frame maxima"));
            }
            Ok((
                Cow::Owned(x.iter().map(|v| v / mx).collect()),
                Cow::Owned(r.iter().map(|v| v / mr).collect()),
                1.0,
            ))
        }
    }
}

/// `10·log10(peak²/MSE)` in dB; `+∞` for identical frames.
pub fn psnr(x: &[f64], r: &[f64], peak: Peak) -> Result<f64> {
    same_len(x, r)?;
    let (x, r, p) = resolve(x, r, peak)?;
    let e = mse(&x, &r)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (p * p / e).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimParams {
    pub sigma: f64,
    /// Window half-width; 5 gives the usual 11-tap window.
    pub radius: usize,
    pub k1: f64,
    pub k2: f64,
    pub peak: Peak,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            sigma: 1.5,
            radius: 5,
            k1: 0.01,
            k2: 0.03,
            peak: Peak::RefMax,
        }
    }
}

fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Separable Gaussian smoothing along one axis of an (M, N, Q) volume;
/// the window is truncated at the borders and renormalized.
fn blur_axis(src: &[f64], dims: [usize; 3], axis: usize, taps: &[f64]) -> Vec<f64> {
    let radius = taps.len() / 2;
    let strides = [dims[1] * dims[2], dims[2], 1];
    let len = dims[axis];
    let stride = strides[axis];
    let mut out = vec![0.0; src.len()];
    for (v, o) in out.iter_mut().enumerate() {
        let pos = (v / stride) % len;
        let lo = pos.saturating_sub(radius);
        let hi = (pos + radius).min(len - 1);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for p in lo..=hi {
            let w = taps[p + radius - pos];
            acc += w * src[v - pos * stride + p * stride];
            wsum += w;
        }
        *o = acc / wsum;
    }
    out
}

fn blur(src: &[f64], dims: [usize; 3], taps: &[f64]) -> Vec<f64> {
    let a = blur_axis(src, dims, 0, taps);
    let b = blur_axis(&a, dims, 1, taps);
    blur_axis(&b, dims, 2, taps)
}

/// Mean single-scale SSIM over a 3-D frame.
pub fn ssim(x: &[f64], r: &[f64], dims: [usize; 3], params: &SsimParams) -> Result<f64> {
    same_len(x, r)?;
    if x.len() != dims.iter().product::<usize>() {
        return Err(Error::shape(format!("{} voxels do not fill {:?}", x.len(), dims)));
    }
    let (x, r, peak) = resolve(x, r, params.peak)?;
    let c1 = (params.k1 * peak).powi(2);
    let c2 = (params.k2 * peak).powi(2);
    let taps = gaussian_taps(params.sigma, params.radius);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let rr: Vec<f64> = r.iter().map(|v| v * v).collect();
    let xr: Vec<f64> = x.iter().zip(r.iter()).map(|(a, b)| a * b).collect();
    let mx = blur(&x, dims, &taps);
    let mr = blur(&r, dims, &taps);
    let sxx = blur(&xx, dims, &taps);
    let srr = blur(&rr, dims, &taps);
    let sxr = blur(&xr, dims, &taps);
    let total: f64 = (0..x.len())
        .map(|v| {
            let (ux, ur) = (mx[v], mr[v]);
            let vx = sxx[v] - ux * ux;
            let vr = srr[v] - ur * ur;
            let cov = sxr[v] - ux * ur;
            ((2.0 * ux * ur + c1) * (2.0 * cov + c2)) / ((ux * ux + ur * ur + c1) * (vx + vr + c2))
        })
        .sum();
    Ok(total / x.len() as f64)
}

pub fn psnr_per_frame(x: &DynTensor, r: &DynTensor, peak: Peak) -> Result<Vec<f64>> {
    x.require_same_dims(r)?;
    (0..x.frames()).into_par_iter().map(|t| psnr(&x.frame(t), &r.frame(t), peak)).collect()
}

pub fn ssim_per_frame(x: &DynTensor, r: &DynTensor, params: &SsimParams) -> Result<Vec<f64>> {
    x.require_same_dims(r)?;
    let dims = x.spatial_dims();
    (0..x.frames())
        .into_par_iter()
        .map(|t| ssim(&x.frame(t), &r.frame(t), dims, params))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiMask {
    pub name: String,
    dims: [usize; 3],
    mask: Vec<bool>,
}

impl RoiMask {
    pub fn new(name: impl Into<String>, dims: [usize; 3], mask: Vec<bool>) -> Result<Self> {
        if mask.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!("ROI mask of {} voxels for dims {:?}", mask.len(), dims)));
        }
        if !mask.iter().any(|&b| b) {
            return Err(Error::domain("ROI mask selects no voxels"));
        }
        Ok(Self {
            name: name.into(),
            dims,
            mask,
        })
    }

    pub fn from_indices(name: impl Into<String>, dims: [usize; 3], indices: &[usize]) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        let mut mask = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(Error::shape(format!("ROI voxel {} outside {:?}", i, dims)));
            }
            mask[i] = true;
        }
        Self::new(name, dims, mask)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn indices(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn population(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    fn values(&self, t: &DynTensor, frame: usize) -> Result<Vec<f64>> {
        if t.spatial_dims() != self.dims || frame >= t.frames() {
            return Err(Error::shape(format!(
                "ROI {:?} / frame {} against tensor {:?}",
                self.dims,
                frame,
                t.dims()
            )));
        }
        let t_len = t.frames();
        Ok(self
            .mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(v, _)| t.data()[v * t_len + frame])
            .collect())
    }

    pub fn mean(&self, t: &DynTensor, frame: usize) -> Result<f64> {
        let v = self.values(t, frame)?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Noise realizations of the same scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Vec<DynTensor>,
}

impl Ensemble {
    pub fn new(members: Vec<DynTensor>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::domain("ensemble needs at least one realization"))?;
        if members.iter().any(|m| m.dims() != first.dims()) {
            return Err(Error::shape("ensemble realizations differ in dims"));
        }
        Ok(Self { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[DynTensor] {
        &self.members
    }
}

/// `|c̄ − c_true| / c_true` where `c̄` averages the ROI mean over realizations.
pub fn ensemble_bias(e: &Ensemble, roi: &RoiMask, frame: usize, c_true: f64) -> Result<f64> {
    if !(c_true > 0.0) {
        return Err(Error::domain(format!("true ROI intensity {} must be > 0", c_true)));
    }
    let mut sum = 0.0;
    for m in &e.members {
        sum += roi.mean(m, frame)?;
    }
    let c_bar = sum / e.len() as f64;
    Ok((c_bar - c_true).abs() / c_true)
}

/// Background normalized standard deviation: the per-realization ratio of
/// sample standard deviation (N_b − 1 denominator) to mean over the
/// background ROI, averaged across realizations.
pub fn background_nsd(e: &Ensemble, bg: &RoiMask, frame: usize) -> Result<f64> {
    if bg.population() < 2 {
        return Err(Error::domain("background ROI needs at least two voxels"));
    }
    let mut acc = 0.0;
    for m in &e.members {
        let b = bg.values(m, frame)?;
        let nb = b.len() as f64;
        let mean = b.iter().sum::<f64>() / nb;
        if mean == 0.0 {
            return Err(Error::domain("background ROI has zero mean"));
        }
        let sd = (b.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nb - 1.0)).sqrt();
        acc += sd / mean;
    }
    Ok(acc / e.len() as f64)
}

/// One line of a metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    /// Frame index, or `"mean"` for the across-frame average.
    pub frame: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub bias: Option<f64>,
    pub nsd: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EvalParams {
    #[serde(default)]
    pub peak: Peak,
    #[serde(default)]
    pub ssim: SsimParams,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_opt(v: &[Option<f64>]) -> Option<f64> {
    let got: Vec<f64> = v.iter().flatten().copied().collect();
    (got.len() == v.len() && !got.is_empty()).then(|| mean(&got))
}

/// Per-frame metrics of each output against `truth`, followed by ensemble
/// rows when more than one output is given. Bias uses `bias_roi` with the
/// truth's ROI mean as reference; NSD uses `background`.
pub fn evaluate(
    truth: &DynTensor,
    outputs: &[(String, DynTensor)],
    bias_roi: Option<&RoiMask>,
    background: Option<&RoiMask>,
    params: &EvalParams,
) -> Result<Vec<MetricRow>> {
    let frames = truth.frames();
    let c_true: Vec<Option<f64>> = match bias_roi {
        Some(roi) => (0..frames).map(|t| roi.mean(truth, t).map(Some)).collect::<Result<_>>()?,
        None => vec![None; frames],
    };
    let mut rows = Vec::new();
    let mut per_output = Vec::new();
    for (name, out) in outputs {
        let p = psnr_per_frame(out, truth, params.peak)?;
        let s = ssim_per_frame(out, truth, &params.ssim)?;
        let single = Ensemble::new(vec![out.clone()])?;
        let mut b = Vec::with_capacity(frames);
        let mut n = Vec::with_capacity(frames);
        for t in 0..frames {
            b.push(match (bias_roi, c_true[t]) {
                (Some(roi), Some(c)) if c > 0.0 => Some(ensemble_bias(&single, roi, t, c)?),
                _ => None,
            });
            n.push(match background {
                Some(bg) => background_nsd(&single, bg, t).ok(),
                None => None,
            });
        }
        push_rows(&mut rows, name, &p, &s, &b, &n);
        per_output.push((p, s));
    }
    if outputs.len() > 1 {
        let ens = Ensemble::new(outputs.iter().map(|(_, t)| t.clone()).collect())?;
        let k = per_output.len() as f64;
        let p: Vec<f64> = (0..frames).map(|t| per_output.iter().map(|o| o.0[t]).sum::<f64>() / k).collect();
        let s: Vec<f64> = (0..frames).map(|t| per_output.iter().map(|o| o.1[t]).sum::<f64>() / k).collect();
        let mut b = Vec::with_capacity(frames);
        let mut n = Vec::with_capacity(frames);
        for t in 0..frames {
            b.push(match (bias_roi, c_true[t]) {
                (Some(roi), Some(c)) if c > 0.0 => Some(ensemble_bias(&ens, roi, t, c)?),
                _ => None,
            });
            n.push(background.and_then(|bg| background_nsd(&ens, bg, t).ok()));
        }
        push_rows(&mut rows, "ensemble", &p, &s, &b, &n);
    }
    Ok(rows)
}

fn push_rows(rows: &mut Vec<MetricRow>, name: &str, p: &[f64], s: &[f64], b: &[Option<f64>], n: &[Option<f64>]) {
    for t in 0..p.len() {
        rows.push(MetricRow {
            method: name.to_string(),
            frame: t.to_string(),
            psnr_db: p[t],
            ssim: s[t],
            bias: b[t],
            nsd: n[t],
        });
    }
    rows.push(MetricRow {
        method: name.to_string(),
        frame: "mean".into(),
        psnr_db: mean(p),
        ssim: mean(s),
        bias: mean_opt(b),
        nsd: mean_opt(n),
    });
}

fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{}", v)
    }
}

/// CSV with header `method,frame,psnr_db,ssim,bias,nsd`; missing values are
/// empty fields.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("method,frame,psnr_db,ssim,bias,nsd\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map(fmt_num).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.method.replace(',', "_"),
            r.frame,
            fmt_num(r.psnr_db),
            fmt_num(r.ssim),
            opt(r.bias),
            opt(r.nsd)
        );
    }
    s
}
