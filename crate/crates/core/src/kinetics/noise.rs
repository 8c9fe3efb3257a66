//! Seeded randomness: kinetic jitter and image-domain Poisson noise.
//!
//! Poisson draws use one ChaCha8 stream per tensor element (stream id = element
//! offset), so results do not depend on how the work is split across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use super::{FrameProtocol, KineticParams};
use crate::error::{Error, Result};
use crate::tensor::DynTensor;

/// Draws every parameter from `N(pᵢ, (cv·pᵢ)²)`, clamped at zero (and V at one).
pub fn jitter_kinetics(p: &KineticParams, cv: f64, seed: u64) -> Result<KineticParams> {
    if !(cv >= 0.0 && cv.is_finite()) {
        return Err(Error::domain(format!("coefficient of variation {} must be >= 0", cv)));
    }
    if cv == 0.0 {
        return Ok(*p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let standard = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = p.as_array();
    for x in out.iter_mut() {
        let z: f64 = standard.sample(&mut rng);
        *x = (*x + cv * *x * z).max(0.0);
    }
    out[4] = out[4].min(1.0);
    Ok(KineticParams::from_array(out))
}

/// `y = Poisson(s·x·Δt) / (s·Δt)` per element, with Δt the frame duration in
/// seconds and `s` the counts scale.
pub fn apply_poisson(x: &DynTensor, protocol: &FrameProtocol, counts_scale: f64, seed: u64) -> Result<DynTensor> {
    if !(counts_scale > 0.0 && counts_scale.is_finite()) {
        return Err(Error::domain(format!("counts scale {} must be > 0", counts_scale)));
    }
    if protocol.frames() != x.frames() {
        return Err(Error::shape(format!(
            "protocol has {} frames, tensor has {}",
            protocol.frames(),
            x.frames()
        )));
    }
    if let Some(bad) = x.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::domain(format!("Poisson noise needs finite non-negative activity, found {}", bad)));
    }
    let base = ChaCha8Rng::seed_from_u64(seed);
    let durations = protocol.durations_s();
    let t_len = x.frames();
    let data: Vec<f64> = x
        .data()
        .par_iter()
        .enumerate()
        .with_min_len(1024)
        .map(|(k, &v)| {
            if v == 0.0 {
                return 0.0;
            }
            let gain = counts_scale * durations[k % t_len];
            let mut rng = base.clone();
            rng.set_stream(k as u64);
            poisson_draw(v * gain, &mut rng) / gain
        })
        .collect();
    DynTensor::from_vec(x.dims(), data)
}

fn poisson_draw(mean: f64, rng: &mut impl Rng) -> f64 {
    match Poisson::new(mean) {
        Ok(d) => d.sample(rng),
        // beyond the sampler's range the normal limit is exact to double precision
        Err(_) => (mean + mean.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal)).round().max(0.0),
    }
}

/// Counts scale giving relative per-voxel noise `target` in `frame`, using the
/// mean activity over `roi` (voxel indices) of the noise-free image.
pub fn calibrate_counts_scale(
    truth: &DynTensor,
    protocol: &FrameProtocol,
    roi: &[usize],
    frame: usize,
    target: f64,
) -> Result<f64> {
    if roi.is_empty() || frame >= truth.frames() || !(target > 0.0) {
        return Err(Error::domain("calibration needs a non-empty ROI, a valid frame and target > 0"));
    }
    let t_len = truth.frames();
    let mean = roi.iter().map(|&v| truth.data()[v * t_len + frame]).sum::<f64>() / roi.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::domain("calibration ROI has zero mean activity"));
    }
    Ok(1.0 / (target * target * mean * protocol.durations_s()[frame]))
}
