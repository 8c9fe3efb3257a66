//! Two-tissue compartment kinetics, frame integration, and phantom synthesis.
//!
//! Times inside the kinetic model are in minutes; frame protocols are in
//! seconds, which is how acquisition schedules are usually written down.

mod noise;
mod phantom;

pub use noise::{apply_poisson, calibrate_counts_scale, jitter_kinetics};
pub use phantom::{render_dynamic, Ellipsoid, PhantomConfig, PhantomSpec, Region, RegionConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Resolution of the convolution grid, 0.1 s.
pub const CONVOLUTION_STEP_MIN: f64 = 0.1 / 60.0;

/// Rate constants of the two-tissue compartment model.
///
/// `k1` in mL/min/mL, `k2..k4` in 1/min, `v` is the blood volume fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticParams {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub v: f64,
}

impl KineticParams {
    pub const fn new(k1: f64, k2: f64, k3: f64, k4: f64, v: f64) -> Self {
        Self { k1, k2, k3, k4, v }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.k1, self.k2, self.k3, self.k4, self.v];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::domain(format!("kinetic parameters must be finite and >= 0: {:?}", self)));
        }
        if self.v > 1.0 {
            return Err(Error::domain(format!("blood volume fraction {} exceeds 1", self.v)));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.k1, self.k2, self.k3, self.k4, self.v]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }
}

/// Mean FDG kinetics for the six simulated brain tissues.
///
/// The thalamus k2 is printed as "0160" in the source table; 0.160 is assumed.
pub const BRAIN_FDG_KINETICS: [(&str, KineticParams); 6] = [
    ("gray_matter", KineticParams::new(0.080, 0.140, 0.170, 0.013, 0.103)),
    ("white_matter", KineticParams::new(0.050, 0.110, 0.050, 0.006, 0.026)),
    ("caudate", KineticParams::new(0.070, 0.170, 0.190, 0.016, 0.101)),
    ("putamen", KineticParams::new(0.090, 0.160, 0.170, 0.010, 0.092)),
    ("thalamus", KineticParams::new(0.110, 0.160, 0.140, 0.012, 0.152)),
    ("tumor", KineticParams::new(0.130, 0.100, 0.150, 0.015, 0.173)),
];

/// Plasma input `A₁·t·e^{−λ₁t} + A₂·e^{−λ₂t} + A₃·e^{−λ₃t}` (t in minutes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputFunction {
    pub a1: f64,
    pub lambda1: f64,
    pub a2: f64,
    pub lambda2: f64,
    pub a3: f64,
    pub lambda3: f64,
}

impl Default for InputFunction {
    /// Feng FDG constants.
    fn default() -> Self {
        Self {
            a1: 851.1,
            lambda1: 4.134,
            a2: 21.88,
            lambda2: 0.1191,
            a3: 20.81,
            lambda3: 0.01043,
        }
    }
}

impl InputFunction {
    pub fn value(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::domain(format!("input function evaluated at t = {}", t)));
        }
        Ok(self.eval(t))
    }

    #[inline]
    fn eval(&self, t: f64) -> f64 {
        self.a1 * t * (-self.lambda1 * t).exp()
            + self.a2 * (-self.lambda2 * t).exp()
            + self.a3 * (-self.lambda3 * t).exp()
    }

    /// Closed-form ∫ₐᵇ C_p(t) dt.
    pub fn integral(&self, a: f64, b: f64) -> Result<f64> {
        if !(a >= 0.0 && b >= a) {
            return Err(Error::domain(format!("bad integration interval [{}, {}]", a, b)));
        }
        let ramp = |t: f64| {
            if self.lambda1 == 0.0 {
                self.a1 * t * t / 2.0
            } else {
                let l = self.lambda1;
                -self.a1 * (-l * t).exp() * (l * t + 1.0) / (l * l)
            }
        };
        let expo = |amp: f64, l: f64, t: f64| {
            if l == 0.0 {
                amp * t
            } else {
                -amp * (-l * t).exp() / l
            }
        };
        let anti = |t: f64| ramp(t) + expo(self.a2, self.lambda2, t) + expo(self.a3, self.lambda3, t);
        Ok(anti(b) - anti(a))
    }
}

/// A curve sampled on a uniform grid starting at t = 0 (minutes).
#[derive(Debug, Clone, PartialEq)]
pub struct SampledCurve {
    step: f64,
    values: Vec<f64>,
}

impl SampledCurve {
    pub fn new(step: f64, values: Vec<f64>) -> Result<Self> {
        if !(step > 0.0) || values.len() < 2 {
            return Err(Error::domain("curve needs a positive step and at least two samples"));
        }
        Ok(Self { step, values })
    }

    pub fn from_fn(t_end: f64, step: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        let n = (t_end / step).ceil() as usize;
        Self::new(step, (0..=n).map(|i| f(i as f64 * step)).collect())
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn t_end(&self) -> f64 {
        (self.values.len() - 1) as f64 * self.step
    }

    /// Linear interpolation.
    pub fn at(&self, t: f64) -> f64 {
        let x = (t / self.step).max(0.0);
        let i = (x.floor() as usize).min(self.values.len() - 2);
        let frac = x - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }

    /// ∫ₐᵇ of the piecewise-linear interpolant; exact for linear curves.
    pub fn integrate(&self, a: f64, b: f64) -> Result<f64> {
        let slack = 1e-9 * self.t_end().max(1.0);
        if !(a >= 0.0 && b >= a && b <= self.t_end() + slack) {
            return Err(Error::domain(format!(
                "interval [{}, {}] outside curve support [0, {}]",
                a,
                b,
                self.t_end()
            )));
        }
        let b = b.min(self.t_end());
        let ia = (a / self.step).floor() as usize;
        let ib = ((b / self.step).floor() as usize).min(self.values.len() - 2);
        if ia >= ib {
            // a and b in the same cell
            return Ok(0.5 * (self.at(a) + self.at(b)) * (b - a));
        }
        let mut acc = 0.5 * (self.at(a) + self.values[ia + 1]) * ((ia + 1) as f64 * self.step - a);
        for i in ia + 1..ib {
            acc += 0.5 * (self.values[i] + self.values[i + 1]) * self.step;
        }
        acc += 0.5 * (self.values[ib] + self.at(b)) * (b - ib as f64 * self.step);
        Ok(acc)
    }
}

/// Ordered frame durations in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameProtocol {
    durations_s: Vec<f64>,
}

impl FrameProtocol {
    pub fn new(durations_s: Vec<f64>) -> Result<Self> {
        if durations_s.is_empty() {
            return Err(Error::domain("frame protocol has no frames"));
        }
        if durations_s.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::domain("frame durations must be positive"));
        }
        Ok(Self { durations_s })
    }

    /// 4×20 s, 4×40 s, 4×60 s, 4×180 s, 8×300 s: 24 frames over one hour.
    pub fn fdg_24_frame() -> Self {
        let mut d = Vec::with_capacity(24);
        for (count, len) in [(4, 20.0), (4, 40.0), (4, 60.0), (4, 180.0), (8, 300.0)] {
            d.extend(std::iter::repeat(len).take(count));
        }
        Self { durations_s: d }
    }

    pub fn durations_s(&self) -> &[f64] {
        &self.durations_s
    }

    pub fn frames(&self) -> usize {
        self.durations_s.len()
    }

    pub fn total_s(&self) -> f64 {
        self.durations_s.iter().sum()
    }

    /// `(start, end)` of every frame, in seconds, contiguous from zero.
    pub fn intervals_s(&self) -> Vec<(f64, f64)> {
        let mut t = 0.0;
        self.durations_s
            .iter()
            .map(|d| {
                let s = t;
                t += d;
                (s, t)
            })
            .collect()
    }
}

/// Eigen-decomposition of the 2TCM impulse response into exponentials
/// `Σ cᵢ·e^{−aᵢt}`.
fn impulse_terms(p: &KineticParams) -> Vec<(f64, f64)> {
    if p.k1 == 0.0 {
        return Vec::new();
    }
    if p.k3 == 0.0 {
        // C₂ receives nothing; single tissue compartment
        return vec![(p.k1, p.k2)];
    }
    let s = p.k2 + p.k3 + p.k4;
    let disc = (s * s - 4.0 * p.k2 * p.k4).sqrt();
    let a1 = 0.5 * (s - disc);
    let a2 = 0.5 * (s + disc);
    let c1 = p.k1 * (p.k3 + p.k4 - a1) / (a2 - a1);
    let c2 = p.k1 * (a2 - p.k3 - p.k4) / (a2 - a1);
    vec![(c1, a1), (c2, a2)]
}

/// PET TAC `(1−V)(C₁+C₂) + V·C_p` sampled on `[0, t_end]` with at most
/// [`CONVOLUTION_STEP_MIN`] spacing; the grid lands exactly on `t_end`.
pub fn tissue_tac_curve(p: &KineticParams, input: &InputFunction, t_end: f64) -> Result<SampledCurve> {
    p.validate()?;
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::domain(format!("TAC end time {} must be positive", t_end)));
    }
    let n = (t_end / CONVOLUTION_STEP_MIN).ceil().max(1.0) as usize;
    let h = t_end / n as f64;
    let terms = impulse_terms(p);
    let decay: Vec<f64> = terms.iter().map(|&(_, a)| (-a * h).exp()).collect();
    let mut conv = vec![0.0; terms.len()];
    let mut values = Vec::with_capacity(n + 1);
    let mut cp_prev = input.eval(0.0);
    values.push(p.v * cp_prev);
    for i in 1..=n {
        let cp = input.eval(i as f64 * h);
        // trapezoid update of ∫ C_p(s)·e^{−a(t−s)} ds over one step
        for (y, &e) in conv.iter_mut().zip(&decay) {
            *y = e * *y + 0.5 * h * (e * cp_prev + cp);
        }
        let tissue: f64 = terms.iter().zip(&conv).map(|(&(c, _), y)| c * y).sum();
        values.push(((1.0 - p.v) * tissue + p.v * cp).max(0.0));
        cp_prev = cp;
    }
    SampledCurve::new(h, values)
}

/// PET activity at a single time point (minutes).
pub fn tissue_tac(p: &KineticParams, input: &InputFunction, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::domain(format!("TAC evaluated at t = {}", t)));
    }
    if t == 0.0 {
        p.validate()?;
        return Ok(p.v * input.eval(0.0));
    }
    let curve = tissue_tac_curve(p, input, t)?;
    Ok(*curve.values.last().expect("non-empty curve"))
}

/// Mean of `tac` over each frame. The curve is in minutes and must cover the
/// whole protocol.
pub fn frame_average(tac: &SampledCurve, protocol: &FrameProtocol) -> Result<Vec<f64>> {
    protocol
        .intervals_s()
        .into_iter()
        .map(|(s, e)| {
            let (a, b) = (s / 60.0, e / 60.0);
            Ok(tac.integrate(a, b)? / (b - a))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Adaptive Simpson quadrature, used as an independent reference.
    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
            let m = 0.5 * (a + b);
            (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b))
        }
        fn recurse(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let left = simpson(f, a, m);
            let right = simpson(f, m, b);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            recurse(f, a, m, left, tol / 2.0, depth - 1) + recurse(f, m, b, right, tol / 2.0, depth - 1)
        }
        recurse(f, a, b, simpson(f, a, b), tol, 50)
    }

    /// RK4 on the compartment ODEs, independent of the exponential solution.
    pub(crate) fn ode_tac(p: &KineticParams, input: &InputFunction, t: f64, dt: f64) -> f64 {
        let n = (t / dt).round() as usize;
        let h = t / n as f64;
        let cp = |s: f64| input.value(s).unwrap();
        let deriv = |s: f64, c1: f64, c2: f64| {
            (
                p.k1 * cp(s) - (p.k2 + p.k3) * c1 + p.k4 * c2,
                p.k3 * c1 - p.k4 * c2,
            )
        };
        let (mut c1, mut c2) = (0.0, 0.0);
        for i in 0..n {
            let s = i as f64 * h;
            let k1 = deriv(s, c1, c2);
            let k2 = deriv(s + h / 2.0, c1 + h / 2.0 * k1.0, c2 + h / 2.0 * k1.1);
            let k3 = deriv(s + h / 2.0, c1 + h / 2.0 * k2.0, c2 + h / 2.0 * k2.1);
            let k4 = deriv(s + h, c1 + h * k3.0, c2 + h * k3.1);
            c1 += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            c2 += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        (1.0 - p.v) * (c1 + c2) + p.v * cp(t)
    }

    #[test]
    fn input_function_at_zero() {
        let f = InputFunction::default();
        assert_eq!(f.value(0.0).unwrap(), f.a2 + f.a3);
        assert!(matches!(f.value(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_amplitudes_give_zero() {
        let f = InputFunction { a1: 0.0, a2: 0.0, a3: 0.0, ..Default::default() };
        for t in [0.0, 0.3, 5.0, 60.0] {
            assert_eq!(f.value(t).unwrap(), 0.0);
        }
    }

    #[test]
    fn input_integral_matches_quadrature() {
        let f = InputFunction::default();
        let closed = f.integral(0.0, 60.0).unwrap();
        let g = |t: f64| f.value(t).unwrap();
        let quad = adaptive_simpson(&g, 0.0, 60.0, 1e-10);
        assert!(((closed - quad) / quad).abs() < 1e-6, "{} vs {}", closed, quad);
    }

    #[test]
    fn input_decays() {
        let f = InputFunction::default();
        assert!(f.value(1e4).unwrap() < 1e-10);
    }

    #[test]
    fn no_uptake_is_blood_only() {
        let f = InputFunction::default();
        let p = KineticParams::new(0.0, 0.1, 0.05, 0.01, 0.2);
        for t in [0.0, 1.0, 10.0, 60.0] {
            assert_eq!(tissue_tac(&p, &f, t).unwrap(), 0.2 * f.value(t).unwrap());
        }
    }

    #[test]
    fn tac_at_zero_is_blood_fraction() {
        let f = InputFunction::default();
        let (_, p) = BRAIN_FDG_KINETICS[0];
        assert_eq!(tissue_tac(&p, &f, 0.0).unwrap(), p.v * f.value(0.0).unwrap());
    }

    #[test]
    fn gray_matter_matches_ode() {
        let f = InputFunction::default();
        let p = KineticParams::new(0.080, 0.140, 0.170, 0.013, 0.103);
        for t in [1.0, 10.0, 60.0] {
            let fast = tissue_tac(&p, &f, t).unwrap();
            let ode = ode_tac(&p, &f, t, 0.01);
            assert!(((fast - ode) / ode).abs() <= 0.005, "t={} {} vs {}", t, fast, ode);
        }
    }

    #[test]
    fn irreversible_and_one_tissue_cases_match_ode() {
        let f = InputFunction::default();
        for p in [
            KineticParams::new(0.1, 0.15, 0.08, 0.0, 0.05),
            KineticParams::new(0.1, 0.15, 0.0, 0.02, 0.05),
            KineticParams::new(0.1, 0.02, 0.0, 0.02, 0.0),
        ] {
            for t in [1.0, 30.0] {
                let fast = tissue_tac(&p, &f, t).unwrap();
                let ode = ode_tac(&p, &f, t, 0.01);
                assert!(((fast - ode) / ode).abs() <= 0.005);
            }
        }
    }

    #[test]
    fn tac_nonnegative_on_grid() {
        let f = InputFunction::default();
        for (_, p) in BRAIN_FDG_KINETICS {
            let c = tissue_tac_curve(&p, &f, 60.0).unwrap();
            assert!(c.values().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let f = InputFunction::default();
        assert!(tissue_tac_curve(&KineticParams::new(-0.1, 0.1, 0.1, 0.1, 0.1), &f, 1.0).is_err());
        assert!(tissue_tac_curve(&KineticParams::new(0.1, 0.1, 0.1, 0.1, 1.5), &f, 1.0).is_err());
    }

    #[test]
    fn constant_tac_frames_are_constant() {
        let proto = FrameProtocol::fdg_24_frame();
        let c = SampledCurve::from_fn(60.0, 0.01, |_| 3.5).unwrap();
        for v in frame_average(&c, &proto).unwrap() {
            assert!((v - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_tac_frames_are_midpoints() {
        let proto = FrameProtocol::fdg_24_frame();
        let c = SampledCurve::from_fn(60.0, 0.013, |t| t).unwrap();
        let avgs = frame_average(&c, &proto).unwrap();
        for (v, (s, e)) in avgs.iter().zip(proto.intervals_s()) {
            let mid = 0.5 * (s + e) / 60.0;
            assert!((v - mid).abs() < 1e-10, "{} vs {}", v, mid);
        }
    }

    #[test]
    fn fdg_protocol_spans_one_hour() {
        let p = FrameProtocol::fdg_24_frame();
        assert_eq!(p.frames(), 24);
        assert_eq!(p.total_s(), 3600.0);
        assert_eq!(p.intervals_s().last().unwrap().1, 3600.0);
    }

    #[test]
    fn protocol_validation() {
        assert!(FrameProtocol::new(vec![]).is_err());
        assert!(FrameProtocol::new(vec![10.0, 0.0]).is_err());
    }

    #[test]
    fn frame_average_bounded_by_curve() {
        let f = InputFunction::default();
        let proto = FrameProtocol::fdg_24_frame();
        let (_, p) = BRAIN_FDG_KINETICS[5];
        let c = tissue_tac_curve(&p, &f, 60.0).unwrap();
        let avgs = frame_average(&c, &proto).unwrap();
        let max = c.values().iter().cloned().fold(0.0, f64::max);
        assert!(avgs.iter().all(|v| *v >= 0.0 && *v <= max));
    }
}
