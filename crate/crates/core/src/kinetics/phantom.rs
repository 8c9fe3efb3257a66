//! Labelled phantoms and their noise-free dynamic rendering.
//!
//! Geometry is given in normalized coordinates: every axis spans [−1, 1]
//! across the volume and voxel centres sit at `2(i + ½)/len − 1`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    frame_average, tissue_tac_curve, FrameProtocol, InputFunction, KineticParams, BRAIN_FDG_KINETICS,
};
use crate::error::{Error, Result};
use crate::tensor::DynTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub kinetics: KineticParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    dims: [usize; 3],
    labels: Vec<u32>,
    regions: BTreeMap<u32, Region>,
    input: InputFunction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Six-tissue brain stand-in (labels 1..=6 in table order).
    #[default]
    Brain,
    Empty,
}

/// One `[[region]]` entry of a phantom file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub label: u32,
    #[serde(default)]
    pub name: Option<String>,
    /// `[K1, k2, k3, k4, V]`
    #[serde(default)]
    pub kinetics: Option<[f64; 5]>,
    #[serde(default)]
    pub ellipsoid: Option<Ellipsoid>,
}

/// Phantom file contents.
///
/// ```toml
/// dims = [32, 32, 4]
/// layout = "brain"          # or "empty"
///
/// [input]                   # optional, Feng constants by default
/// a1 = 851.1
/// lambda1 = 4.134
/// a2 = 21.88
/// lambda2 = 0.1191
/// a3 = 20.81
/// lambda3 = 0.01043
///
/// [[region]]                # painted in order after the layout
/// label = 7
/// name = "lesion"
/// kinetics = [0.13, 0.10, 0.15, 0.015, 0.173]
/// ellipsoid = { center = [0.2, 0.1, 0.0], radii = [0.1, 0.1, 0.5] }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    #[serde(default)]
    pub layout: Layout,
    #[serde(default)]
    pub input: Option<InputFunction>,
    #[serde(default)]
    pub region: Vec<RegionConfig>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32, 4],
            layout: Layout::Brain,
            input: None,
            region: Vec::new(),
        }
    }
}

impl PhantomConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            source_name: "phantom config".into(),
            detail: e.to_string(),
        })
    }

    pub fn build(&self) -> Result<PhantomSpec> {
        let base = match self.layout {
            Layout::Brain => PhantomSpec::brain(self.dims)?,
            Layout::Empty => PhantomSpec::new(
                self.dims,
                vec![0; self.dims.iter().product()],
                BTreeMap::new(),
            )?,
        };
        let PhantomSpec {
            dims,
            mut labels,
            mut regions,
            ..
        } = base;
        for rc in &self.region {
            if rc.label == 0 && (rc.kinetics.is_some() || rc.name.is_some()) {
                return Err(Error::config("label 0 is background and takes no kinetics"));
            }
            if let Some(k) = rc.kinetics {
                let kinetics = KineticParams::from_array(k);
                kinetics.validate()?;
                let name = rc
                    .name
                    .clone()
                    .or_else(|| regions.get(&rc.label).map(|r| r.name.clone()))
                    .unwrap_or_else(|| format!("region_{}", rc.label));
                regions.insert(rc.label, Region { name, kinetics });
            } else if let (Some(name), Some(r)) = (&rc.name, regions.get_mut(&rc.label)) {
                r.name = name.clone();
            }
            if let Some(e) = rc.ellipsoid {
                if e.radii.iter().any(|r| !(*r > 0.0)) {
                    return Err(Error::config(format!("region {}: ellipsoid radii must be > 0", rc.label)));
                }
                for (v, p) in voxel_centres(dims).enumerate() {
                    if e.contains(p) {
                        labels[v] = rc.label;
                    }
                }
            }
        }
        let spec = PhantomSpec::new(dims, labels, regions)?
            .with_input(self.input.unwrap_or_default());
        spec.validate()?;
        Ok(spec)
    }
}

fn voxel_centres(dims: [usize; 3]) -> impl Iterator<Item = [f64; 3]> {
    let c = |i: usize, len: usize| 2.0 * (i as f64 + 0.5) / len as f64 - 1.0;
    (0..dims[0]).flat_map(move |m| {
        (0..dims[1]).flat_map(move |n| (0..dims[2]).map(move |q| [c(m, dims[0]), c(n, dims[1]), c(q, dims[2])]))
    })
}

impl PhantomSpec {
    pub fn new(dims: [usize; 3], labels: Vec<u32>, regions: BTreeMap<u32, Region>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("phantom dims must be >= 1, got {:?}", dims)));
        }
        if labels.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "label map has {} voxels, dims {:?} need {}",
                labels.len(),
                dims,
                dims.iter().product::<usize>()
            )));
        }
        Ok(Self {
            dims,
            labels,
            regions,
            input: InputFunction::default(),
        })
    }

    pub fn with_input(mut self, input: InputFunction) -> Self {
        self.input = input;
        self
    }

    /// Procedural six-tissue head: gray-matter rim around white matter with
    /// paired caudate, putamen and thalamus nuclei and a single tumour.
    pub fn brain(dims: [usize; 3]) -> Result<Self> {
        let mut labels = vec![0u32; dims.iter().product()];
        let head = Ellipsoid { center: [0.0, 0.0, 0.0], radii: [0.92, 0.80, 1.8] };
        let white = Ellipsoid { center: [0.0, 0.0, 0.0], radii: [0.74, 0.62, 1.8] };
        let pairs = |label: u32, c: [f64; 2], r: [f64; 2]| {
            [-1.0, 1.0].map(|s| (label, Ellipsoid { center: [c[0], s * c[1], 0.0], radii: [r[0], r[1], 1.8] }))
        };
        let mut shapes = vec![(1, head), (2, white)];
        shapes.extend(pairs(3, [-0.25, 0.18], [0.13, 0.09]));
        shapes.extend(pairs(4, [0.0, 0.40], [0.20, 0.09]));
        shapes.extend(pairs(5, [0.22, 0.13], [0.11, 0.10]));
        shapes.push((6, Ellipsoid { center: [0.45, -0.30, 0.0], radii: [0.13, 0.13, 0.9] }));
        for (v, p) in voxel_centres(dims).enumerate() {
            for (label, e) in &shapes {
                if e.contains(p) {
                    labels[v] = *label;
                }
            }
        }
        let regions = BRAIN_FDG_KINETICS
            .iter()
            .enumerate()
            .map(|(i, (name, k))| {
                (
                    i as u32 + 1,
                    Region {
                        name: name.to_string(),
                        kinetics: *k,
                    },
                )
            })
            .collect();
        Self::new(dims, labels, regions)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn regions(&self) -> &BTreeMap<u32, Region> {
        &self.regions
    }

    pub fn regions_mut(&mut self) -> &mut BTreeMap<u32, Region> {
        &mut self.regions
    }

    pub fn input(&self) -> &InputFunction {
        &self.input
    }

    pub fn label_of(&self, name: &str) -> Option<u32> {
        self.regions.iter().find(|(_, r)| r.name == name).map(|(l, _)| *l)
    }

    /// Every non-zero label present in the map needs kinetics.
    pub fn validate(&self) -> Result<()> {
        for &l in &self.labels {
            if l != 0 && !self.regions.contains_key(&l) {
                return Err(Error::config(format!("label {} has no kinetics entry", l)));
            }
        }
        for r in self.regions.values() {
            r.kinetics.validate()?;
        }
        Ok(())
    }

    /// Voxels carrying `label`. With `core_only`, voxels touching a different
    /// label in-plane (4-neighbourhood) are dropped.
    pub fn label_mask(&self, label: u32, core_only: bool) -> Vec<bool> {
        let [m_len, n_len, q_len] = self.dims;
        let at = |m: usize, n: usize, q: usize| self.labels[(m * n_len + n) * q_len + q];
        let mut mask = vec![false; self.labels.len()];
        for m in 0..m_len {
            for n in 0..n_len {
                for q in 0..q_len {
                    if at(m, n, q) != label {
                        continue;
                    }
                    let inside = !core_only
                        || (m > 0
                            && n > 0
                            && m + 1 < m_len
                            && n + 1 < n_len
                            && at(m - 1, n, q) == label
                            && at(m + 1, n, q) == label
                            && at(m, n - 1, q) == label
                            && at(m, n + 1, q) == label);
                    mask[(m * n_len + n) * q_len + q] = inside;
                }
            }
        }
        mask
    }
}

/// Noise-free dynamic image: every voxel carries the frame-averaged TAC of
/// its region; background is zero.
pub fn render_dynamic(spec: &PhantomSpec, protocol: &FrameProtocol) -> Result<DynTensor> {
    spec.validate()?;
    let t_end = protocol.total_s() / 60.0;
    let present: std::collections::BTreeSet<u32> = spec.labels.iter().copied().filter(|&l| l != 0).collect();
    let frames: BTreeMap<u32, Vec<f64>> = present
        .into_par_iter()
        .map(|l| {
            let curve = tissue_tac_curve(&spec.regions[&l].kinetics, &spec.input, t_end)?;
            Ok((l, frame_average(&curve, protocol)?))
        })
        .collect::<Result<_>>()?;
    let [m, n, q] = spec.dims;
    let t_len = protocol.frames();
    let mut data = vec![0.0; m * n * q * t_len];
    data.par_chunks_mut(t_len).zip(&spec.labels).for_each(|(row, l)| {
        if let Some(tac) = frames.get(l) {
            row.copy_from_slice(tac);
        }
    });
    DynTensor::from_vec([m, n, q, t_len], data)
}
