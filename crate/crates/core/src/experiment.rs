//! File-level commands: simulate a phantom study, denoise tensor files,
//! evaluate outputs against the truth.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{
    parse_json, read_tensor, read_text, to_json_pretty, trace_csv, write_kernel, write_tensor, write_text, RoiFile,
    TensorHeader,
};
use crate::kinetics::{
    apply_poisson, calibrate_counts_scale, jitter_kinetics, render_dynamic, FrameProtocol, PhantomConfig, PhantomSpec,
};
use crate::metrics::{evaluate, metrics_csv, EvalParams, MetricRow, RoiMask};
use crate::pipeline::{denoise, DenoiseConfig, DenoiseOutput};
use crate::tensor::DynTensor;

pub const TRUTH_FILE: &str = "truth.bin";
pub const ROI_FILE: &str = "rois.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const UNITS: &str = "kBq/mL";

pub fn noisy_file(i: usize) -> String {
    format!("noisy_{:03}.bin", i)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Frame lengths in seconds; the 24-frame FDG schedule when absent.
    pub durations_s: Option<Vec<f64>>,
}

impl ProtocolConfig {
    pub fn build(&self) -> Result<FrameProtocol> {
        match &self.durations_s {
            Some(d) => FrameProtocol::new(d.clone()),
            None => Ok(FrameProtocol::fdg_24_frame()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Fixed counts scale. When absent the scale is calibrated so the
    /// calibration ROI has relative noise `target_nsd` in the calibration frame.
    pub counts_scale: Option<f64>,
    pub target_nsd: f64,
    pub calibration_roi: String,
    /// Defaults to the last frame.
    pub calibration_frame: Option<usize>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            counts_scale: None,
            target_nsd: 0.1,
            calibration_roi: "white_matter".into(),
            calibration_frame: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiConfig {
    pub bias: String,
    pub background: String,
    /// Erode region masks by one voxel in-plane to avoid partial-volume edges.
    pub core_only: bool,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            bias: "tumor".into(),
            background: "white_matter".into(),
            core_only: true,
        }
    }
}

fn one() -> usize {
    1
}

/// Experiment file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub phantom: PhantomConfig,
    /// Phantom TOML file, relative to the experiment file; replaces `phantom`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom_path: Option<PathBuf>,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default = "one")]
    pub n_realizations: usize,
    /// Base seed; realization `i` uses `seed + i` unless `seeds` is given.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// Coefficient of variation applied to each region's kinetic parameters.
    #[serde(default)]
    pub kinetic_cv: f64,
    #[serde(default)]
    pub denoise: DenoiseConfig,
    #[serde(default)]
    pub rois: RoiConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            phantom_path: None,
            protocol: ProtocolConfig::default(),
            noise: NoiseConfig::default(),
            n_realizations: 1,
            seed: 0,
            seeds: None,
            kinetic_cv: 0.0,
            denoise: DenoiseConfig::default(),
            rois: RoiConfig::default(),
            output_dir: None,
        }
    }
}

fn toml_error(source: &str, e: toml::de::Error) -> Error {
    Error::Config(format!("{}: {}", source, e))
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str, source: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| toml_error(source, e))
    }

    /// Reads an experiment file, inlining any referenced phantom file.
    pub fn load(path: &Path) -> Result<Self> {
        let source = path.display().to_string();
        let mut spec = Self::from_toml_str(&read_text(path)?, &source)?;
        if let Some(rel) = spec.phantom_path.take() {
            let p = path.parent().unwrap_or(Path::new(".")).join(rel);
            spec.phantom = toml::from_str(&read_text(&p)?).map_err(|e| toml_error(&p.display().to_string(), e))?;
        }
        Ok(spec)
    }

    /// Fills in the seed list (optionally from a new base seed) and checks
    /// every field.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Result<Self> {
        if self.phantom_path.is_some() {
            return Err(Error::config("phantom_path must be inlined with ExperimentSpec::load"));
        }
        if self.n_realizations == 0 {
            return Err(Error::config("n_realizations must be >= 1"));
        }
        if let Some(s) = seed_override {
            self.seed = s;
            self.seeds = None;
        }
        let seeds = match self.seeds.take() {
            Some(s) if s.len() != self.n_realizations => {
                return Err(Error::config(format!(
                    "seeds has {} entries for {} realizations",
                    s.len(),
                    self.n_realizations
                )))
            }
            Some(s) => s,
            None => (0..self.n_realizations as u64).map(|i| self.seed.wrapping_add(i)).collect(),
        };
        self.seeds = Some(seeds);
        if !(self.kinetic_cv >= 0.0 && self.kinetic_cv.is_finite()) {
            return Err(Error::config("kinetic_cv must be finite and >= 0"));
        }
        if let Some(s) = self.noise.counts_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config("noise.counts_scale must be > 0"));
            }
        } else if !(self.noise.target_nsd > 0.0) {
            return Err(Error::config("noise.target_nsd must be > 0"));
        }
        self.protocol.build()?;
        self.denoise.validate()?;
        Ok(self)
    }

    pub fn seed_list(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![self.seed])
    }

    /// SHA-256 over the canonical JSON form of every field that affects results.
    pub fn config_hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.output_dir = None;
        semantic.denoise.debug_dumps = false;
        let json = serde_json::to_string(&semantic).expect("serializable spec");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Reads denoiser settings from a TOML file holding either a bare config or
/// an experiment file with a `[denoise]` table.
pub fn load_denoise_config(path: &Path) -> Result<DenoiseConfig> {
    let source = path.display().to_string();
    let text = read_text(path)?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| toml_error(&source, e))?;
    let cfg: DenoiseConfig = match table.get("denoise") {
        Some(v) => v.clone().try_into().map_err(|e| toml_error(&source, e))?,
        None => toml::from_str(&text).map_err(|e| toml_error(&source, e))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub counts_scale: f64,
    pub dims: [usize; 4],
    pub frame_durations_s: Vec<f64>,
    /// Output file name to SHA-256 of its contents.
    pub files: BTreeMap<String, String>,
    pub spec: ExperimentSpec,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        parse_json(&read_text(path)?, &path.display().to_string())
    }
}

/// Everything a simulation produces, before it is written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub phantom: PhantomSpec,
    pub protocol: FrameProtocol,
    pub truth: DynTensor,
    pub noisy: Vec<DynTensor>,
    pub rois: RoiFile,
    pub counts_scale: f64,
}

fn region_rois(phantom: &PhantomSpec, core_only: bool) -> Result<RoiFile> {
    let mut f = RoiFile::new(phantom.dims());
    for (label, region) in phantom.regions() {
        let mut mask = phantom.label_mask(*label, core_only);
        if !mask.iter().any(|&b| b) {
            mask = phantom.label_mask(*label, false);
        }
        if mask.iter().any(|&b| b) {
            f.push(&RoiMask::new(&region.name, phantom.dims(), mask)?)?;
        }
    }
    Ok(f)
}

/// Runs a resolved experiment in memory.
pub fn simulate(spec: &ExperimentSpec) -> Result<Simulation> {
    let protocol = spec.protocol.build()?;
    let mut phantom = spec.phantom.build()?;
    if spec.kinetic_cv > 0.0 {
        for (label, region) in phantom.regions_mut().iter_mut() {
            let seed = spec.seed ^ (u64::from(*label)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            region.kinetics = jitter_kinetics(&region.kinetics, spec.kinetic_cv, seed)?;
        }
    }
    let truth = render_dynamic(&phantom, &protocol)?;
    let mut rois = region_rois(&phantom, spec.rois.core_only)?;
    for name in [&spec.rois.bias, &spec.rois.background] {
        if !rois.names().contains(&name.as_str()) {
            return Err(Error::config(format!("ROI {:?} is not a phantom region", name)));
        }
    }
    rois.bias = Some(spec.rois.bias.clone());
    rois.background = Some(spec.rois.background.clone());
    let counts_scale = match spec.noise.counts_scale {
        Some(s) => s,
        None => {
            let roi = rois.get(&spec.noise.calibration_roi)?;
            let frame = spec.noise.calibration_frame.unwrap_or(protocol.frames() - 1);
            calibrate_counts_scale(&truth, &protocol, &roi.indices(), frame, spec.noise.target_nsd)?
        }
    };
    let noisy = spec
        .seed_list()
        .iter()
        .map(|&s| apply_poisson(&truth, &protocol, counts_scale, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Simulation {
        phantom,
        protocol,
        truth,
        noisy,
        rois,
        counts_scale,
    })
}

/// Simulates and writes the truth, noisy realizations, ROIs and manifest.
pub fn cmd_simulate(spec: &ExperimentSpec, out: &Path) -> Result<Manifest> {
    let spec = spec.clone().resolve(None)?;
    let sim = simulate(&spec)?;
    let header = TensorHeader::new(sim.truth.dims(), &sim.protocol, UNITS);
    let mut names = vec![TRUTH_FILE.to_string()];
    write_tensor(&out.join(TRUTH_FILE), &sim.truth, &header)?;
    for (i, y) in sim.noisy.iter().enumerate() {
        let name = noisy_file(i);
        write_tensor(&out.join(&name), y, &header)?;
        names.push(name);
    }
    sim.rois.write(&out.join(ROI_FILE))?;
    names.push(ROI_FILE.into());
    let mut files = BTreeMap::new();
    for n in names {
        files.insert(n.clone(), sha256_file(&out.join(&n))?);
        if n.ends_with(".bin") {
            let side = n.replace(".bin", ".json");
            files.insert(side.clone(), sha256_file(&out.join(&side))?);
        }
    }
    let manifest = Manifest {
        config_hash: spec.config_hash(),
        seeds: spec.seed_list(),
        counts_scale: sim.counts_scale,
        dims: sim.truth.dims(),
        frame_durations_s: sim.protocol.durations_s().to_vec(),
        files,
        spec,
    };
    write_text(&out.join(MANIFEST_FILE), &to_json_pretty(&manifest))?;
    info!(
        "simulated {} realizations at counts scale {:.4} into {}",
        manifest.seeds.len(),
        manifest.counts_scale,
        out.display()
    );
    Ok(manifest)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "output".into())
}

/// Output paths of one denoised input.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseFiles {
    pub x_hat: PathBuf,
    pub report: PathBuf,
    pub trace: PathBuf,
}

impl DenoiseFiles {
    pub fn for_input(input: &Path, out: &Path) -> Self {
        let s = stem(input);
        Self {
            x_hat: out.join(format!("{}_xhat.bin", s)),
            report: out.join(format!("{}_report.json", s)),
            trace: out.join(format!("{}_trace.csv", s)),
        }
    }
}

fn write_denoised(input: &Path, header: &TensorHeader, result: &DenoiseOutput, out: &Path) -> Result<DenoiseFiles> {
    let files = DenoiseFiles::for_input(input, out);
    write_tensor(&files.x_hat, &result.x_hat, header)?;
    write_text(&files.report, &to_json_pretty(&result.report))?;
    write_text(&files.trace, &trace_csv(&result.report.trace))?;
    if let Some(d) = &result.dumps {
        let s = stem(input);
        let dump = |name: &str, t: &DynTensor, units: &str| {
            let mut h = header.clone();
            h.dims = t.dims();
            h.units = units.into();
            if h.frame_durations_s.len() != t.frames() {
                h.frame_durations_s = vec![1.0; t.frames()];
            }
            write_tensor(&out.join(format!("{}_{}.bin", s, name)), t, &h)
        };
        dump("alpha", &d.alpha, "coefficients")?;
        dump("beta", &d.beta, "coefficients")?;
        dump("alpha_hat", &d.alpha_hat, "coefficients")?;
        write_kernel(&out.join(format!("{}_kernel.bin", s)), &d.kernel)?;
    }
    Ok(files)
}

/// Denoises each input file (in parallel) and writes the estimate, report
/// and objective trace next to each other in `out`.
pub fn cmd_denoise(inputs: &[PathBuf], cfg: &DenoiseConfig, out: &Path) -> Result<Vec<DenoiseFiles>> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::config("no input tensors given"));
    }
    let stems: std::collections::BTreeSet<String> = inputs.iter().map(|p| stem(p)).collect();
    if stems.len() != inputs.len() {
        return Err(Error::config("input file names must be distinct"));
    }
    let loaded = inputs.iter().map(|p| read_tensor(p)).collect::<Result<Vec<_>>>()?;
    let results = loaded
        .par_iter()
        .map(|(y, h)| denoise(y, &h.protocol()?, cfg))
        .collect::<Result<Vec<_>>>()?;
    inputs
        .iter()
        .zip(&loaded)
        .zip(&results)
        .map(|((p, (_, h)), r)| write_denoised(p, h, r, out))
        .collect()
}

/// Metric rows for `outputs` against `truth`, written to `out_csv` if given.
pub fn cmd_evaluate(
    truth: &Path,
    outputs: &[PathBuf],
    rois: Option<&Path>,
    params: &EvalParams,
    out_csv: Option<&Path>,
) -> Result<Vec<MetricRow>> {
    if outputs.is_empty() {
        return Err(Error::config("no outputs to evaluate"));
    }
    let (truth_t, _) = read_tensor(truth)?;
    let mut named = Vec::with_capacity(outputs.len());
    for p in outputs {
        let (t, _) = read_tensor(p)?;
        if t.dims() != truth_t.dims() {
            return Err(Error::shape(format!(
                "{} has dims {:?}, truth has {:?}",
                p.display(),
                t.dims(),
                truth_t.dims()
            )));
        }
        named.push((stem(p), t));
    }
    let roi_file = rois.map(RoiFile::read).transpose()?;
    let (bias, background) = match &roi_file {
        Some(f) => (f.bias_roi()?, f.background_roi()?),
        None => (None, None),
    };
    let rows = evaluate(&truth_t, &named, bias.as_ref(), background.as_ref(), params)?;
    if let Some(p) = out_csv {
        write_text(p, &metrics_csv(&rows))?;
    }
    Ok(rows)
}
