//! On-disk formats: raw little-endian tensors with a JSON sidecar, ROI sets,
//! kernel dumps, objective traces and reports.
//!
//! A tensor stored at `name.bin` has its header in `name.json`. The payload is
//! the voxel-major, frame-fastest element order of [`DynTensor`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::SparseKernel;
use crate::kinetics::FrameProtocol;
use crate::metrics::RoiMask;
use crate::sparse::ObjectiveTerms;
use crate::tensor::DynTensor;

pub const VOXEL_ORDER: &str = "mnqt-row-major";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f64le")]
    F64Le,
    #[serde(rename = "f32le")]
    F32Le,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64Le => 8,
            Dtype::F32Le => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorHeader {
    pub dims: [usize; 4],
    pub frame_durations_s: Vec<f64>,
    pub units: String,
    pub dtype: Dtype,
    pub voxel_order: String,
}

impl TensorHeader {
    pub fn new(dims: [usize; 4], protocol: &FrameProtocol, units: impl Into<String>) -> Self {
        Self {
            dims,
            frame_durations_s: protocol.durations_s().to_vec(),
            units: units.into(),
            dtype: Dtype::F64Le,
            voxel_order: VOXEL_ORDER.into(),
        }
    }

    pub fn protocol(&self) -> Result<FrameProtocol> {
        FrameProtocol::new(self.frame_durations_s.clone())
    }

    fn validate(&self, source: &str) -> Result<()> {
        let parse = |detail: String| Error::Parse {
            source_name: source.to_string(),
            detail,
        };
        if self.voxel_order != VOXEL_ORDER {
            return Err(parse(format!("voxel_order {:?} is not {:?}", self.voxel_order, VOXEL_ORDER)));
        }
        if self.dims.contains(&0) {
            return Err(parse(format!("dims {:?} contain zero", self.dims)));
        }
        if self.frame_durations_s.len() != self.dims[3] {
            return Err(parse(format!(
                "frame_durations_s has {} entries for {} frames",
                self.frame_durations_s.len(),
                self.dims[3]
            )));
        }
        Ok(())
    }
}

/// Sidecar path for a payload path.
pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Byte offset of a serde_json error position.
fn json_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

/// Parses JSON, reporting errors with the byte offset they occur at.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, source: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        source_name: source.to_string(),
        detail: format!("{} (byte offset {})", e, json_offset(text, e.line(), e.column())),
    })
}

pub fn to_json_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable value");
    s.push('\n');
    s
}

pub fn encode_payload(t: &DynTensor, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * dtype.size());
    match dtype {
        Dtype::F64Le => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32Le => t.data().iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    out
}

pub fn decode_payload(bytes: &[u8], header: &TensorHeader, source: &str) -> Result<DynTensor> {
    let n: usize = header.dims.iter().product();
    let expected = n * header.dtype.size();
    if bytes.len() != expected {
        let at = bytes.len().min(expected);
        return Err(Error::Parse {
            source_name: source.to_string(),
            detail: format!(
                "payload is {} bytes, header implies {} (mismatch at byte offset {})",
                bytes.len(),
                expected,
                at
            ),
        });
    }
    let data: Vec<f64> = match header.dtype {
        Dtype::F64Le => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
        Dtype::F32Le => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect(),
    };
    DynTensor::from_vec(header.dims, data)
}

pub fn write_tensor(bin: &Path, t: &DynTensor, header: &TensorHeader) -> Result<()> {
    if header.dims != t.dims() {
        return Err(Error::shape(format!("header dims {:?} for tensor {:?}", header.dims, t.dims())));
    }
    header.validate(&bin.display().to_string())?;
    write_file(&sidecar_path(bin), to_json_pretty(header).as_bytes())?;
    write_file(bin, &encode_payload(t, header.dtype))
}

pub fn read_header(bin: &Path) -> Result<TensorHeader> {
    let side = sidecar_path(bin);
    let text = String::from_utf8(read_file(&side)?).map_err(|e| Error::Parse {
        source_name: side.display().to_string(),
        detail: format!("not UTF-8 (byte offset {})", e.utf8_error().valid_up_to()),
    })?;
    let source = side.display().to_string();
    let header: TensorHeader = parse_json(&text, &source)?;
    header.validate(&source)?;
    Ok(header)
}

pub fn read_tensor(bin: &Path) -> Result<(DynTensor, TensorHeader)> {
    let header = read_header(bin)?;
    let bytes = read_file(bin)?;
    let t = decode_payload(&bytes, &header, &bin.display().to_string())?;
    Ok((t, header))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoiEntry {
    name: String,
    voxels: Vec<usize>,
}

/// Named ROIs over one spatial grid; `bias` and `background` pick the ROIs
/// used for bias and NSD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiFile {
    pub dims: [usize; 3],
    pub bias: Option<String>,
    pub background: Option<String>,
    rois: Vec<RoiEntry>,
}

impl RoiFile {
    pub fn new(dims: [usize; 3]) -> Self {
        Self {
            dims,
            bias: None,
            background: None,
            rois: Vec::new(),
        }
    }

    pub fn push(&mut self, roi: &RoiMask) -> Result<()> {
        if roi.dims() != self.dims {
            return Err(Error::shape(format!("ROI {} dims {:?} vs {:?}", roi.name, roi.dims(), self.dims)));
        }
        self.rois.push(RoiEntry {
            name: roi.name.clone(),
            voxels: roi.indices(),
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<RoiMask> {
        let e = self
            .rois
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::config(format!("no ROI named {:?}", name)))?;
        RoiMask::from_indices(&e.name, self.dims, &e.voxels)
    }

    pub fn names(&self) -> Vec<&str> {
        self.rois.iter().map(|r| r.name.as_str()).collect()
    }

    pub fn bias_roi(&self) -> Result<Option<RoiMask>> {
        self.bias.as_deref().map(|n| self.get(n)).transpose()
    }

    pub fn background_roi(&self) -> Result<Option<RoiMask>> {
        self.background.as_deref().map(|n| self.get(n)).transpose()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, to_json_pretty(self).as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8_lossy(&bytes);
        let f: RoiFile = parse_json(&text, &path.display().to_string())?;
        for r in &f.rois {
            RoiMask::from_indices(&r.name, f.dims, &r.voxels)?;
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelHeader {
    pub n: usize,
    pub nnz: usize,
    /// Layout of the payload: indptr as u64, then indices as u32, then
    /// weights as f64, all little-endian.
    pub layout: String,
}

const KERNEL_LAYOUT: &str = "csr:indptr-u64le,indices-u32le,weights-f64le";

pub fn write_kernel(bin: &Path, k: &SparseKernel) -> Result<()> {
    let header = KernelHeader {
        n: k.n(),
        nnz: k.nnz(),
        layout: KERNEL_LAYOUT.into(),
    };
    let mut out = Vec::with_capacity((k.n() + 1) * 8 + k.nnz() * 12);
    k.indptr().iter().for_each(|v| out.extend_from_slice(&(*v as u64).to_le_bytes()));
    k.indices().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    k.weights().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    write_file(&sidecar_path(bin), to_json_pretty(&header).as_bytes())?;
    write_file(bin, &out)
}

pub fn read_kernel(bin: &Path) -> Result<SparseKernel> {
    let side = sidecar_path(bin);
    let text = String::from_utf8_lossy(&read_file(&side)?).into_owned();
    let h: KernelHeader = parse_json(&text, &side.display().to_string())?;
    let bytes = read_file(bin)?;
    let source = bin.display().to_string();
    let expected = (h.n + 1) * 8 + h.nnz * 12;
    if h.layout != KERNEL_LAYOUT || bytes.len() != expected {
        return Err(Error::Parse {
            source_name: source,
            detail: format!(
                "kernel payload is {} bytes, header implies {} (mismatch at byte offset {})",
                bytes.len(),
                expected,
                bytes.len().min(expected)
            ),
        });
    }
    let (ip, rest) = bytes.split_at((h.n + 1) * 8);
    let (ix, w) = rest.split_at(h.nnz * 4);
    let indptr = ip.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let indices = ix.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    let weights = w.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    SparseKernel::from_csr(h.n, indptr, indices, weights)
}

/// CSV with header `iteration,data_fit,l1,total`; row 0 is the initial point.
pub fn trace_csv(trace: &[ObjectiveTerms]) -> String {
    let mut s = String::from("iteration,data_fit,l1,total\n");
    for (i, t) in trace.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{}", i, t.data_fit, t.l1, t.total);
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

pub fn read_text(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    String::from_utf8(bytes).map_err(|e| Error::Parse {
        source_name: path.display().to_string(),
        detail: format!("not UTF-8 (byte offset {})", e.utf8_error().valid_up_to()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (DynTensor, TensorHeader) {
        let t = DynTensor::from_fn([3, 2, 2, 4], |[m, n, q, t]| (m as f64 - 1.3) * 0.1 + (n * q) as f64 / 3.0 + t as f64 * 1e-7).unwrap();
        let p = FrameProtocol::new(vec![10.0, 20.0, 30.0, 60.0]).unwrap();
        let h = TensorHeader::new(t.dims(), &p, "kBq/mL");
        (t, h)
    }

    #[test]
    fn f64_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (t, h) = sample();
        let path = dir.path().join("x.bin");
        write_tensor(&path, &t, &h).unwrap();
        let (back, h2) = read_tensor(&path).unwrap();
        assert_eq!(h2, h);
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(fs::metadata(&path).unwrap().len(), 48 * 8);
    }

    #[test]
    fn f32_roundtrip_within_single_precision() {
        let dir = tempfile::tempdir().unwrap();
        let (t, mut h) = sample();
        h.dtype = Dtype::F32Le;
        let path = dir.path().join("x.bin");
        write_tensor(&path, &t, &h).unwrap();
        let (back, _) = read_tensor(&path).unwrap();
        assert!(back.max_abs_diff(&t).unwrap() < 1e-6);
        assert_eq!(fs::metadata(&path).unwrap().len(), 48 * 4);
    }

    #[test]
    fn missing_header_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let (t, h) = sample();
        let path = dir.path().join("x.bin");
        write_tensor(&path, &t, &h).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("frame_durations_s");
        fs::write(sidecar_path(&path), v.to_string()).unwrap();
        let err = read_tensor(&path).unwrap_err().to_string();
        assert!(err.contains("frame_durations_s"), "{}", err);
        assert!(err.contains("byte offset"), "{}", err);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let (t, h) = sample();
        let path = dir.path().join("x.bin");
        write_tensor(&path, &t, &h).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..100]).unwrap();
        match read_tensor(&path) {
            Err(Error::Parse { detail, .. }) => assert!(detail.contains("byte offset 100"), "{}", detail),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn header_consistency_checked() {
        let (_, mut h) = sample();
        h.frame_durations_s.pop();
        assert!(h.validate("x").is_err());
        let (_, mut h) = sample();
        h.voxel_order = "tqnm".into();
        assert!(h.validate("x").is_err());
        let text = r#"{"dims":[1,1,1,1],"frame_durations_s":[1],"units":"","dtype":"f16le","voxel_order":"mnqt-row-major"}"#;
        assert!(matches!(parse_json::<TensorHeader>(text, "h"), Err(Error::Parse { .. })));
    }

    #[test]
    fn json_offsets() {
        let text = "{\n  \"a\": 1,\n  \"b\": x\n}";
        let err = parse_json::<serde_json::Value>(text, "t").unwrap_err().to_string();
        let at = text.find('x').unwrap();
        assert!(err.contains(&format!("byte offset {}", at)), "{} vs {}", err, at);
    }

    #[test]
    fn roi_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = RoiFile::new([2, 2, 1]);
        f.push(&RoiMask::from_indices("tumor", [2, 2, 1], &[0, 3]).unwrap()).unwrap();
        f.push(&RoiMask::from_indices("bg", [2, 2, 1], &[1, 2]).unwrap()).unwrap();
        f.bias = Some("tumor".into());
        f.background = Some("bg".into());
        let p = dir.path().join("rois.json");
        f.write(&p).unwrap();
        let g = RoiFile::read(&p).unwrap();
        assert_eq!(g, f);
        assert_eq!(g.bias_roi().unwrap().unwrap().indices(), vec![0, 3]);
        assert!(g.get("nope").is_err());
        assert!(f.push(&RoiMask::from_indices("x", [4, 1, 1], &[0]).unwrap()).is_err());
    }

    #[test]
    fn kernel_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let k = SparseKernel::from_csr(3, vec![0, 2, 3, 5], vec![0, 2, 1, 0, 2], vec![0.5, 0.5, 1.0, 0.25, 0.75]).unwrap();
        let p = dir.path().join("k.bin");
        write_kernel(&p, &k).unwrap();
        assert_eq!(read_kernel(&p).unwrap(), k);
    }

    #[test]
    fn trace_csv_format() {
        let t = vec![
            ObjectiveTerms {
                data_fit: 1.5,
                l1: 2.0,
                total: 1.7,
            };
            2
        ];
        assert_eq!(trace_csv(&t), "iteration,data_fit,l1,total\n0,1.5,2,1.7\n1,1.5,2,1.7\n");
    }
}
