//! Binary file formats for expert buffers, convex trajectories and synthetic
//! sets, plus the storage comparison between the first two.
//!
//! All integers are `u32` little-endian. Layouts:
//!
//! ```text
//! MTT buffer   "MTTB" u8:1  spec  u32:K  u32:G  G x (u32:rank, rank x u32:dim)
//!              (K+1) x W f32 checkpoints   K x G f64 delta norms
//! convex       "MCTB" u8:1  spec  u32:K  u32:A  A x u32:anchor
//!              A x W f32 anchor checkpoints   (K+1) x G f64 beta table
//! synthetic    "SYND" u8:1  u32:C  u32:ipc  u32:D  (C*ipc) x u32 labels
//!              (C*ipc) x D f64 features  f64 alpha
//! spec         u32:input_dim  u32:H  H x u32:width  u32:classes
//! ```
//!
//! Checkpoint payloads are written group by group in layer order. Buffer ids
//! and per-checkpoint accuracies are not part of the format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::SyntheticDataset;
use crate::error::{Error, Result};
use crate::expert::MttBuffer;
use crate::model::{ModelSpec, ParamVector};
use crate::numeric::Tensor;
use crate::trajectory::ConvexTrajectory;

pub const MTT_MAGIC: &[u8; 4] = b"MTTB";
pub const CONVEX_MAGIC: &[u8; 4] = b"MCTB";
pub const SYNTHETIC_MAGIC: &[u8; 4] = b"SYND";
pub const VERSION: u8 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn header(magic: &[u8; 4]) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(magic);
        w.0.push(VERSION);
        w
    }

    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("field exceeds u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn spec(&mut self, spec: &ModelSpec) {
        self.u32(spec.input_dim);
        self.u32(spec.hidden_widths.len());
        for &w in &spec.hidden_widths {
            self.u32(w);
        }
        self.u32(spec.num_classes);
    }

    fn params_f32(&mut self, p: &ParamVector) {
        for g in p.groups() {
            for &v in g.data() {
                self.f32(v);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 5 {
            return Err(Error::Truncated {
                expected: 5,
                actual: bytes.len(),
            });
        }
        if &bytes[..4] != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            )));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        Ok(Reader { bytes, pos: 5 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32(&mut self) -> Result<f64> {
        let b = self.take(4)?;
        Ok(f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn spec(&mut self) -> Result<ModelSpec> {
        let input_dim = self.u32()?;
        let hidden = self.u32()?;
        if hidden > 1024 {
            return Err(Error::Format(format!("implausible hidden layer count {hidden}")));
        }
        let hidden_widths = (0..hidden).map(|_| self.u32()).collect::<Result<_>>()?;
        let num_classes = self.u32()?;
        ModelSpec::new(input_dim, hidden_widths, num_classes)
            .map_err(|e| Error::Format(format!("bad model spec: {e}")))
    }

    /// Fails unless exactly `remaining` bytes are left.
    fn expect_remaining(&self, remaining: usize) -> Result<()> {
        let expected = self.pos + remaining;
        match self.bytes.len() {
            n if n < expected => Err(Error::Truncated { expected, actual: n }),
            n if n > expected => Err(Error::Format(format!(
                "{} trailing bytes after payload",
                n - expected
            ))),
            _ => Ok(()),
        }
    }

    fn params_f32(&mut self, spec: &ModelSpec) -> Result<ParamVector> {
        let groups = spec
            .group_shapes()
            .into_iter()
            .map(|shape| {
                let n = shape.iter().product::<usize>();
                let data = (0..n).map(|_| self.f32()).collect::<Result<Vec<_>>>()?;
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        ParamVector::from_groups(spec, groups)
    }
}

pub fn encode_buffer(buffer: &MttBuffer) -> Vec<u8> {
    let mut w = Writer::header(MTT_MAGIC);
    w.spec(&buffer.spec);
    w.u32(buffer.epochs());
    let shapes = buffer.spec.group_shapes();
    w.u32(shapes.len());
    for s in &shapes {
        w.u32(s.len());
        for &d in s {
            w.u32(d);
        }
    }
    for c in buffer.checkpoints() {
        w.params_f32(c);
    }
    for row in buffer.delta_norms() {
        for &v in row {
            w.f64(v);
        }
    }
    w.0
}

pub fn decode_buffer(bytes: &[u8]) -> Result<MttBuffer> {
    let mut r = Reader::open(bytes, MTT_MAGIC)?;
    let spec = r.spec()?;
    let epochs = r.u32()?;
    let groups = r.u32()?;
    let shapes = spec.group_shapes();
    if groups != shapes.len() {
        return Err(Error::Format(format!(
            "file declares {groups} parameter groups, model has {}",
            shapes.len()
        )));
    }
    for (g, expected) in shapes.iter().enumerate() {
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if &dims != expected {
            return Err(Error::Format(format!(
                "group {g} has shape {dims:?}, model expects {expected:?}"
            )));
        }
    }
    r.expect_remaining((epochs + 1) * spec.num_params() * 4 + epochs * groups * 8)?;
    let checkpoints = (0..=epochs)
        .map(|_| r.params_f32(&spec))
        .collect::<Result<Vec<_>>>()?;
    let norms = (0..epochs)
        .map(|_| (0..groups).map(|_| r.f64()).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    MttBuffer::with_delta_norms(0, spec, checkpoints, norms)
        .map_err(|e| Error::Format(format!("inconsistent buffer: {e}")))
}

pub fn encode_convex(traj: &ConvexTrajectory) -> Vec<u8> {
    let mut w = Writer::header(CONVEX_MAGIC);
    w.spec(&traj.spec);
    w.u32(traj.epochs());
    w.u32(traj.anchors().len());
    for &a in traj.anchors() {
        w.u32(a);
    }
    for p in traj.anchor_params() {
        w.params_f32(p);
    }
    for row in traj.beta() {
        for &v in row {
            w.f64(v);
        }
    }
    w.0
}

pub fn decode_convex(bytes: &[u8]) -> Result<ConvexTrajectory> {
    let mut r = Reader::open(bytes, CONVEX_MAGIC)?;
    let spec = r.spec()?;
    let epochs = r.u32()?;
    let count = r.u32()?;
    if count > epochs + 1 {
        return Err(Error::Format(format!("{count} anchors for K = {epochs}")));
    }
    let anchors = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let groups = spec.num_groups();
    r.expect_remaining(count * spec.num_params() * 4 + (epochs + 1) * groups * 8)?;
    let anchor_params = (0..count)
        .map(|_| r.params_f32(&spec))
        .collect::<Result<Vec<_>>>()?;
    let beta = (0..=epochs)
        .map(|_| (0..groups).map(|_| r.f64()).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    ConvexTrajectory::new(spec, anchors, anchor_params, beta)
        .map_err(|e| Error::Format(format!("inconsistent convex trajectory: {e}")))
}

pub fn encode_synthetic(s: &SyntheticDataset) -> Vec<u8> {
    let mut w = Writer::header(SYNTHETIC_MAGIC);
    w.u32(s.num_classes());
    w.u32(s.ipc());
    w.u32(s.feature_dim());
    for &l in s.labels() {
        w.u32(l);
    }
    for &v in s.features().data() {
        w.f64(v);
    }
    w.f64(s.alpha());
    w.0
}

pub fn decode_synthetic(bytes: &[u8]) -> Result<SyntheticDataset> {
    let mut r = Reader::open(bytes, SYNTHETIC_MAGIC)?;
    let classes = r.u32()?;
    let ipc = r.u32()?;
    let dim = r.u32()?;
    let n = classes * ipc;
    r.expect_remaining(n * 4 + n * dim * 8 + 8)?;
    let labels = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let features = (0..n * dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let alpha = r.f64()?;
    SyntheticDataset::new(Tensor::matrix(n, dim, features)?, labels, classes, ipc, alpha)
        .map_err(|e| Error::Format(format!("inconsistent synthetic set: {e}")))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_buffer(path: impl AsRef<Path>, buffer: &MttBuffer) -> Result<()> {
    write_bytes(path.as_ref(), &encode_buffer(buffer))
}

pub fn read_buffer(path: impl AsRef<Path>) -> Result<MttBuffer> {
    decode_buffer(&read_bytes(path.as_ref())?)
}

pub fn write_convex(path: impl AsRef<Path>, traj: &ConvexTrajectory) -> Result<()> {
    write_bytes(path.as_ref(), &encode_convex(traj))
}

pub fn read_convex(path: impl AsRef<Path>) -> Result<ConvexTrajectory> {
    decode_convex(&read_bytes(path.as_ref())?)
}

pub fn write_synthetic(path: impl AsRef<Path>, s: &SyntheticDataset) -> Result<()> {
    write_bytes(path.as_ref(), &encode_synthetic(s))
}

pub fn read_synthetic(path: impl AsRef<Path>) -> Result<SyntheticDataset> {
    decode_synthetic(&read_bytes(path.as_ref())?)
}

/// Serialized sizes of a full expert buffer and its convexified form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub bytes_mtt: u64,
    pub bytes_conv: u64,
    /// `bytes_conv / bytes_mtt`.
    pub ratio: f64,
    pub epochs: usize,
    pub num_params: usize,
    pub beta_entries: usize,
}

impl StorageReport {
    fn new(bytes_mtt: u64, bytes_conv: u64, traj: &ConvexTrajectory) -> Self {
        StorageReport {
            bytes_mtt,
            bytes_conv,
            ratio: bytes_conv as f64 / bytes_mtt as f64,
            epochs: traj.epochs(),
            num_params: traj.spec.num_params(),
            beta_entries: traj.beta().len() * traj.spec.num_groups(),
        }
    }
}

/// Sizes measured from the serialized encodings.
pub fn storage_report(buffer: &MttBuffer, traj: &ConvexTrajectory) -> StorageReport {
    StorageReport::new(
        encode_buffer(buffer).len() as u64,
        encode_convex(traj).len() as u64,
        traj,
    )
}

/// Sizes measured from files on disk.
pub fn storage_report_files(mtt_path: impl AsRef<Path>, conv_path: impl AsRef<Path>) -> Result<StorageReport> {
    let size = |p: &Path| fs::metadata(p).map(|m| m.len()).map_err(|e| Error::io(p, e));
    let bytes_mtt = size(mtt_path.as_ref())?;
    let bytes_conv = size(conv_path.as_ref())?;
    let traj = read_convex(conv_path.as_ref())?;
    Ok(StorageReport::new(bytes_mtt, bytes_conv, &traj))
}
