//! Checkpoint tensor containers and run manifests.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "PTNS"
//! version    u32      1
//! count      u32      number of records
//! per record:
//!   name_len u32, name (UTF-8)
//!   kind     u8       0 weight-matrix, 1 bias-vector, 2 other
//!   dtype    u8       0 = f32 (1 reserved for f64)
//!   rank     u8
//!   dims     rank x u64
//!   payload  prod(dims) x f32, row-major
//! ```
//!
//! Manifests are `key = value` text. Keys before the first `[checkpoint]`
//! section describe the run (`size` and `seed` are required, anything else is
//! kept as metadata); each `[checkpoint]` section carries `step` and `path`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PTNS";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorKind {
    WeightMatrix,
    BiasVector,
    Other,
}

impl TensorKind {
    /// Rank 2 reads as a weight matrix, rank 1 as a bias vector.
    pub fn infer(rank: usize) -> Self {
        match rank {
            2 => TensorKind::WeightMatrix,
            1 => TensorKind::BiasVector,
            _ => TensorKind::Other,
        }
    }

    fn code(self) -> u8 {
        match self {
            TensorKind::WeightMatrix => 0,
            TensorKind::BiasVector => 1,
            TensorKind::Other => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(TensorKind::WeightMatrix),
            1 => Ok(TensorKind::BiasVector),
            2 => Ok(TensorKind::Other),
            c => Err(Error::Format(format!("unknown tensor kind code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    /// Builds a record, inferring its kind from the rank.
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let kind = TensorKind::infer(shape.len());
        Self::with_kind(name, kind, shape, data)
    }

    pub fn with_kind(
        name: impl Into<String>,
        kind: TensorKind,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let record = TensorRecord {
            name: name.into(),
            kind,
            shape,
            data,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidTensor {
            name: self.name.clone(),
            reason,
        };
        if self.shape.is_empty() || self.shape.len() > u8::MAX as usize {
            return Err(bad(format!("rank {} out of range", self.shape.len())));
        }
        if self.shape.iter().any(|&d| d == 0) {
            return Err(bad(format!("shape {:?} has a zero dimension", self.shape)));
        }
        let expected = self
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("shape overflows".into()))?;
        if expected != self.data.len() {
            return Err(bad(format!(
                "shape {:?} implies {} values, data has {}",
                self.shape,
                expected,
                self.data.len()
            )));
        }
        match self.kind {
            TensorKind::WeightMatrix if self.rank() != 2 => {
                Err(bad("weight matrices must be rank 2".into()))
            }
            TensorKind::BiasVector if self.rank() != 1 => {
                Err(bad("bias vectors must be rank 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Serializes records into the container format.
pub fn encode_checkpoint<W: Write>(records: &[TensorRecord], mut out: W) -> Result<()> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        r.validate()?;
        if !seen.insert(r.name.as_str()) {
            return Err(Error::DuplicateName(r.name.clone()));
        }
    }
    let count = u32::try_from(records.len()).map_err(|_| Error::invalid("too many records"))?;
    out.write_all(&MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&count.to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        let len = u32::try_from(name.len()).map_err(|_| Error::invalid("tensor name too long"))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&[r.kind.code(), DTYPE_F32, r.rank() as u8])?;
        for &d in &r.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(r.data.len() * 4);
        for v in &r.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&payload)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_checkpoint(records: &[TensorRecord], destination: impl AsRef<Path>) -> Result<()> {
    let path = destination.as_ref();
    // Validate before touching the filesystem so a bad record leaves no partial file.
    encode_checkpoint(records, std::io::sink())?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    encode_checkpoint(records, BufWriter::new(file)).map_err(|e| match e {
        Error::Stream(io) => Error::io(path, io),
        other => other,
    })
}

/// Reads exactly `n` bytes, or reports how many were available.
fn read_bounded<R: Read>(r: &mut R, n: u64, record: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.by_ref().take(n).read_to_end(&mut buf)?;
    if (buf.len() as u64) < n {
        return Err(Error::Truncated {
            record: record.to_string(),
            expected: n,
            found: buf.len() as u64,
        });
    }
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, ctx: &str) -> Result<u32> {
    let b = read_bounded(r, 4, ctx)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

pub fn decode_checkpoint<R: Read>(mut input: R) -> Result<Vec<TensorRecord>> {
    let magic = read_bounded(&mut input, 4, "<header>")
        .map_err(|_| Error::Format("file too short for magic bytes".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}")));
    }
    let version = read_u32(&mut input, "<header>")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = read_u32(&mut input, "<header>")?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for index in 0..count {
        let placeholder = format!("<record {index}>");
        let name_len = read_u32(&mut input, &placeholder)?;
        let name_bytes = read_bounded(&mut input, u64::from(name_len), &placeholder)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format(format!("record {index} name is not UTF-8")))?;
        let tag = read_bounded(&mut input, 3, &name)?;
        let kind = TensorKind::from_code(tag[0])?;
        match tag[1] {
            DTYPE_F32 => {}
            DTYPE_F64 => return Err(Error::UnsupportedDtype(DTYPE_F64)),
            other => return Err(Error::UnsupportedDtype(other)),
        }
        let rank = tag[2] as usize;
        let dim_bytes = read_bounded(&mut input, 8 * rank as u64, &name)?;
        let shape: Vec<usize> = dim_bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .map(|d| usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large"))))
            .collect::<Result<_>>()?;
        let numel = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("record `{name}` shape overflows")))?;
        let payload = read_bounded(&mut input, numel, &name)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        records.push(TensorRecord::with_kind(name, kind, shape, data)?);
    }
    Ok(records)
}

pub fn read_checkpoint(source: impl AsRef<Path>) -> Result<Vec<TensorRecord>> {
    let path = source.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(BufReader::new(file)).map_err(|e| match e {
        Error::Stream(io) => Error::io(path, io),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointRef {
    pub step: u64,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunManifest {
    pub size: String,
    pub seed: u64,
    pub checkpoints: Vec<CheckpointRef>,
    pub metadata: BTreeMap<String, String>,
}

/// Step 0, powers of two up to 512, then every 1000 steps to 143000 (154 entries).
pub fn default_schedule() -> Vec<u64> {
    let mut steps = vec![0];
    steps.extend((0..10).map(|p| 1u64 << p));
    steps.extend((1..=143).map(|k| k * 1000));
    steps
}

impl RunManifest {
    pub fn new(size: impl Into<String>, seed: u64, checkpoints: Vec<CheckpointRef>) -> Result<Self> {
        let m = RunManifest {
            size: size.into(),
            seed,
            checkpoints,
            metadata: BTreeMap::new(),
        };
        m.validate()?;
        Ok(m)
    }

    /// A manifest over the default schedule with `step_<n>.ptns` paths.
    pub fn with_default_schedule(size: impl Into<String>, seed: u64) -> Self {
        let checkpoints = default_schedule()
            .into_iter()
            .map(|step| CheckpointRef {
                step,
                path: PathBuf::from(format!("step_{step}.ptns")),
            })
            .collect();
        RunManifest {
            size: size.into(),
            seed,
            checkpoints,
            metadata: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> Vec<u64> {
        self.checkpoints.iter().map(|c| c.step).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.checkpoints.is_empty() {
            return Err(Error::Manifest {
                line: 0,
                reason: "no checkpoints".into(),
            });
        }
        for w in self.checkpoints.windows(2) {
            if w[1].step <= w[0].step {
                return Err(Error::Manifest {
                    line: 0,
                    reason: format!("steps not strictly increasing ({} then {})", w[0].step, w[1].step),
                });
            }
        }
        Ok(())
    }

    /// Resolves relative checkpoint paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for c in &mut self.checkpoints {
            if c.path.is_relative() {
                c.path = base.join(&c.path);
            }
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "size = {}", self.size).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        for (k, v) in &self.metadata {
            writeln!(s, "{k} = {v}").unwrap();
        }
        for c in &self.checkpoints {
            writeln!(s, "\n[checkpoint]\nstep = {}\npath = {}", c.step, c.path.display()).unwrap();
        }
        s
    }
}

pub fn parse_manifest(text: &str) -> Result<RunManifest> {
    let err = |line: usize, reason: String| Error::Manifest { line, reason };
    let mut size = None;
    let mut seed = None;
    let mut metadata = BTreeMap::new();
    let mut checkpoints: Vec<CheckpointRef> = Vec::new();
    // (step, path, line of section header)
    let mut current: Option<(Option<u64>, Option<PathBuf>, usize)> = None;

    let finish = |cur: (Option<u64>, Option<PathBuf>, usize), out: &mut Vec<CheckpointRef>| {
        let (step, path, line) = cur;
        let step = step.ok_or_else(|| err(line, "checkpoint section missing `step`".into()))?;
        let path = path.ok_or_else(|| err(line, "checkpoint section missing `path`".into()))?;
        if let Some(prev) = out.last() {
            if step <= prev.step {
                return Err(err(
                    line,
                    format!("steps not strictly increasing ({} then {step})", prev.step),
                ));
            }
        }
        out.push(CheckpointRef { step, path });
        Ok(())
    };

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('[') {
            if line != "[checkpoint]" {
                return Err(err(lineno, format!("unknown section {line}")));
            }
            if let Some(cur) = current.take() {
                finish(cur, &mut checkpoints)?;
            }
            current = Some((None, None, lineno));
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(lineno, format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        match current.as_mut() {
            Some((step, path, _)) => match key {
                "step" => {
                    *step = Some(
                        value
                            .parse()
                            .map_err(|_| err(lineno, format!("bad step `{value}`")))?,
                    )
                }
                "path" => *path = Some(PathBuf::from(value)),
                other => return Err(err(lineno, format!("unknown checkpoint key `{other}`"))),
            },
            None => match key {
                "size" => size = Some(value.to_string()),
                "seed" => {
                    seed = Some(
                        value
                            .parse()
                            .map_err(|_| err(lineno, format!("bad seed `{value}`")))?,
                    )
                }
                _ => {
                    metadata.insert(key.to_string(), value.to_string());
                }
            },
        }
    }
    if let Some(cur) = current.take() {
        finish(cur, &mut checkpoints)?;
    }
    let size = size.ok_or_else(|| err(0, "missing required key `size`".into()))?;
    let seed = seed.ok_or_else(|| err(0, "missing required key `seed`".into()))?;
    if checkpoints.is_empty() {
        return Err(err(0, "no checkpoints".into()));
    }
    Ok(RunManifest {
        size,
        seed,
        checkpoints,
        metadata,
    })
}

/// Loads a manifest and resolves checkpoint paths relative to its directory.
pub fn load_manifest(source: impl AsRef<Path>) -> Result<RunManifest> {
    let path = source.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest = parse_manifest(&text)?;
    if let Some(dir) = path.parent() {
        manifest.resolve_paths(dir);
    }
    Ok(manifest)
}

pub fn save_manifest(manifest: &RunManifest, destination: impl AsRef<Path>) -> Result<()> {
    manifest.validate()?;
    let path = destination.as_ref();
    fs::write(path, manifest.to_text()).map_err(|e| Error::io(path, e))
}
