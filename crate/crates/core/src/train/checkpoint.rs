//! Binary parameter snapshots with a text sidecar for step and settings.
//!
//! Layout: `CAPS`, version (u32 LE), tensor count (u32 LE), then per tensor
//! name length (u32 LE), UTF-8 name, rank (u32 LE), dims (u64 LE each) and
//! the values as f32 LE. The sidecar `<path>.meta` holds `key = value` lines.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CAPS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub params: ParamSet<f32>,
    pub step: usize,
    /// Settings echoed from the run that produced the parameters.
    pub config: Vec<(String, String)>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn encode_params(params: &ParamSet<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + params.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(params.len()).map_err(|_| Error::contract("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (_, name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format {
            what: "checkpoint",
            detail: format!("truncated at byte {}", self.pos),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn bad(detail: String) -> Error {
    Error::Format { what: "checkpoint", detail }
}

pub fn decode_params(bytes: &[u8]) -> Result<(u32, ParamSet<f32>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("missing CAPS magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?).map_err(|e| bad(format!("tensor name: {e}")))?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad(format!("{name}: shape overflow")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| bad(format!("{name}: size overflow")))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
        params.insert(name, t)?;
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((version, params))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, encode_params(&self.params)?).map_err(|e| Error::io(path, e))?;
        let mut meta = format!("version = {}\nstep = {}\n", self.version, self.step);
        for (k, v) in &self.config {
            meta.push_str(&format!("{k} = {v}\n"));
        }
        let mp = meta_path(path);
        fs::write(&mp, meta).map_err(|e| Error::io(&mp, e))
    }

    /// Loads the parameters and, when present, the sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (version, params) = decode_params(&bytes)?;
        let mut ck = Self { version, params, step: 0, config: Vec::new() };
        let mp = meta_path(path);
        if let Ok(text) = fs::read_to_string(&mp) {
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| bad(format!("{}: line {line:?} is not key = value", mp.display())))?;
                let (k, v) = (k.trim(), v.trim());
                match k {
                    "step" => ck.step = v.parse().map_err(|_| bad(format!("bad step {v:?}")))?,
                    "version" => {}
                    _ => ck.config.push((k.to_string(), v.to_string())),
                }
            }
        }
        Ok(ck)
    }
}

/// Element-wise mean of several checkpoints with identical tensor names and
/// shapes; the step is the largest input step and settings come from the
/// last input.
pub fn average_checkpoints(paths: &[PathBuf]) -> Result<Checkpoint> {
    let first = paths.first().ok_or_else(|| Error::contract("no checkpoints to average"))?;
    let cks = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    let base = &cks[0];
    for (ck, path) in cks.iter().zip(paths).skip(1) {
        if ck.params.len() != base.params.len() {
            return Err(Error::contract(format!(
                "{} has {} tensors but {} has {}",
                path.display(),
                ck.params.len(),
                first.display(),
                base.params.len()
            )));
        }
        for ((_, a, ta), (_, b, tb)) in base.params.iter().zip(ck.params.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::contract(format!(
                    "tensor {b} {:?} in {} does not match {a} {:?} in {}",
                    tb.shape(),
                    path.display(),
                    ta.shape(),
                    first.display()
                )));
            }
        }
    }
    let n = cks.len() as f64;
    let mut params = base.params.clone();
    for id in base.params.ids() {
        let t = base.params.get(id);
        let mean = Tensor::from_fn(t.shape().to_vec(), |k| {
            (cks.iter().map(|c| c.params.get(id).data()[k] as f64).sum::<f64>() / n) as f32
        });
        params.set(id, mean)?;
    }
    Ok(Checkpoint {
        version: VERSION,
        params,
        step: cks.iter().map(|c| c.step).max().unwrap_or(0),
        config: cks.last().map(|c| c.config.clone()).unwrap_or_default(),
    })
}
