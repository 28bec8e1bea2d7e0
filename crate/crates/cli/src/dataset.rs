//! Binary dataset files (`HMDS`) and the `synthetic:<task>:<seed>` pseudo-path.

use std::path::Path;

use hmnas_core::data::{Dataset, Synthetic};
use hmnas_core::Error;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"HMDS";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 6;

pub fn encode(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() * (data.sample_len() * 4 + 4));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, data.len() as u32, data.channels as u32, data.height as u32, data.width as u32, data.classes as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (i, &label) in data.labels.iter().enumerate() {
        let px = &data.pixels[i * data.sample_len()..(i + 1) * data.sample_len()];
        px.iter().for_each(|p| out.extend_from_slice(&p.to_le_bytes()));
        out.extend_from_slice(&(label as u32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> hmnas_core::Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("truncated file: {what} needs {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> hmnas_core::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> hmnas_core::Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, message: "bad magic, expected `HMDS`".into() });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported version {version}, expected {VERSION}") });
    }
    let count = r.u32("count")? as usize;
    let (c, h, w) = (r.u32("channels")? as usize, r.u32("height")? as usize, r.u32("width")? as usize);
    let classes = r.u32("classes")? as usize;
    let sample = c * h * w;
    let mut pixels = Vec::with_capacity(count * sample);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let raw = r.take(sample * 4, "pixels")?;
        pixels.extend(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))));
        let offset = r.pos as u64;
        let label = r.u32("label")? as usize;
        if label >= classes {
            return Err(Error::Format { offset, message: format!("sample {i}: label {label} outside 0..{classes}") });
        }
        labels.push(label);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format { offset: r.pos as u64, message: "trailing bytes after the last sample".into() });
    }
    Dataset::new(c, h, w, classes, pixels, labels)
}

pub fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode(data)).map_err(|e| CliError::io(path, e))
}

/// Reads an `HMDS` file or generates `synthetic:<task>:<seed>`.
pub fn load_dataset(source: &str) -> Result<Dataset> {
    if let Some(rest) = source.strip_prefix("synthetic:") {
        let (task, seed) = rest
            .split_once(':')
            .ok_or_else(|| CliError::Config(format!("dataset `{source}`: expected synthetic:<task>:<seed>")))?;
        let seed: u64 = seed
            .parse()
            .map_err(|_| CliError::Config(format!("dataset `{source}`: seed `{seed}` is not an integer")))?;
        return Ok(Synthetic::parse(task)?.generate(seed));
    }
    let bytes = std::fs::read(source).map_err(|e| CliError::io(source, e))?;
    Ok(decode(&bytes)?)
}
