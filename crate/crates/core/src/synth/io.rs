use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ManifestEntry, SegSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LMIMSEG\0";
const VERSION: u32 = 1;

/// Header (magic, version, channels, height, width as u32 LE), then the
/// image as f32 LE, then one label byte per pixel.
pub fn write_sample(path: &Path, sample: &SegSample) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(Error::io(path))?);
    let mut buf = Vec::with_capacity(24 + sample.image.numel() * 4 + sample.labels.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for &d in sample.image.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in sample.image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&sample.labels);
    w.write_all(&buf).map_err(Error::io(path))?;
    w.flush().map_err(Error::io(path))
}

pub fn read_sample(path: &Path) -> Result<SegSample> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(Error::io(path))?;
    let bad = |what: &str| Error::Data(format!("{}: {what}", path.display()));
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(bad("not a sample file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(8) as u32 != VERSION {
        return Err(bad("unsupported version"));
    }
    let (c, h, w) = (word(12), word(16), word(20));
    let pixels = h * w;
    if bytes.len() != 24 + c * pixels * 4 + pixels {
        return Err(bad("truncated"));
    }
    let floats = &bytes[24..24 + c * pixels * 4];
    let image: Vec<f32> = floats
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(SegSample {
        image: Tensor::new(vec![c, h, w], image).map_err(|_| bad("zero dimension"))?,
        labels: bytes[24 + c * pixels * 4..].to_vec(),
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(Error::io(path))?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let r = BufReader::new(File::open(path).map_err(Error::io(path))?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(Error::io(path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
