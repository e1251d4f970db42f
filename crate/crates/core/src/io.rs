//! Tensor containers, metrics streams and grayscale image export.
//!
//! Container layout: a little-endian `u32` header length, a UTF-8 JSON header
//! `{magic, tensors: [{name, dtype, shape, offset, nbytes}], metadata}`, then
//! the raw little-endian payloads. Offsets are relative to the first payload
//! byte.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::FeatureMap;
use crate::error::{Error, Result};
use crate::model::{LabeledImages, MetricRow};
use crate::tensor::Tensor;

pub const MAGIC: &str = "NDSSM1";
pub const MAX_HEADER_BYTES: usize = 64 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    /// Storage type on disk; values are always `f64` in memory.
    pub dtype: DType,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    tensors: Vec<Entry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<NamedTensor>,
    pub metadata: serde_json::Value,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn with_metadata(metadata: serde_json::Value) -> Self {
        Container { tensors: Vec::new(), metadata }
    }

    pub fn push(&mut self, name: impl Into<String>, dtype: DType, tensor: Tensor) {
        self.tensors.push(NamedTensor { name: name.into(), dtype, tensor });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Parse { offset: 0, message: format!("container has no tensor {name:?}") })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for t in &self.tensors {
            if entries.iter().any(|e: &Entry| e.name == t.name) {
                return Err(Error::domain(format!("duplicate tensor name {:?}", t.name)));
            }
            let nbytes = t.tensor.len() * t.dtype.size();
            entries.push(Entry {
                name: t.name.clone(),
                dtype: t.dtype,
                shape: t.tensor.shape().to_vec(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let header = Header { magic: MAGIC.into(), tensors: entries, metadata: self.metadata.clone() };
        let json = serde_json::to_vec(&header).map_err(|e| Error::domain(e.to_string()))?;
        if json.len() > MAX_HEADER_BYTES {
            return Err(Error::Capacity(format!("container header is {} bytes, limit {MAX_HEADER_BYTES}", json.len())));
        }
        let mut out = Vec::with_capacity(4 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            match t.dtype {
                DType::F64 => t.tensor.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                DType::F32 => t.tensor.data().iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, message: String| Error::Parse { offset, message };
        if bytes.len() < 4 {
            return Err(parse(bytes.len(), "file too short for a header length".into()));
        }
        let hlen = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
        if hlen > MAX_HEADER_BYTES {
            return Err(parse(0, format!("header length {hlen} exceeds {MAX_HEADER_BYTES}")));
        }
        if bytes.len() < 4 + hlen {
            return Err(parse(bytes.len(), format!("header truncated: expected {hlen} bytes")));
        }
        let text = &bytes[4..4 + hlen];
        let header: Header =
            serde_json::from_slice(text).map_err(|e| parse(4 + json_offset(text, &e), e.to_string()))?;
        if header.magic != MAGIC {
            let at = find(text, b"\"magic\"").map_or(4, |p| 4 + p);
            return Err(parse(at, format!("bad magic {:?}, expected {MAGIC:?}", header.magic)));
        }
        let base = 4 + hlen;
        let mut next = 0usize;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (i, e) in header.tensors.iter().enumerate() {
            let count: usize = e.shape.iter().product();
            if e.nbytes != count * e.dtype.size() {
                return Err(parse(
                    4,
                    format!("tensor {:?}: {} bytes does not match shape {:?}", e.name, e.nbytes, e.shape),
                ));
            }
            if e.offset < next || (i > 0 && e.offset <= header.tensors[i - 1].offset) {
                return Err(parse(4, format!("tensor {:?}: offsets must be strictly increasing", e.name)));
            }
            let start = base + e.offset;
            let end = start + e.nbytes;
            if end > bytes.len() {
                return Err(parse(
                    bytes.len(),
                    format!(
                        "payload of tensor {:?} truncated: needs bytes {start}..{end}, file has {}",
                        e.name,
                        bytes.len()
                    ),
                ));
            }
            let raw = &bytes[start..end];
            let data: Vec<f64> = match e.dtype {
                DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
                DType::F32 => {
                    raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect()
                }
            };
            let tensor = Tensor::new(e.shape.clone(), data)
                .map_err(|err| parse(start, format!("tensor {:?}: {err}", e.name)))?;
            tensors.push(NamedTensor { name: e.name.clone(), dtype: e.dtype, tensor });
            next = e.offset + e.nbytes;
        }
        Ok(Container { tensors, metadata: header.metadata })
    }
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Byte offset of a JSON error within `text`, from its line and column.
fn json_offset(text: &[u8], e: &serde_json::Error) -> usize {
    let mut line = 1;
    let mut start = 0;
    for (i, &b) in text.iter().enumerate() {
        if line == e.line() {
            break;
        }
        if b == b'\n' {
            line += 1;
            start = i + 1;
        }
    }
    (start + e.column().saturating_sub(1)).min(text.len())
}

pub fn write_container(path: impl AsRef<Path>, container: &Container) -> Result<()> {
    let bytes = container.to_bytes()?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    Container::from_bytes(&std::fs::read(path)?)
}

/// Stacks images into `images` `[n, C, R...]` and labels into `labels` `[n]`.
pub fn images_container(set: &LabeledImages, dtype: DType) -> Result<Container> {
    let parts: Vec<Tensor> = set.images.iter().map(|im| im.tensor().clone()).collect();
    let mut c = Container::with_metadata(serde_json::json!({ "kind": "labeled-images" }));
    c.push("images", dtype, Tensor::stack(&parts)?);
    c.push("labels", DType::F64, Tensor::new(vec![set.labels.len()], set.labels.iter().map(|&l| l as f64).collect())?);
    Ok(c)
}

pub fn images_from_container(c: &Container) -> Result<LabeledImages> {
    let images = c.require("images")?;
    let labels = c.require("labels")?;
    let n = labels.len();
    if images.ndim() < 3 || images.shape()[0] != n {
        return Err(Error::Parse {
            offset: 0,
            message: format!("images shape {:?} does not match {n} labels", images.shape()),
        });
    }
    let labels = labels
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Parse { offset: 0, message: format!("label {v} is not a class index") })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let images = (0..n).map(|i| FeatureMap::new(images.slice_outer(i))).collect::<Result<Vec<_>>>()?;
    Ok(LabeledImages { images, labels })
}

/// Append-only newline-delimited JSON metrics file.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsWriter { out: BufWriter::new(file) })
    }

    pub fn write(&mut self, row: &MetricRow) -> Result<()> {
        let line = serde_json::to_string(row).map_err(|e| Error::domain(e.to_string()))?;
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    let mut offset = 0;
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(
                serde_json::from_str(&line).map_err(|e| Error::Parse {
                    offset: offset + e.column().saturating_sub(1),
                    message: e.to_string(),
                })?,
            );
        }
        offset += line.len() + 1;
    }
    Ok(rows)
}

/// Binary (P5) 8-bit grayscale image of a 2D tensor, min-max normalized. A
/// constant tensor maps to black.
pub fn pgm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    if image.ndim() != 2 {
        return Err(Error::domain(format!("PGM export needs a 2D tensor, got shape {:?}", image.shape())));
    }
    if !image.is_finite() {
        return Err(Error::numerical("cannot export a non-finite image"));
    }
    let (rows, cols) = (image.shape()[0], image.shape()[1]);
    let lo = image.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = image.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    std::fs::write(path, pgm_bytes(image)?)?;
    Ok(())
}
