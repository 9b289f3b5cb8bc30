//! Checkpoint format: an ASCII header followed by little-endian `f32` data.
//!
//! ```text
//! groupbert-checkpoint 1
//! config <single-line JSON model configuration>
//! step <u64>                                   (optional)
//! tensors <count>
//! tensor <name> <dim>x<dim>... <offset> <nbytes>   (one line per tensor)
//! end-header
//! <data>
//! ```
//!
//! Offsets are byte positions relative to the first byte after the
//! `end-header` line. Tensors appear in construction order and their data is
//! contiguous and row-major.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Precision, Tensor};

use super::{layout, Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &str = "groupbert-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn format_shape(shape: &[usize]) -> String {
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_header<R: BufRead>(path: &Path, reader: &mut R) -> Result<CheckpointHeader> {
    let mut lines = Vec::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(bad(path, "missing end-header line"));
        }
        let line = line.trim_end_matches('\n').to_string();
        if line == "end-header" {
            break;
        }
        lines.push(line);
    }
    let mut it = lines.iter();

    let first = it.next().ok_or_else(|| bad(path, "empty header"))?;
    let version = match first.split_once(' ') {
        Some((CHECKPOINT_MAGIC, v)) => v
            .parse::<u32>()
            .map_err(|_| bad(path, format!("bad version `{v}`")))?,
        _ => return Err(bad(path, "not a groupbert checkpoint")),
    };
    if version != VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }

    let mut config = None;
    let mut step = None;
    let mut count = None;
    let mut tensors = Vec::new();
    for line in it {
        let (key, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
        match key {
            "config" => config = Some(serde_json::from_str::<ModelConfig>(rest)?),
            "step" => {
                step = Some(rest.parse().map_err(|_| bad(path, format!("bad step `{rest}`")))?)
            }
            "tensors" => {
                count = Some(
                    rest.parse::<usize>()
                        .map_err(|_| bad(path, format!("bad tensor count `{rest}`")))?,
                )
            }
            "tensor" => {
                let fields: Vec<&str> = rest.split(' ').collect();
                let [name, dims, offset, nbytes] = fields[..] else {
                    return Err(bad(path, format!("malformed tensor line `{line}`")));
                };
                let shape = dims
                    .split('x')
                    .map(str::parse)
                    .collect::<std::result::Result<Vec<usize>, _>>()
                    .map_err(|_| bad(path, format!("bad shape `{dims}`")))?;
                let num = |s: &str| s.parse::<u64>().map_err(|_| bad(path, format!("bad number `{s}`")));
                tensors.push(TensorEntry {
                    name: name.to_string(),
                    shape,
                    offset: num(offset)?,
                    nbytes: num(nbytes)?,
                });
            }
            other => return Err(bad(path, format!("unknown header key `{other}`"))),
        }
    }
    let config = config.ok_or_else(|| bad(path, "missing config line"))?;
    let count = count.ok_or_else(|| bad(path, "missing tensors line"))?;
    if count != tensors.len() {
        return Err(bad(
            path,
            format!("header announces {count} tensors but lists {}", tensors.len()),
        ));
    }
    Ok(CheckpointHeader {
        version,
        config,
        step,
        tensors,
    })
}

/// Read only the header of a checkpoint.
pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let mut reader = BufReader::new(fs::File::open(path)?);
    parse_header(path, &mut reader)
}

impl Model {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.save_at_step(path, None)
    }

    /// Write the checkpoint to a sibling temporary file, then rename it into place.
    pub fn save_at_step(&self, path: impl AsRef<Path>, step: Option<u64>) -> Result<()> {
        let path = path.as_ref();
        let mut header = format!("{CHECKPOINT_MAGIC} {VERSION}\n");
        header += &format!("config {}\n", serde_json::to_string(&self.config)?);
        if let Some(s) = step {
            header += &format!("step {s}\n");
        }
        header += &format!("tensors {}\n", self.store.len());
        let mut offset = 0u64;
        for (_, p) in self.store.iter() {
            let nbytes = 4 * p.tensor.numel() as u64;
            header += &format!(
                "tensor {} {} {offset} {nbytes}\n",
                p.name,
                format_shape(p.tensor.shape())
            );
            offset += nbytes;
        }
        header += "end-header\n";

        let mut buf = Vec::with_capacity(header.len() + offset as usize);
        buf.extend_from_slice(header.as_bytes());
        for (_, p) in self.store.iter() {
            for &v in p.tensor.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut tmp = PathBuf::from(path);
        tmp.set_extension("partial");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, precision: Precision) -> Result<(Model, Option<u64>)> {
        let path = path.as_ref();
        let mut reader = BufReader::new(fs::File::open(path)?);
        let header = parse_header(path, &mut reader)?;
        let mut data = Vec::new();
        reader.read_to_end(&mut data)?;

        let (specs, _) = layout(&header.config)?;
        if specs.len() != header.tensors.len() {
            return Err(bad(
                path,
                format!(
                    "configuration needs {} tensors, header lists {}",
                    specs.len(),
                    header.tensors.len()
                ),
            ));
        }
        let mut store = ParamStore::new(precision);
        let mut expected_offset = 0u64;
        for (spec, entry) in specs.iter().zip(&header.tensors) {
            if spec.name != entry.name || spec.shape != entry.shape {
                return Err(bad(
                    path,
                    format!(
                        "tensor {} {:?} does not match configuration ({} {:?})",
                        entry.name, entry.shape, spec.name, spec.shape
                    ),
                ));
            }
            if entry.offset != expected_offset || entry.nbytes != 4 * spec.numel() as u64 {
                return Err(bad(path, format!("tensor {} has inconsistent extent", entry.name)));
            }
            let (start, end) = (entry.offset as usize, (entry.offset + entry.nbytes) as usize);
            let bytes = data
                .get(start..end)
                .ok_or_else(|| bad(path, format!("data truncated inside tensor {}", entry.name)))?;
            let values = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.add(entry.name.clone(), Tensor::new(&entry.shape, values)?);
            expected_offset += entry.nbytes;
        }
        if data.len() as u64 != expected_offset {
            return Err(bad(
                path,
                format!("{} trailing bytes after the last tensor", data.len() as u64 - expected_offset),
            ));
        }
        Ok((Model::from_store(&header.config, store)?, header.step))
    }
}
