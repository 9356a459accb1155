//! Checkpoint files: a UTF-8 manifest followed by a raw payload.
//!
//! ```text
//! FSS-CHECKPOINT 1
//! arch stem_channels=32 feature_dim=64 head_kernel=3
//! variant vectors=primary,auxiliary s1=true s2=true
//! payload_bytes <N>
//! param <name> <d0,d1,...> <byte_offset>
//! ...
//! end
//! <N bytes: every parameter's values as little-endian f64, row-major>
//! ```
//!
//! Offsets are relative to the first payload byte, which directly follows the
//! newline after `end`.

use std::fs;
use std::path::Path;

use super::{ArchConfig, Model, Variant};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &str = "FSS-CHECKPOINT 1";

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let arch = model.arch();
    let mut manifest = format!(
        "{CHECKPOINT_MAGIC}\narch stem_channels={} feature_dim={} head_kernel={}\nvariant {}\n",
        arch.stem_channels,
        arch.feature_dim,
        arch.head_kernel,
        model.variant()
    );
    let payload_bytes: usize = model.params().iter().map(|p| p.value.len() * 8).sum();
    manifest.push_str(&format!("payload_bytes {payload_bytes}\n"));
    let mut payload = Vec::with_capacity(payload_bytes);
    for p in model.params().iter() {
        let shape: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!(
            "param {} {} {}\n",
            p.name,
            shape.join(","),
            payload.len()
        ));
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    manifest.push_str("end\n");
    let mut out = manifest.into_bytes();
    out.extend(payload);
    out
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn parse_arch(line: &str) -> Result<ArchConfig> {
    let mut arch = ArchConfig::default();
    let fields = line
        .strip_prefix("arch ")
        .ok_or_else(|| bad("missing arch line"))?;
    for field in fields.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| bad(format!("bad arch field `{field}`")))?;
        let value: usize = value
            .parse()
            .map_err(|_| bad(format!("bad arch value `{field}`")))?;
        match key {
            "stem_channels" => arch.stem_channels = value,
            "feature_dim" => arch.feature_dim = value,
            "head_kernel" => arch.head_kernel = value,
            _ => return Err(bad(format!("unknown arch field `{key}`"))),
        }
    }
    Ok(arch)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut lines = Vec::new();
    let mut pos = 0;
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("manifest is not terminated by `end`"))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("manifest is not UTF-8"))?;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        lines.push(line);
    }
    let payload = &bytes[pos..];
    let mut it = lines.into_iter();
    if it.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad(format!("expected `{CHECKPOINT_MAGIC}` header")));
    }
    let arch = parse_arch(it.next().unwrap_or_default())?;
    let variant: Variant = it
        .next()
        .and_then(|l| l.strip_prefix("variant "))
        .ok_or_else(|| bad("missing variant line"))?
        .parse()?;
    let payload_bytes: usize = it
        .next()
        .and_then(|l| l.strip_prefix("payload_bytes "))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad("missing payload_bytes line"))?;
    if payload.len() != payload_bytes {
        return Err(bad(format!(
            "payload is {} bytes, manifest says {payload_bytes}",
            payload.len()
        )));
    }
    let mut model = Model::new(arch, variant, 0)?;
    let mut seen = vec![false; model.params().len()];
    for line in it {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let ["param", name, shape, offset] = fields[..] else {
            return Err(bad(format!("bad manifest line `{line}`")));
        };
        let shape: Vec<usize> = shape
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(format!("bad shape in `{line}`")))?;
        let offset: usize = offset
            .parse()
            .map_err(|_| bad(format!("bad offset in `{line}`")))?;
        let id = model
            .params()
            .find(name)
            .ok_or_else(|| bad(format!("unknown parameter `{name}`")))?;
        let param = model.params_mut().get_mut(id);
        if param.value.shape() != shape.as_slice() {
            return Err(bad(format!(
                "parameter `{name}` has shape {shape:?}, model expects {:?}",
                param.value.shape()
            )));
        }
        let len = param.value.len() * 8;
        let end = offset.checked_add(len).filter(|&e| e <= payload.len());
        let Some(end) = end else {
            return Err(bad(format!("parameter `{name}` runs past the payload")));
        };
        let values = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        param.value = Tensor::new(shape, values)?;
        seen[id.index()] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = &model.params().iter().nth(i).expect("index in range").name;
        return Err(bad(format!("parameter `{name}` missing from checkpoint")));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
