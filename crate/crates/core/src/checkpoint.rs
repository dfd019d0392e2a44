//! Checkpoint directories.
//!
//! ```text
//! config.toml   run configuration
//! meta.toml     format version and channel count
//! manifest.csv  name,shape,sha256 per parameter
//! params.bin    "XCTP", u32 version, u32 count, then per parameter:
//!               u32 name length, name bytes, u32 rank, u64 dims, f64 data
//! ```
//! All integers and floats are little-endian.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{ParamSet, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"XCTP";

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// SHA-256 of a tensor's little-endian bytes, hex encoded.
pub fn tensor_digest(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn encode_params(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    out.write_u32::<LittleEndian>(params.len() as u32).unwrap();
    for p in params.iter() {
        out.write_u32::<LittleEndian>(p.name.len() as u32).unwrap();
        out.write_all(p.name.as_bytes()).unwrap();
        out.write_u32::<LittleEndian>(p.tensor.rank() as u32).unwrap();
        for &d in p.tensor.shape() {
            out.write_u64::<LittleEndian>(d as u64).unwrap();
        }
        for &v in p.tensor.data() {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamSet> {
    let trunc = |_| ck("params.bin is truncated");
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != MAGIC {
        return Err(ck("params.bin has a bad magic header"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
    if version != FORMAT_VERSION {
        return Err(ck(format!("unsupported params.bin version {version}")));
    }
    let count = r.read_u32::<LittleEndian>().map_err(trunc)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(trunc)?;
        let name = String::from_utf8(name).map_err(|_| ck("parameter name is not UTF-8"))?;
        let rank = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(trunc)?;
        let n: usize = shape.iter().product();
        if n > bytes.len() / 8 {
            return Err(ck(format!("{name}: shape {shape:?} exceeds file size")));
        }
        let mut data = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(trunc)?;
        params
            .insert(name.clone(), Tensor::new(shape, data).map_err(|e| ck(format!("{name}: {e}")))?)
            .map_err(|e| ck(e.to_string()))?;
    }
    if (r.position() as usize) != bytes.len() {
        return Err(ck("trailing bytes after the last parameter"));
    }
    Ok(params)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save(dir: &Path, run: &RunConfig, model: &Model) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    run.save(&dir.join("config.toml"))?;
    let meta = format!(
        "format_version = {FORMAT_VERSION}\nchannels = {}\nattention_mode = \"{}\"\n",
        model.config.channels,
        model.config.mode.name()
    );
    write(&dir.join("meta.toml"), meta.as_bytes())?;
    let mut manifest = String::from("name,shape,sha256\n");
    for p in model.params.iter() {
        let shape: Vec<String> = p.tensor.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{},{},{}\n", p.name, shape.join("x"), tensor_digest(&p.tensor)));
    }
    write(&dir.join("manifest.csv"), manifest.as_bytes())?;
    write(&dir.join("params.bin"), &encode_params(&model.params))
}

/// Load and verify a checkpoint against its manifest.
pub fn load(dir: &Path) -> Result<(RunConfig, Model)> {
    let run = RunConfig::from_path(&dir.join("config.toml"))?;
    let meta_path = dir.join("meta.toml");
    let meta: toml::Table = String::from_utf8(read(&meta_path)?)
        .map_err(|_| ck("meta.toml is not UTF-8"))?
        .parse()
        .map_err(|e| ck(format!("meta.toml: {e}")))?;
    let version = meta.get("format_version").and_then(toml::Value::as_integer);
    if version != Some(i64::from(FORMAT_VERSION)) {
        return Err(ck(format!("unsupported checkpoint version {version:?}")));
    }
    let channels = meta
        .get("channels")
        .and_then(toml::Value::as_integer)
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| ck("meta.toml lacks channels"))?;
    let params = decode_params(&read(&dir.join("params.bin"))?)?;
    let manifest_path = dir.join("manifest.csv");
    let mut rdr = csv::Reader::from_path(&manifest_path).map_err(|e| ck(format!("manifest.csv: {e}")))?;
    let mut seen = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| ck(format!("manifest.csv: {e}")))?;
        let (name, digest) = (&rec[0], &rec[2]);
        let p = params.get(name).ok_or_else(|| ck(format!("{name} listed in manifest but absent")))?;
        if tensor_digest(&p.tensor) != digest {
            return Err(ck(format!("{name}: checksum mismatch")));
        }
        seen += 1;
    }
    if seen != params.len() {
        return Err(ck(format!("manifest lists {seen} tensors, params.bin has {}", params.len())));
    }
    let model = Model::from_params(run.model_config(channels), params)?;
    Ok((run, model))
}
