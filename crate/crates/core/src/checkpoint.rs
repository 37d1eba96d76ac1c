//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "DIMTSCKP"
//! version   u32      1
//! header    u64 length, then that many bytes of UTF-8 JSON
//! count     u32      number of arrays
//! per array:
//!   name    u32 length, UTF-8 bytes
//!   rank    u32, then rank x u64 dims
//!   data    prod(dims) x f64, row-major
//! ```
//!
//! The JSON header is also written next to the file as `<name>.json`.

use crate::array::DenseArray;
use crate::data::MinMaxScaler;
use crate::error::{Error, Result};
use crate::network::{DimTs, ModelConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 8] = b"DIMTSCKP";
const VERSION: u32 = 1;
// guards against absurd lengths in corrupt files
const MAX_NAME: usize = 4096;
const MAX_HEADER: u64 = 1 << 24;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_container<H: Serialize>(
    path: &Path,
    header: &H,
    arrays: &[(&str, &DenseArray)],
) -> Result<()> {
    let json = serde_json::to_string(header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(json.as_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, a) in arrays {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(a.shape().len() as u32).to_le_bytes())?;
        for &d in a.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in a.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    std::fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(header)? + "\n",
    )?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated checkpoint: {e}"))
}

pub fn load_container<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<(String, DenseArray)>)> {
    let file = File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let hlen = read_u64(&mut r)?;
    if hlen > MAX_HEADER {
        return Err(Error::Checkpoint(format!("header length {hlen}")));
    }
    let mut hbytes = vec![0u8; hlen as usize];
    r.read_exact(&mut hbytes).map_err(truncated)?;
    let header: H = serde_json::from_slice(&hbytes)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let count = read_u32(&mut r)? as usize;
    let mut arrays = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        if nlen > MAX_NAME {
            return Err(Error::Checkpoint(format!("array name length {nlen}")));
        }
        let mut nb = vec![0u8; nlen];
        r.read_exact(&mut nb).map_err(truncated)?;
        let name = String::from_utf8(nb)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("array {name}: shape overflow")))?;
        let mut data = Vec::with_capacity(n.min(1 << 24));
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b).map_err(truncated)?;
            data.push(f64::from_le_bytes(b));
        }
        let a = DenseArray::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))?;
        arrays.push((name, a));
    }
    Ok((header, arrays))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub channel_order: Vec<usize>,
    pub channel_names: Vec<String>,
    pub scaler: Option<MinMaxScaler>,
    /// optimization steps completed
    pub step: u64,
}

pub fn save_model(
    path: &Path,
    model: &DimTs,
    channel_names: &[String],
    scaler: Option<&MinMaxScaler>,
    step: u64,
) -> Result<()> {
    let header = CheckpointHeader {
        model: model.config().clone(),
        channel_order: model.channel_order().to_vec(),
        channel_names: channel_names.to_vec(),
        scaler: scaler.cloned(),
        step,
    };
    let arrays: Vec<(&str, &DenseArray)> = model.params().iter().collect();
    save_container(path, &header, &arrays)
}

pub fn load_model(path: &Path) -> Result<(DimTs, CheckpointHeader)> {
    let (header, arrays): (CheckpointHeader, _) = load_container(path)?;
    let model = DimTs::from_parts(header.model.clone(), header.channel_order.clone(), arrays)?;
    Ok((model, header))
}
