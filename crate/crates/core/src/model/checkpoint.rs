//! Checkpoint layout (little-endian unless noted):
//!
//! ```text
//! "XSTB"                       4 bytes
//! version                      u32
//! descriptor length            u32
//! descriptor                   JSON text {spec, meta}
//! parameter count              u64
//! parameters                   f64 * count, in Network::params() order
//! checksum                     u64, CRC-64/XZ of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use super::{Network, NetworkSpec, TrainingMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XSTB";
pub const CHECKPOINT_VERSION: u32 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Serialize, Deserialize)]
struct Descriptor {
    spec: NetworkSpec,
    meta: TrainingMeta,
}

pub fn encode(net: &Network) -> Result<Vec<u8>> {
    let descriptor = serde_json::to_vec(&Descriptor {
        spec: net.spec().clone(),
        meta: net.meta.clone(),
    })?;
    let count: usize = net.params().iter().map(Tensor::len).sum();
    let mut out = Vec::with_capacity(28 + descriptor.len() + 8 * count);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(&descriptor);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for p in net.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = CRC64.checksum(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok(out)
}

fn take<'b>(bytes: &'b [u8], at: &mut usize, n: usize, what: &str) -> Result<&'b [u8]> {
    let slice = bytes.get(*at..*at + n).ok_or_else(|| Error::Format {
        offset: *at as u64,
        message: format!("truncated while reading {what}"),
    })?;
    *at += n;
    Ok(slice)
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    let mut at = 0;
    if take(bytes, &mut at, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not an XSTB checkpoint".into(),
        });
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < at + 8 {
        return Err(Error::Format {
            offset: at as u64,
            message: "truncated before checksum".into(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if CRC64.checksum(body) != stored {
        return Err(Error::Corruption("checksum mismatch".into()));
    }

    let dlen = u32::from_le_bytes(take(body, &mut at, 4, "descriptor length")?.try_into().unwrap());
    let descriptor: Descriptor = serde_json::from_slice(take(body, &mut at, dlen as usize, "descriptor")?)
        .map_err(|e| Error::Format {
            offset: 12,
            message: format!("unreadable descriptor: {e}"),
        })?;
    let count = u64::from_le_bytes(take(body, &mut at, 8, "parameter count")?.try_into().unwrap());
    let shapes = descriptor.spec.param_shapes()?;
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if count as usize != expected || body.len() - at != 8 * expected {
        return Err(Error::Format {
            offset: at as u64,
            message: format!("payload holds {count} values, spec needs {expected}"),
        });
    }
    let mut params = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let n: usize = shape.iter().product();
        let raw = take(body, &mut at, 8 * n, "parameters")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Tensor::new(shape, data)?);
    }
    let mut net = Network::from_params(descriptor.spec, params)?;
    net.meta = descriptor.meta;
    Ok(net)
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(net)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    decode(&fs::read(path)?)
}
