//! The PBKD little-endian weights format.
//!
//! Layout: magic `PBKD`, version u32, array count u32, then per array a u16
//! name length, the name bytes, a u8 rank, `rank` u32 dims, and the raw f32
//! values.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Block, ModelSpec, Network};
use crate::replacement::{build_candidate, CandidateKind};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"PBKD";
pub const VERSION: u32 = 1;

/// Serialize named arrays. Every tensor is written with rank 4.
pub fn encode(arrays: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(arrays.len()).map_err(|_| Error::Format("too many arrays".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in arrays {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(4);
        for d in t.shape().dims() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("{name}: dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parse named arrays. Ranks below 4 are padded with leading ones.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected PBKD".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32("array count")?;
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for i in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes"));
        let name = std::str::from_utf8(r.take(len as usize, "name")?)
            .map_err(|_| Error::Format(format!("array {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::Format(format!("{name}: unsupported rank {rank}")));
        }
        let mut dims = [1usize; 4];
        for d in dims[4 - rank..].iter_mut() {
            *d = r.u32("dims")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let raw = r.take(shape.len().checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn encode_network(net: &Network) -> Result<Vec<u8>> {
    encode(&net.named_weights())
}

/// Write atomically: a sibling temp file renamed into place.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    write_file(path, &encode_network(net)?)
}

/// Rebuild a network from `spec` and named arrays. Blocks stored as
/// replacements (`<block>.rep.<kind>.…`) come back as replacement blocks.
pub fn network_from_arrays(spec: &ModelSpec, arrays: Vec<(String, Tensor)>) -> Result<Network> {
    let mut net = Network::from_spec(spec, 0)?;
    for (k, b) in spec.blocks.iter().enumerate() {
        let prefix = format!("{}.rep.", b.name);
        let kinds: Vec<&str> = arrays
            .iter()
            .filter_map(|(n, _)| n.strip_prefix(&prefix))
            .filter_map(|rest| rest.split('.').next())
            .collect();
        if let Some(first) = kinds.first() {
            if kinds.iter().any(|k| k != first) {
                return Err(Error::Format(format!("block `{}` stores two replacement kinds", b.name)));
            }
            let kind: CandidateKind = first.parse()?;
            let rep = build_candidate(kind, net.replaced_conv(k)?, k, 0)?;
            net.blocks[k] = Block::Replacement(rep);
        }
    }
    let mut by_name: BTreeMap<String, Tensor> = arrays.into_iter().collect();
    for (name, slot) in net.named_weights_mut() {
        let t = by_name
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))?;
        if t.len() != slot.len() {
            return Err(Error::Format(format!(
                "`{name}` has {} values, expected {}",
                t.len(),
                slot.len()
            )));
        }
        *slot = t.reshaped(slot.shape())?;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!("unexpected array `{extra}`")));
    }
    Ok(net)
}

pub fn load_network(spec: &ModelSpec, path: &Path) -> Result<Network> {
    let bytes = fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    network_from_arrays(spec, decode(&bytes)?)
}

/// Hex SHA-256 of the encoded weights.
pub fn weights_digest(net: &Network) -> Result<String> {
    Ok(hex_digest(&encode_network(net)?))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replacement::default_replacement;

    #[test]
    fn round_trip_teacher_and_student() {
        let spec = ModelSpec::bundled("toy_teacher").unwrap();
        let teacher = Network::from_spec(&spec, 4).unwrap();
        let bytes = encode_network(&teacher).unwrap();
        assert_eq!(&bytes[..4], b"PBKD");
        assert_eq!(network_from_arrays(&spec, decode(&bytes).unwrap()).unwrap(), teacher);

        let rep = default_replacement(teacher.replaced_conv(2).unwrap(), 2, 8).unwrap();
        let student = teacher.with_replacement(2, rep).unwrap();
        let back = network_from_arrays(&spec, decode(&encode_network(&student).unwrap()).unwrap()).unwrap();
        assert_eq!(back, student);
        assert_ne!(weights_digest(&student).unwrap(), weights_digest(&teacher).unwrap());
    }

    #[test]
    fn hand_built_file() {
        let mut b = Vec::new();
        b.extend_from_slice(b"PBKD");
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.push(b'w');
        b.push(2);
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1.5f32.to_le_bytes());
        b.extend_from_slice(&(-2.0f32).to_le_bytes());
        let arrays = decode(&b).unwrap();
        assert_eq!(arrays[0].0, "w");
        assert_eq!(arrays[0].1.shape(), Shape::new(1, 1, 2, 1));
        assert_eq!(arrays[0].1.data(), &[1.5, -2.0]);

        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        b.push(0);
        assert!(decode(&b).is_err());
    }

    #[test]
    fn missing_and_extra_arrays_rejected() {
        let spec = ModelSpec::bundled("toy_teacher").unwrap();
        let teacher = Network::from_spec(&spec, 4).unwrap();
        let mut arrays = decode(&encode_network(&teacher).unwrap()).unwrap();
        arrays.pop();
        assert!(network_from_arrays(&spec, arrays.clone()).is_err());
        arrays.push(("stray".into(), Tensor::zeros(Shape::new(1, 1, 1, 1))));
        assert!(network_from_arrays(&spec, arrays).is_err());
    }
}
