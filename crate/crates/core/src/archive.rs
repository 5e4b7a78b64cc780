//! Checkpoint serialization: a single binary file holding the network
//! configuration and every named parameter array.
//!
//! Layout: magic `LISO`, format version (u32 LE), the six config fields,
//! entry count, then per entry the UTF-8 name, rank, dims (u32 LE) and raw
//! little-endian f32 data; the file ends with a SHA-256 checksum of all
//! preceding bytes.

use crate::error::{Error, Result};
use crate::nets::{NetConfig, Params};
use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: [u8; 4] = *b"LISO";
const CHECKSUM_LEN: usize = 32;

pub fn to_bytes(params: &Params<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let c = params.config;
    for field in [
        c.hidden_channels as u32,
        c.stem_channels as u32,
        c.decoder_channels as u32,
        c.head_channels as u32,
        c.bpp as u32,
    ] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    out.extend_from_slice(&c.leaky_slope.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, arr) in params.iter() {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(arr.ndim() as u8);
        for &d in arr.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in arr.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptCheckpoint("file truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Params<f32>> {
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(Error::CorruptCheckpoint("file too short".into()));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if body[..4] != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let digest = Sha256::digest(body);
    if digest.as_slice() != checksum {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }

    let mut r = Reader { bytes: body, pos: 8 };
    let config = NetConfig {
        hidden_channels: r.u32()? as usize,
        stem_channels: r.u32()? as usize,
        decoder_channels: r.u32()? as usize,
        head_channels: r.u32()? as usize,
        bpp: r.u32()? as usize,
        leaky_slope: r.f32()?,
    };
    config.validate().map_err(|e| match e {
        Error::Config(msg) => Error::CorruptCheckpoint(format!("bad config: {msg}")),
        other => other,
    })?;
    let count = r.u32()? as usize;
    let mut params = Params::new(config);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::CorruptCheckpoint("non-utf8 name".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        let raw = r.take(len * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        params.insert(name, arr);
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok(params)
}

pub fn save_archive(params: &Params<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<Params<f32>> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::init_stego_params;

    fn params() -> Params<f32> {
        init_stego_params(
            NetConfig {
                hidden_channels: 8,
                stem_channels: 2,
                decoder_channels: 4,
                head_channels: 4,
                bpp: 2,
                leaky_slope: 0.2,
            },
            42,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let p = params();
        let loaded = from_bytes(&to_bytes(&p)).unwrap();
        assert_eq!(loaded.config, p.config);
        assert_eq!(loaded.len(), p.len());
        for (name, arr) in p.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(arr.shape(), l.shape());
            assert!(arr.iter().zip(l.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = to_bytes(&params());
        let cut = &bytes[..bytes.len() - 7];
        assert!(matches!(from_bytes(cut), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = to_bytes(&params());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(from_bytes(&bytes), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_bump_is_rejected() {
        let mut bytes = to_bytes(&params());
        let next = FORMAT_VERSION + 1;
        bytes[4..8].copy_from_slice(&next.to_le_bytes());
        // Checksum must be regenerated or the corruption check fires first.
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::VersionMismatch { found, expected: FORMAT_VERSION }) if found == next
        ));
    }
}
