//! HLXM binary layout (little-endian):
//!
//! ```text
//! "HLXM" | u32 version | u32 layer_count
//! per layer: u32 layer_id | u32 d | f64 lambda | f64 d_ref | u64 sample_count
//!            | f64[d] mean | f64[d(d+1)/2] packed lower-triangular factor
//! u32 CRC32 of every preceding byte
//! ```

use super::{BuildMetadata, LayerManifold, Manifold};
use crate::error::{Error, Result};
use crate::wire::Cursor;

pub const MAGIC: [u8; 4] = *b"HLXM";
pub const FORMAT_VERSION: u32 = 1;

pub(super) fn encode(m: &Manifold) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.layers.len() as u32).to_le_bytes());
    for l in &m.layers {
        out.extend_from_slice(&l.layer_id.to_le_bytes());
        out.extend_from_slice(&(l.dim() as u32).to_le_bytes());
        out.extend_from_slice(&l.lambda.to_le_bytes());
        out.extend_from_slice(&l.d_ref.to_le_bytes());
        out.extend_from_slice(&l.sample_count.to_le_bytes());
        for v in l.mean.iter().chain(&l.chol_factor) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub(super) fn decode(bytes: &[u8], metadata: BuildMetadata) -> Result<Manifold> {
    let mut cur = Cursor::new(bytes);
    let found: [u8; 4] = cur.array()?;
    if found != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found,
        });
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let layer_count = cur.u32()? as usize;

    struct Raw {
        layer_id: u32,
        lambda: f64,
        d_ref: f64,
        sample_count: u64,
        mean: Vec<f64>,
        chol: Vec<f64>,
    }
    let mut raws = Vec::with_capacity(layer_count.min(1024));
    for _ in 0..layer_count {
        let layer_id = cur.u32()?;
        let d = cur.u32()? as usize;
        let lambda = cur.f64()?;
        let d_ref = cur.f64()?;
        let sample_count = cur.u64()?;
        let packed = d * (d + 1) / 2;
        // bounds check before allocating from an untrusted length
        let needed = (d + packed).saturating_mul(8);
        if cur.remaining() < needed {
            return Err(Error::Truncated {
                offset: cur.position(),
                needed,
            });
        }
        let mean = (0..d).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        let chol = (0..packed).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        raws.push(Raw {
            layer_id,
            lambda,
            d_ref,
            sample_count,
            mean,
            chol,
        });
    }
    let payload_end = cur.position();
    let stored = cur.u32()?;
    let computed = crc32fast::hash(&bytes[..payload_end]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    if cur.remaining() != 0 {
        return Err(Error::InvalidManifold(format!(
            "{} trailing bytes after checksum",
            cur.remaining()
        )));
    }

    let mut layers = Vec::with_capacity(raws.len());
    for r in raws {
        layers.push(LayerManifold::from_parts(
            r.layer_id,
            r.mean,
            r.chol,
            r.lambda,
            r.d_ref,
            r.sample_count,
        )?);
    }
    let sorted = layers.windows(2).all(|w| w[0].layer_id < w[1].layer_id);
    if !sorted {
        return Err(Error::InvalidManifold("layer ids not strictly ascending".into()));
    }
    Manifold::new(layers, metadata)
}
