//! `HLXT` trace files (little-endian):
//!
//! ```text
//! "HLXT" | u32 version | u32 V | u32 layer_count
//! per record: f32[V] logits | layer_count x (u32 layer_id | u32 d | f32[d]) | u8 is_end
//! ```
//!
//! Records run until end of file.

use std::io::Write;
use std::path::Path;

use super::{Backend, HiddenStates, StepOutput};
use crate::error::{Error, Result};
use crate::wire::Cursor;

pub const TRACE_MAGIC: [u8; 4] = *b"HLXT";
pub const TRACE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub struct ReplayWriter<W: Write> {
    inner: W,
    vocab_size: usize,
    layer_count: usize,
}

impl<W: Write> ReplayWriter<W> {
    pub fn new(mut inner: W, vocab_size: usize, layer_count: usize) -> Result<Self> {
        inner.write_all(&TRACE_MAGIC)?;
        inner.write_all(&TRACE_VERSION.to_le_bytes())?;
        inner.write_all(&(vocab_size as u32).to_le_bytes())?;
        inner.write_all(&(layer_count as u32).to_le_bytes())?;
        Ok(Self {
            inner,
            vocab_size,
            layer_count,
        })
    }

    /// Values are narrowed to `f32`.
    pub fn write(&mut self, out: &StepOutput) -> Result<()> {
        if out.logits.len() != self.vocab_size {
            return Err(Error::DimensionMismatch {
                expected: self.vocab_size,
                actual: out.logits.len(),
            });
        }
        if out.hidden_states.len() != self.layer_count {
            return Err(Error::DimensionMismatch {
                expected: self.layer_count,
                actual: out.hidden_states.len(),
            });
        }
        let mut buf = Vec::with_capacity(4 * self.vocab_size + 64);
        for &l in &out.logits {
            buf.extend_from_slice(&(l as f32).to_le_bytes());
        }
        for (&id, h) in &out.hidden_states {
            buf.extend_from_slice(&id.to_le_bytes());
            buf.extend_from_slice(&(h.len() as u32).to_le_bytes());
            for &v in h {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf.push(out.is_end as u8);
        self.inner.write_all(&buf)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Parses a whole trace. On a malformed record the records before it are
/// returned together with the error.
pub fn read_trace(bytes: &[u8]) -> (Vec<StepOutput>, Option<Error>) {
    let mut records = Vec::new();
    let mut cur = Cursor::new(bytes);
    let header = (|| -> Result<(usize, usize)> {
        let magic: [u8; 4] = cur.array()?;
        if magic != TRACE_MAGIC {
            return Err(Error::BadMagic {
                expected: TRACE_MAGIC,
                found: magic,
            });
        }
        let version = cur.u32()?;
        if version != TRACE_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: TRACE_VERSION,
            });
        }
        Ok((cur.u32()? as usize, cur.u32()? as usize))
    })();
    let (vocab, layers) = match header {
        Ok(h) => h,
        Err(e) => return (records, Some(e)),
    };
    debug_assert_eq!(cur.position(), HEADER_LEN);

    let mut index = 0;
    while cur.remaining() > 0 {
        match read_record(&mut cur, vocab, layers) {
            Ok(r) => records.push(r),
            Err(e) => {
                let reason = e.to_string();
                return (records, Some(Error::MalformedRecord { index, reason }));
            }
        }
        index += 1;
    }
    (records, None)
}

fn read_record(cur: &mut Cursor<'_>, vocab: usize, layers: usize) -> Result<StepOutput> {
    if cur.remaining() < vocab.saturating_mul(4) {
        return Err(Error::Truncated {
            offset: cur.position(),
            needed: vocab.saturating_mul(4),
        });
    }
    let logits = (0..vocab)
        .map(|_| cur.f32().map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    let mut hidden = HiddenStates::new();
    for _ in 0..layers {
        let id = cur.u32()?;
        let d = cur.u32()? as usize;
        if cur.remaining() < d.saturating_mul(4) {
            return Err(Error::Truncated {
                offset: cur.position(),
                needed: d.saturating_mul(4),
            });
        }
        let h = (0..d).map(|_| cur.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        if hidden.insert(id, h).is_some() {
            return Err(Error::InvalidArgument(format!("layer {id} repeated")));
        }
    }
    let is_end = match cur.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::InvalidArgument(format!("is_end byte {other}"))),
    };
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    Ok(StepOutput {
        logits,
        hidden_states: hidden,
        is_end,
    })
}

/// Serves a recorded trace in order, ignoring fed-back tokens. Yields an
/// end marker once the records are exhausted. A malformed record surfaces as
/// an error when the stream reaches it.
#[derive(Debug)]
pub struct ReplayBackend {
    records: Vec<StepOutput>,
    error: Option<Error>,
    vocab_size: usize,
    layer_ids: Vec<u32>,
    pos: usize,
}

impl ReplayBackend {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (records, error) = read_trace(bytes);
        if records.is_empty() {
            if let Some(e) = error {
                return Err(e);
            }
        }
        let vocab_size = if bytes.len() >= HEADER_LEN {
            u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize
        } else {
            0
        };
        let layer_ids = records
            .first()
            .map(|r| r.hidden_states.keys().copied().collect())
            .unwrap_or_default();
        Ok(Self {
            records,
            error,
            vocab_size,
            layer_ids,
            pos: 0,
        })
    }

    pub fn open(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn next(&mut self) -> Result<StepOutput> {
        let i = self.pos;
        self.pos += 1;
        match self.records.get(i) {
            Some(r) => Ok(r.clone()),
            None => match &self.error {
                Some(Error::MalformedRecord { index, reason }) if i == self.records.len() => {
                    Err(Error::MalformedRecord {
                        index: *index,
                        reason: reason.clone(),
                    })
                }
                _ => Ok(StepOutput::end()),
            },
        }
    }
}

impl Backend for ReplayBackend {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn layer_ids(&self) -> Vec<u32> {
        self.layer_ids.clone()
    }

    fn start(&mut self, _prompt: &str) -> Result<StepOutput> {
        self.pos = 0;
        self.next()
    }

    fn step(&mut self, _token: u32, _temperature: f64) -> Result<StepOutput> {
        self.next()
    }
}
