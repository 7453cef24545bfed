//! Binary policy files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "CRLPOLCY"
//! version      u16      1
//! kind         u8       learner tag
//! fingerprint  u64      subtask fingerprint
//! payload_len  u64
//! payload      payload_len bytes
//! checksum     u64      first 8 bytes of SHA-256 over everything above
//! ```
//!
//! Floats are stored as raw IEEE-754 bits so decoding is bit-exact.

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{GoToPose, LearnerKind, PolicyHandle, TileQPolicy};
use crate::hlm::Subtask;
use crate::policy::tile::{TileCoder, DIMS};
use crate::sim::{Action, ActionLimits};

pub const MAGIC: &[u8; 8] = b"CRLPOLCY";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 8 + 2 + 1 + 8 + 8;
const MAX_DEPTH: u32 = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("not a policy file")]
    BadMagic,
    #[error("unsupported policy file version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown policy kind tag {0}")]
    UnknownKind(u8),
    #[error("policy file truncated")]
    Truncated,
    #[error("checksum mismatch")]
    Checksum,
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("fault-injection wrappers nested too deeply")]
    TooDeep,
    #[error("invalid payload: {0}")]
    Invalid(&'static str),
}

/// A policy together with the fingerprint of the subtask it was trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyFile {
    pub fingerprint: u64,
    pub policy: PolicyHandle,
}

/// Stable identity of a subtask's id, regions and timeout.
pub fn subtask_fingerprint(subtask: &Subtask) -> u64 {
    let mut h = Sha256::new();
    h.update((subtask.id.0.len() as u64).to_le_bytes());
    h.update(subtask.id.0.as_bytes());
    for r in [&subtask.entry, &subtask.exit] {
        for v in [
            r.center_x,
            r.center_y,
            r.position_radius,
            r.heading,
            r.heading_tolerance,
        ] {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.update(subtask.timeout.to_bits().to_le_bytes());
    first_u64(&h.finalize())
}

fn first_u64(digest: &[u8]) -> u64 {
    u64::from_le_bytes(digest[..8].try_into().expect("digest has at least 8 bytes"))
}

fn checksum(bytes: &[u8]) -> u64 {
    first_u64(&Sha256::digest(bytes))
}

impl PolicyFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        write_payload(&self.policy, &mut payload);
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.policy.kind().tag());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err(CodecError::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(CodecError::UnsupportedVersion(version));
        }
        let kind = r.u8()?;
        let fingerprint = r.u64()?;
        let len = r.len_prefix()?;
        let payload = r.take(len)?;
        let body_len = r.pos;
        let stored = r.u64()?;
        if !r.rest().is_empty() {
            return Err(CodecError::TrailingBytes(r.rest().len()));
        }
        if checksum(&bytes[..body_len]) != stored {
            return Err(CodecError::Checksum);
        }
        let policy = read_payload(kind, payload, 0)?;
        Ok(Self { fingerprint, policy })
    }
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_bits().to_le_bytes());
}

fn put_limits(out: &mut Vec<u8>, l: &ActionLimits) {
    for v in [l.v_min, l.v_max, l.w_min, l.w_max] {
        put_f64(out, v);
    }
}

fn write_payload(policy: &PolicyHandle, out: &mut Vec<u8>) {
    match policy {
        PolicyHandle::Constant(a) => {
            put_f64(out, a.v_cmd);
            put_f64(out, a.w_cmd);
        }
        PolicyHandle::GoToPose(g) => {
            put_f64(out, g.k_rho);
            put_f64(out, g.k_alpha);
            put_f64(out, g.k_beta);
            put_limits(out, &g.limits);
        }
        PolicyHandle::TileQ(p) => {
            out.extend_from_slice(&p.coder.tilings.to_le_bytes());
            for b in p.coder.bins {
                out.extend_from_slice(&b.to_le_bytes());
            }
            for v in p.coder.lo.iter().chain(&p.coder.hi) {
                put_f64(out, *v);
            }
            put_limits(out, &p.limits);
            out.extend_from_slice(&(p.actions.len() as u64).to_le_bytes());
            for a in &p.actions {
                put_f64(out, a.v_cmd);
                put_f64(out, a.w_cmd);
            }
            out.extend_from_slice(&(p.weights.len() as u64).to_le_bytes());
            for w in &p.weights {
                put_f64(out, *w);
            }
        }
        PolicyHandle::FaultInjected {
            inner,
            failure_probability,
        } => {
            put_f64(out, *failure_probability);
            out.push(inner.kind().tag());
            let mut nested = Vec::new();
            write_payload(inner, &mut nested);
            out.extend_from_slice(&(nested.len() as u64).to_le_bytes());
            out.extend_from_slice(&nested);
        }
    }
}

fn read_payload(tag: u8, payload: &[u8], depth: u32) -> Result<PolicyHandle, CodecError> {
    let kind = LearnerKind::from_tag(tag).ok_or(CodecError::UnknownKind(tag))?;
    let mut r = Reader::new(payload);
    let policy = match kind {
        LearnerKind::Constant => PolicyHandle::Constant(Action::new(r.finite()?, r.finite()?)),
        LearnerKind::GoToPose => PolicyHandle::GoToPose(GoToPose {
            k_rho: r.finite()?,
            k_alpha: r.finite()?,
            k_beta: r.finite()?,
            limits: r.limits()?,
        }),
        LearnerKind::TileQ => {
            let tilings = r.u32()?;
            let mut bins = [0u32; DIMS];
            for b in &mut bins {
                *b = r.u32()?;
            }
            let mut lo = [0.0; DIMS];
            let mut hi = [0.0; DIMS];
            for v in lo.iter_mut().chain(hi.iter_mut()) {
                *v = r.finite()?;
            }
            let coder = TileCoder { tilings, bins, lo, hi };
            if !coder.is_valid() {
                return Err(CodecError::Invalid("tile coder"));
            }
            let limits = r.limits()?;
            let n_actions = r.count(16)?;
            let mut actions = Vec::with_capacity(n_actions);
            for _ in 0..n_actions {
                actions.push(Action::new(r.finite()?, r.finite()?));
            }
            let n_weights = r.count(8)?;
            if actions.is_empty() || n_weights != coder.num_tiles() * actions.len() {
                return Err(CodecError::Invalid("weight table size"));
            }
            let mut weights = Vec::with_capacity(n_weights);
            for _ in 0..n_weights {
                weights.push(r.finite()?);
            }
            PolicyHandle::TileQ(TileQPolicy {
                coder,
                actions,
                limits,
                weights,
            })
        }
        LearnerKind::FaultInjected => {
            if depth + 1 >= MAX_DEPTH {
                return Err(CodecError::TooDeep);
            }
            let failure_probability = r.f64()?;
            if !(0.0..=1.0).contains(&failure_probability) {
                return Err(CodecError::Invalid("failure probability"));
            }
            let inner_tag = r.u8()?;
            let len = r.len_prefix()?;
            let inner = read_payload(inner_tag, r.take(len)?, depth + 1)?;
            PolicyHandle::FaultInjected {
                inner: Box::new(inner),
                failure_probability,
            }
        }
    };
    if !r.rest().is_empty() {
        return Err(CodecError::TrailingBytes(r.rest().len()));
    }
    Ok(policy)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.rest().len() < n {
            return Err(CodecError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn finite(&mut self) -> Result<f64, CodecError> {
        let v = self.f64()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CodecError::Invalid("non-finite value"))
        }
    }

    /// A byte length that must fit in the remaining input.
    fn len_prefix(&mut self) -> Result<usize, CodecError> {
        let n = self.u64()?;
        if n > self.rest().len() as u64 {
            return Err(CodecError::Truncated);
        }
        Ok(n as usize)
    }

    /// An element count whose elements (of `size` bytes) must fit in the
    /// remaining input.
    fn count(&mut self, size: u64) -> Result<usize, CodecError> {
        let n = self.u64()?;
        match n.checked_mul(size) {
            Some(bytes) if bytes <= self.rest().len() as u64 => Ok(n as usize),
            _ => Err(CodecError::Truncated),
        }
    }

    fn limits(&mut self) -> Result<ActionLimits, CodecError> {
        let l = ActionLimits {
            v_min: self.finite()?,
            v_max: self.finite()?,
            w_min: self.finite()?,
            w_max: self.finite()?,
        };
        if l.v_min > l.v_max || l.w_min > l.w_max {
            return Err(CodecError::Invalid("action limits"));
        }
        Ok(l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PoseRegion;
    use crate::policy::TileQConfig;

    fn st() -> Subtask {
        Subtask {
            id: "c".into(),
            entry: PoseRegion::new(0.0, 0.0, 3.0, 0.0, 0.5),
            exit: PoseRegion::new(10.0, 0.0, 1.0, 0.0, 0.4),
            timeout: 20.0,
        }
    }

    fn samples() -> Vec<PolicyHandle> {
        let mut tq = TileQConfig {
            tilings: 2,
            bins: [3, 3, 3],
            ..TileQConfig::default()
        }
        .fresh_policy(&st(), &ActionLimits::default());
        for (i, w) in tq.weights.iter_mut().enumerate() {
            *w = (i as f64 * 0.37).sin() * 1e-3 - 0.1;
        }
        vec![
            PolicyHandle::Constant(Action::new(0.5, -0.25)),
            PolicyHandle::GoToPose(GoToPose::default()),
            PolicyHandle::TileQ(tq),
            PolicyHandle::GoToPose(GoToPose::default()).with_failure_probability(0.1),
        ]
    }

    #[test]
    fn round_trip_bit_exact() {
        for p in samples() {
            let f = PolicyFile {
                fingerprint: subtask_fingerprint(&st()),
                policy: p,
            };
            let bytes = f.encode();
            let back = PolicyFile::decode(&bytes).unwrap();
            assert_eq!(back, f);
            assert_eq!(back.encode(), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = PolicyFile {
            fingerprint: 7,
            policy: samples().remove(2),
        }
        .encode();
        for cut in [0, 5, HEADER_LEN, bytes.len() - 1] {
            assert!(PolicyFile::decode(&bytes[..cut]).is_err());
        }
        let mut flipped = bytes.clone();
        flipped[HEADER_LEN + 3] ^= 1;
        assert_eq!(PolicyFile::decode(&flipped), Err(CodecError::Checksum));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert_eq!(PolicyFile::decode(&magic), Err(CodecError::BadMagic));
        let mut long = bytes;
        long.push(0);
        assert_eq!(PolicyFile::decode(&long), Err(CodecError::TrailingBytes(1)));
    }

    #[test]
    fn nesting_limit() {
        let mut p = PolicyHandle::Constant(Action::STOP);
        for _ in 0..3 {
            p = p.with_failure_probability(0.5);
        }
        let ok = PolicyFile {
            fingerprint: 0,
            policy: p.clone(),
        }
        .encode();
        assert!(PolicyFile::decode(&ok).is_ok());
        let deep = PolicyFile {
            fingerprint: 0,
            policy: p.with_failure_probability(0.5),
        }
        .encode();
        assert_eq!(PolicyFile::decode(&deep), Err(CodecError::TooDeep));
    }

    #[test]
    fn fingerprint_tracks_geometry() {
        let a = st();
        let mut b = st();
        b.exit.position_radius = 1.0 + 1e-12;
        assert_ne!(subtask_fingerprint(&a), subtask_fingerprint(&b));
        assert_eq!(subtask_fingerprint(&a), subtask_fingerprint(&st()));
    }
}
