//! Deterministic byte codec for [`GradientMessage`].
//!
//! Layout (all integers little-endian):
//!   version u16 | round u32 | client_id u32 | domain u8 | step_kind u8
//!   | group_count u8
//!   | per group: role u8 | entry_count u16
//!     | per entry: name_len u16 | name bytes | rank u8 | extents u32 each
//!       | payload f32 each (row-major)
//!   | crc32 u32 over every preceding byte
//!
//! The CRC is verified before any field is trusted. Golden-fixture tests pin
//! the layout so it cannot drift between platforms or releases.

use crate::nn::Role;
use crate::tensor::Tensor;

use super::{
    domain_from_wire_byte, domain_wire_byte, GradGroup, GradientMessage, StepKind, TransportError,
    WIRE_VERSION,
};

const MAX_RANK: usize = 8;
/// Ceiling on a single tensor payload accepted by `decode` (in elements);
/// keeps a hostile length field from forcing a giant allocation.
const MAX_ELEMS: usize = 64 * 1024 * 1024 / 4;

const fn build_crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u32;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 1 != 0 {
                (crc >> 1) ^ 0xEDB8_8320
            } else {
                crc >> 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

static CRC_TABLE: [u32; 256] = build_crc_table();

/// Standard CRC-32 (polynomial 0xEDB88320, reflected, init/final 0xFFFFFFFF).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = (crc >> 8) ^ CRC_TABLE[((crc ^ b as u32) & 0xFF) as usize];
    }
    !crc
}

// ---- primitive writers / readers -----------------------------------------

pub(crate) fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], TransportError> {
        if self.remaining() < n {
            return Err(TransportError::Truncated { context });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, context: &'static str) -> Result<u8, TransportError> {
        Ok(self.take(1, context)?[0])
    }

    pub fn u16(&mut self, context: &'static str) -> Result<u16, TransportError> {
        let b = self.take(2, context)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, context: &'static str) -> Result<u32, TransportError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Serializes one tensor as rank, extents, payload. Shared with the
/// parameter and dataset file formats.
pub(crate) fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.push(t.shape().len() as u8);
    for &e in t.shape() {
        put_u32(out, e as u32);
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn take_tensor(cur: &mut Cursor<'_>) -> Result<Tensor<f32>, TransportError> {
    let rank = cur.u8("tensor rank")? as usize;
    if rank > MAX_RANK {
        return Err(TransportError::LengthOverflow { context: "tensor rank" });
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for _ in 0..rank {
        let e = cur.u32("tensor extent")? as usize;
        if e == 0 {
            return Err(TransportError::LengthOverflow { context: "zero extent" });
        }
        numel = numel
            .checked_mul(e)
            .filter(|&n| n <= MAX_ELEMS)
            .ok_or(TransportError::LengthOverflow { context: "tensor extents" })?;
        shape.push(e);
    }
    // Bound against the actual remaining bytes before allocating.
    if cur.remaining() < numel * 4 {
        return Err(TransportError::Truncated { context: "tensor payload" });
    }
    let raw = cur.take(numel * 4, "tensor payload")?;
    let mut data = Vec::with_capacity(numel);
    for chunk in raw.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Ok(Tensor::from_vec(shape, data)?)
}

pub(crate) fn tensor_encoded_len(t: &Tensor<f32>) -> usize {
    1 + 4 * t.shape().len() + 4 * t.numel()
}

// ---- message codec --------------------------------------------------------

/// Encodes a message to its deterministic byte form. Rejects non-finite
/// payload values up front: a NaN gradient must abort loudly, not travel.
pub fn encode(msg: &GradientMessage) -> Result<Vec<u8>, TransportError> {
    for group in &msg.groups {
        for (name, t) in &group.entries {
            if let Some(index) = t.data().iter().position(|v| !v.is_finite()) {
                return Err(TransportError::NonFinitePayload {
                    group: group.role,
                    name: name.clone(),
                    index,
                });
            }
        }
    }
    let mut out = Vec::with_capacity(encoded_len(msg));
    put_u16(&mut out, msg.version);
    put_u32(&mut out, msg.round);
    put_u32(&mut out, msg.client_id);
    out.push(domain_wire_byte(msg.domain));
    out.push(msg.step_kind.wire_byte());
    out.push(msg.groups.len() as u8);
    for group in &msg.groups {
        out.push(group.role.wire_byte());
        put_u16(&mut out, group.entries.len() as u16);
        for (name, t) in &group.entries {
            put_u16(&mut out, name.len() as u16);
            out.extend_from_slice(name.as_bytes());
            put_tensor(&mut out, t);
        }
    }
    let crc = crc32(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

/// Exact encoded size of a message, header and CRC included.
pub fn encoded_len(msg: &GradientMessage) -> usize {
    let mut len = 2 + 4 + 4 + 1 + 1 + 1; // fixed header
    for group in &msg.groups {
        len += 1 + 2;
        for (name, t) in &group.entries {
            len += 2 + name.len() + tensor_encoded_len(t);
        }
    }
    len + 4 // crc
}

/// Decodes a message, verifying the trailing CRC over the whole buffer
/// before parsing any field. Never reads past declared lengths.
pub fn decode(bytes: &[u8]) -> Result<GradientMessage, TransportError> {
    if bytes.len() < 17 {
        return Err(TransportError::Truncated { context: "message header" });
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([crc_bytes[0], crc_bytes[1], crc_bytes[2], crc_bytes[3]]);
    let computed = crc32(body);
    if stored != computed {
        return Err(TransportError::BadCrc { stored, computed });
    }

    let mut cur = Cursor::new(body);
    let version = cur.u16("version")?;
    if version != WIRE_VERSION {
        return Err(TransportError::UnknownVersion(version));
    }
    let round = cur.u32("round")?;
    let client_id = cur.u32("client id")?;
    let domain_byte = cur.u8("domain")?;
    let domain = domain_from_wire_byte(domain_byte).ok_or(TransportError::UnknownByte {
        what: "domain",
        value: domain_byte,
    })?;
    let kind_byte = cur.u8("step kind")?;
    let step_kind = StepKind::from_wire_byte(kind_byte).ok_or(TransportError::UnknownByte {
        what: "step kind",
        value: kind_byte,
    })?;
    let group_count = cur.u8("group count")? as usize;
    let mut groups = Vec::with_capacity(group_count);
    for _ in 0..group_count {
        let role_byte = cur.u8("role")?;
        let role = Role::from_wire_byte(role_byte).ok_or(TransportError::UnknownByte {
            what: "role",
            value: role_byte,
        })?;
        let entry_count = cur.u16("entry count")? as usize;
        let mut entries = Vec::with_capacity(entry_count.min(1024));
        for _ in 0..entry_count {
            let name_len = cur.u16("name length")? as usize;
            let name_bytes = cur.take(name_len, "entry name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| TransportError::BadName)?
                .to_string();
            entries.push((name, take_tensor(&mut cur)?));
        }
        groups.push(GradGroup { role, entries });
    }
    if cur.remaining() != 0 {
        return Err(TransportError::LengthOverflow { context: "trailing bytes after groups" });
    }
    Ok(GradientMessage {
        version,
        round,
        client_id,
        domain,
        step_kind,
        groups,
    })
}

/// Encoded size of a message carrying one gradient per parameter of the
/// given groups (what a client transmits per step for that model variant).
pub fn message_size(groups: &[crate::nn::ParamGroup]) -> usize {
    let msg = GradientMessage::new(
        0,
        0,
        crate::nn::Domain::X,
        StepKind::Combined,
        groups
            .iter()
            .map(|g| GradGroup {
                role: g.role,
                entries: g
                    .entries()
                    .iter()
                    .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                    .collect(),
            })
            .collect(),
    );
    encoded_len(&msg)
}
