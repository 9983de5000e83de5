//! Binary parameter snapshots. Tensors use the same layout as the gradient
//! wire format; the trailing CRC makes silent truncation or corruption loud.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::transport::codec::{crc32, put_u16, put_u32, put_tensor, take_tensor, Cursor};

use super::{CycleModels, ModelSpec, NnError, Role};

const MAGIC: &[u8; 4] = b"FCGP";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ParamIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a parameter snapshot")]
    BadMagic,
    #[error("unknown snapshot version {0}")]
    UnknownVersion(u16),
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    BadCrc { stored: u32, computed: u32 },
    #[error("snapshot does not match the model spec: {0}")]
    SpecMismatch(String),
    #[error(transparent)]
    Transport(#[from] crate::transport::TransportError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub fn write_params(models: &CycleModels) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    out.push(models.groups().len() as u8);
    for group in models.groups() {
        out.push(group.role.wire_byte());
        put_u16(&mut out, group.entries().len() as u16);
        for (name, t) in group.entries() {
            put_u16(&mut out, name.len() as u16);
            out.extend_from_slice(name.as_bytes());
            put_tensor(&mut out, t);
        }
    }
    let crc = crc32(&out);
    put_u32(&mut out, crc);
    out
}

/// Parses a snapshot and installs it into a freshly built model of `spec`,
/// verifying that every group, name and shape matches the spec's topology.
pub fn read_params(bytes: &[u8], spec: &ModelSpec) -> Result<CycleModels, ParamIoError> {
    if bytes.len() < MAGIC.len() + 2 + 1 + 4 {
        return Err(ParamIoError::BadMagic);
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([crc_bytes[0], crc_bytes[1], crc_bytes[2], crc_bytes[3]]);
    let computed = crc32(body);
    if stored != computed {
        return Err(ParamIoError::BadCrc { stored, computed });
    }
    if &body[..4] != MAGIC {
        return Err(ParamIoError::BadMagic);
    }
    let mut cur = Cursor::new(&body[4..]);
    let version = cur.u16("snapshot version")?;
    if version != VERSION {
        return Err(ParamIoError::UnknownVersion(version));
    }

    // Seed is irrelevant: every entry is overwritten below.
    let mut models = CycleModels::new(spec.clone(), 0)?;
    let group_count = cur.u8("group count")? as usize;
    if group_count != models.groups().len() {
        return Err(ParamIoError::SpecMismatch(format!(
            "snapshot has {group_count} groups, spec expects {}",
            models.groups().len()
        )));
    }
    for gi in 0..group_count {
        let role_byte = cur.u8("role")?;
        let role = Role::from_wire_byte(role_byte)
            .ok_or_else(|| ParamIoError::SpecMismatch(format!("unknown role byte {role_byte}")))?;
        let group = &mut models.groups_mut()[gi];
        if group.role != role {
            return Err(ParamIoError::SpecMismatch(format!(
                "group {gi} is {role}, spec expects {}",
                group.role
            )));
        }
        let entry_count = cur.u16("entry count")? as usize;
        if entry_count != group.entries().len() {
            return Err(ParamIoError::SpecMismatch(format!(
                "group {role} has {entry_count} entries, spec expects {}",
                group.entries().len()
            )));
        }
        for ei in 0..entry_count {
            let name_len = cur.u16("name length")? as usize;
            let name = std::str::from_utf8(cur.take(name_len, "entry name")?)
                .map_err(|_| ParamIoError::SpecMismatch("invalid UTF-8 entry name".into()))?
                .to_string();
            let tensor = take_tensor(&mut cur)?;
            let slot = &mut group.entries_mut()[ei];
            if slot.0 != name || slot.1.shape() != tensor.shape() {
                return Err(ParamIoError::SpecMismatch(format!(
                    "entry {role}/{name} {:?} does not match spec entry {}/{:?}",
                    tensor.shape(),
                    slot.0,
                    slot.1.shape()
                )));
            }
            slot.1 = tensor;
        }
    }
    Ok(models)
}

pub fn save_params(path: &Path, models: &CycleModels) -> Result<(), ParamIoError> {
    Ok(fs::write(path, write_params(models))?)
}

pub fn load_params(path: &Path, spec: &ModelSpec) -> Result<CycleModels, ParamIoError> {
    let bytes = fs::read(path)?;
    read_params(&bytes, spec)
}
