//! Flat binary dataset files for cross-run reproducibility. The header
//! carries the generation spec; tensors reuse the wire tensor layout.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::transport::codec::{crc32, put_u16, put_u32, put_tensor, take_tensor, Cursor};
use crate::transport::{domain_from_wire_byte, domain_wire_byte};

use super::{DomainDataset, GenSpec};

const MAGIC: &[u8; 4] = b"FCGD";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DataIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a dataset file")]
    BadMagic,
    #[error("unknown dataset file version {0}")]
    UnknownVersion(u16),
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    BadCrc { stored: u32, computed: u32 },
    #[error("malformed dataset file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Transport(#[from] crate::transport::TransportError),
}

pub fn write_dataset(ds: &DomainDataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    out.push(domain_wire_byte(ds.domain));
    put_u16(&mut out, ds.spec.task.len() as u16);
    out.extend_from_slice(ds.spec.task.as_bytes());
    out.extend_from_slice(&ds.spec.seed.to_le_bytes());
    out.extend_from_slice(&ds.spec.noise_sigma.to_le_bytes());
    put_u32(&mut out, ds.samples().len() as u32);
    for s in ds.samples() {
        put_tensor(&mut out, s);
    }
    let crc = crc32(&out);
    put_u32(&mut out, crc);
    out
}

pub fn read_dataset(bytes: &[u8]) -> Result<DomainDataset, DataIoError> {
    if bytes.len() < MAGIC.len() + 4 {
        return Err(DataIoError::BadMagic);
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([crc_bytes[0], crc_bytes[1], crc_bytes[2], crc_bytes[3]]);
    let computed = crc32(body);
    if stored != computed {
        return Err(DataIoError::BadCrc { stored, computed });
    }
    if &body[..4] != MAGIC {
        return Err(DataIoError::BadMagic);
    }
    let mut cur = Cursor::new(&body[4..]);
    let version = cur.u16("dataset version")?;
    if version != VERSION {
        return Err(DataIoError::UnknownVersion(version));
    }
    let domain_byte = cur.u8("domain")?;
    let domain = domain_from_wire_byte(domain_byte)
        .ok_or_else(|| DataIoError::Malformed(format!("domain byte {domain_byte}")))?;
    let task_len = cur.u16("task length")? as usize;
    let task = std::str::from_utf8(cur.take(task_len, "task name")?)
        .map_err(|_| DataIoError::Malformed("task name is not UTF-8".into()))?
        .to_string();
    let seed = u64::from_le_bytes(
        cur.take(8, "seed")?
            .try_into()
            .expect("eight bytes requested"),
    );
    let noise_sigma = f64::from_le_bytes(
        cur.take(8, "noise sigma")?
            .try_into()
            .expect("eight bytes requested"),
    );
    let count = cur.u32("sample count")? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        samples.push(take_tensor(&mut cur)?);
    }
    if cur.remaining() != 0 {
        return Err(DataIoError::Malformed("trailing bytes".into()));
    }
    if let Some(first) = samples.first() {
        if samples.iter().any(|s| s.shape() != first.shape()) {
            return Err(DataIoError::Malformed("samples of mixed shapes".into()));
        }
    }
    Ok(DomainDataset {
        domain,
        spec: GenSpec {
            task,
            seed,
            noise_sigma,
        },
        samples,
    })
}

pub fn save_dataset(path: &Path, ds: &DomainDataset) -> Result<(), DataIoError> {
    Ok(fs::write(path, write_dataset(ds))?)
}

pub fn load_dataset(path: &Path) -> Result<DomainDataset, DataIoError> {
    read_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_denoise_task;

    #[test]
    fn dataset_file_round_trips() {
        let (x, y, _) = make_denoise_task(6, 1, 0.1, 13).unwrap();
        for ds in [&x, &y] {
            let bytes = write_dataset(ds);
            let back = read_dataset(&bytes).unwrap();
            assert_eq!(back.domain, ds.domain);
            assert_eq!(back.spec, ds.spec);
            assert_eq!(back.samples(), ds.samples());
        }
    }

    #[test]
    fn corrupt_dataset_file_is_rejected() {
        let (x, _, _) = make_denoise_task(2, 1, 0.1, 13).unwrap();
        let mut bytes = write_dataset(&x);
        bytes[10] ^= 1;
        assert!(matches!(read_dataset(&bytes), Err(DataIoError::BadCrc { .. })));
    }

    #[test]
    fn save_and_load_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let (x, _, _) = make_denoise_task(3, 1, 0.2, 21).unwrap();
        let path = dir.path().join("x.fcgd");
        save_dataset(&path, &x).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.samples(), x.samples());
    }
}
