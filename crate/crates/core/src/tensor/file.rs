//! `.azt` tensor files.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "AZTN"
//! 4       1           version = 1
//! 5       1           dtype = 0 (f32 little-endian)
//! 6       1           ndim
//! 7       8 * ndim    dims, u64 little-endian
//! ...     4 * prod    payload, row-major
//! ```

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, FormatError, Result};

const MAGIC: [u8; 4] = *b"AZTN";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode(a: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * a.rank() + 4 * a.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(a.rank() as u8);
    for &d in a.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in a.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::ShortHeader);
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    if bytes.len() < 7 {
        return Err(FormatError::ShortHeader);
    }
    if bytes[4] != VERSION {
        return Err(FormatError::BadVersion(bytes[4]));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(FormatError::BadDtype(bytes[5]));
    }
    let ndim = bytes[6] as usize;
    if ndim == 0 {
        return Err(FormatError::ZeroDim);
    }
    let header = 7 + 8 * ndim;
    if bytes.len() < header {
        return Err(FormatError::ShortHeader);
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for chunk in bytes[7..header].chunks_exact(8) {
        let d = u64::from_le_bytes(chunk.try_into().unwrap());
        if d == 0 {
            return Err(FormatError::ZeroDim);
        }
        let d = usize::try_from(d).map_err(|_| FormatError::ShortHeader)?;
        count = count.checked_mul(d).ok_or(FormatError::ShortHeader)?;
        dims.push(d);
    }
    let payload = &bytes[header..];
    let expected = count.checked_mul(4).ok_or(FormatError::ShortHeader)?;
    if payload.len() < expected {
        return Err(FormatError::ShortPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(FormatError::TrailingBytes(payload.len() - expected));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite(i));
    }
    Ok(Tensor::from_parts(dims, data))
}

/// Writes `bytes` next to `path` and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: impl AsRef<Path>, a: &Tensor) -> Result<()> {
    write_atomic(path.as_ref(), &encode(a))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|source| Error::Format {
        path: path.to_owned(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{randn, SeededRng};

    #[test]
    fn zero_array_layout() {
        let a = Tensor::zeros(vec![2, 2]).unwrap();
        let bytes = encode(&a);
        assert_eq!(bytes.len(), 4 + 1 + 1 + 1 + 16 + 16);
        assert_eq!(&bytes[..7], b"AZTN\x01\x00\x02");
        assert_eq!(decode(&bytes).unwrap(), a);
    }

    #[test]
    fn one_point_five_payload() {
        let a = Tensor::new(vec![1], vec![1.5]).unwrap();
        let bytes = encode(&a);
        assert_eq!(&bytes[bytes.len() - 4..], &[0x00, 0x00, 0xC0, 0x3F]);
    }

    #[test]
    fn seeded_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.azt");
        let a = randn(&mut SeededRng::new(7), vec![3, 4, 5]).unwrap();
        write_tensor(&path, &a).unwrap();
        let b = read_tensor(&path).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(std::fs::read(&path).unwrap(), encode(&a));
    }

    #[test]
    fn named_format_errors() {
        let a = Tensor::filled(vec![2, 3], 1.0).unwrap();
        let good = encode(&a);

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert_eq!(decode(&bad), Err(FormatError::BadMagic(*b"XXXX")));

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(decode(&bad), Err(FormatError::BadVersion(2)));

        let mut bad = good.clone();
        bad[5] = 1;
        assert_eq!(decode(&bad), Err(FormatError::BadDtype(1)));

        let short = &good[..good.len() - 3];
        assert_eq!(
            decode(short),
            Err(FormatError::ShortPayload {
                expected: 24,
                found: 21
            })
        );
        assert!(decode(&good[..9]).is_err());

        let mut long = good.clone();
        long.push(0);
        assert_eq!(decode(&long), Err(FormatError::TrailingBytes(1)));
    }

    #[test]
    fn short_payload_message() {
        let a = Tensor::zeros(vec![4]).unwrap();
        let bytes = encode(&a);
        let err = decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.to_string().starts_with("short payload"));
    }

    #[test]
    fn read_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.azt");
        std::fs::write(&path, b"XXXX\x01\x00\x01").unwrap();
        let err = read_tensor(&path).unwrap_err();
        assert!(err.to_string().contains("bad.azt"));
        assert!(err.to_string().contains("bad magic"));
        let missing = read_tensor(dir.path().join("nope.azt")).unwrap_err();
        assert!(matches!(missing, Error::Io { .. }));
    }
}
