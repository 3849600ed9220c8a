//! Binary container used for model files and cache snapshots.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes   b"LRSHARE1"
//! header_len u64 LE    length of the JSON header in bytes
//! header     JSON      {"format", "dtype", "meta", "tensors": [{name, rows, cols, offset}]}
//! payload    raw       row-major little-endian elements; `offset` is in bytes
//!                      from the start of the payload
//! ```

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{Dtype, Scalar};

pub const MAGIC: &[u8; 8] = b"LRSHARE1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header<M> {
    pub format: String,
    pub dtype: Dtype,
    pub meta: M,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_container<T: Scalar, M: Serialize, W: Write>(
    mut w: W,
    format: &str,
    meta: &M,
    tensors: &[(String, &Matrix<T>)],
) -> Result<()> {
    let size = T::DTYPE.size_bytes() as u64;
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, m) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            offset,
        });
        offset += m.len() as u64 * size;
    }
    let header = Header {
        format: format.to_string(),
        dtype: T::DTYPE,
        meta,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, m) in tensors {
        buf.clear();
        for &v in m.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a container written by [`write_container`], checking the format
/// tag and that the stored dtype matches `T`.
pub fn read_container<T: Scalar, M: DeserializeOwned, R: Read>(
    mut r: R,
    format: &str,
) -> Result<(M, Vec<(String, Matrix<T>)>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header<M> = serde_json::from_slice(&json)?;
    if header.format != format {
        return Err(Error::Format(format!(
            "expected a `{format}` container, found `{}`",
            header.format
        )));
    }
    if header.dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "container holds {} data, requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let size = T::DTYPE.size_bytes();
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let start = e.offset as usize;
        let end = start + e.rows * e.cols * size;
        let bytes = payload.get(start..end).ok_or_else(|| {
            Error::Format(format!("tensor `{}` runs past end of payload", e.name))
        })?;
        let data = bytes.chunks_exact(size).map(T::read_le).collect();
        tensors.push((e.name, Matrix::new(e.rows, e.cols, data)?));
    }
    Ok((header.meta, tensors))
}

/// Removes and returns the tensor called `name`.
pub(crate) fn take_tensor<T>(
    tensors: &mut Vec<(String, Matrix<T>)>,
    name: &str,
) -> Result<Matrix<T>> {
    let idx = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
    Ok(tensors.swap_remove(idx).1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_checks() {
        let a = Matrix::<f64>::from_fn(2, 3, |i, j| (i * 3 + j) as f64 - 2.5);
        let b = Matrix::<f64>::zeros(0, 4);
        let mut buf = Vec::new();
        write_container(
            &mut buf,
            "test",
            &42u32,
            &[("a".into(), &a), ("b".into(), &b)],
        )
        .unwrap();
        let (meta, tensors): (u32, Vec<(String, Matrix<f64>)>) =
            read_container(&buf[..], "test").unwrap();
        assert_eq!(meta, 42);
        assert_eq!(tensors[0], ("a".to_string(), a));
        assert_eq!(tensors[1].1.shape(), (0, 4));

        assert!(matches!(
            read_container::<f64, u32, _>(&buf[..], "other"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            read_container::<f32, u32, _>(&buf[..], "test"),
            Err(Error::Format(_))
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_container::<f64, u32, _>(&bad[..], "test").is_err());
        let truncated = &buf[..buf.len() - 8];
        assert!(read_container::<f64, u32, _>(truncated, "test").is_err());
    }
}
