//! Versioned binary tensor store.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"TRFP" | version: u32
//! repeated until EOF:
//!   name_len: u64 | name: UTF-8 bytes | rank: u64 | dims: rank x u64 | data: f64 x prod(dims)
//! ```
//!
//! Data is row-major. Scalars are rank-0 tensors with one value.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Result, TrfpError};

pub const MAGIC: &[u8; 4] = b"TRFP";
pub const FORMAT_VERSION: u32 = 1;

const MAX_NAME_LEN: u64 = 4096;
const MAX_RANK: u64 = 8;
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            dims: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            dims: vec![data.len()],
            data,
        }
    }

    pub fn matrix(name: impl Into<String>, a: &Array2<f64>) -> Self {
        Self {
            name: name.into(),
            dims: vec![a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    pub fn as_scalar(&self) -> Result<f64> {
        match (self.dims.len(), self.data.as_slice()) {
            (0, [x]) => Ok(*x),
            _ => Err(TrfpError::Checkpoint(format!(
                "`{}` is not a scalar (dims {:?})",
                self.name, self.dims
            ))),
        }
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        if self.dims.len() != 2 {
            return Err(TrfpError::Checkpoint(format!(
                "`{}` is not a matrix (dims {:?})",
                self.name, self.dims
            )));
        }
        Array2::from_shape_vec((self.dims[0], self.dims[1]), self.data.clone())
            .map_err(|e| TrfpError::Checkpoint(format!("`{}`: {e}", self.name)))
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    pub tensors: Vec<NamedTensor>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: NamedTensor) {
        self.tensors.push(t);
    }

    pub fn extend(&mut self, ts: impl IntoIterator<Item = NamedTensor>) {
        self.tensors.extend(ts);
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| TrfpError::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t.name == name)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.get(name)?.as_scalar()
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        self.get(name)?.to_matrix()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for t in &self.tensors {
            let expected: usize = t.dims.iter().product();
            if expected != t.data.len() {
                return Err(TrfpError::Checkpoint(format!(
                    "`{}`: dims {:?} do not match {} values",
                    t.name,
                    t.dims,
                    t.data.len()
                )));
            }
            w.write_all(&(t.name.len() as u64).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.dims.len() as u64).to_le_bytes())?;
            for &d in &t.dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in &t.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| TrfpError::Checkpoint("file too short for header".into()))?;
        if &magic != MAGIC {
            return Err(TrfpError::Checkpoint(format!(
                "bad magic bytes {:?}, expected \"TRFP\"",
                magic
            )));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(TrfpError::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }

        let mut store = TensorStore::new();
        while let Some(name_len) = read_u64_or_eof(&mut r)? {
            if name_len > MAX_NAME_LEN {
                return Err(TrfpError::Checkpoint(format!("name length {name_len} is implausible")));
            }
            let mut name = vec![0u8; name_len as usize];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| TrfpError::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = read_u64(&mut r)?;
            if rank > MAX_RANK {
                return Err(TrfpError::Checkpoint(format!("`{name}`: rank {rank} is implausible")));
            }
            let mut dims = Vec::with_capacity(rank as usize);
            let mut count: u64 = 1;
            for _ in 0..rank {
                let d = read_u64(&mut r)?;
                count = count.saturating_mul(d);
                dims.push(d as usize);
            }
            if count > MAX_ELEMENTS {
                return Err(TrfpError::Checkpoint(format!("`{name}`: {count} elements is implausible")));
            }
            let mut data = Vec::with_capacity(count as usize);
            let mut buf = [0u8; 8];
            for _ in 0..count {
                read_exact(&mut r, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            store.push(NamedTensor { name, dims, data });
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => TrfpError::Checkpoint("truncated tensor record".into()),
        _ => TrfpError::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u64_or_eof(r: &mut impl Read) -> Result<Option<u64>> {
    let mut b = [0u8; 8];
    let mut filled = 0;
    while filled < 8 {
        match r.read(&mut b[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(TrfpError::Checkpoint("truncated tensor record".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(u64::from_le_bytes(b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> TensorStore {
        let mut s = TensorStore::new();
        s.push(NamedTensor::matrix("w", &array![[1.0, -2.5], [3.0, 1e-300]]));
        s.push(NamedTensor::scalar("step", 42.0));
        s.push(NamedTensor::vector("v", vec![0.1, f64::MIN_POSITIVE]));
        s
    }

    #[test]
    fn header_layout_is_fixed() {
        let mut buf = Vec::new();
        TensorStore::new().write_to(&mut buf).unwrap();
        assert_eq!(buf, [b'T', b'R', b'F', b'P', 1, 0, 0, 0]);
    }

    #[test]
    fn scalar_record_layout() {
        let mut s = TensorStore::new();
        s.push(NamedTensor::scalar("a", 1.0));
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let mut expected = b"TRFP".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.push(b'a');
        expected.extend(0u64.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = sample();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = TensorStore::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, s);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn bad_magic_is_refused() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf[0] = b'X';
        let err = TensorStore::read_from(buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn version_mismatch_is_refused() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf[4] = 7;
        let err = TensorStore::read_from(buf.as_slice()).unwrap_err();
        assert!(matches!(err, TrfpError::CheckpointVersion { found: 7, expected: 1 }));
    }

    #[test]
    fn truncation_is_detected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(TensorStore::read_from(buf.as_slice()).is_err());
    }
}
