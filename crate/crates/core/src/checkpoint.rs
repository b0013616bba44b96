//! Flat binary container of named `f64` arrays.
//!
//! Layout, all integers little-endian u64:
//!
//! ```text
//! entry_count
//! repeated entry_count times:
//!     name_len, name bytes (UTF-8), ndim, dims[ndim]
//! payloads: product(dims) f64 values per entry, in declaration order
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::tensor::Tensor;
use crate::Result;

/// In-memory view of a container: ordered named arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    /// Appends an array; names must be unique within one container.
    pub fn push(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(CoreError::InvalidArgument {
                op: "container",
                detail: format!("duplicate array name {name}"),
            });
        }
        self.entries.push((String::from(name), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_u64(&mut out, self.entries.len() as u64);
        for (name, t) in &self.entries {
            write_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            write_u64(&mut out, t.shape().len() as u64);
            for &d in t.shape() {
                write_u64(&mut out, d as u64);
            }
        }
        for (_, t) in &self.entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let count = cur.u64()? as usize;
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u64()? as usize;
            let raw = cur.take(name_len)?;
            let name =
                core::str::from_utf8(raw)
                    .map_err(|_| CoreError::Corrupt {
                        detail: format!("array name is not UTF-8"),
                    })?;
            let ndim = cur.u64()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()? as usize);
            }
            headers.push((String::from(name), shape));
        }
        let mut entries = Vec::with_capacity(count);
        for (name, shape) in headers {
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let raw = cur.take(8)?;
                let mut b = [0u8; 8];
                b.copy_from_slice(raw);
                data.push(f64::from_le_bytes(b));
            }
            entries.push((name, Tensor::from_vec(shape, data)?));
        }
        if cur.pos != bytes.len() {
            return Err(CoreError::Corrupt {
                detail: format!("{} trailing bytes", bytes.len() - cur.pos),
            });
        }
        Ok(Container { entries })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::Corrupt {
                detail: format!("truncated at byte {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        let raw = self.take(8)?;
        let mut b = [0u8; 8];
        b.copy_from_slice(raw);
        Ok(u64::from_le_bytes(b))
    }
}

fn write_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn round_trip_preserves_names_shapes_and_bits() {
        let mut c = Container::new();
        c.push(
            "align.pair_proj.w",
            Tensor::from_vec(vec![2, 3], vec![1.5, -2.25, 0.1, 4.0, -0.0, 9.75]).unwrap(),
        )
        .unwrap();
        c.push("shrink.ln.gain", Tensor::full(vec![4], 1.0)).unwrap();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(c, back);
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut c = Container::new();
        c.push("a", Tensor::zeros(vec![1])).unwrap();
        assert!(c.push("a", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn truncation_is_detected() {
        let mut c = Container::new();
        c.push("x", Tensor::full(vec![3], 2.0)).unwrap();
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(Container::from_bytes(&extended).is_err());
    }
}
