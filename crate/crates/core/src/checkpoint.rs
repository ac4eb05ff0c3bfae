//! Named-tensor checkpoint files.
//!
//! Layout (little-endian): magic `TAPF`, `u32` version, `u32` tensor count,
//! then per tensor a `u16` name length, the UTF-8 name, a `u8` dtype tag
//! (0 = f32, 1 = f64), a `u8` rank, `rank` `u32` extents and the row-major
//! payload.

use std::fs;
use std::path::Path;

use crate::ad::Tensor;
use crate::binio::{put_values, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TAPF";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    /// Rounds `t` to this precision.
    pub fn apply(self, t: &Tensor) -> Tensor {
        match self {
            Precision::F32 => t.to_f32_precision(),
            Precision::F64 => t.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::config(format!("checkpoint has no tensor {name}")))
    }

    pub fn encode(&self, precision: Precision) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let n = u16::try_from(name.len())
                .map_err(|_| Error::config(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::config(format!("rank of {name} exceeds 255")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(precision.tag());
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::config(format!("extent of {name} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            put_values(&mut out, precision.tag(), t.data());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"TAPF\"")));
        }
        let at = r.offset();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(at, format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let at = r.offset();
            let n = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(n, "name")?)
                .map_err(|_| Error::format(at + 2, "tensor name is not UTF-8"))?
                .to_string();
            let at = r.offset();
            let dtype = r.u8("dtype")?;
            if dtype > 1 {
                return Err(Error::format(at, format!("unknown dtype tag {dtype} for {name}")));
            }
            let rank = r.u8("rank")? as usize;
            let at = r.offset();
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            if shape.contains(&0) {
                return Err(Error::format(at, format!("zero extent in {name}")));
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::format(at, format!("size overflow in {name}")))?;
            let data = r.values(dtype, numel, &name)?;
            ck.push(name, Tensor::new(shape, data)?);
        }
        if !r.is_empty() {
            return Err(Error::format(r.offset(), "trailing bytes after last tensor"));
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path, precision: Precision) -> Result<()> {
        fs::write(path, self.encode(precision)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push("a", Tensor::from_rows(&[vec![1.0, -2.5], vec![0.1, 3.0]]).unwrap());
        ck.push("step", Tensor::scalar(7.0));
        ck
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let ck = sample();
        assert_eq!(Checkpoint::decode(&ck.encode(Precision::F64).unwrap()).unwrap(), ck);
    }

    #[test]
    fn f32_round_trip_of_f32_values_is_exact() {
        let mut ck = sample();
        for (_, t) in &mut ck.tensors {
            *t = t.to_f32_precision();
        }
        assert_eq!(Checkpoint::decode(&ck.encode(Precision::F32).unwrap()).unwrap(), ck);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode(Precision::F64).unwrap();
        assert_eq!(&bytes[..4], b"TAPF");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        // name "a": 2 + 1, dtype, rank, 2 dims, 4 f64
        let first = 2 + 1 + 1 + 1 + 8 + 32;
        let second = 2 + 4 + 1 + 1 + 8;
        assert_eq!(bytes.len(), 12 + first + second);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = sample().encode(Precision::F64).unwrap();
        for cut in 0..bytes.len() {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn corrupt_tags_are_reported() {
        let mut bytes = sample().encode(Precision::F64).unwrap();
        bytes[15] = 9; // dtype of the first tensor
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Format { offset: 15, .. })));
    }
}
