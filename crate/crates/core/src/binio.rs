//! Little-endian byte reader that reports the offset of every failure.

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.offset(),
                format!("truncated while reading {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    /// `n` values stored as f32 (`tag` 0) or f64 (`tag` 1).
    pub fn values(&mut self, tag: u8, n: usize, what: &str) -> Result<Vec<f64>> {
        let width = dtype_width(tag).ok_or_else(|| Error::format(self.offset(), format!("unknown dtype tag {tag}")))?;
        let bytes = n
            .checked_mul(width)
            .ok_or_else(|| Error::format(self.offset(), format!("{what}: size overflow")))?;
        let raw = self.take(bytes, what)?;
        Ok(match tag {
            0 => raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            _ => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        })
    }
}

pub(crate) fn dtype_width(tag: u8) -> Option<usize> {
    match tag {
        0 => Some(4),
        1 => Some(8),
        _ => None,
    }
}

/// Appends `values` as f32 (`tag` 0) or f64 (`tag` 1).
pub(crate) fn put_values(out: &mut Vec<u8>, tag: u8, values: &[f64]) {
    for &v in values {
        if tag == 0 {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}
