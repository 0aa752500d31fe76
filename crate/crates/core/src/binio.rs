//! Little-endian container primitives shared by every on-disk format.
//!
//! All containers open with a six byte tag (`KSxx1\n`) followed by a flat
//! sequence of `u64` counts and `f64` payloads. There is no padding.

use byteorder::{ByteOrder, LittleEndian};

use crate::error::ParseError;

pub(crate) const TAG_LEN: usize = 6;

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn with_tag(tag: &[u8; TAG_LEN]) -> Self {
        let mut w = Writer::default();
        w.buf.extend_from_slice(tag);
        w
    }

    pub fn u64(&mut self, v: u64) {
        let mut b = [0u8; 8];
        LittleEndian::write_u64(&mut b, v);
        self.buf.extend_from_slice(&b);
    }

    pub fn f64(&mut self, v: f64) {
        let mut b = [0u8; 8];
        LittleEndian::write_f64(&mut b, v);
        self.buf.extend_from_slice(&b);
    }

    pub fn f64s(&mut self, vs: impl IntoIterator<Item = f64>) {
        for v in vs {
            self.f64(v);
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn expect_tag(&mut self, tag: &[u8; TAG_LEN]) -> Result<(), ParseError> {
        let found = self.take(TAG_LEN)?;
        if found != tag {
            return Err(ParseError::BadMagic {
                expected: String::from_utf8_lossy(tag).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ParseError> {
        if self.remaining() < n {
            return Err(ParseError::Truncated {
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u64(&mut self) -> Result<u64, ParseError> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    /// Reads a count and converts it to `usize`.
    pub fn count(&mut self, what: &str) -> Result<usize, ParseError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| ParseError::DimensionOverflow(format!("{what} = {v}")))
    }

    pub fn f64(&mut self) -> Result<f64, ParseError> {
        Ok(LittleEndian::read_f64(self.take(8)?))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], ParseError> {
        self.take(n)
    }

    /// Reads `n` doubles after checking that the payload is actually present.
    pub fn f64s(&mut self, n: usize, section: &'static str) -> Result<Vec<f64>, ParseError> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| ParseError::DimensionOverflow(format!("{section}: {n} values")))?;
        let raw = self.take(bytes)?;
        let mut out = vec![0.0; n];
        LittleEndian::read_f64_into(raw, &mut out);
        Ok(out)
    }

    pub fn finite_f64s(&mut self, n: usize, section: &'static str) -> Result<Vec<f64>, ParseError> {
        let v = self.f64s(n, section)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ParseError::NonFinite { section });
        }
        Ok(v)
    }

    pub fn finish(self) -> Result<(), ParseError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(ParseError::TrailingBytes(n)),
        }
    }
}

/// Product of counts that must fit in memory, reported as an overflow otherwise.
pub(crate) fn checked_product(dims: &[usize], what: &str) -> Result<usize, ParseError> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| ParseError::DimensionOverflow(format!("{what}: {dims:?}")))
    })
}
