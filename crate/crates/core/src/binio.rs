//! Little-endian primitives shared by the checkpoint and index formats.

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len_u32(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }

    pub fn str(&mut self, s: &str) {
        self.len_u32(s.len());
        self.bytes(s.as_bytes());
    }

    pub fn f64s(&mut self, xs: &[f64]) {
        self.len_u32(xs.len());
        for &x in xs {
            self.f64(x);
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!(
                    "truncated while reading {what} ({n} bytes wanted, {} left)",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn usize(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    pub fn str(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let n = self.usize(what)?;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::format(at, format!("{what} is not UTF-8")))
    }

    pub fn f64s(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.usize(what)?;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::format(
                self.pos,
                format!("truncated {what}: {n} values declared"),
            ));
        }
        (0..n).map(|_| self.f64(what)).collect()
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.pos, "trailing bytes"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_truncation() {
        let mut w = Writer::default();
        w.str("adam");
        w.f64s(&[1.5, -0.0]);
        w.u64(7);
        let mut r = Reader::new(&w.buf);
        assert_eq!(r.str("s").unwrap(), "adam");
        assert_eq!(r.f64s("v").unwrap(), vec![1.5, -0.0]);
        assert_eq!(r.u64("n").unwrap(), 7);
        r.expect_end().unwrap();
        let mut r = Reader::new(&w.buf[..10]);
        r.str("s").unwrap();
        assert!(matches!(r.f64s("v"), Err(Error::Format { offset: 8, .. })));
    }
}
