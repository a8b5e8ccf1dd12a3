//! Canonical byte encoding.
//!
//! Every struct field is written in declaration order as a 4-byte big-endian
//! length followed by the field's own encoding. Scalars are fixed-width
//! big-endian, byte strings are raw, lists carry a 4-byte element count.
//! Signatures are always computed over this form.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("unexpected end of input")]
    Truncated,
    #[error("trailing bytes after value")]
    Trailing,
    #[error("invalid value: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn raw(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Writes a length-prefixed field.
    pub fn field<T: Canonical>(&mut self, value: &T) {
        let mut inner = Encoder::new();
        value.encode(&mut inner);
        self.buf
            .extend_from_slice(&(inner.buf.len() as u32).to_be_bytes());
        self.buf.extend_from_slice(&inner.buf);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() - self.pos < n {
            return Err(CodecError::Truncated);
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn rest(&mut self) -> &'a [u8] {
        let out = &self.buf[self.pos..];
        self.pos = self.buf.len();
        out
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn field<T: Canonical>(&mut self) -> Result<T, CodecError> {
        let len = u32::from_be_bytes(self.take(4)?.try_into().unwrap()) as usize;
        let slice = self.take(len)?;
        let mut inner = Decoder::new(slice);
        let value = T::decode(&mut inner)?;
        if !inner.is_empty() {
            return Err(CodecError::Trailing);
        }
        Ok(value)
    }
}

pub trait Canonical: Sized {
    fn encode(&self, e: &mut Encoder);
    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError>;

    fn to_canonical(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        self.encode(&mut e);
        e.finish()
    }

    fn from_canonical(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut d = Decoder::new(bytes);
        let v = Self::decode(&mut d)?;
        if !d.is_empty() {
            return Err(CodecError::Trailing);
        }
        Ok(v)
    }
}

/// Implements [`Canonical`] for a plain struct by listing its fields in
/// declaration order.
#[macro_export]
macro_rules! canonical_struct {
    ($name:ident { $($field:ident),* $(,)? }) => {
        impl $crate::codec::Canonical for $name {
            fn encode(&self, e: &mut $crate::codec::Encoder) {
                $( e.field(&self.$field); )*
            }
            fn decode(
                d: &mut $crate::codec::Decoder<'_>,
            ) -> ::std::result::Result<Self, $crate::codec::CodecError> {
                Ok(Self { $( $field: d.field()?, )* })
            }
        }
    };
}

macro_rules! int_impl {
    ($($t:ty),*) => {$(
        impl Canonical for $t {
            fn encode(&self, e: &mut Encoder) {
                e.raw(&self.to_be_bytes());
            }
            fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
                let b = d.take(std::mem::size_of::<$t>())?;
                Ok(<$t>::from_be_bytes(b.try_into().unwrap()))
            }
        }
    )*};
}

int_impl!(u8, u16, u32, u64);

impl Canonical for bool {
    fn encode(&self, e: &mut Encoder) {
        e.raw(&[*self as u8]);
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match d.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(CodecError::Invalid("bool")),
        }
    }
}

impl Canonical for String {
    fn encode(&self, e: &mut Encoder) {
        e.raw(self.as_bytes());
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
        String::from_utf8(d.rest().to_vec()).map_err(|_| CodecError::Invalid("utf-8"))
    }
}

impl<const N: usize> Canonical for [u8; N] {
    fn encode(&self, e: &mut Encoder) {
        e.raw(self);
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let b = d.take(N)?;
        if !d.is_empty() {
            return Err(CodecError::Trailing);
        }
        Ok(b.try_into().unwrap())
    }
}

/// Opaque byte string.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Bytes(pub Vec<u8>);

impl Canonical for Bytes {
    fn encode(&self, e: &mut Encoder) {
        e.raw(&self.0);
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Bytes(d.rest().to_vec()))
    }
}

impl<T: Canonical> Canonical for Option<T> {
    fn encode(&self, e: &mut Encoder) {
        match self {
            None => e.raw(&[0]),
            Some(v) => {
                e.raw(&[1]);
                e.field(v);
            }
        }
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match d.take(1)?[0] {
            0 => Ok(None),
            1 => Ok(Some(d.field()?)),
            _ => Err(CodecError::Invalid("option tag")),
        }
    }
}

impl<T: Canonical> Canonical for Vec<T> {
    fn encode(&self, e: &mut Encoder) {
        e.raw(&(self.len() as u32).to_be_bytes());
        for item in self {
            e.field(item);
        }
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let n = u32::from_be_bytes(d.take(4)?.try_into().unwrap()) as usize;
        // each element costs at least its 4-byte prefix
        if n > d.buf.len().saturating_sub(d.pos) / 4 {
            return Err(CodecError::Truncated);
        }
        (0..n).map(|_| d.field()).collect()
    }
}
