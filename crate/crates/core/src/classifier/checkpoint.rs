//! Binary weight checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//! magic `ACNN`, version, input height, width, channels, classes,
//! trained flag, tensor count, then per tensor its rank followed by its
//! dimensions, then every tensor's values as little-endian `f64`.

use std::path::Path;

use super::convnet::{Activation, ConvNet};
use crate::error::{Error, Result};
use crate::imagecore::Shape;

const MAGIC: &[u8; 4] = b"ACNN";
const VERSION: u32 = 1;

pub fn encode_checkpoint(net: &ConvNet) -> Vec<u8> {
    let shapes = ConvNet::tensor_shapes(net.input, net.classes);
    let mut out = Vec::with_capacity(64 + 8 * net.num_params());
    out.extend_from_slice(MAGIC);
    let put = |v: usize, out: &mut Vec<u8>| out.extend_from_slice(&(v as u32).to_le_bytes());
    put(VERSION as usize, &mut out);
    put(net.input.height, &mut out);
    put(net.input.width, &mut out);
    put(net.input.channels, &mut out);
    put(net.classes, &mut out);
    put(usize::from(net.trained), &mut out);
    put(shapes.len(), &mut out);
    for s in &shapes {
        put(s.len(), &mut out);
        for d in s {
            put(*d, &mut out);
        }
    }
    for t in &net.tensors {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                message: "checkpoint truncated".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            message: message.into(),
        }
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ConvNet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let (h, w, c, classes) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let trained = match r.u32()? {
        0 => false,
        1 => true,
        other => return Err(r.fail(format!("bad trained flag {other}"))),
    };
    let input = Shape::new(h, w, c);
    if !(c == 1 || c == 3) || h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 || classes < 2 {
        return Err(r.fail(format!("unsupported network geometry {input} with {classes} classes")));
    }
    let expected = ConvNet::tensor_shapes(input, classes);
    let count = r.u32()?;
    if count != expected.len() {
        return Err(r.fail(format!("expected {} tensors, found {count}", expected.len())));
    }
    for e in &expected {
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if &dims != e {
            return Err(r.fail(format!("tensor shape {dims:?} does not match expected {e:?}")));
        }
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for e in &expected {
        let n: usize = e.iter().product();
        let raw = r.take(8 * n)?;
        tensors.push(
            raw.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect::<Vec<_>>(),
        );
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after checkpoint payload"));
    }
    Ok(ConvNet {
        input,
        classes,
        tensors,
        activation: Activation::Relu,
        trained,
    })
}

pub fn save_checkpoint(net: &ConvNet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path.as_ref(), encode_checkpoint(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ConvNet> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut net = ConvNet::new(Shape::new(8, 12, 3), 4, 9).unwrap();
        net.tensors[1][3] = -0.0;
        net.tensors[5][0] = f64::MIN_POSITIVE;
        net.mark_trained();
        let bytes = encode_checkpoint(&net);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&back), bytes);
        assert_eq!(back.tensors[1][3].to_bits(), (-0.0f64).to_bits());
        assert!(back.is_trained());
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let net = ConvNet::new(Shape::new(8, 8, 1), 3, 1).unwrap();
        let bytes = encode_checkpoint(&net);
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra), Err(Error::Format { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&magic), Err(Error::Format { offset: 0, .. })));
        let mut version = bytes;
        version[4] = 9;
        assert!(decode_checkpoint(&version).is_err());
        assert!(decode_checkpoint(&[]).is_err());
    }
}
