//! The GMNO binary container: named dense `f64` arrays.
//!
//! Layout (all integers little-endian):
//! `"GMNO"`, version `u32`, entry count `u32`, then per entry a `u16` name
//! length, the UTF-8 name, a dtype byte (`0` = f64), a rank byte, `rank`
//! dimensions as `u64`, and the row-major payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"GMNO";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 0;

/// Ordered named arrays.
pub type Entries = IndexMap<String, Tensor>;

pub fn write_to(out: &mut impl Write, entries: &Entries) -> Result<()> {
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len()).map_err(|_| Error::Format("too many entries".into()))?;
    out.write_all(&count.to_le_bytes())?;
    for (name, tensor) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        let rank = u8::try_from(tensor.rank()).map_err(|_| Error::Format(format!("rank too large: {name}")))?;
        out.write_all(&[DTYPE_F64, rank])?;
        for &d in tensor.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(tensor.len() * 8);
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&payload)?;
    }
    Ok(())
}

fn read_array<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated container: {e}")))?;
    Ok(buf)
}

pub fn read_from(input: &mut impl Read) -> Result<Entries> {
    if read_array::<4>(input)? != MAGIC {
        return Err(Error::Format("not a GMNO container (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_array(input)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = u32::from_le_bytes(read_array(input)?);
    let mut entries = Entries::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_array(input)?) as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name).map_err(|e| Error::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let [dtype, rank] = read_array::<2>(input)?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("entry `{name}` has unsupported dtype {dtype}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = u64::from_le_bytes(read_array(input)?);
            shape.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("entry `{name}` is too large")))?;
        let mut payload = Vec::new();
        input
            .take((count as u64).saturating_mul(8))
            .read_to_end(&mut payload)
            .map_err(|e| Error::Format(format!("truncated payload of `{name}`: {e}")))?;
        if payload.len() != count * 8 {
            return Err(Error::Format(format!("truncated payload of `{name}`")));
        }
        let data = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        if entries.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate entry `{name}`")));
        }
    }
    Ok(entries)
}

pub fn save(path: impl AsRef<Path>, entries: &Entries) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_to(&mut out, entries)?;
    out.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Entries> {
    read_from(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut entries = Entries::new();
        entries.insert("ab".into(), Tensor::new(&[2], vec![1.0, -0.5]).unwrap());
        let mut bytes = Vec::new();
        write_to(&mut bytes, &entries).unwrap();
        assert_eq!(&bytes[..4], b"GMNO");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &2u16.to_le_bytes());
        assert_eq!(&bytes[14..16], b"ab");
        assert_eq!(&bytes[16..18], &[0, 1]);
        assert_eq!(&bytes[18..26], &2u64.to_le_bytes());
        assert_eq!(&bytes[26..34], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 42);
    }

    #[test]
    fn rejects_corruption() {
        let mut entries = Entries::new();
        entries.insert("x".into(), Tensor::zeros(&[3, 2]));
        let mut bytes = Vec::new();
        write_to(&mut bytes, &entries).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_from(&mut bad.as_slice()), Err(Error::Format(_))));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(read_from(&mut &truncated[..]), Err(Error::Format(_))));
        let mut dtype = bytes.clone();
        dtype[15] = 7;
        assert!(matches!(read_from(&mut dtype.as_slice()), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            items in proptest::collection::vec(
                ("[a-zA-Z0-9_.é]{0,12}", proptest::collection::vec(0usize..4, 0..4), any::<u64>()),
                0..6,
            )
        ) {
            let mut entries = Entries::new();
            for (name, shape, bits) in items {
                let len: usize = shape.iter().product();
                let data = (0..len).map(|i| f64::from_bits(bits.wrapping_mul(i as u64 + 1))).collect();
                entries.insert(name, Tensor::new(&shape, data).unwrap());
            }
            let mut bytes = Vec::new();
            write_to(&mut bytes, &entries).unwrap();
            let back = read_from(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(back.len(), entries.len());
            for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }
}
