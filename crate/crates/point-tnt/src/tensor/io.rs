//! Flat binary tensor format and parameter checkpoints.
//!
//! Tensor record: magic `PTNT`, version `u8`, dtype `u8` (0 = f32, 1 = f64),
//! rank `u8`, extents as little-endian `u64`, then raw little-endian values.
//!
//! Checkpoint: magic `PTNT`, version `u8`, marker byte `0xFF`, entry count
//! `u32`, then per entry a `u32` name length, the UTF-8 name, and the `u64`
//! byte offset of its tensor record relative to the end of the manifest;
//! the records follow back to back, each in the tensor format above.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::element::{Dtype, Element};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PTNT";
pub const VERSION: u8 = 1;
const MANIFEST_MARKER: u8 = 0xFF;

pub fn write_tensor<E: Element, W: Write>(w: &mut W, shape: &[usize], data: &[E]) -> Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    if shape.len() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} exceeds format", shape.len())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, E::DTYPE.to_u8(), shape.len() as u8])?;
    for &ext in shape {
        w.write_all(&(ext as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * E::DTYPE.size_of());
    for &v in data {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<E: Element, R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<E>)> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad magic (expected PTNT)".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", head[4])));
    }
    let dtype = Dtype::from_u8(head[5])
        .ok_or_else(|| Error::Format(format!("unknown dtype tag {}", head[5])))?;
    if dtype != E::DTYPE {
        return Err(Error::Format(format!(
            "dtype mismatch: file holds {:?}, reader wants {:?}",
            dtype,
            E::DTYPE
        )));
    }
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut ext = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut ext)?;
        shape.push(u64::from_le_bytes(ext) as usize);
    }
    let numel: usize = shape.iter().product();
    let width = E::DTYPE.size_of();
    let mut bytes = vec![0u8; numel * width];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(width).map(E::read_le).collect();
    Ok((shape, data))
}

pub fn save_tensor<E: Element>(path: &Path, shape: &[usize], data: &[E]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, shape, data)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<E: Element>(path: &Path) -> Result<(Vec<usize>, Vec<E>)> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}

/// One named tensor in a checkpoint.
pub type Entry<E> = (String, Vec<usize>, Vec<E>);

pub fn write_checkpoint<E: Element, W: Write>(w: &mut W, entries: &[Entry<E>]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, MANIFEST_MARKER])?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;

    // Serialize each record once to learn its size, manifest offsets are
    // relative to the end of the manifest.
    let mut blobs = Vec::with_capacity(entries.len());
    for (_, shape, data) in entries {
        let mut blob = Vec::new();
        write_tensor(&mut blob, shape, data)?;
        blobs.push(blob);
    }
    let mut offset = 0u64;
    for ((name, _, _), blob) in entries.iter().zip(&blobs) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&offset.to_le_bytes())?;
        offset += blob.len() as u64;
    }
    for blob in &blobs {
        w.write_all(blob)?;
    }
    Ok(())
}

pub fn read_checkpoint<E: Element, R: Read>(r: &mut R) -> Result<Vec<Entry<E>>> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad magic (expected PTNT)".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", head[4])));
    }
    if head[5] != MANIFEST_MARKER {
        return Err(Error::Format(
            "not a checkpoint (missing manifest marker)".into(),
        ));
    }
    let mut cnt = [0u8; 4];
    r.read_exact(&mut cnt)?;
    let count = u32::from_le_bytes(cnt) as usize;
    let mut names = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("non-utf8 parameter name".into()))?;
        let mut off = [0u8; 8];
        r.read_exact(&mut off)?;
        names.push((name, u64::from_le_bytes(off)));
    }
    // Records were written back to back in manifest order; verify offsets
    // while reading.
    let mut entries = Vec::with_capacity(count);
    let mut pos = 0u64;
    let mut counted = CountingReader { inner: r, read: 0 };
    for (name, offset) in names {
        if offset != pos {
            return Err(Error::Format(format!(
                "manifest offset for {name} is {offset}, expected {pos}"
            )));
        }
        let before = counted.read;
        let (shape, data) = read_tensor::<E, _>(&mut counted)?;
        pos += counted.read - before;
        entries.push((name, shape, data));
    }
    Ok(entries)
}

pub fn save_checkpoint<E: Element>(path: &Path, entries: &[Entry<E>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<E: Element>(path: &Path) -> Result<Vec<Entry<E>>> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

struct CountingReader<'a, R: Read> {
    inner: &'a mut R,
    read: u64,
}

impl<R: Read> Read for CountingReader<'_, R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.read += n as u64;
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let shape = vec![2, 3];
        let data: Vec<f32> = vec![1.0, -2.5, 3.25, 0.0, 5.5, -6.125];
        let mut buf = Vec::new();
        write_tensor(&mut buf, &shape, &data).unwrap();
        let (s, d) = read_tensor::<f32, _>(&mut buf.as_slice()).unwrap();
        assert_eq!(s, shape);
        assert_eq!(d, data);
    }

    #[test]
    fn dtype_mismatch_is_reported() {
        let mut buf = Vec::new();
        write_tensor::<f32, _>(&mut buf, &[1], &[1.0]).unwrap();
        let err = read_tensor::<f64, _>(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"NOPE\x01\x00\x01".to_vec();
        assert!(read_tensor::<f32, _>(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_order() {
        let entries: Vec<Entry<f32>> = vec![
            ("b.weight".into(), vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]),
            ("a.bias".into(), vec![3], vec![-1.0, 0.0, 1.0]),
        ];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries).unwrap();
        let back = read_checkpoint::<f32, _>(&mut buf.as_slice()).unwrap();
        assert_eq!(back, entries);
    }

    #[test]
    fn scalar_rank_zero_round_trip() {
        let mut buf = Vec::new();
        write_tensor::<f64, _>(&mut buf, &[], &[42.0]).unwrap();
        let (s, d) = read_tensor::<f64, _>(&mut buf.as_slice()).unwrap();
        assert!(s.is_empty());
        assert_eq!(d, vec![42.0]);
    }
}
