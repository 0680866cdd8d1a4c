//! Flat binary parameter checkpoints.
//!
//! Layout: the magic `VGCKPT1\n`, then one record per tensor until end of
//! file. A record is the name length (u64), the UTF-8 name, the rank (u64),
//! `rank` extents (u64 each), and `product(extents)` f32 values. All
//! integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VGCKPT1\n";

pub fn write_checkpoint<'a, W: Write>(
    mut w: W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated record: {e}")))?;
    Ok(u64::from_le_bytes(buf))
}

/// Parses a checkpoint stream; record order is preserved.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file shorter than the magic header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("unknown magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let mut store = ParamStore::new();
    loop {
        let mut first = [0u8; 8];
        match r.read(&mut first[..1]) {
            Ok(0) => break,
            Ok(_) => {}
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(Error::Checkpoint(e.to_string())),
        }
        r.read_exact(&mut first[1..]).map_err(|e| Error::Checkpoint(format!("truncated record: {e}")))?;
        let name_len = u64::from_le_bytes(first) as usize;
        if name_len > 1 << 16 {
            return Err(Error::Checkpoint(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u64(&mut r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Checkpoint(format!("{name}: unsupported rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel
            .filter(|&n| n <= 1 << 31)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: implausible shape {shape:?}")))?;
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload).map_err(|e| Error::Checkpoint(format!("{name}: truncated payload: {e}")))?;
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        store.insert(name, tensor).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(store)
}

pub fn save_checkpoint<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), tensors).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let t = Tensor::new(&[2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("ab", &t)]).unwrap();
        let mut expected = MAGIC.to_vec();
        expected.extend(2u64.to_le_bytes());
        expected.extend(b"ab");
        expected.extend(1u64.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-0.5f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn round_trip_preserves_order_and_values() {
        let a = Tensor::new(&[2, 1, 2], vec![0.25, 1.5, -3.0, 8.0]).unwrap();
        let b = Tensor::scalar(7.0);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("z.w", &a), ("a.b", &b)]).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        let names: Vec<_> = back.names().collect();
        assert_eq!(names, ["z.w", "a.b"]);
        assert_eq!(back.get("z.w").unwrap(), &a);
        assert_eq!(back.get("a.b").unwrap(), &b);
    }

    #[test]
    fn rejects_unknown_magic_and_truncation() {
        assert!(matches!(read_checkpoint(&b"VGCKPT2\n"[..]), Err(Error::Checkpoint(_))));
        assert!(read_checkpoint(&b"VG"[..]).is_err());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("w", &Tensor::ones(&[3]))]).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_checkpoint(&buf[..]).is_err());
        assert_eq!(read_checkpoint(&MAGIC[..]).unwrap().len(), 0);
    }
}
