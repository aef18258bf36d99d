//! Little-endian binary snapshots of caches and parameters.
//!
//! Cache snapshot:
//!
//! ```text
//! magic      4 bytes  "GZKV"
//! version    u32      1
//! layer      u32
//! head       u32
//! n          u64      rows
//! d          u64      row width
//! precision  u8       4 (single) or 8 (double)
//! reserved   3 bytes  zero
//! keys       n·d      row-major, f32 or f64 per precision
//! values     n·d      row-major, f32 or f64 per precision
//! segments   n bytes  0 text, 1 visual, 2 context
//! unit ids   n × u32  0xFFFFFFFF for text rows
//! ```
//!
//! Parameter snapshot:
//!
//! ```text
//! magic      4 bytes  "GZPM"
//! version    u32      1
//! count      u32      tensors
//! per tensor: name_len u16, name (utf-8), rows u64, cols u64, rows·cols f64 row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{GazeError, Result};
use crate::kv_store::{LayerHeadCache, Segment};
use crate::numerics::{Matrix, Precision};

const CACHE_MAGIC: &[u8; 4] = b"GZKV";
const PARAM_MAGIC: &[u8; 4] = b"GZPM";
const VERSION: u32 = 1;
const NO_UNIT: u32 = u32::MAX;

fn check_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(GazeError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(GazeError::Format(format!("unsupported version {version}")));
    }
    Ok(())
}

fn to_u32(what: &str, x: usize) -> Result<u32> {
    u32::try_from(x).map_err(|_| GazeError::Format(format!("{what} {x} does not fit in u32")))
}

fn write_floats(w: &mut impl Write, xs: &[f64], precision: Precision) -> Result<()> {
    for &x in xs {
        match precision {
            Precision::Single => w.write_f32::<LE>(x as f32)?,
            Precision::Double => w.write_f64::<LE>(x)?,
        }
    }
    Ok(())
}

fn read_floats(r: &mut impl Read, n: usize, precision: Precision) -> Result<Vec<f64>> {
    (0..n)
        .map(|_| {
            Ok(match precision {
                Precision::Single => f64::from(r.read_f32::<LE>()?),
                Precision::Double => r.read_f64::<LE>()?,
            })
        })
        .collect()
}

pub fn write_cache(w: &mut impl Write, cache: &LayerHeadCache) -> Result<()> {
    w.write_all(CACHE_MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u32::<LE>(to_u32("layer", cache.layer())?)?;
    w.write_u32::<LE>(to_u32("head", cache.head())?)?;
    w.write_u64::<LE>(cache.len() as u64)?;
    w.write_u64::<LE>(cache.dim() as u64)?;
    w.write_u8(cache.precision().code())?;
    w.write_all(&[0u8; 3])?;
    write_floats(w, cache.keys_flat(), cache.precision())?;
    write_floats(w, cache.values_flat(), cache.precision())?;
    for s in cache.segments() {
        w.write_u8(s.code())?;
    }
    for u in cache.raw_unit_ids() {
        w.write_u32::<LE>(u.unwrap_or(NO_UNIT))?;
    }
    Ok(())
}

pub fn read_cache(r: &mut impl Read) -> Result<LayerHeadCache> {
    check_magic(r, CACHE_MAGIC)?;
    let layer = r.read_u32::<LE>()? as usize;
    let head = r.read_u32::<LE>()? as usize;
    let n = usize::try_from(r.read_u64::<LE>()?).map_err(|_| GazeError::Format("row count overflow".into()))?;
    let d = usize::try_from(r.read_u64::<LE>()?).map_err(|_| GazeError::Format("width overflow".into()))?;
    let code = r.read_u8()?;
    let precision =
        Precision::from_code(code).ok_or_else(|| GazeError::Format(format!("unknown precision code {code}")))?;
    let mut reserved = [0u8; 3];
    r.read_exact(&mut reserved)?;
    let len = n
        .checked_mul(d)
        .ok_or_else(|| GazeError::Format("cache size overflow".into()))?;
    let keys = read_floats(r, len, precision)?;
    let values = read_floats(r, len, precision)?;
    let segments = (0..n)
        .map(|_| {
            let c = r.read_u8()?;
            Segment::from_code(c).ok_or_else(|| GazeError::Format(format!("unknown segment code {c}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let unit_ids = (0..n)
        .map(|_| Ok(Some(r.read_u32::<LE>()?).filter(|&u| u != NO_UNIT)))
        .collect::<Result<Vec<_>>>()?;
    LayerHeadCache::from_parts(layer, head, d, precision, keys, values, segments, unit_ids)
}

pub fn write_params(w: &mut impl Write, tensors: &[(String, &Matrix)]) -> Result<()> {
    w.write_all(PARAM_MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u32::<LE>(to_u32("tensor count", tensors.len())?)?;
    for (name, m) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| GazeError::Format(format!("tensor name too long: {name}")))?;
        w.write_u16::<LE>(len)?;
        w.write_all(name.as_bytes())?;
        w.write_u64::<LE>(m.rows() as u64)?;
        w.write_u64::<LE>(m.cols() as u64)?;
        write_floats(w, m.as_slice(), Precision::Double)?;
    }
    Ok(())
}

pub fn read_params(r: &mut impl Read) -> Result<Vec<(String, Matrix)>> {
    check_magic(r, PARAM_MAGIC)?;
    let count = r.read_u32::<LE>()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.read_u16::<LE>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| GazeError::Format(format!("tensor name: {e}")))?;
        let rows = r.read_u64::<LE>()? as usize;
        let cols = r.read_u64::<LE>()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| GazeError::Format(format!("tensor {name} size overflow")))?;
        let data = read_floats(r, n, Precision::Double)?;
        out.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    Ok(out)
}

pub fn save_cache(path: &Path, cache: &LayerHeadCache) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_cache(&mut w, cache)?;
    w.flush()?;
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<LayerHeadCache> {
    read_cache(&mut BufReader::new(File::open(path)?))
}

pub fn save_params(path: &Path, tensors: &[(String, &Matrix)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<Vec<(String, Matrix)>> {
    read_params(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededStream;

    fn sample_cache(precision: Precision) -> LayerHeadCache {
        let mut s = SeededStream::new(5);
        let mut c = LayerHeadCache::with_precision(2, 3, 4, precision);
        let k = Matrix::random_normal(6, 4, 1.0, &mut s);
        let v = Matrix::random_normal(6, 4, 1.0, &mut s);
        c.append_kv(&k, &v, Segment::Visual, Some(1)).unwrap();
        let k = Matrix::random_normal(2, 4, 1.0, &mut s);
        let v = Matrix::random_normal(2, 4, 1.0, &mut s);
        c.append_kv(&k, &v, Segment::Context, Some(1)).unwrap();
        c.append_row(&[1.0, 2.0, 3.0, 4.0], &[0.5; 4], Segment::Text, None).unwrap();
        c
    }

    #[test]
    fn cache_round_trip() {
        for p in [Precision::Single, Precision::Double] {
            let c = sample_cache(p);
            let mut buf = Vec::new();
            write_cache(&mut buf, &c).unwrap();
            assert_eq!(buf.len(), 4 + 4 + 4 + 4 + 8 + 8 + 4 + 2 * 9 * 4 * p.bytes() + 9 + 9 * 4);
            assert_eq!(&buf[..4], b"GZKV");
            assert_eq!(read_cache(&mut buf.as_slice()).unwrap(), c);
        }
    }

    #[test]
    fn header_fields() {
        let c = sample_cache(Precision::Double);
        let mut buf = Vec::new();
        write_cache(&mut buf, &c).unwrap();
        let mut r = &buf[4..];
        assert_eq!(r.read_u32::<LE>().unwrap(), 1);
        assert_eq!(r.read_u32::<LE>().unwrap(), 2);
        assert_eq!(r.read_u32::<LE>().unwrap(), 3);
        assert_eq!(r.read_u64::<LE>().unwrap(), 9);
        assert_eq!(r.read_u64::<LE>().unwrap(), 4);
        assert_eq!(r.read_u8().unwrap(), 8);
        let tail = &buf[buf.len() - 4..];
        assert_eq!(tail, &[0xFF; 4]);
    }

    #[test]
    fn params_round_trip() {
        let mut s = SeededStream::new(8);
        let a = Matrix::random_normal(3, 5, 1.0, &mut s);
        let b = Matrix::random_normal(0, 2, 1.0, &mut s);
        let tensors = vec![("query".to_string(), &a), ("context.0".to_string(), &b)];
        let mut buf = Vec::new();
        write_params(&mut buf, &tensors).unwrap();
        let back = read_params(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "query");
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].1, b);
    }

    #[test]
    fn rejects_corruption() {
        let c = sample_cache(Precision::Double);
        let mut buf = Vec::new();
        write_cache(&mut buf, &c).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_cache(&mut bad.as_slice()), Err(GazeError::Format(_))));
        let mut bad = buf.clone();
        bad[32] = 3;
        assert!(matches!(read_cache(&mut bad.as_slice()), Err(GazeError::Format(_))));
        assert!(matches!(read_cache(&mut &buf[..buf.len() - 1]), Err(GazeError::Io(_))));
    }
}
