//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DMSCCKPT" | version u32 | config json (u64 len + bytes)
//! param count u64 | per param: name (u32 len + bytes), ndim u32,
//!                   dims u64 each, values f64 each
//! w_hist (u64 len + f64 each)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Dmsc;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DMSCCKPT";
pub const VERSION: u32 = 1;

/// Guard against absurd lengths in corrupted files.
const MAX_LEN: u64 = 1 << 32;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn get_len(r: &mut impl Read, what: &str) -> Result<usize> {
    let n = get_u64(r)?;
    if n > MAX_LEN {
        return Err(Error::Checkpoint(format!("implausible {what} length {n}")));
    }
    Ok(n as usize)
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf)
}

pub fn write_to(model: &Dmsc, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    let cfg = serde_json::to_vec(&model.cfg)?;
    put_u64(w, cfg.len() as u64)?;
    w.write_all(&cfg)?;
    put_u64(w, model.store.len() as u64)?;
    for id in model.store.ids() {
        let name = model.store.name(id).as_bytes();
        put_u32(w, name.len() as u32)?;
        w.write_all(name)?;
        let t = model.store.value(id);
        put_u32(w, t.ndim() as u32)?;
        for &d in t.shape() {
            put_u64(w, d as u64)?;
        }
        put_f64s(w, t.data())?;
    }
    put_u64(w, model.w_hist.len() as u64)?;
    put_f64s(w, &model.w_hist)
}

pub fn read_from(r: &mut impl Read) -> Result<Dmsc> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a model checkpoint".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = get_len(r, "config")?;
    let cfg: ModelConfig = serde_json::from_slice(&get_bytes(r, n)?)
        .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
    let mut model = Dmsc::new(cfg, 0)?;
    let count = get_len(r, "parameter count")?;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!("{} parameters stored, model has {}", count, model.store.len())));
    }
    for _ in 0..count {
        let n = get_u32(r)? as usize;
        let name = String::from_utf8(get_bytes(r, n)?).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = get_u32(r)? as usize;
        let shape = (0..ndim).map(|_| get_len(r, "dimension")).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = get_f64s(r, len)?;
        let id = model.store.find(&name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        model.store.set(id, Tensor::new(&shape, data)?)
            .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
    }
    let n = get_len(r, "w_hist")?;
    let w_hist = get_f64s(r, n)?;
    if w_hist.len() != model.cfg.n_layers {
        return Err(Error::Checkpoint(format!("w_hist has {} entries, expected {}", w_hist.len(), model.cfg.n_layers)));
    }
    model.w_hist = w_hist;
    Ok(model)
}

pub fn save(model: &Dmsc, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_to(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Dmsc> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_from(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Dmsc {
        let cfg = ModelConfig { n_vars: 2, lookback: 16, horizon: 4, d_model: 8, n_layers: 2, p_min: 4, p_max: 8, ..Default::default() };
        let mut m = Dmsc::new(cfg, 5).unwrap();
        m.w_hist = vec![0.7, 0.3];
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let mut buf = Vec::new();
        write_to(&m, &mut buf).unwrap();
        let back = read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.cfg, m.cfg);
        assert_eq!(back.w_hist, m.w_hist);
        for id in m.store.ids() {
            assert_eq!(back.store.value(id).data(), m.store.value(id).data());
        }
    }

    #[test]
    fn corrupt_magic_and_truncation() {
        let m = model();
        let mut buf = Vec::new();
        write_to(&m, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_from(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        let cut = &buf[..buf.len() - 5];
        assert!(matches!(read_from(&mut &cut[..]), Err(Error::Checkpoint(_))));
    }
}
