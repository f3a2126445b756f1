//! Binary checkpoint format. Layout:
//!
//! ```text
//! magic "TRKF" | version u8 | repeated until EOF:
//!   name_len u32 LE | name UTF-8 | rank u32 LE | dims u32 LE each | data f32 LE
//! ```
//!
//! Values round-trip bit-exactly. Parameters are written in sorted name
//! order so identical stores produce identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{Params, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TRKF";
const VERSION: u8 = 1;

// Guards against garbage files claiming absurd sizes.
const MAX_NAME: u32 = 4096;
const MAX_DIM: u32 = 1 << 28;

pub fn save_checkpoint(path: &Path, params: &Params) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint. `meta.*` entries come back frozen; everything else
/// is trainable until a training stage adjusts it.
pub fn load_checkpoint(path: &Path) -> Result<Params> {
    let pstr = path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(&pstr, "file too short for magic"))?;
    if &magic != MAGIC {
        return Err(Error::format(&pstr, "bad magic, not a checkpoint"));
    }
    let mut ver = [0u8; 1];
    r.read_exact(&mut ver)
        .map_err(|_| Error::format(&pstr, "missing version byte"))?;
    if ver[0] != VERSION {
        return Err(Error::format(
            &pstr,
            format!("unsupported version {}", ver[0]),
        ));
    }

    let mut params = Params::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read_exact(&mut len4) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len4);
        if name_len == 0 || name_len > MAX_NAME {
            return Err(Error::format(&pstr, format!("name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len as usize];
        r.read_exact(&mut name_buf)
            .map_err(|_| Error::format(&pstr, "truncated name"))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::format(&pstr, "parameter name is not UTF-8"))?;

        let rank = read_u32(&mut r, &pstr)?;
        if !(1..=2).contains(&rank) {
            return Err(Error::format(&pstr, format!("rank {rank} for `{name}`")));
        }
        let mut dims = [1u32; 2];
        for slot in dims.iter_mut().skip(2 - rank as usize) {
            let d = read_u32(&mut r, &pstr)?;
            if d == 0 || d > MAX_DIM {
                return Err(Error::format(&pstr, format!("dim {d} for `{name}`")));
            }
            *slot = d;
        }
        let (rows, cols) = (dims[0] as usize, dims[1] as usize);
        let numel = rows
            .checked_mul(cols)
            .filter(|&n| n <= MAX_DIM as usize)
            .ok_or_else(|| Error::format(&pstr, format!("tensor `{name}` too large")))?;

        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)
            .map_err(|_| Error::format(&pstr, format!("truncated data for `{name}`")))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();

        let mut t = Tensor::new(rows, cols, data)?;
        t.set_requires_grad(!name.starts_with("meta."));
        if params.contains(&name) {
            return Err(Error::format(&pstr, format!("duplicate parameter `{name}`")));
        }
        params.insert(name, t);
    }
    Ok(params)
}

fn read_u32(r: &mut impl Read, path: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::format(path, "truncated u32"))?;
    Ok(u32::from_le_bytes(b))
}
