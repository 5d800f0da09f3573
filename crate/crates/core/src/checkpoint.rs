//! Versioned binary container for named parameter matrices. Layout: an
//! 8-byte magic, a format version, a parameter count, then per parameter the
//! name length, name bytes, row and column counts, and row-major f64 data,
//! all integers little-endian u32.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::ParamStore;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SEGSYNCK";
const VERSION: u32 = 1;

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for param in store.iter() {
        let name = param.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(param.value.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(param.value.cols() as u32).to_le_bytes());
        for v in param.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::invalid(format!("cannot create {}: {e}", path.display())))?;
    file.write_all(&buf)
        .map_err(|e| Error::invalid(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

struct Reader {
    data: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::invalid(format!(
                "checkpoint truncated while reading {what}"
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::invalid(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut data)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    let mut r = Reader { data, pos: 0 };

    if r.take(8, "magic")? != MAGIC {
        return Err(Error::invalid("not a checkpoint file: bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::invalid(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32("parameter count")?;
    let mut store = ParamStore::new(0);
    for idx in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::invalid(format!("parameter {idx}: name is not UTF-8")))?;
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let b = r.take(8, "matrix data")?;
            values.push(f64::from_le_bytes([
                b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
            ]));
        }
        store.insert(name, Matrix::from_vec(rows, cols, values));
    }
    if r.pos != r.data.len() {
        return Err(Error::invalid(format!(
            "checkpoint has {} trailing bytes",
            r.data.len() - r.pos
        )));
    }
    Ok(store)
}
