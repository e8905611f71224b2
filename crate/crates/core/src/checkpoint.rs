//! Flat binary parameter container.
//!
//! Layout: magic `PTSE`, version `u32` LE, then one record per parameter:
//! name length (u64 LE) + UTF-8 name, shape rank (u64 LE) + dims (u64 LE
//! each), raw f64 LE data. Round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamList;

const MAGIC: &[u8; 4] = b"PTSE";
const VERSION: u32 = 1;

pub fn save(path: &Path, params: &ParamList) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    for (name, p) in params {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
        let shape = p.shape();
        w.write_all(&(shape.len() as u64).to_le_bytes()).map_err(io)?;
        for d in &shape {
            w.write_all(&(*d as u64).to_le_bytes()).map_err(io)?;
        }
        for v in p.data().iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path.display().to_string(), e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver).map_err(io)?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    loop {
        let mut len8 = [0u8; 8];
        match r.read_exact(&mut len8) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::io(path.display().to_string(), e)),
        }
        let name_len = u64::from_le_bytes(len8) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(io)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format(format!("{}: non-utf8 parameter name", path.display())))?;
        r.read_exact(&mut len8).map_err(io)?;
        let rank = u64::from_le_bytes(len8) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut len8).map_err(io)?;
            shape.push(u64::from_le_bytes(len8) as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut len8).map_err(io)?;
            data.push(f64::from_le_bytes(len8));
        }
        out.push((name, shape, data));
    }
    Ok(out)
}

/// Load a checkpoint into an existing parameter set; names and shapes must
/// match exactly.
pub fn load_into(path: &Path, params: &ParamList) -> Result<()> {
    let records = load(path)?;
    if records.len() != params.len() {
        return Err(Error::Format(format!(
            "{}: {} records vs {} model parameters",
            path.display(),
            records.len(),
            params.len()
        )));
    }
    for ((name, p), (rname, rshape, rdata)) in params.iter().zip(records) {
        if *name != rname {
            return Err(Error::Format(format!(
                "{}: parameter name mismatch: model {name} vs file {rname}",
                path.display()
            )));
        }
        if p.shape() != rshape {
            return Err(Error::Format(format!(
                "{}: shape mismatch on {name}: {:?} vs {:?}",
                path.display(),
                p.shape(),
                rshape
            )));
        }
        p.data_mut().copy_from_slice(&rdata);
    }
    Ok(())
}
