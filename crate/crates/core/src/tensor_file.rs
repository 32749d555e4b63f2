//! Shared binary tensor format used for spectrograms, posteriorgrams,
//! embeddings, frame mappings, and model parameters.
//!
//! Layout: magic `WFT1`, u32 LE rank, rank x u64 LE dims, then row-major
//! f32 LE payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"WFT1";

pub fn write_tensor(path: &Path, dims: &[u64], data: &[f32]) -> Result<()> {
    let expected: u64 = dims.iter().product();
    if expected != data.len() as u64 {
        return Err(Error::Argument(format!(
            "tensor payload has {} values but dims {:?} imply {}",
            data.len(),
            dims,
            expected
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&(dims.len() as u32).to_le_bytes()).map_err(io_err)?;
    for d in dims {
        w.write_all(&d.to_le_bytes()).map_err(io_err)?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_tensor(path: &Path) -> Result<(Vec<u64>, Vec<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad tensor magic {:?}",
            path.display(),
            magic
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(Error::Format(format!("{}: rank {} too large", path.display(), rank)));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut u64buf = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut u64buf).map_err(io_err)?;
        dims.push(u64::from_le_bytes(u64buf));
    }
    let count: u64 = dims.iter().product();
    let mut data = Vec::with_capacity(count as usize);
    let mut f32buf = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut f32buf).map_err(io_err)?;
        data.push(f32::from_le_bytes(f32buf));
    }
    // Trailing bytes mean a corrupt or mislabeled file.
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok((dims, data)),
        Ok(_) => Err(Error::Format(format!(
            "{}: trailing bytes after tensor payload",
            path.display()
        ))),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let (rows, cols) = m.dim();
    let data: Vec<f32> = m.iter().map(|&v| v as f32).collect();
    write_tensor(path, &[rows as u64, cols as u64], &data)
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let (dims, data) = read_tensor(path)?;
    if dims.len() != 2 {
        return Err(Error::Format(format!(
            "{}: expected rank-2 tensor, got rank {}",
            path.display(),
            dims.len()
        )));
    }
    let (rows, cols) = (dims[0] as usize, dims[1] as usize);
    let values: Vec<f64> = data.into_iter().map(f64::from).collect();
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))
}

pub fn write_vector(path: &Path, v: &Array1<f64>) -> Result<()> {
    let data: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    write_tensor(path, &[v.len() as u64], &data)
}

pub fn read_vector(path: &Path) -> Result<Array1<f64>> {
    let (dims, data) = read_tensor(path)?;
    if dims.len() != 1 {
        return Err(Error::Format(format!(
            "{}: expected rank-1 tensor, got rank {}",
            path.display(),
            dims.len()
        )));
    }
    Ok(Array1::from_vec(data.into_iter().map(f64::from).collect()))
}
