//! Binary matrix/vector files used for debugging dumps and filter snapshots.
//!
//! Layout: 8-byte magic `SANCMAT1`, rows and columns as little-endian `u64`, then
//! `rows·cols` little-endian `f64` values in row-major order.

use nalgebra::DMatrix;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{AncError, Result};

pub const MATRIX_MAGIC: &[u8; 8] = b"SANCMAT1";

pub fn write_matrix_bin(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    write_rows_bin(path, m.nrows(), m.ncols(), rows.iter().map(Vec::as_slice))
}

/// Writes `rows` (each `cols` long) as one matrix.
pub fn write_rows_bin<'a, I>(path: &Path, nrows: usize, ncols: usize, rows: I) -> Result<()>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MATRIX_MAGIC)?;
    out.write_all(&(nrows as u64).to_le_bytes())?;
    out.write_all(&(ncols as u64).to_le_bytes())?;
    let mut written = 0;
    for row in rows {
        if row.len() != ncols {
            return Err(AncError::InvalidDimension(format!("row of {} values, expected {ncols}", row.len())));
        }
        for v in row {
            out.write_all(&v.to_le_bytes())?;
        }
        written += 1;
    }
    if written != nrows {
        return Err(AncError::InvalidDimension(format!("{written} rows written, header says {nrows}")));
    }
    out.flush()?;
    Ok(())
}

pub fn read_matrix_bin(path: &Path) -> Result<DMatrix<f64>> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MATRIX_MAGIC {
        return Err(AncError::Configuration(format!("{} is not a matrix file", path.display())));
    }
    let mut word = [0u8; 8];
    input.read_exact(&mut word)?;
    let rows = u64::from_le_bytes(word) as usize;
    input.read_exact(&mut word)?;
    let cols = u64::from_le_bytes(word) as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        input.read_exact(&mut word)?;
        data.push(f64::from_le_bytes(word));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, -6.5]);
        write_matrix_bin(&p, &m).unwrap();
        assert_eq!(read_matrix_bin(&p).unwrap(), m);
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 24 + 6 * 8);
    }
}
