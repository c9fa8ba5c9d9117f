//! Little-endian raw tensor files: a header of `u32` dimensions followed by
//! `f64` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub(crate) struct RawWriter<'p> {
    path: &'p Path,
    out: BufWriter<File>,
}

impl<'p> RawWriter<'p> {
    pub fn create(path: &'p Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    pub fn header(&mut self, dims: &[usize]) -> Result<()> {
        for &d in dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::invalid(format!("dimension {d} does not fit in u32")))?;
            self.out
                .write_all(&d.to_le_bytes())
                .map_err(|e| Error::io(self.path, e))?;
        }
        Ok(())
    }

    pub fn values(&mut self, values: &[f64]) -> Result<()> {
        for v in values {
            self.out
                .write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(self.path, e))?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(self.path, e))
    }
}

pub(crate) struct RawReader<'p> {
    path: &'p Path,
    input: BufReader<File>,
}

impl<'p> RawReader<'p> {
    pub fn open(path: &'p Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path,
            input: BufReader::new(file),
        })
    }

    pub fn header<const N: usize>(&mut self) -> Result<[usize; N]> {
        let mut dims = [0usize; N];
        for d in dims.iter_mut() {
            let mut buf = [0u8; 4];
            self.input
                .read_exact(&mut buf)
                .map_err(|e| Error::io(self.path, e))?;
            *d = u32::from_le_bytes(buf) as usize;
        }
        Ok(dims)
    }

    pub fn values(&mut self, len: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; len * 8];
        self.input
            .read_exact(&mut buf)
            .map_err(|e| Error::io(self.path, e))?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.values(rows * cols)?)
    }

    /// Fails unless the whole file has been consumed.
    pub fn finish(mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.input.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::invalid(format!(
                "{}: trailing bytes after tensor data",
                self.path.display()
            ))),
            Err(e) => Err(Error::io(self.path, e)),
        }
    }
}

/// Writes a matrix as `rows: u32, cols: u32` followed by row-major values.
pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = RawWriter::create(path)?;
    w.header(&[m.rows(), m.cols()])?;
    w.values(m.data())?;
    w.finish()
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut r = RawReader::open(path)?;
    let [rows, cols] = r.header()?;
    let m = r.matrix(rows, cols)?;
    r.finish()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = Matrix::from_rows(&[[1.5, -2.0, 0.25], [3.0, 4.0, 5.0]]);
        write_matrix(&path, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 8 + 6 * 8);
        assert_eq!(&bytes[..8], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[8..16], &1.5f64.to_le_bytes());
        assert_eq!(read_matrix(&path).unwrap(), m);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        std::fs::write(&path, [1u8, 0, 0, 0, 2, 0, 0, 0, 0, 0]).unwrap();
        assert!(read_matrix(&path).is_err());
    }
}
