use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Sample-by-feature matrix of 32-bit reals, row-major, made of a PARAFAC
/// block followed by a spatial block (either may be empty).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    parafac_len: usize,
}

pub const FMX1_MAGIC: &[u8; 4] = b"FMX1";

impl FeatureMatrix {
    /// `parafac_len` leading columns form the PARAFAC block, the rest the
    /// spatial block.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>, parafac_len: usize) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} feature matrix",
                data.len()
            )));
        }
        if parafac_len > cols {
            return Err(Error::ShapeMismatch(format!(
                "PARAFAC block of {parafac_len} exceeds {cols} columns"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite feature at row {}, column {}",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(FeatureMatrix {
            rows,
            cols,
            data,
            parafac_len,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>], parafac_len: usize) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged feature rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat(), parafac_len)
    }

    pub fn empty(rows: usize) -> Self {
        FeatureMatrix {
            rows,
            cols: 0,
            data: Vec::new(),
            parafac_len: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn parafac_len(&self) -> usize {
        self.parafac_len
    }

    pub fn spatial_len(&self) -> usize {
        self.cols - self.parafac_len
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    /// Relabel the block boundary.
    pub fn with_parafac_len(mut self, parafac_len: usize) -> Result<Self> {
        if parafac_len > self.cols {
            return Err(Error::ShapeMismatch(format!(
                "PARAFAC block of {parafac_len} exceeds {} columns",
                self.cols
            )));
        }
        self.parafac_len = parafac_len;
        Ok(self)
    }

    /// Rows in the given order; indices may repeat.
    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            rows: idx.len(),
            cols: self.cols,
            data,
            parafac_len: self.parafac_len,
        }
    }

    pub fn parafac_block(&self) -> FeatureMatrix {
        self.column_range(0, self.parafac_len, self.parafac_len)
    }

    pub fn spatial_block(&self) -> FeatureMatrix {
        self.column_range(self.parafac_len, self.cols, 0)
    }

    fn column_range(&self, start: usize, end: usize, parafac_len: usize) -> FeatureMatrix {
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        FeatureMatrix {
            rows: self.rows,
            cols: end - start,
            data,
            parafac_len,
        }
    }

    /// Side-by-side concatenation; all of `left` becomes the PARAFAC block.
    pub fn hconcat(left: &FeatureMatrix, right: &FeatureMatrix) -> Result<FeatureMatrix> {
        if left.rows != right.rows {
            return Err(Error::ShapeMismatch(format!(
                "cannot join blocks with {} and {} rows",
                left.rows, right.rows
            )));
        }
        let cols = left.cols + right.cols;
        let mut data = Vec::with_capacity(left.rows * cols);
        for i in 0..left.rows {
            data.extend_from_slice(left.row(i));
            data.extend_from_slice(right.row(i));
        }
        Ok(FeatureMatrix {
            rows: left.rows,
            cols,
            data,
            parafac_len: left.cols,
        })
    }

    /// FMX1: magic, u32 LE rows, u32 LE cols, then rows·cols f32 LE.
    pub fn write_fmx1(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(FMX1_MAGIC)?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Parse FMX1 bytes. The block boundary is not stored in the format; the
    /// whole matrix is returned as a single spatial block.
    pub fn read_fmx1(r: &mut impl Read) -> Result<FeatureMatrix> {
        let bad = |reason: String| Error::Format {
            what: "FMX1 file",
            reason,
        };
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| bad(e.to_string()))?;
        if bytes.len() < 12 || &bytes[..4] != FMX1_MAGIC {
            return Err(bad("missing FMX1 header".into()));
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != rows * cols * 4 {
            return Err(bad(format!(
                "{} payload bytes for a {rows}x{cols} matrix",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FeatureMatrix::new(rows, cols, data, 0)
    }

    pub fn save_fmx1(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_fmx1(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_fmx1(path: &Path) -> Result<FeatureMatrix> {
        let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_fmx1(&mut file)
    }

    /// Header `f0,f1,...` then one sample per line.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.cols).map(|j| format!("f{j}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Load externally computed embeddings that stand in for the spatial block.
pub fn import_embeddings(path: &Path, expected_rows: usize) -> Result<FeatureMatrix> {
    let m = FeatureMatrix::load_fmx1(path)?;
    check_embedding_rows(m, expected_rows)
}

pub fn check_embedding_rows(m: FeatureMatrix, expected_rows: usize) -> Result<FeatureMatrix> {
    if m.rows() != expected_rows {
        return Err(Error::EmbeddingMismatch {
            expected: expected_rows,
            found: m.rows(),
        });
    }
    Ok(m)
}
