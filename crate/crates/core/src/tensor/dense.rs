use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// N-way dense real tensor, row-major (last index fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "tensor shape must be nonempty with positive dimensions, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape:?} ({len} expected)",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite tensor entry at flat index {pos}"
            )));
        }
        Ok(DenseTensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    /// Build a tensor entry by entry from its multi-index.
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let len: usize = shape.iter().product();
        let mut idx = vec![0; shape.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&idx));
            increment(&mut idx, &shape);
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        let flat = idx
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i);
        self.data[flat]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Frobenius norm of `self - other`.
    pub fn distance(&self, other: &DenseTensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for m in (0..shape.len()).rev() {
        idx[m] += 1;
        if idx[m] < shape[m] {
            return;
        }
        idx[m] = 0;
    }
}

/// Mode-`mode` matricization. Columns enumerate the remaining modes in
/// ascending order, row-major.
pub fn unfold(t: &DenseTensor, mode: usize) -> Result<Matrix> {
    let order = t.order();
    if mode >= order {
        return Err(Error::InvalidMode { mode, order });
    }
    let rows = t.shape[mode];
    let cols = t.data.len() / rows;
    // Row-major over the modes after `mode` is contiguous; the prefix modes
    // form the outer column blocks.
    let inner: usize = t.shape[mode + 1..].iter().product();
    let outer: usize = t.shape[..mode].iter().product();
    let mut out = vec![0.0; t.data.len()];
    for o in 0..outer {
        for i in 0..rows {
            let src = &t.data[(o * rows + i) * inner..(o * rows + i + 1) * inner];
            let dst_start = i * cols + o * inner;
            out[dst_start..dst_start + inner].copy_from_slice(src);
        }
    }
    Matrix::from_vec(rows, cols, out)
}

/// Inverse of [`unfold`].
pub fn fold(m: &Matrix, mode: usize, shape: &[usize]) -> Result<DenseTensor> {
    if mode >= shape.len() {
        return Err(Error::InvalidMode {
            mode,
            order: shape.len(),
        });
    }
    let len: usize = shape.iter().product();
    if m.rows() != shape[mode] || m.rows() * m.cols() != len {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} matrix cannot fold into {shape:?} along mode {mode}",
            m.rows(),
            m.cols()
        )));
    }
    let rows = shape[mode];
    let cols = m.cols();
    let inner: usize = shape[mode + 1..].iter().product();
    let outer: usize = shape[..mode].iter().product();
    let src = m.as_slice();
    let mut data = vec![0.0; len];
    for o in 0..outer {
        for i in 0..rows {
            let s = i * cols + o * inner;
            data[(o * rows + i) * inner..(o * rows + i + 1) * inner]
                .copy_from_slice(&src[s..s + inner]);
        }
    }
    DenseTensor::new(shape.to_vec(), data)
}

/// Column-wise Kronecker product: row `i * J + j` of the result is
/// `a[i, :] ∘ b[j, :]`.
pub fn khatri_rao(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "khatri-rao needs equal column counts, got {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    let r = a.cols();
    let mut out = Vec::with_capacity(a.rows() * b.rows() * r);
    for i in 0..a.rows() {
        let ar = a.row(i);
        for j in 0..b.rows() {
            out.extend(ar.iter().zip(b.row(j)).map(|(x, y)| x * y));
        }
    }
    Matrix::from_vec(a.rows() * b.rows(), r, out)
}

/// Left-to-right Khatri–Rao product of a nonempty list of factors.
pub fn khatri_rao_chain(factors: &[&Matrix]) -> Result<Matrix> {
    let (first, rest) = factors
        .split_first()
        .ok_or_else(|| Error::InvalidInput("empty khatri-rao chain".into()))?;
    rest.iter()
        .try_fold((*first).clone(), |acc, f| khatri_rao(&acc, f))
}
