use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Every kernel in the crate works on matrices; a rank-1 tensor of length
/// `n` is viewed as a `1 x n` row and higher ranks fold their leading axes
/// into rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("extents must be positive, got {shape:?}")));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows")))?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// A `1 x n` row. Panics on an empty slice.
    pub fn row(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "row tensor needs at least one value");
        Tensor {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![x],
        }
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        crate::error::ensure_finite(&self.data, what)
    }
}

/// `a (n x k) * b (k x m)`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape(format!("matmul {n}x{k} by {k2}x{m}")));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor::from_parts(n, m, out))
}

/// `a (n x k) * b^T` where `b` is `m x k`.
pub(crate) fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = (a.rows(), a.cols());
    let (m, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape(format!("matmul {n}x{k} by ({m}x{k2})^T")));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor::from_parts(n, m, out))
}

/// `a^T * b` where `a` is `k x n` and `b` is `k x m`.
pub(crate) fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, n) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape(format!("matmul ({k}x{n})^T by {k2}x{m}")));
    }
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let brow = &b.data[p * m..(p + 1) * m];
        for i in 0..n {
            let api = a.data[p * n + i];
            if api == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    Ok(Tensor::from_parts(n, m, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    out[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        out
    }

    fn transpose(t: &Tensor) -> Tensor {
        let (r, c) = (t.rows(), t.cols());
        let mut d = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = t.at(i, j);
            }
        }
        Tensor::from_parts(c, r, d)
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![usize::MAX, 3], vec![]).is_err());
    }

    #[test]
    fn matmul_variants_agree_with_naive_product() {
        let a = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 4.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![2.0, 1.0, 0.0, -1.0, 5.0, 0.25]).unwrap();
        let want = naive(a.data(), b.data(), 2, 3, 2);
        assert_eq!(matmul(&a, &b).unwrap().data(), &want[..]);
        assert_eq!(matmul_bt(&a, &transpose(&b)).unwrap().data(), &want[..]);
        assert_eq!(matmul_at(&transpose(&a), &b).unwrap().data(), &want[..]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn rank_one_views_as_row() {
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((t.rows(), t.cols()), (1, 4));
        let t3 = Tensor::zeros(&[2, 3, 5]).unwrap();
        assert_eq!((t3.rows(), t3.cols()), (6, 5));
    }
}
