//! Dense row-major f64 tensors and the raw math the autograd ops build on.

use rand::Rng;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("cannot reshape {from:?} ({from_len} elements) to {to:?} ({to_len} elements)")]
    BadReshape {
        from: Vec<usize>,
        from_len: usize,
        to: Vec<usize>,
        to_len: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length must match shape product"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![1.0; shape.iter().product()] }
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: vec![], data: vec![x] }
    }

    pub fn filled(shape: &[usize], x: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![x; shape.iter().product()] }
    }

    /// Truncated normal init (|z| <= 2σ), the BERT-convention table init.
    pub fn trunc_normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            // Box-Muller
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                data.push(z * std);
            }
        }
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn size(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn item(&self) -> f64 {
        assert!(self.data.len() == 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let to_len: usize = shape.iter().product();
        if to_len != self.data.len() {
            return Err(TensorError::BadReshape {
                from: self.shape.clone(),
                from_len: self.data.len(),
                to: shape.to_vec(),
                to_len,
            });
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Rank-2 matrix product.
    pub fn matmul2(&self, other: &Self) -> Result<Self, TensorError> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(mismatch());
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Self { shape: vec![m, n], data: out })
    }

    /// Batched rank-3 matrix product: `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn matmul3(&self, other: &Self) -> Result<Self, TensorError> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul3",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        if self.rank() != 3
            || other.rank() != 3
            || self.shape[0] != other.shape[0]
            || self.shape[2] != other.shape[1]
        {
            return Err(mismatch());
        }
        let (b, m, k) = (self.shape[0], self.shape[1], self.shape[2]);
        let n = other.shape[2];
        let mut out = vec![0.0; b * m * n];
        for bi in 0..b {
            for i in 0..m {
                for p in 0..k {
                    let a = self.data[bi * m * k + i * k + p];
                    if a == 0.0 {
                        continue;
                    }
                    let boff = bi * k * n + p * n;
                    let ooff = bi * m * n + i * n;
                    for j in 0..n {
                        out[ooff + j] += a * other.data[boff + j];
                    }
                }
            }
        }
        Ok(Self { shape: vec![b, m, n], data: out })
    }

    /// Transpose the last two axes of a rank-2 or rank-3 tensor.
    pub fn transposed(&self) -> Self {
        match self.rank() {
            2 => {
                let (m, n) = (self.shape[0], self.shape[1]);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = self.data[i * n + j];
                    }
                }
                Self { shape: vec![n, m], data: out }
            }
            3 => {
                let (b, m, n) = (self.shape[0], self.shape[1], self.shape[2]);
                let mut out = vec![0.0; b * m * n];
                for bi in 0..b {
                    for i in 0..m {
                        for j in 0..n {
                            out[bi * m * n + j * m + i] = self.data[bi * m * n + i * n + j];
                        }
                    }
                }
                Self { shape: vec![b, n, m], data: out }
            }
            r => panic!("transposed() needs rank 2 or 3, got rank {r}"),
        }
    }

    /// Frobenius norm over all elements.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(eye.matmul2(&m).unwrap(), m);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul2(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul3_batches_independently() {
        let a = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(vec![2, 2, 1], vec![1.0, 1.0, 2.0, 0.5]);
        let c = a.matmul3(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[3.0, 8.0]);
    }

    #[test]
    fn transpose_round_trips() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|x| x as f64).collect());
        assert_eq!(t.transposed().transposed(), t);
        let t3 = Tensor::new(vec![2, 2, 3], (0..12).map(|x| x as f64).collect());
        assert_eq!(t3.transposed().transposed(), t3);
    }

    #[test]
    fn trunc_normal_respects_bound() {
        let mut rng = crate::util::derive_rng(0, &["init"], &[]);
        let t = Tensor::trunc_normal(&[100, 10], 0.02, &mut rng);
        assert!(t.data().iter().all(|x| x.abs() <= 0.04 + 1e-12));
    }
}
