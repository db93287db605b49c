use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Matrix product `[M,K] x [K,N] -> [M,N]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, T::zero(), &mut out);
    Tensor::new(&[m, n], out)
}

/// Dense transform `y = x W^T + b` for a batch `x: [B,d]`, `W: [k,d]`.
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1) {
        return Err(Error::shape("linear", x.shape(), weight.shape()));
    }
    let (batch, d, k) = (x.dim(0), x.dim(1), weight.dim(0));
    let mut out = vec![T::zero(); batch * k];
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(Error::shape("linear", b.shape(), &[k]));
        }
        for row in out.chunks_mut(k) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(batch, d, k, x.data(), false, weight.data(), true, T::one(), &mut out);
    Tensor::new(&[batch, k], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_product() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn identity_left() {
        let b = Tensor::<f64>::from_f64(&[3, 2], &[1.0, -2.0, 0.5, 4.0, 9.0, 3.0]).unwrap();
        assert_eq!(matmul(&Tensor::eye(3), &b).unwrap(), b);
    }

    #[test]
    fn inner_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn linear_adds_bias_per_row() {
        let x = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let w = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[3], &[10.0, 20.0, 30.0]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[11.0, 23.0, 35.0, 12.0, 24.0, 36.0]);
    }
}
