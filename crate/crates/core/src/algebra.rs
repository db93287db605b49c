//! Hamilton products, vectormap permutations and sign masks, and the
//! Kronecker-sum assembly shared by every hypercomplex layer.
//!
//! All three layer families reduce to one construction: a weight made of
//! `n x n` blocks, where block `(i, j)` is a signed (or L-scaled) copy of
//! one of `n` shared component tensors. [`kron_sum`] builds that weight as
//! `sum_t A_t (x) S_t`, taking the Kronecker product over the two leading
//! axes of `S_t` and copying any trailing axes (kernel taps) through.

use std::ops::{Add, Mul, Neg, Sub};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `r + x i + y j + z k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion<T> {
    pub r: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Float> Quaternion<T> {
    pub fn new(r: T, x: T, y: T, z: T) -> Self {
        Self { r, x, y, z }
    }

    pub fn from_array(c: [T; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn to_array(self) -> [T; 4] {
        [self.r, self.x, self.y, self.z]
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.r, -self.x, -self.y, -self.z)
    }

    pub fn norm_sqr(self) -> T {
        self.r * self.r + self.x * self.x + self.y * self.y + self.z * self.z
    }
}

impl<T: Float> Add for Quaternion<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.r + o.r, self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Float> Sub for Quaternion<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.r - o.r, self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Float> Neg for Quaternion<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.r, -self.x, -self.y, -self.z)
    }
}

impl<T: Float> Mul for Quaternion<T> {
    type Output = Self;
    fn mul(self, q: Self) -> Self {
        hamilton_product(self, q)
    }
}

/// Quaternion product `p q` with `i^2 = j^2 = k^2 = ijk = -1`.
///
/// With `p` as the filter `(R, X, Y, Z)` and `q` as the input `(r, x, y, z)`
/// each line is one output component of quaternion convolution.
pub fn hamilton_product<T: Float>(p: Quaternion<T>, q: Quaternion<T>) -> Quaternion<T> {
    Quaternion {
        r: p.r * q.r - p.x * q.x - p.y * q.y - p.z * q.z,
        x: p.r * q.x + p.x * q.r + p.y * q.z - p.z * q.y,
        y: p.r * q.y - p.x * q.z + p.y * q.r + p.z * q.x,
        z: p.r * q.z + p.x * q.y - p.y * q.x + p.z * q.r,
    }
}

/// Applies the circular right shift `tau` `power` times: component `i`
/// receives component `i - 1` and the first receives the last.
pub fn permute_tau<T: Clone>(v: &[T], power: usize) -> Vec<T> {
    let mut out = v.to_vec();
    if !out.is_empty() {
        let shift = power % out.len();
        out.rotate_right(shift);
    }
    out
}

/// Sign-structured mask of vectormap convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl LMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Entry at zero-based `(i, j)`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.dim, self.dim], &self.entries).expect("square")
    }
}

/// Initial L matrix: with one-based `i, j`, `l_ij = +1` when `i = 1`, when
/// `i = j`, or when `j = 2i - 1` (wrapped once by `d`); `-1` otherwise.
pub fn build_l_matrix(d: usize) -> Result<LMatrix> {
    if d == 0 {
        return Err(Error::invalid("build_l_matrix", "dimension must be at least 1"));
    }
    let mut entries = Vec::with_capacity(d * d);
    for i in 1..=d {
        let mut cal = i + (i - 1);
        if cal > d {
            cal -= d;
        }
        for j in 1..=d {
            let plus = i == 1 || i == j || j == cal;
            entries.push(if plus { 1.0 } else { -1.0 });
        }
    }
    Ok(LMatrix { dim: d, entries })
}

/// Kronecker product of two matrices.
pub fn kron<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape("kron", a.shape(), b.shape()));
    }
    let (m, n) = (a.dim(0), a.dim(1));
    let (p, q) = (b.dim(0), b.dim(1));
    let cols = n * q;
    let mut out = vec![T::zero(); m * p * cols];
    for i in 0..m {
        for j in 0..n {
            let s = a.data()[i * n + j];
            for r in 0..p {
                for c in 0..q {
                    out[(i * p + r) * cols + j * q + c] = s * b.data()[r * q + c];
                }
            }
        }
    }
    Tensor::new(&[m * p, cols], out)
}

/// The fixed structure matrices `A_1..A_N` of a PHM layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignMatrixSet {
    n: usize,
    matrices: Vec<Vec<i8>>,
}

impl SignMatrixSet {
    pub fn from_matrices(n: usize, matrices: Vec<Vec<i8>>) -> Result<Self> {
        if matrices.len() != n || matrices.iter().any(|m| m.len() != n * n) {
            return Err(Error::invalid(
                "sign_matrix_set",
                format!("expected {n} matrices of {n}x{n}"),
            ));
        }
        Ok(Self { n, matrices })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Zero-based matrix `t`, row-major.
    pub fn matrix(&self, t: usize) -> &[i8] {
        &self.matrices[t]
    }

    pub fn get(&self, t: usize, i: usize, j: usize) -> i8 {
        self.matrices[t][i * self.n + j]
    }

    pub fn to_tensors<T: Real>(&self) -> Vec<Tensor<T>> {
        self.matrices
            .iter()
            .map(|m| {
                let vals: Vec<f64> = m.iter().map(|&v| f64::from(v)).collect();
                Tensor::from_f64(&[self.n, self.n], &vals).expect("square")
            })
            .collect()
    }

    /// Each matrix has exactly one nonzero per row and per column.
    pub fn is_signed_permutation(&self, t: usize) -> bool {
        let n = self.n;
        let m = &self.matrices[t];
        let rows_ok = (0..n).all(|i| (0..n).filter(|&j| m[i * n + j] != 0).count() == 1);
        let cols_ok = (0..n).all(|j| (0..n).filter(|&i| m[i * n + j] != 0).count() == 1);
        let signs_ok = m.iter().all(|v| matches!(v, -1..=1));
        rows_ok && cols_ok && signs_ok
    }

    /// Supports are pairwise disjoint and cover the whole grid.
    pub fn tiles_grid(&self) -> bool {
        let n = self.n;
        (0..n * n).all(|cell| self.matrices.iter().filter(|m| m[cell] != 0).count() == 1)
    }

    /// Signs of `sum_t A_t (x) [1]`.
    pub fn sign_pattern(&self) -> Vec<i8> {
        (0..self.n * self.n)
            .map(|cell| self.matrices.iter().map(|m| m[cell]).sum())
            .collect()
    }

    /// `(component, sign)` occupying zero-based cell `(i, j)`.
    pub fn cell(&self, i: usize, j: usize) -> Option<(usize, i8)> {
        (0..self.n).find_map(|t| {
            let v = self.get(t, i, j);
            (v != 0).then_some((t, v))
        })
    }
}

/// Left-multiplication structure of the Hamilton product: matrix `t` holds
/// the coefficients of basis unit `t` of `p` in `v -> p v`.
fn hamilton_sign_matrices() -> SignMatrixSet {
    let basis = |t: usize| {
        let mut c = [0.0f64; 4];
        c[t] = 1.0;
        Quaternion::from_array(c)
    };
    let matrices = (0..4)
        .map(|t| {
            let mut m = vec![0i8; 16];
            for j in 0..4 {
                let col = hamilton_product(basis(t), basis(j)).to_array();
                for (i, &v) in col.iter().enumerate() {
                    m[i * 4 + j] = v as i8;
                }
            }
            m
        })
        .collect();
    SignMatrixSet { n: 4, matrices }
}

/// Structure matrices for an `n`-dimensional PHM layer.
///
/// `n = 4` yields the Hamilton product structure. Every other `n` uses the
/// vectormap recipe: matrix `t` (zero-based) places one entry per row at
/// column `(i + t) mod n`, signed by the L-matrix entry at that cell.
pub fn build_phm_sign_matrices(n: usize) -> Result<SignMatrixSet> {
    if n == 0 {
        return Err(Error::invalid(
            "build_phm_sign_matrices",
            "dimension must be at least 1",
        ));
    }
    if n == 4 {
        return Ok(hamilton_sign_matrices());
    }
    let l = build_l_matrix(n)?;
    let matrices = (0..n)
        .map(|t| {
            let mut m = vec![0i8; n * n];
            for i in 0..n {
                let j = (i + t) % n;
                m[i * n + j] = l.get(i, j) as i8;
            }
            m
        })
        .collect();
    Ok(SignMatrixSet { n, matrices })
}

/// Unsigned circulant placement `P_t` with `P_t[i][(i + t) mod n] = 1`.
pub fn circulant_shift<T: Real>(n: usize, t: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        m.set(&[i, (i + t) % n], T::one());
    }
    m
}

/// `sum_t A_t (x) S_t` over the two leading axes of each `S_t`.
///
/// `A_t: [n, n]`, `S_t: [p, q, ...]`, result `[n p, n q, ...]`.
pub fn kron_sum<T: Real>(a: &[Tensor<T>], s: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (n, block) = check_kron_sum(a, s)?;
    let (p, q, tail) = block;
    let mut out = vec![T::zero(); n * p * n * q * tail];
    let row_len = n * q * tail;
    for (at, st) in a.iter().zip(s) {
        for i in 0..n {
            for j in 0..n {
                let coeff = at.data()[i * n + j];
                if coeff == T::zero() {
                    continue;
                }
                for r in 0..p {
                    let dst = (i * p + r) * row_len + j * q * tail;
                    let src = r * q * tail;
                    for (o, &v) in out[dst..dst + q * tail].iter_mut().zip(&st.data()[src..src + q * tail]) {
                        *o += coeff * v;
                    }
                }
            }
        }
    }
    let mut shape = s[0].shape().to_vec();
    shape[0] *= n;
    shape[1] *= n;
    Tensor::new(&shape, out)
}

/// Per-term gradients `(dA_t, dS_t)`.
pub type KronSumGrads<T> = (Vec<Tensor<T>>, Vec<Tensor<T>>);

/// Gradients of [`kron_sum`] given the output gradient.
pub fn kron_sum_backward<T: Real>(grad: &Tensor<T>, a: &[Tensor<T>], s: &[Tensor<T>]) -> Result<KronSumGrads<T>> {
    let (n, (p, q, tail)) = check_kron_sum(a, s)?;
    let row_len = n * q * tail;
    let mut da = Vec::with_capacity(a.len());
    let mut ds = Vec::with_capacity(s.len());
    for (at, st) in a.iter().zip(s) {
        let mut ga = vec![T::zero(); n * n];
        let mut gs = vec![T::zero(); p * q * tail];
        for i in 0..n {
            for j in 0..n {
                let coeff = at.data()[i * n + j];
                let mut acc = T::zero();
                for r in 0..p {
                    let src = (i * p + r) * row_len + j * q * tail;
                    let blk = &grad.data()[src..src + q * tail];
                    let sv = &st.data()[r * q * tail..(r + 1) * q * tail];
                    let gsr = &mut gs[r * q * tail..(r + 1) * q * tail];
                    for ((g, &b), &x) in gsr.iter_mut().zip(blk).zip(sv) {
                        *g += coeff * b;
                        acc += b * x;
                    }
                }
                ga[i * n + j] = acc;
            }
        }
        da.push(Tensor::new(&[n, n], ga)?);
        ds.push(Tensor::new(st.shape(), gs)?);
    }
    Ok((da, ds))
}

type BlockDims = (usize, usize, usize);

fn check_kron_sum<T: Real>(a: &[Tensor<T>], s: &[Tensor<T>]) -> Result<(usize, BlockDims)> {
    if a.is_empty() || a.len() != s.len() {
        return Err(Error::invalid(
            "kron_sum",
            format!("{} structure matrices for {} blocks", a.len(), s.len()),
        ));
    }
    let n = a[0].dim(0);
    for at in a {
        if at.shape() != [n, n] {
            return Err(Error::shape("kron_sum", at.shape(), &[n, n]));
        }
    }
    let first = s[0].shape();
    if first.len() < 2 {
        return Err(Error::shape("kron_sum", first, &[0, 0]));
    }
    for st in s {
        if st.shape() != first {
            return Err(Error::shape("kron_sum", st.shape(), first));
        }
    }
    let tail = first[2..].iter().product();
    Ok((n, (first[0], first[1], tail)))
}

/// `H = sum_i A_i (x) S_i`, the PHM weight of shape `[k, d]`.
pub fn assemble_h<T: Real>(signs: &SignMatrixSet, s: &[Tensor<T>]) -> Result<Tensor<T>> {
    if s.len() != signs.n() {
        return Err(Error::invalid(
            "assemble_h",
            format!("{} blocks for PHM dimension {}", s.len(), signs.n()),
        ));
    }
    if s.iter().any(|b| b.rank() != 2) {
        return Err(Error::shape("assemble_h", s[0].shape(), &[0, 0]));
    }
    kron_sum(&signs.to_tensors(), s)
}
