//! Slow reference implementations, written without the GEMM or Kronecker
//! machinery they check.

use crate::error::{Error, Result};
use crate::layers::{PhmLinearParams, QuaternionConv2dParams, VectormapConv2dParams};
use crate::tensor::{ConvSpec, Real, Tensor};

/// Direct seven-loop cross-correlation with zero padding.
pub fn naive_conv2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    if input.rank() != 4 || kernel.rank() != 4 || input.dim(1) != kernel.dim(1) {
        return Err(Error::shape("naive_conv2d", input.shape(), kernel.shape()));
    }
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (o, kh, kw) = (kernel.dim(0), kernel.dim(2), kernel.dim(3));
    let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
    let wo = (w + 2 * spec.padding - kw) / spec.stride + 1;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    for b in 0..n {
        for oc in 0..o {
            for y in 0..ho {
                for x in 0..wo {
                    let mut acc = T::zero();
                    for ic in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * spec.stride + dy) as isize - spec.padding as isize;
                                let ix = (x * spec.stride + dx) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += input.get(&[b, ic, iy as usize, ix as usize]) * kernel.get(&[oc, ic, dy, dx]);
                            }
                        }
                    }
                    out.set(&[b, oc, y, x], acc);
                }
            }
        }
    }
    Ok(out)
}

/// Triple-loop matrix product.
pub fn naive_matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(Error::shape("naive_matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for t in 0..k {
                acc += a.get(&[i, t]) * b.get(&[t, j]);
            }
            out.set(&[i, j], acc);
        }
    }
    Ok(out)
}

/// Kronecker product by explicit index arithmetic.
pub fn naive_kron<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape("naive_kron", a.shape(), b.shape()));
    }
    let (m, n, p, q) = (a.dim(0), a.dim(1), b.dim(0), b.dim(1));
    let mut out = Tensor::zeros(&[m * p, n * q]);
    for i in 0..m {
        for j in 0..n {
            for r in 0..p {
                for s in 0..q {
                    out.set(&[i * p + r, j * q + s], a.get(&[i, j]) * b.get(&[r, s]));
                }
            }
        }
    }
    Ok(out)
}

/// Channels `[g*c/groups, (g+1)*c/groups)` of `x`.
fn channel_group<T: Real>(x: &Tensor<T>, g: usize, groups: usize) -> Tensor<T> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let cg = c / groups;
    let mut out = Tensor::zeros(&[n, cg, h, w]);
    for b in 0..n {
        for ch in 0..cg {
            for y in 0..h {
                for xx in 0..w {
                    out.set(&[b, ch, y, xx], x.get(&[b, g * cg + ch, y, xx]));
                }
            }
        }
    }
    out
}

fn concat_groups<T: Real>(parts: &[Tensor<T>]) -> Tensor<T> {
    let (n, cg, h, w) = (parts[0].dim(0), parts[0].dim(1), parts[0].dim(2), parts[0].dim(3));
    let mut out = Tensor::zeros(&[n, cg * parts.len(), h, w]);
    for (g, p) in parts.iter().enumerate() {
        for b in 0..n {
            for ch in 0..cg {
                for y in 0..h {
                    for x in 0..w {
                        out.set(&[b, g * cg + ch, y, x], p.get(&[b, ch, y, x]));
                    }
                }
            }
        }
    }
    out
}

fn signed_sum<T: Real>(terms: &[(f64, Tensor<T>)]) -> Tensor<T> {
    let mut acc = Tensor::zeros(terms[0].1.shape());
    for (s, t) in terms {
        acc.accumulate(&t.scale(T::from_f64_lossy(*s))).expect("equal shapes");
    }
    acc
}

/// Quaternion convolution written out as its sixteen real convolutions:
///
/// ```text
/// r' = R*r - X*x - Y*y - Z*z
/// x' = R*x + X*r + Y*z - Z*y
/// y' = R*y - X*z + Y*r + Z*x
/// z' = R*z + X*y - Y*x + Z*r
/// ```
pub fn quaternion_conv2d_literal<T: Real>(input: &Tensor<T>, p: &QuaternionConv2dParams<T>) -> Result<Tensor<T>> {
    if input.rank() != 4 || !input.dim(1).is_multiple_of(4) {
        return Err(Error::shape("quaternion_conv2d_literal", input.shape(), p.r.shape()));
    }
    let [r, x, y, z] = [0, 1, 2, 3].map(|g| channel_group(input, g, 4));
    let conv = |k: &Tensor<T>, v: &Tensor<T>| naive_conv2d(v, k, p.spec);
    let (kr, kx, ky, kz) = (&p.r, &p.x, &p.y, &p.z);
    let out_r = signed_sum(&[
        (1.0, conv(kr, &r)?),
        (-1.0, conv(kx, &x)?),
        (-1.0, conv(ky, &y)?),
        (-1.0, conv(kz, &z)?),
    ]);
    let out_x = signed_sum(&[
        (1.0, conv(kr, &x)?),
        (1.0, conv(kx, &r)?),
        (1.0, conv(ky, &z)?),
        (-1.0, conv(kz, &y)?),
    ]);
    let out_y = signed_sum(&[
        (1.0, conv(kr, &y)?),
        (-1.0, conv(kx, &z)?),
        (1.0, conv(ky, &r)?),
        (1.0, conv(kz, &x)?),
    ]);
    let out_z = signed_sum(&[
        (1.0, conv(kr, &z)?),
        (1.0, conv(kx, &y)?),
        (-1.0, conv(ky, &x)?),
        (1.0, conv(kz, &r)?),
    ]);
    Ok(concat_groups(&[out_r, out_x, out_y, out_z]))
}

/// Vectormap convolution as a loop over output and input groups: output
/// group `i` sums `L[i][j] * conv(group_j, K_{(j - i) mod D})`.
pub fn vectormap_conv2d_loop<T: Real>(input: &Tensor<T>, p: &VectormapConv2dParams<T>) -> Result<Tensor<T>> {
    let d = p.kernels.len();
    if input.rank() != 4 || !input.dim(1).is_multiple_of(d) {
        return Err(Error::shape(
            "vectormap_conv2d_loop",
            input.shape(),
            p.kernels[0].shape(),
        ));
    }
    let groups: Vec<Tensor<T>> = (0..d).map(|g| channel_group(input, g, d)).collect();
    let mut outs = Vec::with_capacity(d);
    for i in 0..d {
        let mut terms = Vec::with_capacity(d);
        for (j, gj) in groups.iter().enumerate() {
            let k = &p.kernels[(j + d - i) % d];
            terms.push((p.l.get(&[i, j]).as_f64(), naive_conv2d(gj, k, p.spec)?));
        }
        outs.push(signed_sum(&terms));
    }
    Ok(concat_groups(&outs))
}

/// `H[i*p + a][j*q + b] = sum_t A_t[i][j] S_t[a][b]` filled cell by cell,
/// then `y = x H^T + bias` by explicit loops.
pub fn phm_linear_materialized<T: Real>(input: &Tensor<T>, p: &PhmLinearParams<T>) -> Result<Tensor<T>> {
    let n = p.n();
    let (bp, bq) = (p.s_blocks[0].dim(0), p.s_blocks[0].dim(1));
    let (k, d) = (n * bp, n * bq);
    if input.rank() != 2 || input.dim(1) != d {
        return Err(Error::shape("phm_linear_materialized", input.shape(), &[k, d]));
    }
    let mut h = Tensor::<T>::zeros(&[k, d]);
    for i in 0..n {
        for j in 0..n {
            for a in 0..bp {
                for b in 0..bq {
                    let mut acc = T::zero();
                    for t in 0..n {
                        acc += T::from_f64_lossy(p.signs.get(t, i, j) as f64) * p.s_blocks[t].get(&[a, b]);
                    }
                    h.set(&[i * bp + a, j * bq + b], acc);
                }
            }
        }
    }
    let batch = input.dim(0);
    let mut out = Tensor::zeros(&[batch, k]);
    for r in 0..batch {
        for o in 0..k {
            let mut acc = p.bias.data()[o];
            for c in 0..d {
                acc += h.get(&[o, c]) * input.get(&[r, c]);
            }
            out.set(&[r, o], acc);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_conv_all_ones() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let y = naive_conv2d(&x, &k, ConvSpec::same(3, 1).unwrap()).unwrap();
        assert_eq!(y.get(&[0, 0, 1, 1]), 9.0);
        assert_eq!(y.get(&[0, 0, 0, 0]), 4.0);
    }

    #[test]
    fn naive_matmul_hand_example() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(naive_matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }
}
