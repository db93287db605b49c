use serde::{Deserialize, Serialize};

use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Square-kernel convolution geometry with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid(
                "conv_spec",
                format!("kernel {kernel} and stride {stride} must be positive"),
            ));
        }
        Ok(Self {
            kernel,
            stride,
            padding,
        })
    }

    /// Padding `(k - 1) / 2`, which keeps the spatial extent at stride 1.
    pub fn same(kernel: usize, stride: usize) -> Result<Self> {
        Self::new(kernel, stride, (kernel.saturating_sub(1)) / 2)
    }

    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::invalid(
                "conv_spec",
                format!("kernel {} larger than padded input {padded}", self.kernel),
            ));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch(&self, spec: &ConvSpec) -> usize {
        self.c * spec.kernel * spec.kernel
    }
}

fn geometry(input: &[usize], kernel: &[usize], spec: &ConvSpec) -> Result<Geometry> {
    if input.len() != 4 || kernel.len() != 4 {
        return Err(Error::shape("conv2d", input, kernel));
    }
    if kernel[1] != input[1] || kernel[2] != spec.kernel || kernel[3] != spec.kernel {
        return Err(Error::shape("conv2d", input, kernel));
    }
    Ok(Geometry {
        n: input[0],
        c: input[1],
        h: input[2],
        w: input[3],
        o: kernel[0],
        ho: spec.output_extent(input[2])?,
        wo: spec.output_extent(input[3])?,
    })
}

fn im2col<T: Real>(img: &[T], g: &Geometry, spec: &ConvSpec, cols: &mut [T]) {
    let k = spec.kernel;
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let src = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let y = (oy * spec.stride + ki) as isize - spec.padding as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if y < 0 || y >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let x = (ox * spec.stride + kj) as isize - spec.padding as isize;
                        *v = if x < 0 || x >= g.w as isize {
                            T::zero()
                        } else {
                            srow[x as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geometry, spec: &ConvSpec, img: &mut [T]) {
    let k = spec.kernel;
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let dst = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let y = (oy * spec.stride + ki) as isize - spec.padding as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[y as usize * g.w..(y as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let x = (ox * spec.stride + kj) as isize - spec.padding as isize;
                        if x >= 0 && x < g.w as isize {
                            drow[x as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation: `[N,C,H,W] x [O,C,k,k] -> [N,O,H',W']`.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    let g = geometry(input.shape(), kernel.shape(), &spec)?;
    let plane = g.ho * g.wo;
    let patch = g.patch(&spec);
    let mut out = vec![T::zero(); g.n * g.o * plane];
    let mut cols = if spec.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    let x = input.data();
    for n in 0..g.n {
        let img = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let dst = &mut out[n * g.o * plane..(n + 1) * g.o * plane];
        let b: &[T] = if spec.is_pointwise() {
            img
        } else {
            im2col(img, &g, &spec, &mut cols);
            &cols
        };
        gemm(g.o, patch, plane, kernel.data(), false, b, false, T::zero(), dst);
    }
    Tensor::new(&[g.n, g.o, g.ho, g.wo], out)
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_grad_input<T: Real>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    input_shape: &[usize],
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = geometry(input_shape, kernel.shape(), &spec)?;
    if grad_out.shape() != [g.n, g.o, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_grad_input",
            grad_out.shape(),
            &[g.n, g.o, g.ho, g.wo],
        ));
    }
    let plane = g.ho * g.wo;
    let patch = g.patch(&spec);
    let chw = g.c * g.h * g.w;
    let mut dx = vec![T::zero(); g.n * chw];
    let mut cols = vec![T::zero(); patch * plane];
    let gy = grad_out.data();
    for n in 0..g.n {
        let gout = &gy[n * g.o * plane..(n + 1) * g.o * plane];
        let dimg = &mut dx[n * chw..(n + 1) * chw];
        if spec.is_pointwise() {
            gemm(patch, g.o, plane, kernel.data(), true, gout, false, T::zero(), dimg);
        } else {
            gemm(
                patch,
                g.o,
                plane,
                kernel.data(),
                true,
                gout,
                false,
                T::zero(),
                &mut cols,
            );
            col2im(&cols, &g, &spec, dimg);
        }
    }
    Tensor::new(input_shape, dx)
}

/// Gradient of `conv2d` with respect to its kernel.
pub fn conv2d_grad_kernel<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel_shape: &[usize],
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = geometry(input.shape(), kernel_shape, &spec)?;
    if grad_out.shape() != [g.n, g.o, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_grad_kernel",
            grad_out.shape(),
            &[g.n, g.o, g.ho, g.wo],
        ));
    }
    let plane = g.ho * g.wo;
    let patch = g.patch(&spec);
    let chw = g.c * g.h * g.w;
    let mut dk = vec![T::zero(); g.o * patch];
    let mut cols = if spec.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    let x = input.data();
    let gy = grad_out.data();
    for n in 0..g.n {
        let img = &x[n * chw..(n + 1) * chw];
        let gout = &gy[n * g.o * plane..(n + 1) * g.o * plane];
        let b: &[T] = if spec.is_pointwise() {
            img
        } else {
            im2col(img, &g, &spec, &mut cols);
            &cols
        };
        gemm(g.o, plane, patch, gout, false, b, true, T::one(), &mut dk);
    }
    Tensor::new(kernel_shape, dk)
}
