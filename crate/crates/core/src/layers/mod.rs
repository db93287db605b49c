//! Quaternion convolution, vectormap convolution and PHM dense layers.
//!
//! Each layer stores `n` shared component tensors and expands them into a
//! full real weight with [`kron_sum`] before running one real convolution
//! (or one GEMM). Channels split into `n` contiguous groups: group `g`
//! covers channels `[g C/n, (g+1) C/n)`.

mod init;
mod modules;

pub use init::{InitScheme, InitSpec};
pub use modules::{Algebra, BatchNorm2d, ConvLayer, Head, HeadKind};

use crate::algebra::{assemble_h, build_l_matrix, build_phm_sign_matrices, circulant_shift, kron_sum, SignMatrixSet};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, linear, ConvSpec, Real, Tensor};

pub(crate) const PHM_HINT: &str = "choose N dividing both d and k";
pub(crate) const CONV_HINT: &str = "choose channel widths divisible by the algebra dimension";

pub(crate) fn check_divisible(layer: &str, what: &'static str, value: usize, n: usize) -> Result<()> {
    if n == 0 || !value.is_multiple_of(n) {
        let hint = if what.contains("features") { PHM_HINT } else { CONV_HINT };
        return Err(Error::Divisibility {
            layer: layer.to_string(),
            what,
            value,
            n,
            hint,
        });
    }
    Ok(())
}

/// Re-draws a layer's parameters from an [`InitSpec`].
pub trait InitWeights {
    fn init_weights(&mut self, spec: &InitSpec);
}

/// Kernels `R, X, Y, Z`, each `[O/4, C/4, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuaternionConv2dParams<T> {
    pub r: Tensor<T>,
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub z: Tensor<T>,
    pub spec: ConvSpec,
}

impl<T: Real> QuaternionConv2dParams<T> {
    pub fn new(in_ch: usize, out_ch: usize, spec: ConvSpec, init: &InitSpec) -> Result<Self> {
        check_divisible("quaternion_conv2d", "input channels", in_ch, 4)?;
        check_divisible("quaternion_conv2d", "output channels", out_ch, 4)?;
        let shape = [out_ch / 4, in_ch / 4, spec.kernel, spec.kernel];
        let mut p = Self {
            r: Tensor::zeros(&shape),
            x: Tensor::zeros(&shape),
            y: Tensor::zeros(&shape),
            z: Tensor::zeros(&shape),
            spec,
        };
        p.init_weights(init);
        Ok(p)
    }

    pub fn components(&self) -> [&Tensor<T>; 4] {
        [&self.r, &self.x, &self.y, &self.z]
    }

    /// The `[O, C, k, k]` real kernel: block `(i, j)` is the signed component
    /// that multiplies input group `j` in output group `i`.
    pub fn full_kernel(&self) -> Result<Tensor<T>> {
        let signs = build_phm_sign_matrices(4)?.to_tensors();
        let comps: Vec<Tensor<T>> = self.components().into_iter().cloned().collect();
        kron_sum(&signs, &comps)
    }

    pub fn kernel_param_count(&self) -> usize {
        4 * self.r.len()
    }
}

impl<T: Real> InitWeights for QuaternionConv2dParams<T> {
    fn init_weights(&mut self, spec: &InitSpec) {
        let shape: [usize; 4] = self.r.shape().try_into().expect("rank-4 kernel");
        for (name, t) in [
            ("r", &mut self.r),
            ("x", &mut self.x),
            ("y", &mut self.y),
            ("z", &mut self.z),
        ] {
            *t = spec.conv_component(name, shape, 4);
        }
    }
}

/// Quaternion convolution of `[N, C, H, W]` input.
pub fn quaternion_conv2d<T: Real>(input: &Tensor<T>, params: &QuaternionConv2dParams<T>) -> Result<Tensor<T>> {
    if input.rank() != 4 {
        return Err(Error::shape("quaternion_conv2d", input.shape(), params.r.shape()));
    }
    check_divisible("quaternion_conv2d", "input channels", input.dim(1), 4)?;
    conv2d(input, &params.full_kernel()?, params.spec)
}

/// `D` kernels `[O/D, C/D, k, k]` plus the learnable `D x D` mask `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectormapConv2dParams<T> {
    pub kernels: Vec<Tensor<T>>,
    pub l: Tensor<T>,
    pub spec: ConvSpec,
}

impl<T: Real> VectormapConv2dParams<T> {
    pub fn new(d: usize, in_ch: usize, out_ch: usize, spec: ConvSpec, init: &InitSpec) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("vectormap_conv2d", "dimension must be at least 1"));
        }
        check_divisible("vectormap_conv2d", "input channels", in_ch, d)?;
        check_divisible("vectormap_conv2d", "output channels", out_ch, d)?;
        let shape = [out_ch / d, in_ch / d, spec.kernel, spec.kernel];
        let mut p = Self {
            kernels: vec![Tensor::zeros(&shape); d],
            l: Tensor::zeros(&[d, d]),
            spec,
        };
        p.init_weights(init);
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.kernels.len()
    }

    /// Structure matrices `L (.) P_t`, where `P_t` is the circulant placement
    /// of kernel `t`.
    pub fn structure(&self) -> Result<Vec<Tensor<T>>> {
        let d = self.dim();
        (0..d)
            .map(|t| self.l.zip_map(&circulant_shift(d, t), |a, b| a * b))
            .collect()
    }

    pub fn full_kernel(&self) -> Result<Tensor<T>> {
        kron_sum(&self.structure()?, &self.kernels)
    }
}

impl<T: Real> InitWeights for VectormapConv2dParams<T> {
    fn init_weights(&mut self, spec: &InitSpec) {
        let d = self.dim();
        let shape: [usize; 4] = self.kernels[0].shape().try_into().expect("rank-4 kernel");
        for (t, k) in self.kernels.iter_mut().enumerate() {
            *k = spec.conv_component(&format!("k{t}"), shape, d);
        }
        self.l = build_l_matrix(d).expect("d >= 1").to_tensor();
    }
}

/// Output group `i` is `sum_j L[i,j] conv(g_j, K_{(j - i) mod D})`.
pub fn vectormap_conv2d<T: Real>(input: &Tensor<T>, params: &VectormapConv2dParams<T>) -> Result<Tensor<T>> {
    if input.rank() != 4 {
        return Err(Error::shape(
            "vectormap_conv2d",
            input.shape(),
            params.kernels[0].shape(),
        ));
    }
    check_divisible("vectormap_conv2d", "input channels", input.dim(1), params.dim())?;
    conv2d(input, &params.full_kernel()?, params.spec)
}

/// Learnable blocks `S_1..S_N` of shape `[k/N, d/N]` plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct PhmLinearParams<T> {
    pub signs: SignMatrixSet,
    pub s_blocks: Vec<Tensor<T>>,
    pub bias: Tensor<T>,
}

impl<T: Real> PhmLinearParams<T> {
    /// `d` inputs, `k` outputs; both must be multiples of `n`.
    pub fn new(n: usize, d: usize, k: usize, init: &InitSpec) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("phm_linear", "dimension must be at least 1"));
        }
        check_divisible("phm_linear", "input features d", d, n)?;
        check_divisible("phm_linear", "output features k", k, n)?;
        let mut p = Self {
            signs: build_phm_sign_matrices(n)?,
            s_blocks: vec![Tensor::zeros(&[k / n, d / n]); n],
            bias: Tensor::zeros(&[k]),
        };
        p.init_weights(init);
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.signs.n()
    }

    /// Materialized `H = sum_i A_i (x) S_i`, shape `[k, d]`.
    pub fn h(&self) -> Result<Tensor<T>> {
        assemble_h(&self.signs, &self.s_blocks)
    }

    pub fn param_count(&self) -> usize {
        self.s_blocks.iter().map(Tensor::len).sum::<usize>() + self.bias.len()
    }
}

impl<T: Real> InitWeights for PhmLinearParams<T> {
    fn init_weights(&mut self, spec: &InitSpec) {
        let n = self.n();
        let shape: [usize; 2] = self.s_blocks[0].shape().try_into().expect("rank-2 block");
        for (i, s) in self.s_blocks.iter_mut().enumerate() {
            *s = spec.phm_block(&format!("s{i}"), shape, n);
        }
        self.bias = Tensor::zeros(self.bias.shape());
    }
}

/// `y = H x + b` for each row of `[batch, d]` input.
pub fn phm_linear<T: Real>(input: &Tensor<T>, params: &PhmLinearParams<T>) -> Result<Tensor<T>> {
    if input.rank() != 2 {
        return Err(Error::invalid(
            "phm_linear",
            format!("expected [batch, d], got {:?}", input.shape()),
        ));
    }
    check_divisible("phm_linear", "input features d", input.dim(1), params.n())?;
    linear(input, &params.h()?, Some(&params.bias))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quaternion_channel_divisibility() {
        let init = InitSpec::new(0);
        let err = QuaternionConv2dParams::<f32>::new(6, 8, ConvSpec::same(3, 1).unwrap(), &init).unwrap_err();
        assert!(err.to_string().contains("quaternion_conv2d"), "{err}");
        let p = QuaternionConv2dParams::<f32>::new(8, 8, ConvSpec::same(3, 1).unwrap(), &init).unwrap();
        let x = Tensor::zeros(&[1, 6, 4, 4]);
        assert!(matches!(quaternion_conv2d(&x, &p), Err(Error::Divisibility { .. })));
    }

    #[test]
    fn prime_class_count_rejected() {
        let init = InitSpec::new(0);
        for n in [4, 5] {
            let err = PhmLinearParams::<f32>::new(n, 20, 29, &init).unwrap_err();
            let msg = err.to_string();
            assert!(msg.contains("choose N dividing both d and k"), "{msg}");
        }
        assert!(PhmLinearParams::<f32>::new(1, 20, 29, &init).is_ok());
    }

    #[test]
    fn l_is_exactly_its_initialization() {
        let p = VectormapConv2dParams::<f64>::new(5, 10, 10, ConvSpec::same(3, 1).unwrap(), &InitSpec::new(9)).unwrap();
        assert_eq!(p.l, build_l_matrix(5).unwrap().to_tensor());
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ConvSpec::same(3, 1).unwrap();
        let a = QuaternionConv2dParams::<f32>::new(8, 8, spec, &InitSpec::new(42)).unwrap();
        let b = QuaternionConv2dParams::<f32>::new(8, 8, spec, &InitSpec::new(42)).unwrap();
        assert_eq!(a, b);
        let c = QuaternionConv2dParams::<f32>::new(8, 8, spec, &InitSpec::new(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_phm_is_dense() {
        let p = PhmLinearParams::<f64>::new(1, 3, 2, &InitSpec::new(1)).unwrap();
        assert_eq!(p.h().unwrap(), p.s_blocks[0]);
    }
}
