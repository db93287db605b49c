use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{check_divisible, InitSpec};
use crate::algebra::{build_l_matrix, build_phm_sign_matrices, circulant_shift, SignMatrixSet};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::{ConvSpec, Mode, Real, RunningStats, Tensor};

/// Number system of a convolutional frontend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Algebra {
    Real,
    Quaternion,
    Vectormap(usize),
}

impl Algebra {
    /// Channel-group count `N`; the kernel weight-sharing ratio is `1/N`.
    pub fn dim(self) -> usize {
        match self {
            Algebra::Real => 1,
            Algebra::Quaternion => 4,
            Algebra::Vectormap(d) => d,
        }
    }
}

impl fmt::Display for Algebra {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Algebra::Real => f.write_str("real"),
            Algebra::Quaternion => f.write_str("quaternion"),
            Algebra::Vectormap(d) => write!(f, "vectormap:{d}"),
        }
    }
}

impl FromStr for Algebra {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Algebra::Real),
            "quaternion" => Ok(Algebra::Quaternion),
            "vectormap" => Ok(Algebra::Vectormap(3)),
            _ => match s.strip_prefix("vectormap:").map(str::parse::<usize>) {
                Some(Ok(d)) if d >= 1 => Ok(Algebra::Vectormap(d)),
                _ => Err(Error::config("algebra", format!("unknown algebra `{s}`"))),
            },
        }
    }
}

impl TryFrom<String> for Algebra {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Algebra> for String {
    fn from(a: Algebra) -> String {
        a.to_string()
    }
}

#[derive(Debug, Clone)]
enum ConvParams {
    Real(ParamId),
    Quaternion([ParamId; 4]),
    Vectormap { kernels: Vec<ParamId>, l: ParamId },
}

/// Convolution in a chosen algebra, bias-free.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub name: String,
    pub algebra: Algebra,
    pub in_ch: usize,
    pub out_ch: usize,
    pub spec: ConvSpec,
    params: ConvParams,
}

impl ConvLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        algebra: Algebra,
        in_ch: usize,
        out_ch: usize,
        spec: ConvSpec,
        init: &InitSpec,
    ) -> Result<Self> {
        let n = algebra.dim();
        check_divisible(name, "input channels", in_ch, n)?;
        check_divisible(name, "output channels", out_ch, n)?;
        let shape = [out_ch / n, in_ch / n, spec.kernel, spec.kernel];
        let component = |store: &mut ParamStore<T>, suffix: &str| {
            let full = format!("{name}.{suffix}");
            let value = init.conv_component(&full, shape, n);
            store.add(full, value, ParamGroup::Kernel)
        };
        let params = match algebra {
            Algebra::Real => ConvParams::Real(component(store, "weight")?),
            Algebra::Quaternion => ConvParams::Quaternion([
                component(store, "r")?,
                component(store, "x")?,
                component(store, "y")?,
                component(store, "z")?,
            ]),
            Algebra::Vectormap(d) => {
                let kernels = (0..d)
                    .map(|t| component(store, &format!("k{t}")))
                    .collect::<Result<Vec<_>>>()?;
                let l = store.add(format!("{name}.l"), build_l_matrix(d)?.to_tensor(), ParamGroup::LMatrix)?;
                ConvParams::Vectormap { kernels, l }
            }
        };
        Ok(Self {
            name: name.to_string(),
            algebra,
            in_ch,
            out_ch,
            spec,
            params,
        })
    }

    /// Expanded `[O, C, k, k]` real kernel recorded on the graph.
    pub fn weight<T: Real>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var> {
        match &self.params {
            ConvParams::Real(w) => Ok(p[*w]),
            ConvParams::Quaternion(ids) => {
                let signs: Vec<Var> = build_phm_sign_matrices(4)?
                    .to_tensors()
                    .into_iter()
                    .map(|t| g.constant(t))
                    .collect();
                let comps: Vec<Var> = ids.iter().map(|&id| p[id]).collect();
                g.kron_sum(&signs, &comps)
            }
            ConvParams::Vectormap { kernels, l } => {
                let d = kernels.len();
                let mut structure = Vec::with_capacity(d);
                for t in 0..d {
                    let placement = g.constant(circulant_shift(d, t));
                    structure.push(g.hadamard(p[*l], placement)?);
                }
                let comps: Vec<Var> = kernels.iter().map(|&id| p[id]).collect();
                g.kron_sum(&structure, &comps)
            }
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = g.value(x).shape().get(1).copied().unwrap_or(0);
        if c != self.in_ch {
            return Err(Error::shape(
                "conv_layer",
                g.value(x).shape(),
                &[self.out_ch, self.in_ch],
            ));
        }
        let w = self.weight(g, p)?;
        g.conv2d(x, w, self.spec)
    }

    /// Multiply-accumulates for one image at the given output extent. Every
    /// algebra runs `N^2` real convolutions at `1/N` channel shapes.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (self.out_ch * self.in_ch * self.spec.kernel * self.spec.kernel * out_h * out_w) as u64
    }
}

/// Batch norm over the channel axis with learnable scale and shift.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Index into the owning model's running-statistics buffers.
    pub buffer: usize,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, buffer: usize) -> Result<Self> {
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::full(&[channels], T::one()),
            ParamGroup::BnScale,
        )?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamGroup::BnShift)?;
        Ok(Self {
            name: name.to_string(),
            channels,
            gamma,
            beta,
            buffer,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        buffers: &mut [RunningStats<T>],
        mode: Mode,
    ) -> Result<Var> {
        g.batch_norm(x, p[self.gamma], p[self.beta], &mut buffers[self.buffer], mode)
            .map_err(|e| match e {
                Error::UninitializedStats { .. } => Error::UninitializedStats {
                    layer: self.name.clone(),
                },
                other => other,
            })
    }
}

#[derive(Debug, Clone)]
pub enum HeadKind {
    Dense {
        weight: ParamId,
    },
    Phm {
        signs: SignMatrixSet,
        /// Present only when the structure matrices are trainable.
        trainable_signs: Option<Vec<ParamId>>,
        blocks: Vec<ParamId>,
    },
}

/// Classifier from pooled features `[B, d]` to logits `[B, k]`.
#[derive(Debug, Clone)]
pub struct Head {
    pub name: String,
    pub d: usize,
    pub k: usize,
    pub kind: HeadKind,
    pub bias: ParamId,
}

impl Head {
    pub fn dense<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, k: usize, init: &InitSpec) -> Result<Self> {
        let wname = format!("{name}.weight");
        let weight = store.add(&wname, init.dense(&wname, [k, d]), ParamGroup::DenseWeight)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[k]), ParamGroup::Bias)?;
        Ok(Self {
            name: name.to_string(),
            d,
            k,
            kind: HeadKind::Dense { weight },
            bias,
        })
    }

    pub fn phm<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        n: usize,
        d: usize,
        k: usize,
        trainable_signs: bool,
        init: &InitSpec,
    ) -> Result<Self> {
        check_divisible(name, "input features d", d, n)?;
        check_divisible(name, "output features k", k, n)?;
        let signs = build_phm_sign_matrices(n)?;
        let mut blocks = Vec::with_capacity(n);
        for i in 0..n {
            let bname = format!("{name}.s{i}");
            let value = init.phm_block(&bname, [k / n, d / n], n);
            blocks.push(store.add(bname, value, ParamGroup::PhmBlock)?);
        }
        let trainable = if trainable_signs {
            let ids = signs
                .to_tensors()
                .into_iter()
                .enumerate()
                .map(|(i, a)| store.add(format!("{name}.a{i}"), a, ParamGroup::SignMatrix))
                .collect::<Result<Vec<_>>>()?;
            Some(ids)
        } else {
            None
        };
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[k]), ParamGroup::Bias)?;
        Ok(Self {
            name: name.to_string(),
            d,
            k,
            kind: HeadKind::Phm {
                signs,
                trainable_signs: trainable,
                blocks,
            },
            bias,
        })
    }

    /// PHM dimension, or `None` for a dense head.
    pub fn phm_n(&self) -> Option<usize> {
        match &self.kind {
            HeadKind::Dense { .. } => None,
            HeadKind::Phm { signs, .. } => Some(signs.n()),
        }
    }

    /// The `[k, d]` weight (materialized `H` for PHM) on the graph.
    pub fn weight<T: Real>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var> {
        match &self.kind {
            HeadKind::Dense { weight } => Ok(p[*weight]),
            HeadKind::Phm {
                signs,
                trainable_signs,
                blocks,
            } => {
                let a: Vec<Var> = match trainable_signs {
                    Some(ids) => ids.iter().map(|&id| p[id]).collect(),
                    None => signs.to_tensors().into_iter().map(|t| g.constant(t)).collect(),
                };
                let s: Vec<Var> = blocks.iter().map(|&id| p[id]).collect();
                g.kron_sum(&a, &s)
            }
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = self.weight(g, p)?;
        g.linear(x, w, Some(p[self.bias]))
    }

    pub fn macs(&self) -> u64 {
        (self.k * self.d) as u64
    }
}
