use crate::algebra::{kron_sum, kron_sum_backward};
use crate::error::{Error, Result};
use crate::tensor::{
    batch_norm_backward, batch_norm_forward_saved, conv2d, conv2d_grad_input, conv2d_grad_kernel, gemm,
    global_avg_pool, linear, matmul, BatchNormSaved, ConvSpec, Mode, Real, RunningStats, Tensor,
};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        spec: ConvSpec,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    KronSum {
        a: Vec<Var>,
        s: Vec<Var>,
    },
    Hadamard {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Relu {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<T>,
    },
    GlobalAvgPool {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Sum {
        input: Var,
    },
    HalfSumSquares {
        input: Var,
    },
    Opaque {
        name: String,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of one forward computation. Nodes are appended in
/// evaluation order, so walking them backwards is a reverse topological
/// order of the DAG.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf (parameter, or an input whose gradient is wanted).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, spec: ConvSpec) -> Result<Var> {
        let y = conv2d(self.value(input), self.value(kernel), spec)?;
        let rg = self.needs(input) || self.needs(kernel);
        Ok(self.push(y, Op::Conv2d { input, kernel, spec }, rg))
    }

    /// `x W^T + b`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let rg = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(y, Op::Linear { input, weight, bias }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = matmul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::MatMul { a, b }, rg))
    }

    /// `sum_t a_t (x) s_t` over the two leading axes of each `s_t`.
    pub fn kron_sum(&mut self, a: &[Var], s: &[Var]) -> Result<Var> {
        let at: Vec<Tensor<T>> = a.iter().map(|&v| self.value(v).clone()).collect();
        let st: Vec<Tensor<T>> = s.iter().map(|&v| self.value(v).clone()).collect();
        let y = kron_sum(&at, &st)?;
        let rg = a.iter().chain(s).any(|&v| self.needs(v));
        Ok(self.push(
            y,
            Op::KronSum {
                a: a.to_vec(),
                s: s.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Hadamard { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.needs(input);
        self.push(y, Op::Relu { input }, rg)
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let (y, saved) = batch_norm_forward_saved(self.value(input), self.value(gamma), self.value(beta), stats, mode)?;
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            y,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            },
            rg,
        ))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let y = global_avg_pool(self.value(input))?;
        let rg = self.needs(input);
        Ok(self.push(y, Op::GlobalAvgPool { input }, rg))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 2 || z.dim(0) != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", z.shape(), &[labels.len()]));
        }
        let k = z.dim(1);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let mut probs = Vec::with_capacity(z.len());
        let mut loss = 0.0f64;
        for (row, &label) in z.data().chunks(k).zip(labels) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            loss += total.ln() - (row[label].as_f64() - max);
            probs.extend(exps.iter().map(|e| T::from_f64_lossy(e / total)));
        }
        let loss = T::from_f64_lossy(loss / labels.len() as f64);
        let probs = Tensor::new(z.shape(), probs)?;
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let y = Tensor::scalar(self.value(input).sum());
        let rg = self.needs(input);
        self.push(y, Op::Sum { input }, rg)
    }

    /// `0.5 * sum(x^2)`.
    pub fn half_sum_squares(&mut self, input: Var) -> Var {
        let half = T::from_f64_lossy(0.5);
        let y = Tensor::scalar(self.value(input).data().iter().map(|&v| half * v * v).sum());
        let rg = self.needs(input);
        self.push(y, Op::HalfSumSquares { input }, rg)
    }

    /// Records a value produced outside the graph. It has no derivative
    /// rule, so backward fails if any gradient reaches it.
    pub fn opaque(&mut self, name: &str, inputs: &[Var], value: Tensor<T>) -> Var {
        let rg = inputs.iter().any(|&v| self.needs(v));
        self.push(value, Op::Opaque { name: name.to_string() }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(gy);
                continue;
            }
            for (v, g) in self.local_grads(&node.op, &node.value, &gy)? {
                accumulate(&mut grads[v.0], g)?;
            }
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, op: &Op<T>, y: &Tensor<T>, gy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, spec } => {
                if self.needs(*input) {
                    let x = self.value(*input);
                    out.push((*input, conv2d_grad_input(gy, self.value(*kernel), x.shape(), *spec)?));
                }
                if self.needs(*kernel) {
                    let k = self.value(*kernel);
                    out.push((*kernel, conv2d_grad_kernel(gy, self.value(*input), k.shape(), *spec)?));
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (batch, d, k) = (x.dim(0), x.dim(1), w.dim(0));
                if self.needs(*input) {
                    let mut dx = vec![T::zero(); batch * d];
                    gemm(batch, k, d, gy.data(), false, w.data(), false, T::zero(), &mut dx);
                    out.push((*input, Tensor::new(x.shape(), dx)?));
                }
                if self.needs(*weight) {
                    let mut dw = vec![T::zero(); k * d];
                    gemm(k, batch, d, gy.data(), true, x.data(), false, T::zero(), &mut dw);
                    out.push((*weight, Tensor::new(w.shape(), dw)?));
                }
                if let Some(b) = bias.filter(|&b| self.needs(b)) {
                    let mut db = vec![T::zero(); k];
                    for row in gy.data().chunks(k) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((b, Tensor::new(&[k], db)?));
                }
            }
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.dim(0), av.dim(1), bv.dim(1));
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, gy.data(), false, bv.data(), true, T::zero(), &mut da);
                    out.push((*a, Tensor::new(av.shape(), da)?));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, av.data(), true, gy.data(), false, T::zero(), &mut db);
                    out.push((*b, Tensor::new(bv.shape(), db)?));
                }
            }
            Op::KronSum { a, s } => {
                let at: Vec<Tensor<T>> = a.iter().map(|&v| self.value(v).clone()).collect();
                let st: Vec<Tensor<T>> = s.iter().map(|&v| self.value(v).clone()).collect();
                let (da, ds) = kron_sum_backward(gy, &at, &st)?;
                for (&v, g) in a.iter().zip(da) {
                    if self.needs(v) {
                        out.push((v, g));
                    }
                }
                for (&v, g) in s.iter().zip(ds) {
                    if self.needs(v) {
                        out.push((v, g));
                    }
                }
            }
            Op::Hadamard { a, b } => {
                if self.needs(*a) {
                    out.push((*a, gy.zip_map(self.value(*b), |g, v| g * v)?));
                }
                if self.needs(*b) {
                    out.push((*b, gy.zip_map(self.value(*a), |g, v| g * v)?));
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    out.push((*a, gy.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, gy.clone()));
                }
            }
            Op::Relu { input } => {
                // subgradient 0 at the kink
                let g = gy.zip_map(y, |g, v| if v > T::zero() { g } else { T::zero() })?;
                out.push((*input, g));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dgamma, dbeta) = batch_norm_backward(gy, saved, self.value(*gamma))?;
                if self.needs(*input) {
                    out.push((*input, dx));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if self.needs(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::GlobalAvgPool { input } => {
                let x = self.value(*input);
                let hw = x.dim(2) * x.dim(3);
                let inv = T::from_f64_lossy(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(x.len());
                for &g in gy.data() {
                    dx.extend(std::iter::repeat_n(g * inv, hw));
                }
                out.push((*input, Tensor::new(x.shape(), dx)?));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = probs.dim(1);
                let scale = gy.item() / T::from_f64_lossy(labels.len() as f64);
                let mut d = probs.data().to_vec();
                for (row, &label) in d.chunks_mut(k).zip(labels) {
                    row[label] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                out.push((*logits, Tensor::new(probs.shape(), d)?));
            }
            Op::Sum { input } => {
                let shape = self.value(*input).shape();
                out.push((*input, Tensor::full(shape, gy.item())));
            }
            Op::HalfSumSquares { input } => {
                let g = gy.item();
                out.push((*input, self.value(*input).map(|v| v * g)));
            }
            Op::Opaque { name } => {
                return Err(Error::UnsupportedOp { op: name.clone() });
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.accumulate(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradients of a scalar with respect to every recorded value.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when none reached it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}
