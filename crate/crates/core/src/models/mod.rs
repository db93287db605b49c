//! Residual networks assembled from [`ConvLayer`]s in a chosen algebra.
//!
//! Parameter names are hierarchical and depend only on the spec:
//! `stem.conv.r`, `stage2.block0.conv1.k1`, `stage2.block0.shortcut.bn.gamma`,
//! `head.s3`, and so on.

mod spec;

pub use spec::{ArchitectureSpec, Backend, BlockKind, AUTO_PHM_CANDIDATES, INPUT_CHANNELS};

use std::path::Path;

use serde_json::{json, Value};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::layers::{Algebra, BatchNorm2d, ConvLayer, Head, InitSpec};
use crate::params::{Bound, ParamStore};
use crate::tensor::{ConvSpec, Mode, Real, RunningStats, Tensor};

/// Batch-norm running statistics, indexed by [`BatchNorm2d::buffer`].
#[derive(Debug, Clone, PartialEq)]
pub struct Buffers<T> {
    pub names: Vec<String>,
    pub stats: Vec<RunningStats<T>>,
}

impl<T: Real> Default for Buffers<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Buffers<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, channels: usize) -> usize {
        self.names.push(name.to_string());
        self.stats.push(RunningStats::uninitialized(channels));
        self.stats.len() - 1
    }

    /// Marks every buffer as zero-mean, unit-variance.
    pub fn set_identity(&mut self) {
        for s in &mut self.stats {
            *s = RunningStats::identity(s.channels());
        }
    }
}

/// Convolution followed by batch norm.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: ConvLayer,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        buffers: &mut Buffers<T>,
        conv_name: &str,
        bn_name: &str,
        algebra: Algebra,
        in_ch: usize,
        out_ch: usize,
        spec: ConvSpec,
        init: &InitSpec,
    ) -> Result<Self> {
        let conv = ConvLayer::new(store, conv_name, algebra, in_ch, out_ch, spec, init)?;
        let idx = buffers.add(bn_name, out_ch);
        let bn = BatchNorm2d::new(store, bn_name, out_ch, idx)?;
        Ok(Self { conv, bn })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        stats: &mut [RunningStats<T>],
        mode: Mode,
    ) -> Result<Var> {
        let y = self.conv.forward(g, p, x)?;
        self.bn.forward(g, p, y, stats, mode)
    }
}

/// `relu(shortcut(x) + body(x))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub name: String,
    pub kind: BlockKind,
    pub body: Vec<ConvBn>,
    /// Projection when the shape changes; identity otherwise.
    pub shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    /// `planes` is the inner width; the block outputs `planes * expansion`
    /// channels and downsamples by `stride` in its 3x3 convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        buffers: &mut Buffers<T>,
        name: &str,
        algebra: Algebra,
        kind: BlockKind,
        in_ch: usize,
        planes: usize,
        stride: usize,
        init: &InitSpec,
    ) -> Result<Self> {
        let out_ch = planes * kind.expansion();
        let plan: Vec<(usize, usize, ConvSpec)> = match kind {
            BlockKind::Basic => vec![
                (in_ch, planes, ConvSpec::same(3, stride)?),
                (planes, planes, ConvSpec::same(3, 1)?),
            ],
            BlockKind::Bottleneck => vec![
                (in_ch, planes, ConvSpec::same(1, 1)?),
                (planes, planes, ConvSpec::same(3, stride)?),
                (planes, out_ch, ConvSpec::same(1, 1)?),
            ],
        };
        let body = plan
            .into_iter()
            .enumerate()
            .map(|(i, (cin, cout, spec))| {
                ConvBn::new(
                    store,
                    buffers,
                    &format!("{name}.conv{}", i + 1),
                    &format!("{name}.bn{}", i + 1),
                    algebra,
                    cin,
                    cout,
                    spec,
                    init,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some(ConvBn::new(
                store,
                buffers,
                &format!("{name}.shortcut.conv"),
                &format!("{name}.shortcut.bn"),
                algebra,
                in_ch,
                out_ch,
                ConvSpec::new(1, stride, 0)?,
                init,
            )?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            kind,
            body,
            shortcut,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.body[0].conv.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.body.last().expect("non-empty body").conv.out_ch
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        stats: &mut [RunningStats<T>],
        mode: Mode,
    ) -> Result<Var> {
        let mut h = x;
        let last = self.body.len() - 1;
        for (i, unit) in self.body.iter().enumerate() {
            h = unit.forward(g, p, h, stats, mode)?;
            if i < last {
                h = g.relu(h);
            }
        }
        let s = match &self.shortcut {
            Some(proj) => proj.forward(g, p, x, stats, mode)?,
            None => x,
        };
        let sum = g.add(h, s)?;
        Ok(g.relu(sum))
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub spec: ArchitectureSpec,
    pub params: ParamStore<T>,
    pub buffers: Buffers<T>,
    pub stem: ConvBn,
    pub blocks: Vec<ResidualBlock>,
    pub head: Head,
}

/// Builds the network described by `spec`, drawing weights from `init`.
pub fn build_model<T: Real>(spec: &ArchitectureSpec, init: &InitSpec) -> Result<Model<T>> {
    spec.validate()?;
    let mut params = ParamStore::new();
    let mut buffers = Buffers::new();
    let algebra = spec.algebra;

    let stem_out = spec.stage_width(0);
    let stem = ConvBn::new(
        &mut params,
        &mut buffers,
        "stem.conv",
        "stem.bn",
        algebra,
        spec.stem_in_channels(),
        stem_out,
        ConvSpec::same(3, 1)?,
        init,
    )?;

    let mut blocks = Vec::new();
    let mut in_ch = stem_out;
    for (s, &count) in spec.multipliers.iter().enumerate() {
        for b in 0..count {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let block = ResidualBlock::new(
                &mut params,
                &mut buffers,
                &format!("stage{}.block{b}", s + 1),
                algebra,
                spec.block,
                in_ch,
                spec.stage_width(s),
                stride,
                init,
            )?;
            in_ch = block.out_channels();
            blocks.push(block);
        }
    }

    let d = spec.feature_dim();
    let head = match spec.phm_n()? {
        None => Head::dense(&mut params, "head", d, spec.classes, init)?,
        Some(n) => Head::phm(&mut params, "head", n, d, spec.classes, spec.trainable_signs, init)?,
    };
    Ok(Model {
        spec: spec.clone(),
        params,
        buffers,
        stem,
        blocks,
        head,
    })
}

/// Zero-pads the channel axis of `[N, C, H, W]` up to `channels`.
pub fn pad_channels<T: Real>(x: &Tensor<T>, channels: usize) -> Result<Tensor<T>> {
    let (n, c) = (x.dim(0), x.dim(1));
    if c == channels {
        return Ok(x.clone());
    }
    if c > channels {
        return Err(Error::shape("pad_channels", x.shape(), &[n, channels]));
    }
    let plane = x.len() / (n * c);
    let mut out = vec![T::zero(); n * channels * plane];
    for (i, img) in x.data().chunks(c * plane).enumerate() {
        out[i * channels * plane..i * channels * plane + c * plane].copy_from_slice(img);
    }
    Tensor::new(&[n, channels, x.dim(2), x.dim(3)], out)
}

impl<T: Real> Model<T> {
    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Records the forward pass of `images: [N, 3, S, S]`; returns logits.
    pub fn forward(&mut self, g: &mut Graph<T>, p: &Bound, images: &Tensor<T>, mode: Mode) -> Result<Var> {
        let s = self.spec.input_size;
        if images.rank() != 4 || images.shape()[1..] != [INPUT_CHANNELS, s, s] {
            let n = images.shape().first().copied().unwrap_or(1);
            return Err(Error::shape(
                "model_forward",
                images.shape(),
                &[n, INPUT_CHANNELS, s, s],
            ));
        }
        let x = g.constant(pad_channels(images, self.spec.stem_in_channels())?);
        let stats = &mut self.buffers.stats;
        let h = self.stem.forward(g, p, x, stats, mode)?;
        let mut h = g.relu(h);
        for block in &self.blocks {
            h = block.forward(g, p, h, stats, mode)?;
        }
        let pooled = g.global_avg_pool(h)?;
        self.head.forward(g, p, pooled)
    }

    /// Logits without keeping the graph.
    pub fn logits(&mut self, images: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let out = self.forward(&mut g, &p, images, mode)?;
        Ok(g.value(out).clone())
    }

    /// Every convolution with its output extent for one square input image
    /// of side `input_size`.
    pub fn conv_layers(&self, input_size: usize) -> Result<Vec<(&ConvLayer, usize)>> {
        let mut out = Vec::new();
        let mut size = self.stem.conv.spec.output_extent(input_size)?;
        out.push((&self.stem.conv, size));
        for block in &self.blocks {
            let mut h = size;
            for unit in &block.body {
                h = unit.conv.spec.output_extent(h)?;
                out.push((&unit.conv, h));
            }
            if let Some(proj) = &block.shortcut {
                out.push((&proj.conv, proj.conv.spec.output_extent(size)?));
            }
            size = h;
        }
        Ok(out)
    }

    /// Multiply-accumulates per layer for one forward on one image.
    pub fn macs_by_layer(&self, input_size: usize) -> Result<Vec<(String, u64)>> {
        let mut out: Vec<(String, u64)> = self
            .conv_layers(input_size)?
            .into_iter()
            .map(|(c, e)| (c.name.clone(), c.macs(e, e)))
            .collect();
        out.push((self.head.name.clone(), self.head.macs()));
        Ok(out)
    }

    pub fn to_container(&self, extra: Value) -> Result<Container> {
        let uninit: Vec<&str> = self
            .buffers
            .names
            .iter()
            .zip(&self.buffers.stats)
            .filter(|(_, s)| !s.initialized)
            .map(|(n, _)| n.as_str())
            .collect();
        let mut c = Container::new(json!({
            "kind": "model",
            "spec": serde_json::to_value(&self.spec)?,
            "uninitialized_buffers": uninit,
            "extra": extra,
        }));
        for (_, name, p) in self.params.iter() {
            c.insert(name, &p.value);
        }
        for (name, s) in self.buffers.names.iter().zip(&self.buffers.stats) {
            let ch = s.channels();
            c.insert(format!("{name}.running_mean"), &Tensor::new(&[ch], s.mean.clone())?);
            c.insert(format!("{name}.running_var"), &Tensor::new(&[ch], s.var.clone())?);
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: Value) -> Result<()> {
        self.to_container(extra)?.save(path)
    }

    /// Rebuilds the model from a container's spec and restores every
    /// tensor, shape-checked. Returns the caller metadata stored at save.
    pub fn from_container(c: &Container) -> Result<(Self, Value)> {
        if c.metadata.get("kind").and_then(Value::as_str) != Some("model") {
            return Err(Error::Checkpoint("container does not hold a model".into()));
        }
        let spec: ArchitectureSpec = serde_json::from_value(
            c.metadata
                .get("spec")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing spec".into()))?,
        )?;
        let mut model = build_model::<T>(&spec, &InitSpec::new(0))?;
        model.load_state(c)?;
        Ok((model, c.metadata.get("extra").cloned().unwrap_or(Value::Null)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Value)> {
        Self::from_container(&Container::load(path)?)
    }

    /// Copies parameters and running statistics from `c` into this model.
    pub fn load_state(&mut self, c: &Container) -> Result<()> {
        let expected = self.params.len() + 2 * self.buffers.stats.len();
        if c.tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "container has {} tensors, model expects {expected}",
                c.tensors.len()
            )));
        }
        let ids: Vec<_> = self.params.iter().map(|(id, n, _)| (id, n.to_string())).collect();
        for (id, name) in ids {
            let shape = self.params.value(id).shape().to_vec();
            self.params.get_mut(id).value = c.get(&name, Some(&shape))?;
        }
        let uninit: Vec<String> = c
            .metadata
            .get("uninitialized_buffers")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_default();
        for (name, s) in self.buffers.names.iter().zip(&mut self.buffers.stats) {
            let ch = [s.channels()];
            s.mean = c.get::<T>(&format!("{name}.running_mean"), Some(&ch))?.into_data();
            s.var = c.get::<T>(&format!("{name}.running_var"), Some(&ch))?.into_data();
            s.initialized = !uninit.contains(name);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    fn tiny(arch: &str, classes: usize) -> ArchitectureSpec {
        let mut s = ArchitectureSpec::preset(arch, classes).unwrap().narrowed(8);
        s.input_size = 8;
        s
    }

    #[test]
    fn qphm18_zeros_give_finite_logits() {
        let spec = ArchitectureSpec::preset("qphm18", 100).unwrap().narrowed(8);
        let mut m = build_model::<f32>(&spec, &InitSpec::new(1)).unwrap();
        let logits = m.logits(&Tensor::zeros(&[2, 3, 32, 32]), Mode::Train).unwrap();
        assert_eq!(logits.shape(), [2, 100]);
        assert!(logits.all_finite());
        assert_eq!(m.head.phm_n(), Some(4));
    }

    #[test]
    fn eval_is_deterministic() {
        let mut m = build_model::<f32>(&tiny("vphm18", 10), &InitSpec::new(2)).unwrap();
        let mut rng = rand::rng();
        let x = Tensor::rand_uniform(&[3, 3, 8, 8], 0.0, 1.0, &mut rng);
        m.logits(&x, Mode::Train).unwrap();
        let a = m.logits(&x, Mode::Eval).unwrap();
        let b = m.logits(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_before_training_reports_layer() {
        let mut m = build_model::<f32>(&tiny("resnet18", 10), &InitSpec::new(2)).unwrap();
        let err = m.logits(&Tensor::zeros(&[1, 3, 8, 8]), Mode::Eval).unwrap_err();
        assert!(err.to_string().starts_with("stem.bn"), "{err}");
    }

    #[test]
    fn wrong_input_size_is_shape_error() {
        let mut m = build_model::<f32>(&tiny("quat18", 10), &InitSpec::new(2)).unwrap();
        assert!(matches!(
            m.logits(&Tensor::zeros(&[1, 3, 16, 16]), Mode::Train),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn names_are_stable_across_rebuilds() {
        let spec = tiny("vphm50", 10);
        let a = build_model::<f32>(&spec, &InitSpec::new(1)).unwrap();
        let b = build_model::<f32>(&spec, &InitSpec::new(9)).unwrap();
        assert!(a.params.names().eq(b.params.names()));
        assert!(a.params.id("stage2.block0.shortcut.conv.k2").is_some());
        assert!(a.params.id("stage1.block0.conv1.l").is_some());
    }

    #[test]
    fn backend_swap_leaves_frontend_identical() {
        let dense = build_model::<f32>(&tiny("quat18", 10), &InitSpec::new(5)).unwrap();
        let phm = build_model::<f32>(&tiny("qphm18", 10), &InitSpec::new(5)).unwrap();
        for (_, name, p) in dense.params.iter().filter(|(_, n, _)| !n.starts_with("head")) {
            assert_eq!(phm.params.by_name(name).unwrap(), p, "{name}");
        }
        let head = |m: &Model<f32>| m.params.iter().filter(|(_, n, _)| n.starts_with("head")).count();
        assert_ne!(head(&dense), head(&phm));
    }

    #[test]
    fn stem_pads_to_algebra_dimension() {
        assert_eq!(tiny("quat18", 10).stem_in_channels(), 4);
        assert_eq!(tiny("vect18", 10).stem_in_channels(), 3);
        let x = Tensor::<f64>::full(&[2, 3, 2, 2], 1.0);
        let y = pad_channels(&x, 4).unwrap();
        assert_eq!(y.shape(), [2, 4, 2, 2]);
        assert_eq!(y.sum(), 24.0);
        assert!(y.data()[12..16].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = build_model::<f32>(&tiny("vphm18", 10), &InitSpec::new(3)).unwrap();
        let x = Tensor::full(&[2, 3, 8, 8], 0.5);
        m.logits(&x, Mode::Train).unwrap();
        let c = m.to_container(json!({"epoch": 4})).unwrap();
        let bytes = c.to_bytes().unwrap();
        let (mut back, extra) = Model::<f32>::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(extra["epoch"], 4);
        assert_eq!(back.params, m.params);
        assert_eq!(back.buffers, m.buffers);
        assert_eq!(back.logits(&x, Mode::Eval).unwrap(), m.logits(&x, Mode::Eval).unwrap());
    }

    #[test]
    fn checkpoint_shape_mismatch_rejected() {
        let m = build_model::<f32>(&tiny("resnet18", 10), &InitSpec::new(3)).unwrap();
        let mut c = m.to_container(Value::Null).unwrap();
        c.insert("head.bias", &Tensor::<f32>::zeros(&[11]));
        let mut fresh = m.clone();
        assert!(matches!(fresh.load_state(&c), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn zero_body_block_is_relu_of_input() {
        let mut store = ParamStore::<f64>::new();
        let mut buffers = Buffers::new();
        let block = ResidualBlock::new(
            &mut store,
            &mut buffers,
            "b",
            Algebra::Quaternion,
            BlockKind::Basic,
            8,
            8,
            1,
            &InitSpec::new(0),
        )
        .unwrap();
        assert!(block.shortcut.is_none());
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, _, p)| p.group == ParamGroup::Kernel)
            .map(|(id, _, _)| id)
            .collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
        buffers.set_identity();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let mut rng = rand::rng();
        let xv = Tensor::<f64>::rand_uniform(&[2, 8, 4, 4], -1.0, 1.0, &mut rng);
        let x = g.constant(xv.clone());
        let y = block.forward(&mut g, &p, x, &mut buffers.stats, Mode::Eval).unwrap();
        let expect = xv.map(|v| v.max(0.0));
        assert_eq!(g.value(y).max_abs_diff(&expect), 0.0);
    }
}
