//! Dilated-convolution encoders and projection heads.
//!
//! Each encoder is: a per-timestep linear input projection to
//! `hidden_channels`, `num_blocks` residual blocks, and a per-timestep linear
//! map to `repr_dim`. A block computes
//!
//! ```text
//! y = x + conv2(gelu(conv1(gelu(x))))
//! ```
//!
//! with both convolutions sharing the block's dilation and padding
//! symmetrically, so sequence length is preserved. Heads are two-layer
//! per-timestep MLPs with a GELU in between.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::augment::ViewPair;
use crate::container::{Container, Tensor, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::nn::{gelu_with_grad, Conv1d, Dense, Scalar};
use crate::objectives::{BatchProjections, FlowPair};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flow {
    Inbound,
    Outbound,
    Joint,
}

impl Flow {
    pub const ALL: [Flow; 3] = [Flow::Inbound, Flow::Outbound, Flow::Joint];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Channels of the `T x 2` joint series this flow reads.
    pub fn channels(self) -> std::ops::Range<usize> {
        match self {
            Flow::Inbound => 0..1,
            Flow::Outbound => 1..2,
            Flow::Joint => 0..2,
        }
    }

    pub fn in_channels(self) -> usize {
        self.channels().len()
    }

    pub fn tag(self) -> &'static str {
        match self {
            Flow::Inbound => "i",
            Flow::Outbound => "o",
            Flow::Joint => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_channels: usize,
    /// Representation size `D`.
    pub repr_dim: usize,
    pub kernel_size: usize,
    pub num_blocks: usize,
    pub dilations: Vec<usize>,
    /// Projection size `F`.
    pub proj_dim: usize,
    pub proj_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_channels: 128,
            repr_dim: 128,
            kernel_size: 3,
            num_blocks: 3,
            dilations: vec![1, 2, 4],
            proj_dim: 128,
            proj_hidden: 128,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and demos.
    pub fn tiny(width: usize) -> Self {
        ModelConfig {
            hidden_channels: width,
            repr_dim: width,
            proj_dim: width,
            proj_hidden: width,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.hidden_channels,
            self.repr_dim,
            self.kernel_size,
            self.num_blocks,
            self.proj_dim,
            self.proj_hidden,
        ];
        if dims.contains(&0) || self.dilations.contains(&0) {
            return Err(Error::Config("model dimensions and dilations must be positive".into()));
        }
        if self.dilations.len() != self.num_blocks {
            return Err(Error::Config(format!(
                "{} dilations given for {} blocks",
                self.dilations.len(),
                self.num_blocks
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config("kernel_size must be odd for length-preserving padding".into()));
        }
        Ok(())
    }

    pub fn encoder(&self, in_channels: usize) -> EncoderConfig {
        EncoderConfig {
            in_channels,
            hidden_channels: self.hidden_channels,
            repr_dim: self.repr_dim,
            kernel_size: self.kernel_size,
            num_blocks: self.num_blocks,
            dilations: self.dilations.clone(),
        }
    }

    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig {
            proj_dim: self.proj_dim,
            hidden: self.proj_hidden,
        }
    }

    /// Steps on either side that can influence one output step.
    pub fn receptive_radius(&self) -> usize {
        // Two convolutions per block.
        2 * self.dilations.iter().map(|d| d * (self.kernel_size - 1) / 2).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub repr_dim: usize,
    pub kernel_size: usize,
    pub num_blocks: usize,
    pub dilations: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub proj_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<F = f64> {
    pub conv1: Conv1d<F>,
    pub conv2: Conv1d<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<F = f64> {
    pub config: EncoderConfig,
    pub input: Dense<F>,
    pub blocks: Vec<ConvBlock<F>>,
    pub output: Dense<F>,
}

struct BlockCache<F> {
    /// GELU derivative at the block input.
    du: Array2<F>,
    cols1: Array2<F>,
    /// GELU derivative at the first convolution's output.
    dv: Array2<F>,
    cols2: Array2<F>,
}

pub struct EncoderCache<F> {
    x: Array2<F>,
    blocks: Vec<BlockCache<F>>,
    last: Array2<F>,
    steps: usize,
}

fn cast_matrix<F: Scalar>(x: ArrayView2<f64>) -> Array2<F> {
    x.mapv(F::cast)
}

fn widen_matrix<F: Scalar>(x: ArrayView2<F>) -> Array2<f64> {
    x.mapv(F::widen)
}

impl<F: Scalar> Encoder<F> {
    pub fn new(config: EncoderConfig, rng: &mut Stream) -> Self {
        let h = config.hidden_channels;
        let k = config.kernel_size;
        let input = Dense::new(config.in_channels, h, rng);
        let blocks = config
            .dilations
            .iter()
            .map(|&d| ConvBlock {
                conv1: Conv1d::new(h, h, k, d, rng),
                conv2: Conv1d::new(h, h, k, d, rng),
            })
            .collect();
        let output = Dense::new(h, config.repr_dim, rng);
        Encoder { config, input, blocks, output }
    }

    pub fn zeros_like(&self) -> Self {
        let c = &self.config;
        let h = c.hidden_channels;
        Encoder {
            config: c.clone(),
            input: Dense::zeros(c.in_channels, h),
            blocks: c
                .dilations
                .iter()
                .map(|&d| ConvBlock {
                    conv1: Conv1d::zeros(h, h, c.kernel_size, d),
                    conv2: Conv1d::zeros(h, h, c.kernel_size, d),
                })
                .collect(),
            output: Dense::zeros(h, c.repr_dim),
        }
    }

    /// Forward over `S` stacked sequences (`S*steps x C`), returning
    /// `S*steps x D` and the activations needed for [`Encoder::backward`].
    pub fn forward(&self, x: ArrayView2<F>, steps: usize) -> (Array2<F>, EncoderCache<F>) {
        let mut cur = self.input.forward(x);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (u, du) = gelu_with_grad(cur.view());
            let (a, cols1) = b.conv1.forward(u.view(), steps);
            drop(u);
            let (v, dv) = gelu_with_grad(a.view());
            drop(a);
            let (mut c, cols2) = b.conv2.forward(v.view(), steps);
            c += &cur;
            blocks.push(BlockCache { du, cols1, dv, cols2 });
            cur = c;
        }
        let out = self.output.forward(cur.view());
        let cache = EncoderCache {
            x: x.to_owned(),
            blocks,
            last: cur,
            steps,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients for upstream gradient `dout`.
    pub fn backward(&self, cache: &EncoderCache<F>, dout: ArrayView2<F>, grad: &mut Encoder<F>) {
        let steps = cache.steps;
        let mut d = self.output.backward(cache.last.view(), dout, &mut grad.output);
        for ((b, bc), gb) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            let mut da = b.conv2.backward(bc.cols2.view(), d.view(), steps, &mut gb.conv2);
            da *= &bc.dv;
            let mut dx = b.conv1.backward(bc.cols1.view(), da.view(), steps, &mut gb.conv1);
            dx *= &bc.du;
            d += &dx;
        }
        self.input.backward_params(cache.x.view(), d.view(), &mut grad.input);
    }

    /// Encodes one `T x C` series to `T x D`.
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.config.in_channels {
            return Err(Error::shape(
                format!("{} input channels", self.config.in_channels),
                format!("{} channels", x.ncols()),
            ));
        }
        if x.nrows() == 0 {
            return Err(Error::arg("cannot encode an empty series"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("input series contains non-finite values"));
        }
        let (h, _) = self.forward(cast_matrix::<F>(x).view(), x.nrows());
        Ok(widen_matrix(h.view()))
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<Named<'a, F>>) {
        out.push((format!("{prefix}.input"), &self.input.weight, &self.input.bias));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("{prefix}.block{i}.conv1"), &b.conv1.weight, &b.conv1.bias));
            out.push((format!("{prefix}.block{i}.conv2"), &b.conv2.weight, &b.conv2.bias));
        }
        out.push((format!("{prefix}.output"), &self.output.weight, &self.output.bias));
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [F]>) {
        let mut push = |w: &'a mut Array2<F>, b: &'a mut Array1<F>| {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        };
        push(&mut self.input.weight, &mut self.input.bias);
        for b in self.blocks.iter_mut() {
            push(&mut b.conv1.weight, &mut b.conv1.bias);
            push(&mut b.conv2.weight, &mut b.conv2.bias);
        }
        push(&mut self.output.weight, &mut self.output.bias);
    }
}

type Named<'a, F> = (String, &'a Array2<F>, &'a Array1<F>);

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<F = f64> {
    pub hidden: Dense<F>,
    pub out: Dense<F>,
}

pub struct HeadCache<F> {
    h: Array2<F>,
    dpre: Array2<F>,
    act: Array2<F>,
}

impl<F: Scalar> ProjectionHead<F> {
    pub fn new(repr_dim: usize, cfg: ProjectionConfig, rng: &mut Stream) -> Self {
        ProjectionHead {
            hidden: Dense::new(repr_dim, cfg.hidden, rng),
            out: Dense::new(cfg.hidden, cfg.proj_dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ProjectionHead {
            hidden: Dense::zeros(self.hidden.input_dim(), self.hidden.output_dim()),
            out: Dense::zeros(self.out.input_dim(), self.out.output_dim()),
        }
    }

    pub fn forward(&self, h: ArrayView2<F>) -> (Array2<F>, HeadCache<F>) {
        let pre = self.hidden.forward(h);
        let (act, dpre) = gelu_with_grad(pre.view());
        let z = self.out.forward(act.view());
        (z, HeadCache { h: h.to_owned(), dpre, act })
    }

    /// Returns `dL/dh`.
    pub fn backward(&self, cache: &HeadCache<F>, dz: ArrayView2<F>, grad: &mut ProjectionHead<F>) -> Array2<F> {
        let mut d = self.out.backward(cache.act.view(), dz, &mut grad.out);
        d *= &cache.dpre;
        self.hidden.backward(cache.h.view(), d.view(), &mut grad.hidden)
    }

    /// Projects `T x D` representations to `T x F`.
    pub fn project(&self, h: ArrayView2<f64>) -> Result<Array2<f64>> {
        if h.ncols() != self.hidden.input_dim() {
            return Err(Error::shape(
                format!("{} representation dims", self.hidden.input_dim()),
                h.ncols(),
            ));
        }
        Ok(widen_matrix(self.forward(cast_matrix::<F>(h).view()).0.view()))
    }
}

/// The encoder trio and their projection heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MobiClrModel<F = f64> {
    pub config: ModelConfig,
    pub init_seed: u64,
    /// Indexed by [`Flow::index`].
    pub encoders: [Encoder<F>; 3],
    pub heads: [ProjectionHead<F>; 3],
}

/// A flat view of one named parameter tensor.
pub struct ParamRef<'a, F = f64> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [F],
}

impl<F: Scalar> MobiClrModel<F> {
    /// Fan-in uniform weights, zero biases; deterministic in `seed`. Both
    /// precisions draw the same values (up to rounding).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = |flow: Flow| {
            let mut r = rng::stream(seed, &[rng::TAG_INIT, flow.index() as u64]);
            Encoder::new(config.encoder(flow.in_channels()), &mut r)
        };
        let encoders = Flow::ALL.map(encoder);
        let head = |flow: Flow| {
            let mut r = rng::stream(seed, &[rng::TAG_INIT, 10 + flow.index() as u64]);
            ProjectionHead::new(config.repr_dim, config.projection(), &mut r)
        };
        let heads = Flow::ALL.map(head);
        Ok(MobiClrModel { config, init_seed: seed, encoders, heads })
    }

    pub fn zeros_like(&self) -> Self {
        MobiClrModel {
            config: self.config.clone(),
            init_seed: self.init_seed,
            encoders: self.encoders.each_ref().map(|e| e.zeros_like()),
            heads: self.heads.each_ref().map(|h| h.zeros_like()),
        }
    }

    pub fn encoder(&self, flow: Flow) -> &Encoder<F> {
        &self.encoders[flow.index()]
    }

    pub fn head(&self, flow: Flow) -> &ProjectionHead<F> {
        &self.heads[flow.index()]
    }

    fn named(&self) -> Vec<Named<'_, F>> {
        let mut out = Vec::new();
        for flow in Flow::ALL {
            self.encoders[flow.index()].tensors(&format!("f_{}", flow.tag()), &mut out);
        }
        for flow in Flow::ALL {
            let h = &self.heads[flow.index()];
            let p = format!("g_{}", flow.tag());
            out.push((format!("{p}.hidden"), &h.hidden.weight, &h.hidden.bias));
            out.push((format!("{p}.out"), &h.out.weight, &h.out.bias));
        }
        out
    }

    /// Every parameter tensor, named `f_io.block0.conv1.weight` etc., in a
    /// fixed order.
    pub fn params(&self) -> Vec<ParamRef<'_, F>> {
        let mut out = Vec::new();
        for (name, w, b) in self.named() {
            out.push(ParamRef {
                name: format!("{name}.weight"),
                shape: w.shape().to_vec(),
                data: w.as_slice().expect("standard layout"),
            });
            out.push(ParamRef {
                name: format!("{name}.bias"),
                shape: b.shape().to_vec(),
                data: b.as_slice().expect("standard layout"),
            });
        }
        out
    }

    /// Mutable slices in the same order as [`MobiClrModel::params`].
    pub fn params_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        for e in self.encoders.iter_mut() {
            e.tensors_mut(&mut out);
        }
        for h in self.heads.iter_mut() {
            for d in [&mut h.hidden, &mut h.out] {
                out.push(d.weight.as_slice_mut().expect("standard layout"));
                out.push(d.bias.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// L2 norm over the parameters of one flow's encoder and head. Used on
    /// gradient models.
    pub fn flow_norm(&self, flow: Flow) -> f64 {
        let prefixes = [format!("f_{}.", flow.tag()), format!("g_{}.", flow.tag())];
        self.params()
            .iter()
            .filter(|p| prefixes.iter().any(|pre| p.name.starts_with(pre.as_str())))
            .flat_map(|p| p.data.iter())
            .map(|v| v.widen() * v.widen())
            .sum::<f64>()
            .sqrt()
    }

    /// Converts to another precision.
    pub fn cast<G: Scalar>(&self) -> MobiClrModel<G> {
        let mut out = MobiClrModel::<G>::init(self.config.clone(), self.init_seed).expect("config already validated");
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            for (d, s) in dst.iter_mut().zip(src.data) {
                *d = G::cast(s.widen());
            }
        }
        out
    }

    /// Checkpoint container. Values are stored as `f64` whatever the
    /// training precision, which is exact for `f32`.
    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let mut c = Container::new(
            "checkpoint",
            json!({
                "format_version": FORMAT_VERSION,
                "model_config": self.config,
                "init_seed": self.init_seed,
                "precision": F::NAME,
                "extra": meta,
            }),
        );
        for p in self.params() {
            c.push(Tensor::f64(p.name, &p.shape, p.data.iter().map(|v| v.widen()).collect()));
        }
        c
    }

    fn from_container_typed(c: &Container) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(c.meta["model_config"].clone())?;
        let seed = c.meta["init_seed"]
            .as_u64()
            .ok_or_else(|| Error::arg("checkpoint is missing `init_seed`"))?;
        let mut model = MobiClrModel::<F>::init(config, seed)?;
        let names: Vec<(String, Vec<usize>)> = model.params().iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
        for ((name, shape), dst) in names.into_iter().zip(model.params_mut()) {
            let t = c.require(&name)?;
            if t.shape != shape {
                return Err(Error::shape(format!("{name} {shape:?}"), format!("{:?}", t.shape)));
            }
            let src = t.as_f64().ok_or_else(|| Error::arg(format!("`{name}` must be f64")))?;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = F::cast(s);
            }
        }
        Ok(model)
    }
}

/// Numeric precision of a model's parameters and activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// A model of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    F32(MobiClrModel<f32>),
    F64(MobiClrModel<f64>),
}

impl AnyModel {
    pub fn init(config: ModelConfig, seed: u64, precision: Precision) -> Result<Self> {
        Ok(match precision {
            Precision::F32 => AnyModel::F32(MobiClrModel::init(config, seed)?),
            Precision::F64 => AnyModel::F64(MobiClrModel::init(config, seed)?),
        })
    }

    pub fn precision(&self) -> Precision {
        match self {
            AnyModel::F32(_) => Precision::F32,
            AnyModel::F64(_) => Precision::F64,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::F32(m) => &m.config,
            AnyModel::F64(m) => &m.config,
        }
    }

    /// The parameters widened to `f64`.
    pub fn to_f64(&self) -> MobiClrModel<f64> {
        match self {
            AnyModel::F32(m) => m.cast(),
            AnyModel::F64(m) => m.clone(),
        }
    }

    pub fn encode(&self, flow: Flow, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            AnyModel::F32(m) => m.encoder(flow).encode(x),
            AnyModel::F64(m) => m.encoder(flow).encode(x),
        }
    }

    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        match self {
            AnyModel::F32(m) => m.to_container(meta),
            AnyModel::F64(m) => m.to_container(meta),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        match c.meta["precision"].as_str().unwrap_or("f64") {
            "f32" => Ok(AnyModel::F32(MobiClrModel::from_container_typed(c)?)),
            "f64" => Ok(AnyModel::F64(MobiClrModel::from_container_typed(c)?)),
            other => Err(Error::arg(format!("unknown checkpoint precision `{other}`"))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        self.to_container(meta).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load_kind(path, "checkpoint")?)
    }

    /// Hex SHA-256 over parameter names and their `f64` values.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.precision()).as_bytes());
        let m = self.to_f64();
        for p in m.params() {
            h.update(p.name.as_bytes());
            for v in p.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Encode + project for every flow of a batch of view pairs. Sequences are
/// stacked as `[view_a of regions 0..B, view_b of regions 0..B]`.
pub struct TrioForward<F = f64> {
    batch: usize,
    steps: usize,
    flows: [Option<FlowState<F>>; 3],
}

struct FlowState<F> {
    h: Array2<F>,
    z: Array2<F>,
    enc: EncoderCache<F>,
    head: HeadCache<F>,
}

fn stack_views<F: Scalar>(views: &[ViewPair], flow: Flow) -> Array2<F> {
    let steps = views[0].view_a.nrows();
    let cols = flow.channels();
    let b = views.len();
    let mut x = Array2::<F>::zeros((2 * b * steps, cols.len()));
    for (n, v) in views.iter().enumerate() {
        for (block, view) in [(n, &v.view_a), (b + n, &v.view_b)] {
            x.slice_mut(s![block * steps..(block + 1) * steps, ..])
                .assign(&view.slice(s![.., cols.clone()]).mapv(F::cast));
        }
    }
    x
}

/// Runs the flows flagged in `needed` (`[inbound, outbound, joint]`).
pub fn forward_trio<F: Scalar>(views: &[ViewPair], model: &MobiClrModel<F>, needed: [bool; 3]) -> Result<TrioForward<F>> {
    let first = views.first().ok_or_else(|| Error::arg("empty batch"))?;
    let steps = first.view_a.nrows();
    for v in views {
        if v.view_a.dim() != (steps, 2) || v.view_b.dim() != (steps, 2) {
            return Err(Error::shape(format!("({steps}, 2) views"), format!("{:?}", v.view_a.dim())));
        }
    }
    if steps == 0 {
        return Err(Error::arg("views have no time steps"));
    }
    let flows = Flow::ALL.map(|flow| {
        needed[flow.index()].then(|| {
            let x = stack_views::<F>(views, flow);
            let (h, enc) = model.encoder(flow).forward(x.view(), steps);
            let (z, head) = model.head(flow).forward(h.view());
            FlowState { h, z, enc, head }
        })
    });
    Ok(TrioForward { batch: views.len(), steps, flows })
}

fn split_views<F: Scalar>(m: &Array2<F>, b: usize, t: usize) -> (Array3<f64>, Array3<f64>) {
    let f = m.ncols();
    let a = m.slice(s![..b * t, ..]).mapv(F::widen).into_shape_with_order((b, t, f)).expect("rows");
    let bb = m.slice(s![b * t.., ..]).mapv(F::widen).into_shape_with_order((b, t, f)).expect("rows");
    (a, bb)
}

impl<F: Scalar> TrioForward<F> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// `(z, z_tilde)` projections of a flow, each `B x T x F`.
    pub fn z(&self, flow: Flow) -> Option<(Array3<f64>, Array3<f64>)> {
        self.flows[flow.index()].as_ref().map(|s| split_views(&s.z, self.batch, self.steps))
    }

    /// `(h, h_tilde)` representations of a flow, each `B x T x D`.
    pub fn h(&self, flow: Flow) -> Option<(Array3<f64>, Array3<f64>)> {
        self.flows[flow.index()].as_ref().map(|s| split_views(&s.h, self.batch, self.steps))
    }

    pub fn projections(&self) -> BatchProjections {
        let pair = |flow| self.z(flow).map(|(z, z_tilde)| FlowPair { z, z_tilde });
        BatchProjections {
            inbound: pair(Flow::Inbound),
            outbound: pair(Flow::Outbound),
            joint: pair(Flow::Joint),
        }
    }

    /// Backpropagates projection gradients into `grads`.
    pub fn backward(&self, model: &MobiClrModel<F>, dz: &BatchProjections, grads: &mut MobiClrModel<F>) {
        let slots = [&dz.inbound, &dz.outbound, &dz.joint];
        for flow in Flow::ALL {
            let (Some(state), Some(d)) = (&self.flows[flow.index()], slots[flow.index()]) else {
                continue;
            };
            let f = d.z.shape()[2];
            let rows = self.batch * self.steps;
            let mut dzm = Array2::<F>::zeros((2 * rows, f));
            for (range, src) in [(0..rows, &d.z), (rows..2 * rows, &d.z_tilde)] {
                dzm.slice_mut(s![range, ..])
                    .assign(&src.view().into_shape_with_order((rows, f)).expect("contiguous").mapv(F::cast));
            }
            let i = flow.index();
            let dh = model.heads[i].backward(&state.head, dzm.view(), &mut grads.heads[i]);
            model.encoders[i].backward(&state.enc, dh.view(), &mut grads.encoders[i]);
        }
    }
}

/// Representation of one `T x 2` series from `flow`'s encoder, mean-pooled
/// over time to a `D` vector.
pub fn pooled_representation(model: &AnyModel, flow: Flow, x_io: ArrayView2<f64>) -> Result<Array1<f64>> {
    let h = model.encode(flow, x_io.slice(s![.., flow.channels()]))?;
    Ok(h.mean_axis(Axis(0)).expect("T >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{trio_views, AugmentationPipeline};
    use crate::objectives::{loss_and_grad, LossOptions};
    use rand::Rng;

    type Model = MobiClrModel<f64>;

    fn random_series(t: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, &[]);
        Array2::from_shape_simple_fn((t, c), || r.random_range(-1.0..1.0))
    }

    #[test]
    fn default_shapes() {
        let m = Model::init(ModelConfig::default(), 0).unwrap();
        let x = random_series(336, 2, 1);
        let h = m.encoder(Flow::Joint).encode(x.view()).unwrap();
        assert_eq!(h.dim(), (336, 128));
        let z = m.head(Flow::Joint).project(h.view()).unwrap();
        assert_eq!(z.dim(), (336, 128));
    }

    #[test]
    fn single_step_series() {
        let m = Model::init(ModelConfig::tiny(8), 0).unwrap();
        let h = m.encoder(Flow::Inbound).encode(random_series(1, 1, 2).view()).unwrap();
        assert_eq!(h.dim(), (1, 8));
        assert!(h.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_is_pure() {
        let m = Model::init(ModelConfig::tiny(8), 3).unwrap();
        let x = random_series(20, 2, 3);
        let a = m.encoder(Flow::Joint).encode(x.view()).unwrap();
        let b = m.encoder(Flow::Joint).encode(x.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_rejects_bad_input() {
        let m = Model::init(ModelConfig::tiny(8), 3).unwrap();
        assert!(matches!(m.encoder(Flow::Inbound).encode(random_series(5, 2, 1).view()), Err(Error::Shape { .. })));
        let mut x = random_series(5, 1, 1);
        x[[2, 0]] = f64::NAN;
        assert!(m.encoder(Flow::Inbound).encode(x.view()).is_err());
    }

    #[test]
    fn init_determinism_and_bounds() {
        let a = Model::init(ModelConfig::tiny(8), 5).unwrap();
        let b = Model::init(ModelConfig::tiny(8), 5).unwrap();
        let c = Model::init(ModelConfig::tiny(8), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for p in a.params() {
            let fan_in = if p.name.contains("conv") { p.shape[0] } else { p.shape.first().copied().unwrap_or(1) };
            if p.name.ends_with(".bias") {
                assert!(p.data.iter().all(|&v| v == 0.0), "{}", p.name);
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                assert!(p.data.iter().all(|v| v.is_finite() && v.abs() <= bound), "{}", p.name);
            }
        }
    }

    #[test]
    fn precisions_agree() {
        let m = Model::init(ModelConfig::tiny(8), 7).unwrap();
        let m32 = MobiClrModel::<f32>::init(ModelConfig::tiny(8), 7).unwrap();
        assert_eq!(m32, m.cast::<f32>());
        let x = random_series(30, 2, 7);
        let a = m.encoder(Flow::Joint).encode(x.view()).unwrap();
        let b = m32.encoder(Flow::Joint).encode(x.view()).unwrap();
        assert!((&a - &b).iter().all(|d| d.abs() < 1e-4));
    }

    #[test]
    fn zero_head_outputs_zero() {
        let m = Model::init(ModelConfig::tiny(8), 0).unwrap();
        let head = m.head(Flow::Inbound).zeros_like();
        let z = head.project(random_series(6, 8, 1).view()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_is_per_timestep() {
        let m = Model::init(ModelConfig::tiny(8), 0).unwrap();
        let h = random_series(7, 8, 9);
        let perm = [6usize, 2, 0, 5, 1, 3, 4];
        let z = m.head(Flow::Outbound).project(h.view()).unwrap();
        let zp = m.head(Flow::Outbound).project(h.select(Axis(0), &perm).view()).unwrap();
        let expect = z.select(Axis(0), &perm);
        assert!((&zp - &expect).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn receptive_field_bound() {
        let cfg = ModelConfig::tiny(6);
        let m = Model::init(cfg.clone(), 1).unwrap();
        let radius = cfg.receptive_radius();
        let t = 60;
        let x = random_series(t, 2, 4);
        let base = m.encoder(Flow::Joint).encode(x.view()).unwrap();
        let mut y = x.clone();
        y[[30, 1]] += 1.0;
        let pert = m.encoder(Flow::Joint).encode(y.view()).unwrap();
        for step in 0..t {
            let changed = (0..6).any(|k| (base[[step, k]] - pert[[step, k]]).abs() > 0.0);
            let within = step.abs_diff(30) <= radius;
            if !within {
                assert!(!changed, "step {step} changed outside radius {radius}");
            }
        }
        assert!((0..6).any(|k| base[[30 + radius, k]] != pert[[30 + radius, k]]));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = Model::init(ModelConfig::tiny(4), 8).unwrap();
        let c = m.to_container(json!({"train_seed": 1}));
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        let back = AnyModel::from_container(&Container::read_from(bytes.as_slice()).unwrap()).unwrap();
        assert_eq!(back, AnyModel::F64(m.clone()));

        let single: MobiClrModel<f32> = m.cast();
        let back = AnyModel::from_container(&single.to_container(json!({}))).unwrap();
        assert_eq!(back, AnyModel::F32(single));
    }

    #[test]
    fn trio_shapes_and_full_gradient_flow() {
        let m = Model::init(ModelConfig::tiny(8), 2).unwrap();
        let views: Vec<_> = (0..4)
            .map(|n| trio_views(random_series(12, 2, n).view(), &AugmentationPipeline::default_pair(), &mut rng::stream(n, &[9])))
            .collect();
        let fwd = forward_trio(&views, &m, [true; 3]).unwrap();
        for flow in Flow::ALL {
            let (z, zt) = fwd.z(flow).unwrap();
            let (h, _) = fwd.h(flow).unwrap();
            assert_eq!(z.dim(), (4, 12, 8));
            assert_eq!(zt.dim(), (4, 12, 8));
            assert_eq!(h.dim(), (4, 12, 8));
        }
        // The joint view's channels are the inbound and outbound views.
        let hi = m.encoder(Flow::Inbound).encode(views[1].view_b.slice(s![.., 0..1])).unwrap();
        let (_, hi_t) = fwd.h(Flow::Inbound).unwrap();
        assert!((&hi - &hi_t.slice(s![1, .., ..])).iter().all(|d| d.abs() < 1e-12));

        let lg = loss_and_grad(&fwd.projections(), &LossOptions::default()).unwrap();
        let mut g = m.zeros_like();
        fwd.backward(&m, &lg.grads, &mut g);
        for flow in Flow::ALL {
            assert!(g.flow_norm(flow) > 0.0, "{flow:?}");
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            hidden_channels: 3,
            repr_dim: 3,
            kernel_size: 3,
            num_blocks: 2,
            dilations: vec![1, 2],
            proj_dim: 3,
            proj_hidden: 4,
        };
        let mut m = Model::init(cfg, 11).unwrap();
        let views: Vec<_> = (0..3)
            .map(|n| trio_views(random_series(5, 2, 40 + n).view(), &AugmentationPipeline::default_pair(), &mut rng::stream(n, &[1])))
            .collect();
        let opts = LossOptions::default();
        let loss = |m: &MobiClrModel| {
            let fwd = forward_trio(&views, m, [true; 3]).unwrap();
            loss_and_grad(&fwd.projections(), &opts).unwrap().breakdown.total
        };
        let fwd = forward_trio(&views, &m, [true; 3]).unwrap();
        let lg = loss_and_grad(&fwd.projections(), &opts).unwrap();
        let mut g = m.zeros_like();
        fwd.backward(&m, &lg.grads, &mut g);
        let analytic: Vec<Vec<f64>> = g.params().iter().map(|p| p.data.to_vec()).collect();
        let eps = 1e-6;
        let n_tensors = analytic.len();
        for t in 0..n_tensors {
            let len = analytic[t].len();
            for k in [0, len / 2, len - 1] {
                let orig = m.params_mut()[t][k];
                m.params_mut()[t][k] = orig + eps;
                let up = loss(&m);
                m.params_mut()[t][k] = orig - eps;
                let down = loss(&m);
                m.params_mut()[t][k] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic[t][k];
                assert!(
                    (a - numeric).abs() <= 1e-5 * (1.0 + numeric.abs()),
                    "tensor {t} index {k}: analytic {a} numeric {numeric}"
                );
            }
        }
    }
}
