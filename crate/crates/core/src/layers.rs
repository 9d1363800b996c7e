//! Parameter storage and the convolutional building blocks of the
//! encoder/decoder.
//!
//! Layers own no tensors; they hold [`ParamId`]s into a [`ParamStore`]. A
//! [`Forward`] pass binds every parameter to a tape variable once, so the same
//! layer graph serves training (tracked leaves), gradient checks and
//! inference.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv2d_output_len, BatchStats, Grads, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum EntryKind {
    /// Trainable parameter.
    Param,
    /// Non-trainable state (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T: Scalar> {
    pub name: String,
    pub kind: EntryKind,
    pub value: Tensor<T>,
}

/// Named tensors in creation order. Names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, kind: EntryKind, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(Entry {
            name: name.to_string(),
            kind,
            value,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Entry<T> {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::config(format!("no parameter named `{name}`")))?;
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "`{name}` has shape {:?}, replacement is {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Ids of trainable parameters in creation order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].kind == EntryKind::Param)
            .map(ParamId)
            .collect()
    }

    /// Number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Folds training-mode statistics into the running buffers:
    /// `running = momentum * running + (1 - momentum) * batch`, with the
    /// unbiased batch variance.
    pub fn update_running_stats(&mut self, records: &[BnRecord<T>], momentum: T) {
        for rec in records {
            let n = T::lit(rec.stats.count as f64);
            let unbias = if rec.stats.count > 1 { n / (n - T::one()) } else { T::one() };
            let keep = momentum;
            let take = T::one() - momentum;
            for (r, &m) in self.get_mut(rec.mean).data_mut().iter_mut().zip(rec.stats.mean.data()) {
                *r = keep * *r + take * m;
            }
            for (r, &v) in self.get_mut(rec.var).data_mut().iter_mut().zip(rec.stats.var.data()) {
                *r = keep * *r + take * v * unbias;
            }
        }
    }
}

/// Batch statistics observed by one batch-norm call during training.
#[derive(Clone, Debug)]
pub struct BnRecord<T: Scalar> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running buffers updated afterwards.
    Train,
    /// Running statistics.
    Infer,
}

/// One pass over a model: parameters bound to a tape.
pub struct Forward<'t, 's, T: Scalar> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    vars: Vec<Var<'t, T>>,
    mode: Mode,
    bn_eps: T,
    records: RefCell<Vec<BnRecord<T>>>,
}

impl<'t, 's, T: Scalar> Forward<'t, 's, T> {
    /// Parameters become tracked leaves on a recording tape.
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, mode: Mode, bn_eps: f64) -> Self {
        let vars = store
            .entries()
            .iter()
            .map(|e| match e.kind {
                EntryKind::Param if tape.is_recording() => tape.leaf(e.value.clone()),
                _ => tape.constant(e.value.clone()),
            })
            .collect();
        Self {
            tape,
            store,
            vars,
            mode,
            bn_eps: T::lit(bn_eps),
            records: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&self, id: ParamId) -> &Var<'t, T> {
        &self.vars[id.0]
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn take_records(&self) -> Vec<BnRecord<T>> {
        self.records.take()
    }

    /// Collects the gradient of every trainable parameter (zeros when a
    /// parameter did not influence the loss).
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.store
            .param_ids()
            .into_iter()
            .map(|id| {
                let g = grads
                    .get(&self.vars[id.0])
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()));
                (id, g)
            })
            .collect()
    }

    fn batch_norm(&self, x: &Var<'t, T>, bn: &BatchNorm) -> Result<Var<'t, T>> {
        let (gamma, beta) = (self.param(bn.gamma), self.param(bn.beta));
        match self.mode {
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(gamma, beta, self.bn_eps)?;
                self.records.borrow_mut().push(BnRecord {
                    mean: bn.running_mean,
                    var: bn.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Infer => x.batch_norm_infer(
                gamma,
                beta,
                self.store.get(bn.running_mean),
                self.store.get(bn.running_var),
                self.bn_eps,
            ),
        }
    }
}

/// Initialisation policy and naming while a model is being assembled.
pub struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    /// Uniform in `[-bound, bound]` with `bound = sqrt(gain / fan_in)`.
    fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> Result<ParamId> {
        let bound = (gain / fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let value = Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)));
        self.store.insert(name, EntryKind::Param, value)
    }

    fn constant(&mut self, name: &str, kind: EntryKind, shape: &[usize], v: f64) -> Result<ParamId> {
        self.store.insert(name, kind, Tensor::full(shape, T::lit(v)))
    }
}

/// Kaiming-uniform gain for ELU-like activations.
const RELU_GAIN: f64 = 6.0;
/// Gain for layers followed by a saturating activation.
const LINEAR_GAIN: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv2dBlock,
    DenseNet,
    Gated,
    Conv2dTranspose,
    DenseOut,
}

/// One row of the encoder/decoder configuration table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl LayerSpec {
    pub const fn new(kind: LayerKind, channels: usize, kernel: (usize, usize), stride: (usize, usize)) -> Self {
        Self {
            kind,
            channels,
            kernel,
            stride,
        }
    }
}

/// Spatial extent and channel count of a `[T, F, C]` feature map.
pub type FeatureShape = [usize; 3];

#[derive(Clone, Debug)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.constant(&format!("{name}.gamma"), EntryKind::Param, &[c], 1.0)?,
            beta: b.constant(&format!("{name}.beta"), EntryKind::Param, &[c], 0.0)?,
            running_mean: b.constant(&format!("{name}.running_mean"), EntryKind::Buffer, &[c], 0.0)?,
            running_var: b.constant(&format!("{name}.running_var"), EntryKind::Buffer, &[c], 1.0)?,
        })
    }
}

/// Conv2D (no bias; batch norm supplies the shift) → BatchNorm → activation.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    weight: ParamId,
    bn: BatchNorm,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub activation: Activation,
}

impl ConvBlock {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        activation: Activation,
    ) -> Result<Self> {
        let gain = match activation {
            Activation::Elu => RELU_GAIN,
            Activation::Sigmoid => LINEAR_GAIN,
        };
        let weight = b.uniform(
            &format!("{name}.conv.weight"),
            &[kernel.0, kernel.1, cin, cout],
            kernel.0 * kernel.1 * cin,
            gain,
        )?;
        Ok(Self {
            weight,
            bn: BatchNorm::new(b, &format!("{name}.bn"), cout)?,
            cin,
            cout,
            kernel,
            stride,
            activation,
        })
    }

    pub fn from_spec<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, spec: &LayerSpec) -> Result<Self> {
        Self::new(b, name, cin, spec.channels, spec.kernel, spec.stride, Activation::Elu)
    }

    pub fn forward<'t, T: Scalar>(&self, f: &Forward<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.conv2d(f.param(self.weight), None, self.stride)?;
        let y = f.batch_norm(&y, &self.bn)?;
        Ok(match self.activation {
            Activation::Elu => y.elu(T::one()),
            Activation::Sigmoid => y.sigmoid(),
        })
    }

    pub fn out_shape(&self, s: FeatureShape) -> Result<FeatureShape> {
        check_channels("conv block", s, self.cin)?;
        Ok([
            conv2d_output_len(s[0], self.stride.0),
            conv2d_output_len(s[1], self.stride.1),
            self.cout,
        ])
    }

    pub fn num_scalars(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.cin * self.cout + 2 * self.cout
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    /// `(running mean, running variance)` buffers.
    pub fn running_ids(&self) -> (ParamId, ParamId) {
        (self.bn.running_mean, self.bn.running_var)
    }

    pub fn beta_id(&self) -> ParamId {
        self.bn.beta
    }

    pub fn gamma_id(&self) -> ParamId {
        self.bn.gamma
    }
}

fn check_channels(what: &str, s: FeatureShape, expected: usize) -> Result<()> {
    if s[2] != expected {
        return Err(Error::shape(format!("{what}: expected {expected} channels, got shape {s:?}")));
    }
    Ok(())
}

/// Pointwise affine map over channels with bias and no normalisation.
#[derive(Clone, Debug)]
pub struct Dense {
    weight: ParamId,
    bias: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Dense {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            weight: b.uniform(&format!("{name}.weight"), &[1, 1, cin, cout], cin, LINEAR_GAIN)?,
            bias: b.constant(&format!("{name}.bias"), EntryKind::Param, &[cout], 0.0)?,
            cin,
            cout,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, f: &Forward<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(f.param(self.weight), Some(f.param(self.bias)), (1, 1))
    }

    pub fn num_scalars(&self) -> usize {
        self.cin * self.cout + self.cout
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }
}

/// Bare transposed convolution with bias.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    weight: ParamId,
    bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl ConvTranspose {
    pub fn from_spec<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, spec: &LayerSpec) -> Result<Self> {
        let (kh, kw) = spec.kernel;
        Ok(Self {
            weight: b.uniform(
                &format!("{name}.weight"),
                &[kh, kw, spec.channels, cin],
                kh * kw * cin,
                RELU_GAIN,
            )?,
            bias: b.constant(&format!("{name}.bias"), EntryKind::Param, &[spec.channels], 0.0)?,
            cin,
            cout: spec.channels,
            kernel: spec.kernel,
            stride: spec.stride,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        f: &Forward<'t, '_, T>,
        x: &Var<'t, T>,
        target: (usize, usize),
    ) -> Result<Var<'t, T>> {
        x.conv2d_transpose(f.param(self.weight), Some(f.param(self.bias)), self.stride, target)
    }

    pub fn out_shape(&self, s: FeatureShape, target: (usize, usize)) -> Result<FeatureShape> {
        check_channels("conv transpose", s, self.cin)?;
        if conv2d_output_len(target.0, self.stride.0) != s[0] || conv2d_output_len(target.1, self.stride.1) != s[1] {
            return Err(Error::shape(format!(
                "conv transpose with stride {:?} cannot map {s:?} to {target:?}",
                self.stride
            )));
        }
        Ok([target.0, target.1, self.cout])
    }

    pub fn num_scalars(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.cin * self.cout + self.cout
    }
}

/// Four conv blocks; block `i` sees the input concatenated with the outputs
/// of blocks `0..i`. The output is the last block's output.
#[derive(Clone, Debug)]
pub struct DenseNetBlock {
    pub blocks: Vec<ConvBlock>,
}

pub const DENSE_DEPTH: usize = 4;

impl DenseNetBlock {
    pub fn from_spec<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, spec: &LayerSpec) -> Result<Self> {
        let g = spec.channels;
        let blocks = (0..DENSE_DEPTH)
            .map(|i| {
                ConvBlock::new(
                    b,
                    &format!("{name}.block{i}"),
                    cin + i * g,
                    g,
                    spec.kernel,
                    spec.stride,
                    Activation::Elu,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward<'t, T: Scalar>(&self, f: &Forward<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let axis = x.shape().len() - 1;
        let mut features = vec![x.clone()];
        let mut last = x.clone();
        for block in &self.blocks {
            let input = if features.len() == 1 {
                features[0].clone()
            } else {
                Var::concat(&features, axis)?
            };
            last = block.forward(f, &input)?;
            features.push(last.clone());
        }
        Ok(last)
    }

    pub fn out_shape(&self, s: FeatureShape) -> Result<FeatureShape> {
        check_channels("densenet", s, self.blocks[0].cin)?;
        let mut channels = s[2];
        let mut out = s;
        for block in &self.blocks {
            out = block.out_shape([s[0], s[1], channels])?;
            channels += block.cout;
        }
        Ok(out)
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(ConvBlock::num_scalars).sum()
    }
}

/// Upsampling with a learned multiplicative gate on the encoder skip.
///
/// `u = ConvT(x)`, `g = sigmoid-block(elu-block(u))`, output
/// `fuse([u, skip * g])`.
#[derive(Clone, Debug)]
pub struct GatedBlock {
    pub up: ConvTranspose,
    pub gate_hidden: ConvBlock,
    pub gate_out: ConvBlock,
    pub fuse: ConvBlock,
}

impl GatedBlock {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        skip_channels: usize,
        up: &LayerSpec,
        fuse: &LayerSpec,
    ) -> Result<Self> {
        let upsample = ConvTranspose::from_spec(b, &format!("{name}.up"), cin, up)?;
        let c = upsample.cout;
        Ok(Self {
            gate_hidden: ConvBlock::new(
                b,
                &format!("{name}.gate0"),
                c,
                skip_channels,
                (3, 3),
                (1, 1),
                Activation::Elu,
            )?,
            gate_out: ConvBlock::new(
                b,
                &format!("{name}.gate1"),
                skip_channels,
                skip_channels,
                (1, 1),
                (1, 1),
                Activation::Sigmoid,
            )?,
            fuse: ConvBlock::from_spec(b, &format!("{name}.fuse"), c + skip_channels, fuse)?,
            up: upsample,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        f: &Forward<'t, '_, T>,
        x: &Var<'t, T>,
        skip: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let r = skip.shape().len();
        if r < 3 || x.shape().len() != r {
            return Err(Error::shape(format!(
                "gated block: decoder input {:?} and skip {:?} ranks differ",
                x.shape(),
                skip.shape()
            )));
        }
        let target = (skip.shape()[r - 3], skip.shape()[r - 2]);
        let u = self.up.forward(f, x, target)?;
        let gate = self.gate_out.forward(f, &self.gate_hidden.forward(f, &u)?)?;
        let gated = skip.mul(&gate).map_err(|e| Error::shape(format!("gated block skip: {e}")))?;
        self.fuse.forward(f, &Var::concat(&[u, gated], r - 1)?)
    }

    pub fn out_shape(&self, s: FeatureShape, skip: FeatureShape) -> Result<FeatureShape> {
        let u = self.up.out_shape(s, (skip[0], skip[1]))?;
        check_channels("gated block skip", skip, self.gate_out.cout)?;
        self.fuse.out_shape([u[0], u[1], u[2] + skip[2]])
    }

    pub fn num_scalars(&self) -> usize {
        self.up.num_scalars() + self.gate_hidden.num_scalars() + self.gate_out.num_scalars() + self.fuse.num_scalars()
    }
}

/// Encoder stage: DenseNet block, then a (possibly strided) conv block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub dense: DenseNetBlock,
    pub down: ConvBlock,
}

/// Decoder stage: gated upsampling, then a DenseNet block.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub gated: GatedBlock,
    pub dense: DenseNetBlock,
}

/// Layer rows of one encoder stage: DenseNet then Conv2D.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderStageSpec {
    pub dense: LayerSpec,
    pub conv: LayerSpec,
}

/// Layer rows of one decoder stage: Conv2DTranspose, Conv2D (1,1), DenseNet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderStageSpec {
    pub up: LayerSpec,
    pub fuse: LayerSpec,
    pub dense: LayerSpec,
}

pub struct EncoderOutput<'t, T: Scalar> {
    pub bottleneck: Var<'t, T>,
    /// DenseNet outputs of each stage (before its strided conv), in stage
    /// order. Each has exactly the shape its decoder stage upsamples to.
    pub skips: Vec<Var<'t, T>>,
    /// Output of each full stage.
    pub stages: Vec<Var<'t, T>>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cin: usize, stages: &[EncoderStageSpec]) -> Result<Self> {
        let mut c = cin;
        let mut blocks = Vec::with_capacity(stages.len());
        for (i, s) in stages.iter().enumerate() {
            let name = format!("encoder.eb{}", i + 1);
            let dense = DenseNetBlock::from_spec(b, &format!("{name}.dense"), c, &s.dense)?;
            let down = ConvBlock::from_spec(b, &format!("{name}.conv"), s.dense.channels, &s.conv)?;
            c = s.conv.channels;
            blocks.push(EncoderBlock { dense, down });
        }
        Ok(Self { blocks })
    }

    pub fn forward<'t, T: Scalar>(&self, f: &Forward<'t, '_, T>, x: &Var<'t, T>) -> Result<EncoderOutput<'t, T>> {
        let mut h = x.clone();
        let mut skips = Vec::new();
        let mut stages = Vec::new();
        for block in &self.blocks {
            let d = block.dense.forward(f, &h)?;
            h = block.down.forward(f, &d)?;
            skips.push(d);
            stages.push(h.clone());
        }
        Ok(EncoderOutput {
            bottleneck: h,
            skips,
            stages,
        })
    }

    /// Returns `(stage outputs, skip shapes)`.
    pub fn shapes(&self, input: FeatureShape) -> Result<(Vec<FeatureShape>, Vec<FeatureShape>)> {
        let mut s = input;
        let (mut stages, mut skips) = (Vec::new(), Vec::new());
        for block in &self.blocks {
            let d = block.dense.out_shape(s)?;
            s = block.down.out_shape(d)?;
            skips.push(d);
            stages.push(s);
        }
        Ok((stages, skips))
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.dense.num_scalars() + b.down.num_scalars())
            .sum()
    }
}

/// Decoder stages followed by the mask head: conv block to `4K` channels,
/// pointwise dense map, `tanh`, and scaling by the expansion factor.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub blocks: Vec<DecoderBlock>,
    pub head: ConvBlock,
    pub out: Dense,
    pub expansion: f64,
}

impl Decoder {
    /// `skip_channels` lists each encoder skip's channels in encoder order;
    /// decoder stage `i` consumes skip `n - 1 - i`.
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        cin: usize,
        skip_channels: &[usize],
        stages: &[DecoderStageSpec],
        head: &LayerSpec,
        expansion: f64,
    ) -> Result<Self> {
        if skip_channels.len() != stages.len() {
            return Err(Error::config("decoder needs one skip per stage"));
        }
        let mut c = cin;
        let mut blocks = Vec::with_capacity(stages.len());
        for (i, s) in stages.iter().enumerate() {
            let name = format!("decoder.db{}", i + 1);
            let skip = skip_channels[skip_channels.len() - 1 - i];
            let gated = GatedBlock::new(b, &format!("{name}.gated"), c, skip, &s.up, &s.fuse)?;
            let dense = DenseNetBlock::from_spec(b, &format!("{name}.dense"), s.fuse.channels, &s.dense)?;
            c = s.dense.channels;
            blocks.push(DecoderBlock { gated, dense });
        }
        let head_block = ConvBlock::from_spec(b, "decoder.head", c, head)?;
        let out = Dense::new(b, "decoder.out", head.channels, head.channels)?;
        Ok(Self {
            blocks,
            head: head_block,
            out,
            expansion,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        f: &Forward<'t, '_, T>,
        bottleneck: &Var<'t, T>,
        skips: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        if skips.len() != self.blocks.len() {
            return Err(Error::shape(format!(
                "decoder has {} stages but received {} skips",
                self.blocks.len(),
                skips.len()
            )));
        }
        let mut h = bottleneck.clone();
        for (block, skip) in self.blocks.iter().zip(skips.iter().rev()) {
            h = block.gated.forward(f, &h, skip)?;
            h = block.dense.forward(f, &h)?;
        }
        let h = self.head.forward(f, &h)?;
        Ok(self.out.forward(f, &h)?.tanh().scale(T::lit(self.expansion)))
    }

    /// Output shape of each stage and of the mask head.
    pub fn shapes(&self, bottleneck: FeatureShape, skips: &[FeatureShape]) -> Result<Vec<FeatureShape>> {
        if skips.len() != self.blocks.len() {
            return Err(Error::shape("decoder skip count mismatch"));
        }
        let mut s = bottleneck;
        let mut out = Vec::new();
        for (block, skip) in self.blocks.iter().zip(skips.iter().rev()) {
            s = block.gated.out_shape(s, *skip)?;
            s = block.dense.out_shape(s)?;
            out.push(s);
        }
        s = self.head.out_shape(s)?;
        out.push([s[0], s[1], self.out.cout]);
        Ok(out)
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.gated.num_scalars() + b.dense.num_scalars())
            .sum::<usize>()
            + self.head.num_scalars()
            + self.out.num_scalars()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", EntryKind::Param, Tensor::zeros(&[1])).unwrap();
        assert!(s.insert("a", EntryKind::Buffer, Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn conv_block_zero_in_zero_out_and_shapes() {
        let (mut store, mut r) = (ParamStore::<f64>::new(), rng());
        let mut b = Builder::new(&mut store, &mut r);
        let blk = ConvBlock::new(&mut b, "c", 4, 6, (3, 3), (2, 2), Activation::Elu).unwrap();
        assert_eq!(blk.out_shape([240, 1024, 4]).unwrap(), [120, 512, 6]);
        let tape = Tape::new();
        let f = Forward::new(&tape, &store, Mode::Train, 1e-5);
        let y = blk.forward(&f, &tape.constant(Tensor::zeros(&[5, 6, 4]))).unwrap();
        assert_eq!(y.shape(), &[3, 3, 6]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(f.take_records().len(), 1);
    }

    #[test]
    fn densenet_channel_arithmetic_and_gradients() {
        let (mut store, mut r) = (ParamStore::<f64>::new(), rng());
        let mut b = Builder::new(&mut store, &mut r);
        let spec = LayerSpec::new(LayerKind::DenseNet, 3, (3, 3), (1, 1));
        let d = DenseNetBlock::from_spec(&mut b, "d", 2, &spec).unwrap();
        let cins: Vec<usize> = d.blocks.iter().map(|b| b.cin).collect();
        assert_eq!(cins, vec![2, 5, 8, 11]);
        assert_eq!(d.out_shape([4, 5, 2]).unwrap(), [4, 5, 3]);
        let tape = Tape::new();
        let f = Forward::new(&tape, &store, Mode::Train, 1e-5);
        let y = d.forward(&f, &tape.constant(random(&[2, 4, 5, 2], 1))).unwrap();
        let w = tape.constant(random(y.shape(), 2));
        let loss = y.mul(&w).unwrap().sum();
        let grads = tape.backward(&loss).unwrap();
        for blk in &d.blocks {
            let g = grads.get(f.param(blk.weight)).unwrap();
            assert!(g.max_abs() > 0.0);
        }
    }

    fn gated_fixture(store: &mut ParamStore<f64>) -> GatedBlock {
        let mut r = rng();
        let mut b = Builder::new(store, &mut r);
        GatedBlock::new(
            &mut b,
            "g",
            4,
            3,
            &LayerSpec::new(LayerKind::Conv2dTranspose, 4, (3, 3), (1, 2)),
            &LayerSpec::new(LayerKind::Conv2dBlock, 4, (1, 1), (1, 1)),
        )
        .unwrap()
    }

    fn pin_gate(store: &mut ParamStore<f64>, g: &GatedBlock, value: f64) {
        let c = g.gate_out.cout;
        *store.get_mut(g.gate_out.gamma_id()) = Tensor::zeros(&[c]);
        *store.get_mut(g.gate_out.beta_id()) = Tensor::full(&[c], value);
    }

    #[test]
    fn gated_block_open_and_closed_gate() {
        let mut store = ParamStore::<f64>::new();
        let g = gated_fixture(&mut store);
        assert_eq!(g.out_shape([3, 4, 4], [3, 8, 3]).unwrap(), [3, 8, 4]);
        let x = random(&[3, 4, 4], 3);
        let skip = random(&[3, 8, 3], 4);
        let run = |store: &ParamStore<f64>, skip: &Tensor<f64>| {
            let tape = Tape::inference();
            let f = Forward::new(&tape, store, Mode::Train, 1e-5);
            g.forward(&f, &tape.constant(x.clone()), &tape.constant(skip.clone()))
                .unwrap()
                .value()
                .clone()
        };
        // Closed gate: skip content is irrelevant.
        pin_gate(&mut store, &g, -60.0);
        let a = run(&store, &skip);
        let b = run(&store, &random(&[3, 8, 3], 5));
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-9);
        }
        // Open gate: equals fusing the plain concatenation.
        pin_gate(&mut store, &g, 60.0);
        let open = run(&store, &skip);
        let tape = Tape::inference();
        let f = Forward::new(&tape, &store, Mode::Train, 1e-5);
        let u = g.up.forward(&f, &tape.constant(x.clone()), (3, 8)).unwrap();
        let plain = Var::concat(&[u, tape.constant(skip.clone())], 2).unwrap();
        let expected = g.fuse.forward(&f, &plain).unwrap();
        for (p, q) in open.data().iter().zip(expected.value().data()) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn gated_block_rejects_mismatched_skip() {
        let mut store = ParamStore::<f64>::new();
        let g = gated_fixture(&mut store);
        let tape = Tape::inference();
        let f = Forward::new(&tape, &store, Mode::Train, 1e-5);
        let x = tape.constant(random(&[3, 4, 4], 3));
        assert!(g.forward(&f, &x, &tape.constant(random(&[3, 5, 3], 4))).is_err());
        assert!(g.out_shape([3, 4, 4], [3, 8, 2]).is_err());
    }

    #[test]
    fn running_stats_update() {
        let mut store = ParamStore::<f64>::new();
        let mean = store.insert("m", EntryKind::Buffer, Tensor::zeros(&[1])).unwrap();
        let var = store.insert("v", EntryKind::Buffer, Tensor::ones(&[1])).unwrap();
        let rec = BnRecord {
            mean,
            var,
            stats: BatchStats {
                mean: Tensor::full(&[1], 2.0),
                var: Tensor::full(&[1], 3.0),
                count: 4,
            },
        };
        store.update_running_stats(&[rec], 0.5);
        assert_eq!(store.get(mean).data(), &[1.0]);
        assert_eq!(store.get(var).data(), &[0.5 + 0.5 * 4.0]);
    }
}
