//! Temporal and frequency self-attention, residual attention (RA) blocks and
//! the separators built from them.
//!
//! Feature maps are `[B, T', F', C]` or `[T', F', C]`. Temporal attention
//! treats each frame as a token whose embedding is the frame's whole
//! `F' x C/2` projection; frequency attention does the same with bins as
//! tokens.

use crate::error::{Error, Result};
use crate::layers::{Activation, Builder, ConvBlock, FeatureShape, Forward};
use crate::tensor::{Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionAxis {
    Temporal,
    Frequency,
}

/// Adds a leading batch axis to rank-3 maps.
fn as_batched<'t, T: Scalar>(x: &Var<'t, T>) -> Result<(Var<'t, T>, bool)> {
    match x.shape().len() {
        3 => {
            let s = x.shape();
            Ok((x.reshape(&[1, s[0], s[1], s[2]])?, true))
        }
        4 => Ok((x.clone(), false)),
        _ => Err(Error::shape(format!("attention expects [B, T, F, C] or [T, F, C], got {:?}", x.shape()))),
    }
}

fn unbatch<'t, T: Scalar>(x: Var<'t, T>, squeeze: bool) -> Result<Var<'t, T>> {
    if squeeze {
        let s = x.shape()[1..].to_vec();
        x.reshape(&s)
    } else {
        Ok(x)
    }
}

/// Scaled dot-product self-attention along one axis, with residual.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub axis: AttentionAxis,
    pub query: ConvBlock,
    pub key: ConvBlock,
    pub value: ConvBlock,
    pub out: ConvBlock,
    pub channels: usize,
    /// Multiplies the softmax temperature. Always 1 in built models; other
    /// values exist only to exercise the self-test's fault detection.
    pub scale_factor: f64,
}

impl SelfAttention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, axis: AttentionAxis, channels: usize) -> Result<Self> {
        if channels % 2 != 0 || channels == 0 {
            return Err(Error::config(format!("attention needs an even channel count, got {channels}")));
        }
        let h = channels / 2;
        let proj = |b: &mut Builder<'_, T>, n: &str| {
            ConvBlock::new(b, &format!("{name}.{n}"), channels, h, (1, 1), (1, 1), Activation::Elu)
        };
        Ok(Self {
            axis,
            query: proj(b, "query")?,
            key: proj(b, "key")?,
            value: proj(b, "value")?,
            out: ConvBlock::new(b, &format!("{name}.out"), h, channels, (1, 1), (1, 1), Activation::Elu)?,
            channels,
            scale_factor: 1.0,
        })
    }

    /// `sqrt(C/2 * L)` where `L` is the length of the non-attended axis.
    pub fn temperature(&self, t: usize, f: usize) -> f64 {
        let other = match self.axis {
            AttentionAxis::Temporal => f,
            AttentionAxis::Frequency => t,
        };
        ((self.channels / 2 * other) as f64).sqrt() * self.scale_factor
    }

    fn check_input<'t, T: Scalar>(&self, x: &Var<'t, T>) -> Result<(Var<'t, T>, bool)> {
        let (xb, squeeze) = as_batched(x)?;
        if xb.shape()[3] != self.channels {
            return Err(Error::shape(format!(
                "attention built for {} channels, input is {:?}",
                self.channels,
                x.shape()
            )));
        }
        Ok((xb, squeeze))
    }

    /// Query, key and value maps `[B, T, F, C/2]`.
    fn project<'t, T: Scalar>(&self, fw: &Forward<'t, '_, T>, xb: &Var<'t, T>) -> Result<[Var<'t, T>; 3]> {
        Ok([
            self.query.forward(fw, xb)?,
            self.key.forward(fw, xb)?,
            self.value.forward(fw, xb)?,
        ])
    }

    /// `softmax(Q K^T / temperature) V` on `[B, T, F, C/2]` maps.
    fn attend<'t, T: Scalar>(&self, [q, k, v]: &[Var<'t, T>; 3]) -> Result<Var<'t, T>> {
        let &[b, t, f, h] = q.shape() else { unreachable!() };
        let to_tokens = |y: &Var<'t, T>| -> Result<Var<'t, T>> {
            match self.axis {
                AttentionAxis::Temporal => y.reshape(&[b, t, f * h]),
                AttentionAxis::Frequency => y.permute(&[0, 2, 1, 3])?.reshape(&[b, f, t * h]),
            }
        };
        let weights = to_tokens(q)?
            .bmm(&to_tokens(k)?, true)?
            .softmax_rows(T::lit(self.temperature(t, f)))?;
        let sa = weights.bmm(&to_tokens(v)?, false)?;
        match self.axis {
            AttentionAxis::Temporal => sa.reshape(&[b, t, f, h]),
            AttentionAxis::Frequency => sa.reshape(&[b, f, t, h])?.permute(&[0, 2, 1, 3]),
        }
    }

    /// Attention output before the residual addition: `out(SA)`.
    pub fn context<'t, T: Scalar>(&self, fw: &Forward<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (xb, squeeze) = self.check_input(x)?;
        let sa = self.attend(&self.project(fw, &xb)?)?;
        unbatch(self.out.forward(fw, &sa)?, squeeze)
    }

    pub fn forward<'t, T: Scalar>(&self, fw: &Forward<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.context(fw, x)?.add(x)
    }

    pub fn num_scalars(&self) -> usize {
        self.query.num_scalars() + self.key.num_scalars() + self.value.num_scalars() + self.out.num_scalars()
    }
}

/// Attention applied independently to `P` contiguous slices of the
/// non-attended axis, with weights shared across slices.
#[derive(Clone, Debug)]
pub struct SegmentedAttention {
    pub attention: SelfAttention,
    pub segments: usize,
}

impl SegmentedAttention {
    /// Rank-relative axis that is sliced: frequency for temporal attention,
    /// time for frequency attention.
    fn sliced_axis(&self, rank: usize) -> usize {
        match self.attention.axis {
            AttentionAxis::Temporal => rank - 2,
            AttentionAxis::Frequency => rank - 3,
        }
    }

    pub fn check(&self, s: FeatureShape) -> Result<()> {
        let len = match self.attention.axis {
            AttentionAxis::Temporal => s[1],
            AttentionAxis::Frequency => s[0],
        };
        if self.segments == 0 || len % self.segments != 0 {
            return Err(Error::config(format!(
                "{} segments do not divide the sliced axis of length {len} ({:?} attention on {s:?})",
                self.segments, self.attention.axis
            )));
        }
        Ok(())
    }

    pub fn forward<'t, T: Scalar>(&self, fw: &Forward<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let r = x.shape().len();
        if r < 3 {
            return Err(Error::shape(format!("segmented attention on {:?}", x.shape())));
        }
        self.check([x.shape()[r - 3], x.shape()[r - 2], x.shape()[r - 1]])?;
        if self.segments == 1 {
            return self.attention.forward(fw, x);
        }
        // The pointwise projections run once over the whole map so that
        // their batch statistics are shared by all segments; only the
        // attention itself is computed per segment.
        let a = &self.attention;
        let (xb, squeeze) = a.check_input(x)?;
        let axis = self.sliced_axis(4);
        let width = xb.shape()[axis] / self.segments;
        let qkv = a.project(fw, &xb)?;
        let parts = (0..self.segments)
            .map(|i| {
                let sliced = [
                    qkv[0].slice(axis, i * width, width)?,
                    qkv[1].slice(axis, i * width, width)?,
                    qkv[2].slice(axis, i * width, width)?,
                ];
                a.attend(&sliced)
            })
            .collect::<Result<Vec<_>>>()?;
        let sa = Var::concat(&parts, axis)?;
        unbatch(a.out.forward(fw, &sa)?.add(&xb)?, squeeze)
    }
}

/// Two 3x3 conv blocks with an identity shortcut added after the second
/// activation.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub first: ConvBlock,
    pub second: ConvBlock,
}

impl ResidualBlock {
    fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, c: usize) -> Result<Self> {
        let block = |b: &mut Builder<'_, T>, n: &str| {
            ConvBlock::new(b, &format!("{name}.{n}"), c, c, (3, 3), (1, 1), Activation::Elu)
        };
        Ok(Self {
            first: block(b, "conv0")?,
            second: block(b, "conv1")?,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, fw: &Forward<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.second.forward(fw, &self.first.forward(fw, x)?)?.add(x)
    }

    pub fn num_scalars(&self) -> usize {
        self.first.num_scalars() + self.second.num_scalars()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RaBlockSpec {
    pub channels: usize,
    pub segments: usize,
    pub temporal: bool,
    pub frequency: bool,
}

impl RaBlockSpec {
    pub fn paths(&self) -> usize {
        1 + self.temporal as usize + self.frequency as usize
    }
}

/// Residual attention block. Attention paths that are disabled are removed
/// and the fusion conv shrinks accordingly.
#[derive(Clone, Debug)]
pub struct RaBlock {
    pub spec: RaBlockSpec,
    pub residual: [ResidualBlock; 2],
    pub temporal: Option<SegmentedAttention>,
    pub frequency: Option<SegmentedAttention>,
    pub fuse: ConvBlock,
}

impl RaBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, spec: RaBlockSpec) -> Result<Self> {
        let c = spec.channels;
        let residual = [
            ResidualBlock::new(b, &format!("{name}.res0"), c)?,
            ResidualBlock::new(b, &format!("{name}.res1"), c)?,
        ];
        let mut attend = |on: bool, axis: AttentionAxis, n: &str| -> Result<Option<SegmentedAttention>> {
            on.then(|| {
                Ok(SegmentedAttention {
                    attention: SelfAttention::new(b, &format!("{name}.{n}"), axis, c)?,
                    segments: spec.segments,
                })
            })
            .transpose()
        };
        let temporal = attend(spec.temporal, AttentionAxis::Temporal, "tsa")?;
        let frequency = attend(spec.frequency, AttentionAxis::Frequency, "fsa")?;
        let fuse = ConvBlock::new(
            b,
            &format!("{name}.fuse"),
            spec.paths() * c,
            c,
            (1, 1),
            (1, 1),
            Activation::Elu,
        )?;
        Ok(Self {
            spec,
            residual,
            temporal,
            frequency,
            fuse,
        })
    }

    pub fn check(&self, s: FeatureShape) -> Result<()> {
        if s[2] != self.spec.channels {
            return Err(Error::shape(format!(
                "RA block built for {} channels, input is {s:?}",
                self.spec.channels
            )));
        }
        for a in self.temporal.iter().chain(&self.frequency) {
            a.check(s)?;
        }
        Ok(())
    }

    pub fn forward<'t, T: Scalar>(&self, fw: &Forward<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let res = self.residual[1].forward(fw, &self.residual[0].forward(fw, x)?)?;
        let mut parts = Vec::with_capacity(3);
        if let Some(t) = &self.temporal {
            parts.push(t.forward(fw, &res)?);
        }
        if let Some(f) = &self.frequency {
            parts.push(f.forward(fw, &res)?);
        }
        let fused = if parts.is_empty() {
            res
        } else {
            parts.push(res);
            Var::concat(&parts, x.shape().len() - 1)?
        };
        self.fuse.forward(fw, &fused)
    }

    pub fn num_scalars(&self) -> usize {
        self.residual.iter().map(ResidualBlock::num_scalars).sum::<usize>()
            + self
                .temporal
                .iter()
                .chain(&self.frequency)
                .map(|a| a.attention.num_scalars())
                .sum::<usize>()
            + self.fuse.num_scalars()
    }
}

/// Parallel chains of RA blocks. A single chain is the single-scale
/// separator; several chains are concatenated on channels and fused by a
/// 1x1 conv block.
#[derive(Clone, Debug)]
pub struct Separator {
    pub chains: Vec<Vec<RaBlock>>,
    pub fuse: Option<ConvBlock>,
}

impl Separator {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, chains: &[Vec<RaBlockSpec>]) -> Result<Self> {
        let channels = chains
            .first()
            .and_then(|c| c.first())
            .map(|s| s.channels)
            .ok_or_else(|| Error::config("separator needs at least one RA block"))?;
        let mut built = Vec::with_capacity(chains.len());
        for (ci, chain) in chains.iter().enumerate() {
            let mut blocks = Vec::with_capacity(chain.len());
            for (bi, spec) in chain.iter().enumerate() {
                if spec.channels != channels {
                    return Err(Error::config("all RA blocks must share the channel count"));
                }
                let name = if chains.len() == 1 {
                    format!("separator.ra{bi}")
                } else {
                    format!("separator.branch{ci}.ra{bi}")
                };
                blocks.push(RaBlock::new(b, &name, *spec)?);
            }
            built.push(blocks);
        }
        let fuse = (chains.len() > 1)
            .then(|| {
                ConvBlock::new(
                    b,
                    "separator.fuse",
                    chains.len() * channels,
                    channels,
                    (1, 1),
                    (1, 1),
                    Activation::Elu,
                )
            })
            .transpose()?;
        Ok(Self { chains: built, fuse })
    }

    pub fn check(&self, s: FeatureShape) -> Result<()> {
        self.chains.iter().flatten().try_for_each(|b| b.check(s))
    }

    pub fn forward<'t, T: Scalar>(&self, fw: &Forward<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let outs = self
            .chains
            .iter()
            .map(|chain| chain.iter().try_fold(x.clone(), |h, blk| blk.forward(fw, &h)))
            .collect::<Result<Vec<_>>>()?;
        match &self.fuse {
            Some(fuse) => fuse.forward(fw, &Var::concat(&outs, x.shape().len() - 1)?),
            None => Ok(outs.into_iter().next().expect("one chain")),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.chains.iter().flatten().map(RaBlock::num_scalars).sum::<usize>()
            + self.fuse.as_ref().map_or(0, ConvBlock::num_scalars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Mode, ParamStore};
    use crate::tensor::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    fn attention(axis: AttentionAxis, c: usize) -> (ParamStore<f64>, SelfAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = SelfAttention::new(&mut Builder::new(&mut store, &mut rng), "a", axis, c).unwrap();
        (store, a)
    }

    fn run(store: &ParamStore<f64>, x: &Tensor<f64>, op: impl for<'t, 's> Fn(&Forward<'t, 's, f64>, &Var<'t, f64>) -> Var<'t, f64>) -> Tensor<f64> {
        run_in(Mode::Train, store, x, op)
    }

    fn run_in(
        mode: Mode,
        store: &ParamStore<f64>,
        x: &Tensor<f64>,
        op: impl for<'t, 's> Fn(&Forward<'t, 's, f64>, &Var<'t, f64>) -> Var<'t, f64>,
    ) -> Tensor<f64> {
        let tape = Tape::inference();
        let fw = Forward::new(&tape, store, mode, 1e-5);
        let out = op(&fw, &tape.constant(x.clone())).value().clone();
        out
    }

    /// Running statistics away from the identity so inference mode is not
    /// trivially linear.
    fn with_running_stats(mut store: ParamStore<f64>) -> ParamStore<f64> {
        let names: Vec<_> = store.entries().iter().map(|e| e.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            let shape = store.entries()[i].value.shape().to_vec();
            if name.ends_with("running_mean") {
                store.set(name, random(&shape, i as u64).map(|v| 0.2 * v)).unwrap();
            } else if name.ends_with("running_var") {
                store.set(name, random(&shape, i as u64).map(|v| 1.0 + 0.5 * v)).unwrap();
            }
        }
        store
    }

    #[test]
    fn odd_channels_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(SelfAttention::new(&mut Builder::new(&mut store, &mut rng), "a", AttentionAxis::Temporal, 5).is_err());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        for axis in [AttentionAxis::Temporal, AttentionAxis::Frequency] {
            let (store, a) = attention(axis, 4);
            let y = run(&store, &Tensor::zeros(&[3, 4, 4]), |fw, x| a.forward(fw, x).unwrap());
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn degenerate_single_token() {
        let (store, a) = attention(AttentionAxis::Temporal, 4);
        let x = random(&[1, 5, 4], 2);
        let y = run(&store, &x, |fw, x| a.forward(fw, x).unwrap());
        // One token: the attention matrix is [1], output is x + out(value(x)).
        let z = run(&store, &x, |fw, x| a.out.forward(fw, &a.value.forward(fw, x).unwrap()).unwrap().add(x).unwrap());
        assert_eq!(y, z);
        let (store, a) = attention(AttentionAxis::Frequency, 4);
        let x = random(&[5, 1, 4], 2);
        assert_eq!(run(&store, &x, |fw, x| a.forward(fw, x).unwrap()).shape(), &[5, 1, 4]);
    }

    #[test]
    fn frequency_is_transposed_temporal() {
        let (store, t) = attention(AttentionAxis::Temporal, 4);
        let f = SelfAttention {
            axis: AttentionAxis::Frequency,
            ..t.clone()
        };
        let x = random(&[2, 6, 3, 4], 3);
        let xt = x.permuted(&[0, 2, 1, 3]).unwrap();
        let a = run(&store, &x, |fw, x| f.forward(fw, x).unwrap());
        let b = run(&store, &xt, |fw, x| t.forward(fw, x).unwrap()).permuted(&[0, 2, 1, 3]).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_attention_is_permutation_equivariant() {
        let (store, a) = attention(AttentionAxis::Temporal, 4);
        let x = random(&[5, 3, 4], 4);
        let perm = [3, 0, 4, 1, 2];
        let xp = Tensor::concat(&perm.iter().map(|&i| x.slice_axis(0, i, 1).unwrap()).collect::<Vec<_>>().iter().collect::<Vec<_>>(), 0).unwrap();
        let y = run(&store, &x, |fw, x| a.context(fw, x).unwrap());
        let yp = run(&store, &xp, |fw, x| a.context(fw, x).unwrap());
        for (j, &i) in perm.iter().enumerate() {
            let p = yp.slice_axis(0, j, 1).unwrap();
            let q = y.slice_axis(0, i, 1).unwrap();
            for (u, v) in p.data().iter().zip(q.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn segmented_p1_and_p2_compose() {
        let (store, a) = attention(AttentionAxis::Temporal, 4);
        let store = with_running_stats(store);
        let x = random(&[4, 6, 4], 5);
        let p1 = SegmentedAttention { attention: a.clone(), segments: 1 };
        assert_eq!(
            run(&store, &x, |fw, x| p1.forward(fw, x).unwrap()),
            run(&store, &x, |fw, x| a.forward(fw, x).unwrap())
        );
        let p2 = SegmentedAttention { attention: a.clone(), segments: 2 };
        let seg = run_in(Mode::Infer, &store, &x, |fw, x| p2.forward(fw, x).unwrap());
        let manual = run_in(Mode::Infer, &store, &x, |fw, x| {
            let l = a.forward(fw, &x.slice(1, 0, 3).unwrap()).unwrap();
            let r = a.forward(fw, &x.slice(1, 3, 3).unwrap()).unwrap();
            Var::concat(&[l, r], 1).unwrap()
        });
        assert_eq!(seg, manual);
        let p4 = SegmentedAttention { attention: a, segments: 4 };
        assert!(p4.check([4, 6, 4]).is_err());
    }

    #[test]
    fn segment_isolation() {
        let (store, a) = attention(AttentionAxis::Frequency, 4);
        let store = with_running_stats(store);
        let seg = SegmentedAttention { attention: a, segments: 2 };
        let x = random(&[4, 3, 4], 6);
        let mut x2 = x.clone();
        // Perturb the second time segment only.
        for t in 2..4 {
            for i in 0..12 {
                x2.data_mut()[t * 12 + i] += 0.5;
            }
        }
        let y = run_in(Mode::Infer, &store, &x, |fw, x| seg.forward(fw, x).unwrap());
        let y2 = run_in(Mode::Infer, &store, &x2, |fw, x| seg.forward(fw, x).unwrap());
        assert_eq!(&y.data()[..24], &y2.data()[..24]);
        assert_ne!(&y.data()[24..], &y2.data()[24..]);
    }

    fn separator(chains: &[Vec<RaBlockSpec>]) -> (ParamStore<f64>, Separator) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = Separator::new(&mut Builder::new(&mut store, &mut rng), chains).unwrap();
        (store, s)
    }

    fn spec(p: usize, t: bool, f: bool) -> RaBlockSpec {
        RaBlockSpec {
            channels: 4,
            segments: p,
            temporal: t,
            frequency: f,
        }
    }

    #[test]
    fn ra_block_shapes_and_zero_case() {
        let (store, s) = separator(&[vec![spec(1, true, true); 4]]);
        let x = random(&[8, 8, 4], 7);
        assert_eq!(run(&store, &x, |fw, x| s.forward(fw, x).unwrap()).shape(), &[8, 8, 4]);
        let z = run(&store, &Tensor::zeros(&[8, 8, 4]), |fw, x| s.forward(fw, x).unwrap());
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multi_scale_shapes_and_divisibility() {
        let a: Vec<_> = [1, 2, 4, 8].iter().map(|&p| spec(p, true, true)).collect();
        let b: Vec<_> = a.iter().rev().copied().collect();
        let (store, s) = separator(&[a, b]);
        s.check([8, 16, 4]).unwrap();
        assert!(s.check([8, 12, 4]).is_err());
        let x = random(&[2, 8, 16, 4], 8);
        assert_eq!(run(&store, &x, |fw, x| s.forward(fw, x).unwrap()).shape(), &[2, 8, 16, 4]);
        let single = separator(&[vec![spec(1, true, true); 4]]).1;
        assert_eq!(s.num_scalars(), 2 * single.num_scalars() + s.fuse.as_ref().unwrap().num_scalars());
    }

    #[test]
    fn attention_free_chain_runs() {
        let (store, s) = separator(&[vec![spec(8, false, false); 2], vec![spec(8, false, false); 2]]);
        let x = random(&[8, 8, 4], 10);
        assert_eq!(run(&store, &x, |fw, x| s.forward(fw, x).unwrap()).shape(), &[8, 8, 4]);
        assert_eq!(s.chains[0][0].fuse.cin, 4);
    }
}
