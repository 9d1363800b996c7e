//! Joint time/frequency loss, Adam with plateau decay, augmentation and the
//! training loop.

use std::fmt;
use std::path::PathBuf;
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{extract_segment, save_checkpoint, segment_all, sum_stems, SegmentIndex, Stem, StemSet};
use crate::error::{Error, Result};
use crate::layers::{Mode, ParamId, ParamStore};
use crate::model::{ForwardOutput, SeparationModel};
use crate::signal::{stft, ComplexSpectrogram};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Weight of the frequency-domain term.
pub const ALPHA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_time: f64,
    pub l_freq: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_time: f64, l_freq: f64, alpha: f64) -> Self {
        Self {
            l_time,
            l_freq,
            alpha,
            total: l_time + alpha * l_freq,
        }
    }
}

fn mean_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).abs()).sum();
    Ok(sum / a.numel().max(1) as f64)
}

/// `mean |s - ŝ|` over samples and channels.
pub fn loss_time<T: Scalar>(s: &Tensor<T>, s_hat: &Tensor<T>) -> Result<f64> {
    mean_abs_diff(s, s_hat, "time loss")
}

/// `mean |Re(S - Ŝ)| + mean |Im(S - Ŝ)|`.
pub fn loss_freq<T: Scalar>(s: &ComplexSpectrogram<T>, s_hat: &ComplexSpectrogram<T>) -> Result<f64> {
    Ok(mean_abs_diff(&s.re, &s_hat.re, "frequency loss")? + mean_abs_diff(&s.im, &s_hat.im, "frequency loss")?)
}

pub fn loss_time_var<'t, T: Scalar>(s: &Var<'t, T>, s_hat: &Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(s_hat.sub(s)?.abs().mean())
}

pub fn loss_freq_var<'t, T: Scalar>(
    s_re: &Var<'t, T>,
    s_im: &Var<'t, T>,
    hat_re: &Var<'t, T>,
    hat_im: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    hat_re.sub(s_re)?.abs().mean().add(&hat_im.sub(s_im)?.abs().mean())
}

/// Joint loss of one forward pass against a target waveform and spectrum.
pub fn joint_loss<'t, T: Scalar>(
    out: &ForwardOutput<'t, T>,
    target: &Tensor<T>,
    target_spec: &ComplexSpectrogram<T>,
    alpha: f64,
) -> Result<(Var<'t, T>, LossBreakdown)> {
    let tape = out.estimate.tape();
    let lt = loss_time_var(&tape.constant(target.clone()), &out.estimate)?;
    let lf = loss_freq_var(
        &tape.constant(target_spec.re.clone()),
        &tape.constant(target_spec.im.clone()),
        &out.spec_re,
        &out.spec_im,
    )?;
    let total = lt.add(&lf.scale(T::lit(alpha)))?;
    let breakdown = LossBreakdown::new(lt.value().item().to_f64_lossy(), lf.value().item().to_f64_lossy(), alpha);
    Ok((total, breakdown))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Epochs without validation improvement before the learning rate decays.
pub const PLATEAU_PATIENCE: usize = 10;
pub const LR_DECAY: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub adam: AdamConfig,
    ids: Vec<ParamId>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub lr: f64,
    pub plateau: usize,
    pub best_val: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let ids = store.param_ids();
        let zeros: Vec<_> = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            adam: AdamConfig::default(),
            ids,
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
            plateau: 0,
            best_val: f64::INFINITY,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != state.ids.len() {
        return Err(Error::shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            state.ids.len()
        )));
    }
    for ((id, g), &expected) in grads.iter().zip(&state.ids) {
        if *id != expected || g.shape() != store.get(*id).shape() {
            return Err(Error::shape(format!(
                "gradient for `{}` has shape {:?}, parameter is {:?}",
                store.entry(*id).name,
                g.shape(),
                store.get(expected).shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of `{}`; optimizer step aborted",
                store.entry(*id).name
            )));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.adam;
    let c1 = T::lit(1.0 - beta1.powi(state.step.min(i32::MAX as u64) as i32));
    let c2 = T::lit(1.0 - beta2.powi(state.step.min(i32::MAX as u64) as i32));
    let (b1, b2, eps, lr) = (T::lit(beta1), T::lit(beta2), T::lit(eps), T::lit(lr));
    for (k, (id, g)) in grads.iter().enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let p = store.get_mut(*id).data_mut();
        for i in 0..g.numel() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            if lr != T::zero() {
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Plateau decay, called once per epoch; returns the new learning rate.
pub fn lr_schedule<T: Scalar>(state: &mut OptimizerState<T>, val_loss: f64) -> f64 {
    if val_loss < state.best_val {
        state.best_val = val_loss;
        state.plateau = 0;
    } else {
        state.plateau += 1;
        if state.plateau == PLATEAU_PATIENCE {
            state.lr *= LR_DECAY;
            state.plateau = 0;
        }
    }
    state.lr
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Per example and stem.
    pub swap_prob: f64,
    /// Per example: redraw every stem from a random example of the batch.
    pub remix_prob: f64,
}

impl AugmentConfig {
    pub const NONE: AugmentConfig = AugmentConfig {
        swap_prob: 0.0,
        remix_prob: 0.0,
    };
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            swap_prob: 0.5,
            remix_prob: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub mixture: Tensor<f32>,
    pub stems: [Tensor<f32>; 4],
}

impl Example {
    pub fn from_stems(stems: [Tensor<f32>; 4]) -> Result<Self> {
        Ok(Self {
            mixture: sum_stems(&stems)?,
            stems,
        })
    }
}

/// Swaps left and right of `[N, 2]` audio.
pub fn swap_channels(x: &Tensor<f32>) -> Tensor<f32> {
    let mut out = x.clone();
    for frame in out.data_mut().chunks_exact_mut(2) {
        frame.swap(0, 1);
    }
    out
}

/// Channel swapping and in-batch remixing. Augmented mixtures are the
/// exact sum of their stems; with both probabilities zero the batch is
/// returned unchanged.
pub fn augment(batch: &[Example], cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Vec<Example>> {
    if cfg.swap_prob == 0.0 && cfg.remix_prob == 0.0 {
        return Ok(batch.to_vec());
    }
    let mut out = Vec::with_capacity(batch.len());
    for ex in batch {
        let remix = rng.gen_bool(cfg.remix_prob.clamp(0.0, 1.0));
        let mut stems: Vec<Tensor<f32>> = (0..4)
            .map(|k| {
                let src = if remix { &batch[rng.gen_range(0..batch.len())] } else { ex };
                src.stems[k].clone()
            })
            .collect();
        for s in &mut stems {
            if rng.gen_bool(cfg.swap_prob.clamp(0.0, 1.0)) {
                *s = swap_channels(s);
            }
        }
        out.push(Example::from_stems(stems.try_into().expect("four stems"))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub target: Stem,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Segment shift in frames; defaults to the segment length.
    pub shift_frames: Option<usize>,
    /// Caps the optimizer steps per epoch (random batches of the shuffle).
    pub max_batches_per_epoch: Option<usize>,
    /// Written at start and whenever validation improves.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            target: Stem::Vocals,
            epochs: 300,
            batch_size: 4,
            lr: 1e-3,
            alpha: ALPHA,
            augment: AugmentConfig::default(),
            seed: 0,
            shift_frames: None,
            max_batches_per_epoch: None,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation components.
    pub l_time: f64,
    pub l_freq: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={}\tlr={:e}\ttrain_loss={:.6e}\tval_loss={:.6e}\tl_time={:.6e}\tl_freq={:.6e}",
            self.epoch, self.lr, self.train_loss, self.val_loss, self.l_time, self.l_freq
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingReport {
    /// Validation loss of the model before any update.
    pub initial_val: LossBreakdown,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainingReport {
    pub fn final_val_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_val.total, |e| e.val_loss)
    }

    /// Lowest validation loss seen, including the initial model. This is
    /// the loss of the checkpoint a run keeps.
    pub fn best_val_loss(&self) -> f64 {
        self.epochs.iter().map(|e| e.val_loss).fold(self.initial_val.total, f64::min)
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }

    /// One line per epoch.
    pub fn to_text(&self) -> String {
        self.epochs.iter().map(|e| format!("{e}\n")).collect()
    }
}

fn stack(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let expanded = items
        .iter()
        .map(|t| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            (*t).clone().reshaped(&shape)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat(&expanded.iter().collect::<Vec<_>>(), 0)
}

struct Batch {
    mixture: Tensor<f32>,
    target: Tensor<f32>,
}

fn make_batch(examples: &[Example], target: Stem) -> Result<Batch> {
    Ok(Batch {
        mixture: stack(&examples.iter().map(|e| &e.mixture).collect::<Vec<_>>())?,
        target: stack(&examples.iter().map(|e| &e.stems[target.index()]).collect::<Vec<_>>())?,
    })
}

fn run_batch(
    model: &SeparationModel<f32>,
    batch: &Batch,
    alpha: f64,
    mode: Mode,
) -> Result<(LossBreakdown, Option<(Vec<(ParamId, Tensor<f32>)>, Vec<crate::layers::BnRecord<f32>>)>)> {
    let cfg = model.config().stft();
    let n = model.config().segment_samples();
    let mix_spec = stft(&batch.mixture, cfg)?;
    let target_spec = stft(&batch.target, cfg)?;
    let tape = if mode == Mode::Train { Tape::new() } else { Tape::inference() };
    let fw = model.forward_context(&tape, mode);
    let out = model.forward_with(&fw, &mix_spec, n)?;
    let (loss, breakdown) = joint_loss(&out, &batch.target, &target_spec, alpha)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss {}", breakdown.total)));
    }
    if mode == Mode::Infer {
        return Ok((breakdown, None));
    }
    let grads = tape.backward(&loss)?;
    Ok((breakdown, Some((fw.param_grads(&grads), fw.take_records()))))
}

/// Mean joint loss over segments in fixed order, without augmentation.
pub fn evaluate_loss(
    model: &SeparationModel<f32>,
    songs: &[StemSet],
    index: &[SegmentIndex],
    target: Stem,
    batch_size: usize,
    alpha: f64,
) -> Result<LossBreakdown> {
    if index.is_empty() {
        return Err(Error::Dataset("no validation segments".into()));
    }
    let (mut lt, mut lf) = (0.0, 0.0);
    for chunk in index.chunks(batch_size.max(1)) {
        let examples = chunk
            .iter()
            .map(|&idx| extract_segment(songs, idx).and_then(Example::from_stems))
            .collect::<Result<Vec<_>>>()?;
        let (b, _) = run_batch(model, &make_batch(&examples, target)?, alpha, Mode::Infer)?;
        lt += b.l_time * chunk.len() as f64;
        lf += b.l_freq * chunk.len() as f64;
    }
    let n = index.len() as f64;
    Ok(LossBreakdown::new(lt / n, lf / n, alpha))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trains a dedicated model for `cfg.target`. A producer thread assembles
/// and augments batches into a bounded queue while this thread runs the
/// optimizer.
pub fn train(
    model: &mut SeparationModel<f32>,
    train_songs: &[StemSet],
    val_songs: &[StemSet],
    cfg: &TrainConfig,
) -> Result<TrainingReport> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mc = model.config().clone();
    let shift = cfg.shift_frames.unwrap_or(mc.segment_frames);
    let train_index = segment_all(train_songs, mc.segment_frames, shift, mc.stft())?;
    let val_index = segment_all(val_songs, mc.segment_frames, mc.segment_frames, mc.stft())?;
    if train_index.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let momentum = mc.bn_momentum as f32;

    let initial_val = evaluate_loss(model, val_songs, &val_index, cfg.target, cfg.batch_size, cfg.alpha)?;
    log::info!("initial validation loss {:.6e}", initial_val.total);
    if let Some(path) = &cfg.checkpoint {
        save_checkpoint(model, path)?;
    }
    let mut state = OptimizerState::new(model.store(), cfg.lr);
    state.best_val = initial_val.total;
    let mut report = TrainingReport {
        initial_val,
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: None,
    };

    for epoch in 1..=cfg.epochs {
        let lr = state.lr;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order = train_index.clone();
        order.shuffle(&mut rng);
        let mut batches: Vec<Vec<SegmentIndex>> = order.chunks(cfg.batch_size).map(|c| c.to_vec()).collect();
        if let Some(cap) = cfg.max_batches_per_epoch {
            batches.truncate(cap.max(1));
        }

        let (tx, rx) = sync_channel::<Result<Batch>>(2);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        std::thread::scope(|s| -> Result<()> {
            s.spawn(move || {
                for chunk in &batches {
                    let batch = chunk
                        .iter()
                        .map(|&idx| extract_segment(train_songs, idx).and_then(Example::from_stems))
                        .collect::<Result<Vec<_>>>()
                        .and_then(|ex| augment(&ex, &cfg.augment, &mut rng))
                        .and_then(|ex| make_batch(&ex, cfg.target));
                    if tx.send(batch).is_err() {
                        return;
                    }
                }
            });
            for batch in rx {
                let batch = batch?;
                let b = batch.mixture.shape()[0];
                let (breakdown, update) = run_batch(model, &batch, cfg.alpha, Mode::Train)?;
                let (grads, records) = update.expect("training pass returns gradients");
                adam_step(model.store_mut(), &grads, &mut state, lr)?;
                model.store_mut().update_running_stats(&records, momentum);
                loss_sum += breakdown.total * b as f64;
                count += b;
            }
            Ok(())
        })?;

        let val = evaluate_loss(model, val_songs, &val_index, cfg.target, cfg.batch_size, cfg.alpha)?;
        let improved = val.total < state.best_val;
        lr_schedule(&mut state, val.total);
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / count.max(1) as f64,
            val_loss: val.total,
            l_time: val.l_time,
            l_freq: val.l_freq,
        };
        log::info!("{record}");
        report.epochs.push(record);
        if improved {
            report.best_epoch = Some(epoch);
            if let Some(path) = &cfg.checkpoint {
                save_checkpoint(model, path)?;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::StftConfig;

    fn audio(n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 2], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn loss_examples() {
        let s = audio(64, 1);
        assert_eq!(loss_time(&s, &s).unwrap(), 0.0);
        let zero = Tensor::<f32>::zeros(&[64, 2]);
        let c = Tensor::full(&[64, 2], -0.25f32);
        assert_eq!(loss_time(&zero, &c).unwrap(), 0.25);
        let cfg = StftConfig::new(32, 8, 8000).unwrap();
        let spec = stft(&s, cfg).unwrap();
        assert_eq!(loss_freq(&spec, &spec).unwrap(), 0.0);
        let shifted = ComplexSpectrogram::new(spec.re.map(|v| v + 0.5), spec.im.clone(), cfg).unwrap();
        assert!((loss_freq(&spec, &shifted).unwrap() - 0.5).abs() < 1e-6);
        assert!(loss_time(&s, &audio(32, 1)).is_err());
    }

    #[test]
    fn time_loss_gradient_is_sign() {
        let tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::new(&[4], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let e = tape.leaf(Tensor::new(&[4], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let l = loss_time_var(&s, &e).unwrap();
        let g = tape.backward(&l).unwrap();
        assert_eq!(g.get(&e).unwrap().data(), &[0.25, 0.0, -0.25, -0.25]);
    }

    #[test]
    fn breakdown_total_is_weighted_sum() {
        let b = LossBreakdown::new(0.3, 0.7, ALPHA);
        assert_eq!(b.total, 0.3 + 0.1 * 0.7);
    }

    fn one_param_store(v: f32) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        store
            .insert("w", crate::layers::EntryKind::Param, Tensor::new(&[1], vec![v]).unwrap())
            .unwrap();
        store
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = one_param_store(1.0);
        let mut state = OptimizerState::new(&store, 1e-3);
        let id = store.param_ids()[0];
        adam_step(&mut store, &[(id, Tensor::new(&[1], vec![1.0]).unwrap())], &mut state, 1e-3).unwrap();
        assert!((store.get(id).item() - (1.0 - 1e-3)).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_grad_and_zero_lr() {
        let mut store = one_param_store(0.5);
        let id = store.param_ids()[0];
        let mut state = OptimizerState::new(&store, 1e-3);
        adam_step(&mut store, &[(id, Tensor::new(&[1], vec![2.0]).unwrap())], &mut state, 1e-3).unwrap();
        let before = store.get(id).item();
        let m = state.m[0].item();
        adam_step(&mut store, &[(id, Tensor::zeros(&[1]))], &mut state, 0.0).unwrap();
        assert_eq!(store.get(id).item().to_bits(), before.to_bits());
        assert_eq!(state.m[0].item(), 0.9 * m);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut store = one_param_store(0.5);
        let id = store.param_ids()[0];
        let mut state = OptimizerState::new(&store, 1e-3);
        let err = adam_step(&mut store, &[(id, Tensor::new(&[1], vec![f32::NAN]).unwrap())], &mut state, 1e-3);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(store.get(id).item(), 0.5);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn plateau_schedule() {
        let store = one_param_store(0.0);
        let mut state = OptimizerState::new(&store, 1e-3);
        for i in 0..30 {
            assert_eq!(lr_schedule(&mut state, 1.0 / (i + 1) as f64), 1e-3);
        }
        let mut state = OptimizerState::new(&store, 1e-3);
        lr_schedule(&mut state, 1.0);
        let lrs: Vec<_> = (0..20).map(|_| lr_schedule(&mut state, 1.0)).collect();
        assert_eq!(lrs[8], 1e-3);
        assert!((lrs[9] - 8e-4).abs() < 1e-15);
        assert!((lrs[19] - 6.4e-4).abs() < 1e-15);
    }

    #[test]
    fn augment_contracts() {
        let batch: Vec<_> = (0..4)
            .map(|i| Example::from_stems(std::array::from_fn(|k| audio(16, (i * 4 + k) as u64))).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(augment(&batch, &AugmentConfig::NONE, &mut rng).unwrap(), batch);
        for _ in 0..10 {
            for ex in augment(&batch, &AugmentConfig::default(), &mut rng).unwrap() {
                assert_eq!(ex.mixture, sum_stems(&ex.stems).unwrap());
            }
        }
        let x = audio(16, 99);
        assert_eq!(swap_channels(&swap_channels(&x)), x);
        assert_ne!(swap_channels(&x), x);
    }
}
