//! Windowed MSE objective, learning-rate schedule, augmentation and the
//! mini-batch training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg, shape, Error, Result};
use crate::event::{frame_sequence_from, EventStream, PolarFrame};
use crate::kv::KeyValues;
use crate::model::{frame_tensor, Checkpoint, ModelConfig, ModelState};
use crate::optim::{clip_grad_norm, Adam};
use crate::tensor::{Graph, ParamId, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: u64,
    /// Total iterations; a resumed run stops at the same count.
    pub max_iters: u64,
    /// Frames per training sequence `T`.
    pub window: usize,
    pub augment: bool,
    pub seed: u64,
    pub clip_norm: f64,
    /// Worker threads for per-sample gradients. Results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            lr0: 0.001,
            decay: 0.95,
            decay_every: 4000,
            max_iters: 1000,
            window: 9,
            augment: true,
            seed: 0,
            clip_norm: 1.0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(arg(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(arg(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if self.decay_every == 0 {
            return Err(arg("decay_every must be at least 1"));
        }
        if self.batch_size == 0 || self.window == 0 || self.threads == 0 {
            return Err(arg("batch_size, window and threads must be at least 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(arg("clip_norm must be positive"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("batch_size", self.batch_size);
        kv.set("lr0", self.lr0);
        kv.set("decay", self.decay);
        kv.set("decay_every", self.decay_every);
        kv.set("max_iters", self.max_iters);
        kv.set("window", self.window);
        kv.set("augment", self.augment);
        kv.set("seed", self.seed);
        kv.set("clip_norm", self.clip_norm);
        kv.set("threads", self.threads);
        kv
    }

    /// Missing keys keep their defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            lr0: kv.get_or("lr0", d.lr0)?,
            decay: kv.get_or("decay", d.decay)?,
            decay_every: kv.get_or("decay_every", d.decay_every)?,
            max_iters: kv.get_or("max_iters", d.max_iters)?,
            window: kv.get_or("window", d.window)?,
            augment: kv.get_or("augment", d.augment)?,
            seed: kv.get_or("seed", d.seed)?,
            clip_norm: kv.get_or("clip_norm", d.clip_norm)?,
            threads: kv.get_or("threads", d.threads)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `lr0 · decay^⌊iter / decay_every⌋`.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    let k = (iter / cfg.decay_every.max(1)).min(i32::MAX as u64) as i32;
    cfg.lr0 * cfg.decay.powi(k)
}

/// A training sequence: `T` LR frames and their HR targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    lr: Vec<PolarFrame>,
    hr: Vec<PolarFrame>,
}

impl Sample {
    pub fn new(lr: Vec<PolarFrame>, hr: Vec<PolarFrame>) -> Result<Self> {
        if lr.is_empty() || lr.len() != hr.len() {
            return Err(shape(format!(
                "sample needs equal non-zero frame counts, got {} LR and {} HR",
                lr.len(),
                hr.len()
            )));
        }
        let (lw, lh) = (lr[0].width(), lr[0].height());
        let (hw, hh) = (hr[0].width(), hr[0].height());
        if lr.iter().any(|f| !f.same_shape(&lr[0])) || hr.iter().any(|f| !f.same_shape(&hr[0])) {
            return Err(shape("frames within a sample differ in size"));
        }
        if hw % lw != 0 || hw / lw != hh / lh || hh % lh != 0 {
            return Err(shape(format!("HR {hw}x{hh} is not an integer multiple of LR {lw}x{lh}")));
        }
        Ok(Self { lr, hr })
    }

    pub fn lr(&self) -> &[PolarFrame] {
        &self.lr
    }

    pub fn hr(&self) -> &[PolarFrame] {
        &self.hr
    }

    pub fn len(&self) -> usize {
        self.lr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lr.is_empty()
    }

    pub fn scale(&self) -> usize {
        self.hr[0].width() / self.lr[0].width()
    }

    pub fn lr_size(&self) -> (usize, usize) {
        (self.lr[0].width(), self.lr[0].height())
    }

    fn map(&self, f: impl Fn(&PolarFrame) -> PolarFrame) -> Self {
        Self {
            lr: self.lr.iter().map(&f).collect(),
            hr: self.hr.iter().map(&f).collect(),
        }
    }
}

/// Cuts a paired LR/HR recording into non-overlapping `t`-frame samples of
/// `window_us` frames on a shared time axis starting at the earliest event.
/// The last sample is padded with empty frames.
pub fn samples_from_streams(
    lr: &EventStream,
    hr: &EventStream,
    window_us: u64,
    t: usize,
) -> Result<Vec<Sample>> {
    if t == 0 || window_us == 0 {
        return Err(arg("window length and frame count must be at least 1"));
    }
    let (lw, lh, hw, hh) = (lr.width(), lr.height(), hr.width(), hr.height());
    if hw % lw != 0 || hh % lh != 0 || hw / lw != hh / lh {
        return Err(shape(format!("HR {hw}x{hh} is not an integer multiple of LR {lw}x{lh}")));
    }
    let first = [lr.first_timestamp(), hr.first_timestamp()].into_iter().flatten().min();
    let last = [lr.last_timestamp(), hr.last_timestamp()].into_iter().flatten().max();
    let (Some(t0), Some(t1)) = (first, last) else {
        return Ok(Vec::new());
    };
    let frames = ((t1 - t0) / window_us + 1) as usize;
    let count = frames.div_ceil(t);
    (0..count)
        .map(|i| {
            let start = t0 + (i * t) as u64 * window_us;
            Sample::new(
                frame_sequence_from(lr, start, window_us, t)?,
                frame_sequence_from(hr, start, window_us, t)?,
            )
        })
        .collect()
}

/// The three independent coin flips of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentDraw {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub swap_polarity: bool,
}

impl AugmentDraw {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            flip_horizontal: rng.gen_bool(0.5),
            flip_vertical: rng.gen_bool(0.5),
            swap_polarity: rng.gen_bool(0.5),
        }
    }

    /// Applies the drawn transforms to every LR and HR frame alike.
    pub fn apply(self, sample: &Sample) -> Sample {
        sample.map(|f| {
            let mut f = f.clone();
            if self.flip_horizontal {
                f = f.flip_horizontal();
            }
            if self.flip_vertical {
                f = f.flip_vertical();
            }
            if self.swap_polarity {
                f = f.swap_polarity();
            }
            f
        })
    }
}

pub fn augment<R: Rng>(sample: &Sample, rng: &mut R) -> Sample {
    AugmentDraw::sample(rng).apply(sample)
}

/// `Σ_t MSE(sr_t, hr_t)` on the graph.
pub fn loss_window<F: Real>(g: &mut Graph<F>, sr: &[Var], hr: &[Var]) -> Result<Var> {
    if sr.is_empty() || sr.len() != hr.len() {
        return Err(shape(format!(
            "loss needs equal non-zero lengths, got {} and {}",
            sr.len(),
            hr.len()
        )));
    }
    let mut total = g.mse(sr[0], hr[0])?;
    for (&s, &h) in sr.iter().zip(hr).skip(1) {
        let term = g.mse(s, h)?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// [`loss_window`] evaluated directly on frames.
pub fn loss_window_frames(sr: &[PolarFrame], hr: &[PolarFrame]) -> Result<f64> {
    if sr.is_empty() || sr.len() != hr.len() {
        return Err(shape(format!(
            "loss needs equal non-zero lengths, got {} and {}",
            sr.len(),
            hr.len()
        )));
    }
    sr.iter()
        .zip(hr)
        .map(|(a, b)| {
            if !a.same_shape(b) {
                return Err(shape("frame sizes differ"));
            }
            let n = 2 * a.width() * a.height();
            let sq: f64 = a
                .pos()
                .iter()
                .chain(a.neg())
                .zip(b.pos().iter().chain(b.neg()))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            Ok(sq / n as f64)
        })
        .sum()
}

/// Forward, loss and backward for one sequence.
pub fn sample_gradients<F: Real>(
    model: &ModelState<F>,
    sample: &Sample,
) -> Result<(f64, Vec<(ParamId, Tensor<F>)>)> {
    let mut g = Graph::new();
    let inputs: Vec<Var> = sample.lr.iter().map(|f| g.constant(frame_tensor(f))).collect();
    let targets: Vec<Var> = sample.hr.iter().map(|f| g.constant(frame_tensor(f))).collect();
    let outputs = model.forward_sequence(&mut g, &inputs)?;
    let loss = loss_window(&mut g, &outputs, &targets)?;
    let value = g.value(loss).data()[0].as_f64();
    let grads = g.backward(loss)?;
    let list = grads.param_grads().map(|(id, t)| (id, t.clone())).collect();
    Ok((value, list))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    /// 1-based iteration number.
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

pub fn write_loss_csv<W: Write>(out: &mut W, records: &[LossRecord]) -> Result<()> {
    writeln!(out, "iter,lr,loss")?;
    for r in records {
        writeln!(out, "{},{},{}", r.iter, r.lr, r.loss)?;
    }
    Ok(())
}

/// Independent RNG streams keyed by purpose and indices.
fn derive_seed(seed: u64, purpose: u64, a: u64, b: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(mix(seed) ^ purpose) ^ a) ^ b)
}

const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

pub struct Trainer<F> {
    model: ModelState<F>,
    adam: Adam<F>,
    cfg: TrainConfig,
    data: Vec<Sample>,
    order: Option<(u64, Vec<usize>)>,
}

impl<F: Real> Trainer<F> {
    pub fn new(model: ModelState<F>, cfg: TrainConfig, data: Vec<Sample>) -> Result<Self> {
        let adam = Adam::new(model.params());
        Self::with_optimizer(model, adam, cfg, data)
    }

    /// Continues from a checkpoint's parameters, iteration and moments.
    pub fn resume(ckpt: Checkpoint<F>, cfg: TrainConfig, data: Vec<Sample>) -> Result<Self> {
        let adam = match ckpt.optimizer {
            Some(adam) => adam,
            None => Adam::new(ckpt.model.params()),
        };
        Self::with_optimizer(ckpt.model, adam, cfg, data)
    }

    fn with_optimizer(model: ModelState<F>, adam: Adam<F>, cfg: TrainConfig, data: Vec<Sample>) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(arg("training set is empty"));
        }
        let scale = model.config().scale;
        let size = data[0].lr_size();
        for s in &data {
            if s.len() != cfg.window {
                return Err(shape(format!("sample has {} frames, window is {}", s.len(), cfg.window)));
            }
            if s.scale() != scale {
                return Err(shape(format!("sample scale {} differs from model scale {scale}", s.scale())));
            }
            if s.lr_size() != size {
                return Err(shape("samples differ in resolution"));
            }
        }
        Ok(Self {
            model,
            adam,
            cfg,
            data,
            order: None,
        })
    }

    pub fn model(&self) -> &ModelState<F> {
        &self.model
    }

    pub fn into_model(self) -> ModelState<F> {
        self.model
    }

    pub fn iteration(&self) -> u64 {
        self.model.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn checkpoint(&self) -> Checkpoint<F> {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.adam.clone()),
            lr_size: Some(self.data[0].lr_size()),
        }
    }

    fn sample_index(&mut self, position: u64) -> usize {
        let n = self.data.len() as u64;
        let epoch = position / n;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.data.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, SHUFFLE_STREAM, epoch, 0));
            perm.shuffle(&mut rng);
            self.order = Some((epoch, perm));
        }
        self.order.as_ref().unwrap().1[(position % n) as usize]
    }

    /// The sequences of the next batch, augmented when enabled.
    fn next_batch(&mut self) -> Vec<Sample> {
        let iter = self.model.iteration;
        let b = self.cfg.batch_size as u64;
        (0..b)
            .map(|j| {
                let idx = self.sample_index(iter * b + j);
                let sample = &self.data[idx];
                if self.cfg.augment {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, AUGMENT_STREAM, iter, j));
                    augment(sample, &mut rng)
                } else {
                    sample.clone()
                }
            })
            .collect()
    }

    fn batch_gradients(&self, batch: &[Sample]) -> Result<Vec<(f64, Vec<(ParamId, Tensor<F>)>)>> {
        let threads = self.cfg.threads.min(batch.len()).max(1);
        if threads == 1 {
            return batch.iter().map(|s| sample_gradients(&self.model, s)).collect();
        }
        let chunk = batch.len().div_ceil(threads);
        let model = &self.model;
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|s| sample_gradients(model, s))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut out = Vec::with_capacity(batch.len());
            for h in handles {
                out.extend(h.join().expect("gradient worker panicked")?);
            }
            Ok(out)
        })
    }

    /// One optimizer iteration over a mini-batch.
    pub fn step(&mut self) -> Result<LossRecord> {
        let iter = self.model.iteration;
        let lr = lr_at(iter, &self.cfg);
        let batch = self.next_batch();
        let results = self.batch_gradients(&batch)?;
        let inv = 1.0 / batch.len() as f64;
        let loss = results.iter().map(|(l, _)| l).sum::<f64>() * inv;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                iter: iter as usize + 1,
                lr,
                loss,
            });
        }
        let params = self.model.params_mut();
        params.zero_grads();
        for (_, grads) in &results {
            for (id, g) in grads {
                params.get_mut(*id).grad.add_assign(g);
            }
        }
        for p in params.params_mut() {
            for g in p.grad.data_mut() {
                *g = F::of(g.as_f64() * inv);
            }
        }
        let grad_norm = clip_grad_norm(params, self.cfg.clip_norm);
        if grad_norm > self.cfg.clip_norm {
            log::debug!("iter {}: clipped gradient norm {grad_norm:.4}", iter + 1);
        }
        self.adam.step(params, lr)?;
        self.model.iteration += 1;
        Ok(LossRecord {
            iter: iter + 1,
            lr,
            loss,
            grad_norm,
        })
    }

    /// Steps until `max_iters`, calling `on_step` after each iteration.
    pub fn run(&mut self, mut on_step: impl FnMut(&LossRecord, &Self) -> Result<()>) -> Result<Vec<LossRecord>> {
        let mut records = Vec::new();
        while self.model.iteration < self.cfg.max_iters {
            let rec = self.step()?;
            on_step(&rec, self)?;
            records.push(rec);
        }
        Ok(records)
    }
}

/// Trains a fresh `f32` model and returns it with its loss trace.
pub fn train(
    dataset: Vec<Sample>,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
) -> Result<(ModelState<f32>, Vec<LossRecord>)> {
    let model = ModelState::new(model_cfg)?;
    let mut trainer = Trainer::new(model, train_cfg, dataset)?;
    let trace = trainer.run(|_, _| Ok(()))?;
    Ok((trainer.into_model(), trace))
}

#[cfg(test)]
mod tests;
