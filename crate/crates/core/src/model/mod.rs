//! The two-stream super-resolution network.
//!
//! Per time step each polarity gets a spatial sub-stream embedded from its
//! current count map and, in the full variant, a temporal sub-stream
//! embedded from the current and previous maps. Every layer runs one
//! residual block per sub-stream, then the inner exchange (spatial ↔
//! temporal, per polarity), then the inter exchange (positive ↔ negative
//! spatial). Heads read the spatial branches and upsample with a pixel
//! shuffle. Interaction representations leave the last layer and are
//! advanced by a 1×1 convolution and ReLU to seed the next step.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use config::{ModelConfig, Variant};

use crate::bie::{bie_forward, BieIo, BieParams};
use crate::error::{arg, shape, Result};
use crate::event::{PolarFrame, Window};
use crate::nn::{conv_flops, conv_params, Conv, Initializer, ResBlock};
use crate::tensor::{Graph, ParamSet, Real, Tensor, Var};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
struct StreamLayer {
    res_spatial_p: ResBlock,
    res_spatial_n: ResBlock,
    temporal: Option<TemporalLayer>,
    inter: BieParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct TemporalLayer {
    res_temporal_p: ResBlock,
    res_temporal_n: ResBlock,
    inner_p: BieParams,
    inner_n: BieParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Advance {
    inter: Conv,
    inner: Option<(Conv, Conv)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Arch {
    Mixed {
        embed: Conv,
        blocks: Vec<ResBlock>,
        advance: Option<Conv>,
        head: Conv,
    },
    Streams {
        embed_p: Conv,
        embed_n: Conv,
        embed_temporal: Option<(Conv, Conv)>,
        layers: Vec<StreamLayer>,
        advance: Option<Advance>,
        head_p: Conv,
        head_n: Conv,
    },
}

/// Interaction representations carried between layers and time steps.
/// In the mixed variant `inter` holds the recurrent feature state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CirSet {
    pub inter: Var,
    pub inner_p: Option<Var>,
    pub inner_n: Option<Var>,
}

impl CirSet {
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        [Some(self.inter), self.inner_p, self.inner_n].into_iter().flatten()
    }
}

#[derive(Debug, Clone)]
pub struct ModelState<F> {
    config: ModelConfig,
    params: ParamSet<F>,
    arch: Arch,
    pub iteration: u64,
}

impl<F: Real> ModelState<F> {
    /// Declares and initializes every parameter from `config.seed`, with
    /// residual outputs starting silent (see [`quiet_residual_outputs`]).
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut model = Self::new_uniform(config)?;
        quiet_residual_outputs(&mut model.params);
        Ok(model)
    }

    /// Plain fan-in uniform initialization of every weight. All paths reach
    /// the output, which is what gradient verification wants.
    pub fn new_uniform(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let mut init = Initializer::new(config.seed);
        let (c, m, s2) = (config.channels, config.structures, config.scale * config.scale);
        let arch = match config.variant {
            Variant::Mixed => {
                let embed = Conv::declare(&mut ps, &mut init, "embed", 2, c, 3);
                let blocks = (0..config.blocks)
                    .map(|l| ResBlock::declare(&mut ps, &mut init, &format!("layer{l}.res"), c))
                    .collect();
                let advance = config
                    .carry_state
                    .then(|| Conv::declare(&mut ps, &mut init, "advance.state", c, c, 1));
                let head = Conv::declare(&mut ps, &mut init, "head", c, 2 * s2, 3);
                Arch::Mixed {
                    embed,
                    blocks,
                    advance,
                    head,
                }
            }
            Variant::Plain | Variant::Full => {
                let full = config.variant == Variant::Full;
                let embed_p = Conv::declare(&mut ps, &mut init, "embed.spatial_p", 1, c, 3);
                let embed_n = Conv::declare(&mut ps, &mut init, "embed.spatial_n", 1, c, 3);
                let embed_temporal = full.then(|| {
                    (
                        Conv::declare(&mut ps, &mut init, "embed.temporal_p", 2, c, 3),
                        Conv::declare(&mut ps, &mut init, "embed.temporal_n", 2, c, 3),
                    )
                });
                let layers = (0..config.blocks)
                    .map(|l| {
                        let name = |s: &str| format!("layer{l}.{s}");
                        let res_spatial_p = ResBlock::declare(&mut ps, &mut init, &name("res_spatial_p"), c);
                        let res_spatial_n = ResBlock::declare(&mut ps, &mut init, &name("res_spatial_n"), c);
                        let temporal = full.then(|| TemporalLayer {
                            res_temporal_p: ResBlock::declare(&mut ps, &mut init, &name("res_temporal_p"), c),
                            res_temporal_n: ResBlock::declare(&mut ps, &mut init, &name("res_temporal_n"), c),
                            inner_p: BieParams::declare(&mut ps, &mut init, &name("inner_p"), c, m),
                            inner_n: BieParams::declare(&mut ps, &mut init, &name("inner_n"), c, m),
                        });
                        let inter = BieParams::declare(&mut ps, &mut init, &name("inter"), c, m);
                        StreamLayer {
                            res_spatial_p,
                            res_spatial_n,
                            temporal,
                            inter,
                        }
                    })
                    .collect();
                let advance = config.carry_state.then(|| Advance {
                    inter: Conv::declare(&mut ps, &mut init, "advance.inter", c, c, 1),
                    inner: full.then(|| {
                        (
                            Conv::declare(&mut ps, &mut init, "advance.inner_p", c, c, 1),
                            Conv::declare(&mut ps, &mut init, "advance.inner_n", c, c, 1),
                        )
                    }),
                });
                let head_p = Conv::declare(&mut ps, &mut init, "head_p", c, s2, 3);
                let head_n = Conv::declare(&mut ps, &mut init, "head_n", c, s2, 3);
                Arch::Streams {
                    embed_p,
                    embed_n,
                    embed_temporal,
                    layers,
                    advance,
                    head_p,
                    head_n,
                }
            }
        };
        Ok(Self {
            config,
            params: ps,
            arch,
            iteration: 0,
        })
    }

    /// Adds `U(-amplitude, amplitude)` noise to every parameter. Verification
    /// uses this to move off the initialization, where residual outputs
    /// are zero and some paths do not yet reach the output.
    pub fn jitter(&mut self, seed: u64, amplitude: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params.params_mut() {
            for v in p.value.data_mut() {
                *v = F::of(v.as_f64() + rng.gen_range(-amplitude..amplitude));
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    /// Total trainable elements.
    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    /// Same model at another precision.
    pub fn cast<G: Real>(&self) -> ModelState<G> {
        ModelState {
            config: self.config.clone(),
            params: self.params.cast(),
            arch: self.arch.clone(),
            iteration: self.iteration,
        }
    }

    /// Zero-filled representations for a `height × width` input.
    pub fn zero_cir(&self, g: &mut Graph<F>, height: usize, width: usize) -> CirSet {
        let shape = [1, self.config.channels, height, width];
        let inner = self.config.variant == Variant::Full;
        CirSet {
            inter: g.constant(Tensor::zeros(&shape)),
            inner_p: inner.then(|| g.constant(Tensor::zeros(&shape))),
            inner_n: inner.then(|| g.constant(Tensor::zeros(&shape))),
        }
    }

    /// One time step on `[1, 2, H, W]` inputs (channel 0 positive, 1
    /// negative). Returns the `[1, 2, S·H, S·W]` prediction and the
    /// last-layer representations.
    pub fn forward_step(
        &self,
        g: &mut Graph<F>,
        current: Var,
        previous: Var,
        cir: &CirSet,
    ) -> Result<(Var, CirSet)> {
        self.forward_step_with(g, &self.params, current, previous, cir)
    }

    /// [`Self::forward_step`] reading weights from `ps`, which must share
    /// this model's layout.
    pub fn forward_step_with(
        &self,
        g: &mut Graph<F>,
        ps: &ParamSet<F>,
        current: Var,
        previous: Var,
        cir: &CirSet,
    ) -> Result<(Var, CirSet)> {
        let [b, ch, h, w] = g.value(current).dims4()?;
        if b != 1 || ch != 2 {
            return Err(shape(format!("expected a [1, 2, H, W] frame, got {:?}", g.shape_of(current))));
        }
        if g.shape_of(previous) != g.shape_of(current) {
            return Err(shape("previous and current frames differ in shape"));
        }
        let state_shape = [1, self.config.channels, h, w];
        for v in cir.vars() {
            if g.shape_of(v) != state_shape {
                return Err(shape(format!(
                    "interaction state {:?} does not match {:?}",
                    g.shape_of(v),
                    state_shape
                )));
            }
        }
        let s = self.config.scale;
        let mode = self.config.scale_mode;

        match &self.arch {
            Arch::Mixed {
                embed, blocks, head, ..
            } => {
                let x = embed.apply(g, ps, current)?;
                let mut x = g.add(x, cir.inter)?;
                for block in blocks {
                    x = block.apply(g, ps, x)?;
                }
                let up = head.apply(g, ps, x)?;
                let up = g.pixel_shuffle(up, s)?;
                let sr = g.relu(up);
                Ok((
                    sr,
                    CirSet {
                        inter: x,
                        inner_p: None,
                        inner_n: None,
                    },
                ))
            }
            Arch::Streams {
                embed_p,
                embed_n,
                embed_temporal,
                layers,
                head_p,
                head_n,
                ..
            } => {
                let pos = g.slice_channels(current, 0, 1)?;
                let neg = g.slice_channels(current, 1, 1)?;
                let mut sp = embed_p.apply(g, ps, pos)?;
                let mut sn = embed_n.apply(g, ps, neg)?;
                let mut temporal = match embed_temporal {
                    Some((etp, etn)) => {
                        let prev_pos = g.slice_channels(previous, 0, 1)?;
                        let prev_neg = g.slice_channels(previous, 1, 1)?;
                        let xp = g.concat_channels(&[pos, prev_pos])?;
                        let xn = g.concat_channels(&[neg, prev_neg])?;
                        Some((etp.apply(g, ps, xp)?, etn.apply(g, ps, xn)?))
                    }
                    None => None,
                };
                let mut inter = cir.inter;
                let mut inner = match (cir.inner_p, cir.inner_n) {
                    (Some(p), Some(n)) => Some((p, n)),
                    _ => None,
                };
                if temporal.is_some() != inner.is_some() {
                    return Err(shape("inner interaction states required by the full variant"));
                }

                for layer in layers {
                    sp = layer.res_spatial_p.apply(g, ps, sp)?;
                    sn = layer.res_spatial_n.apply(g, ps, sn)?;
                    if let (Some(tl), Some((tp, tn)), Some((ip, inn))) =
                        (&layer.temporal, temporal, inner)
                    {
                        let tp = tl.res_temporal_p.apply(g, ps, tp)?;
                        let tn = tl.res_temporal_n.apply(g, ps, tn)?;
                        let (op, _) = bie_forward(g, ps, &tl.inner_p, BieIo { h_a: sp, h_b: tp, h_int: ip }, mode)?;
                        let (on, _) = bie_forward(g, ps, &tl.inner_n, BieIo { h_a: sn, h_b: tn, h_int: inn }, mode)?;
                        sp = op.h_a;
                        sn = on.h_a;
                        temporal = Some((op.h_b, on.h_b));
                        inner = Some((op.h_int, on.h_int));
                    }
                    let (out, _) = bie_forward(g, ps, &layer.inter, BieIo { h_a: sp, h_b: sn, h_int: inter }, mode)?;
                    sp = out.h_a;
                    sn = out.h_b;
                    inter = out.h_int;
                }

                let up_p = head_p.apply(g, ps, sp)?;
                let up_p = g.pixel_shuffle(up_p, s)?;
                let up_n = head_n.apply(g, ps, sn)?;
                let up_n = g.pixel_shuffle(up_n, s)?;
                let up = g.concat_channels(&[up_p, up_n])?;
                let sr = g.relu(up);
                Ok((
                    sr,
                    CirSet {
                        inter,
                        inner_p: inner.map(|(p, _)| p),
                        inner_n: inner.map(|(_, n)| n),
                    },
                ))
            }
        }
    }

    /// Seeds the next step: `ReLU(Conv1x1(h))` per representation, or
    /// zeros when state carrying is disabled.
    pub fn advance_cir(&self, g: &mut Graph<F>, cir: &CirSet) -> Result<CirSet> {
        self.advance_cir_with(g, &self.params, cir)
    }

    pub fn advance_cir_with(&self, g: &mut Graph<F>, ps: &ParamSet<F>, cir: &CirSet) -> Result<CirSet> {
        let advance = |g: &mut Graph<F>, conv: &Conv, v: Var| -> Result<Var> {
            let x = conv.apply(g, ps, v)?;
            Ok(g.relu(x))
        };
        match &self.arch {
            Arch::Mixed {
                advance: Some(conv),
                ..
            } => Ok(CirSet {
                inter: advance(g, conv, cir.inter)?,
                inner_p: None,
                inner_n: None,
            }),
            Arch::Streams {
                advance: Some(adv), ..
            } => {
                let inter = advance(g, &adv.inter, cir.inter)?;
                let (inner_p, inner_n) = match (&adv.inner, cir.inner_p, cir.inner_n) {
                    (Some((cp, cn)), Some(p), Some(n)) => {
                        (Some(advance(g, cp, p)?), Some(advance(g, cn, n)?))
                    }
                    _ => (None, None),
                };
                Ok(CirSet {
                    inter,
                    inner_p,
                    inner_n,
                })
            }
            _ => {
                let [_, _, h, w] = g.value(cir.inter).dims4()?;
                Ok(self.zero_cir(g, h, w))
            }
        }
    }

    /// Runs the recurrence over `frames` (each `[1, 2, H, W]`), starting
    /// from zero state and a zero previous frame.
    pub fn forward_sequence(&self, g: &mut Graph<F>, frames: &[Var]) -> Result<Vec<Var>> {
        self.forward_sequence_with(g, &self.params, frames)
    }

    pub fn forward_sequence_with(&self, g: &mut Graph<F>, ps: &ParamSet<F>, frames: &[Var]) -> Result<Vec<Var>> {
        if ps.len() != self.params.len() {
            return Err(shape("parameter set does not match the model layout"));
        }
        let first = *frames.first().ok_or_else(|| arg("empty frame sequence"))?;
        let [_, _, h, w] = g.value(first).dims4()?;
        let mut cir = self.zero_cir(g, h, w);
        let mut previous = g.constant(Tensor::zeros(&[1, 2, h, w]));
        let mut out = Vec::with_capacity(frames.len());
        for (t, &frame) in frames.iter().enumerate() {
            let (sr, last) = self.forward_step_with(g, ps, frame, previous, &cir)?;
            out.push(sr);
            if t + 1 < frames.len() {
                cir = self.advance_cir_with(g, ps, &last)?;
            }
            previous = frame;
        }
        Ok(out)
    }

    /// Super-resolves a frame sequence; output windows copy the inputs'.
    pub fn infer(&self, frames: &[PolarFrame]) -> Result<Vec<PolarFrame>> {
        let mut g = Graph::new();
        let inputs = frames
            .iter()
            .map(|f| g.constant(frame_tensor(f)))
            .collect::<Vec<_>>();
        if let Some(f) = frames.iter().find(|f| !f.same_shape(&frames[0])) {
            return Err(shape(format!(
                "frame {}x{} differs from {}x{}",
                f.width(),
                f.height(),
                frames[0].width(),
                frames[0].height()
            )));
        }
        let out = self.forward_sequence(&mut g, &inputs)?;
        out.iter()
            .zip(frames)
            .map(|(&v, f)| tensor_frame(g.value(v), f.window()))
            .collect()
    }
}

/// Residual-branch outputs start silent so every block begins as an
/// identity and the exchange adds nothing until trained: the second conv of
/// each residual block and each BIE output projection are zeroed, and the
/// heads are scaled by 0.1. With raw-count inputs the plain uniform
/// initialization produces outputs large enough that early updates drive
/// the final ReLU dead.
fn quiet_residual_outputs<F: Real>(ps: &mut ParamSet<F>) {
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let name = ps.name(id);
        let factor = if name.ends_with(".conv2.weight") || name.ends_with(".out_proj.weight") {
            0.0
        } else if name.starts_with("head") && name.ends_with(".weight") {
            0.1
        } else {
            continue;
        };
        for v in ps.get_mut(id).value.data_mut() {
            *v = F::of(v.as_f64() * factor);
        }
    }
}

/// `[1, 2, H, W]` tensor of a frame, positive channel first.
pub fn frame_tensor<F: Real>(frame: &PolarFrame) -> Tensor<F> {
    let data = frame
        .pos()
        .iter()
        .chain(frame.neg())
        .map(|&v| F::of(v))
        .collect();
    Tensor::new(vec![1, 2, frame.height(), frame.width()], data).expect("frame maps are non-empty")
}

/// Inverse of [`frame_tensor`]; negative values are clamped to zero.
pub fn tensor_frame<F: Real>(t: &Tensor<F>, window: Window) -> Result<PolarFrame> {
    let [b, c, h, w] = t.dims4()?;
    if b != 1 || c != 2 {
        return Err(shape(format!("expected [1, 2, H, W], got {:?}", t.shape())));
    }
    let plane = h * w;
    let vals: Vec<f64> = t.data().iter().map(|v| v.as_f64().max(0.0)).collect();
    PolarFrame::from_maps(w, h, vals[..plane].to_vec(), vals[plane..].to_vec(), window)
}

/// Per-step FLOPs on an `h × w` input: 2 per multiply-add in every
/// convolution plus `2·M²·HW` per attention product.
pub fn estimate_flops(config: &ModelConfig, h: usize, w: usize) -> u64 {
    let (c, m, s2) = (config.channels, config.structures, config.scale * config.scale);
    let conv = |ci, co, k| conv_flops(ci, co, k, h, w);
    let res = 2 * conv(c, c, 3);
    let n = config.blocks as u64;
    match config.variant {
        Variant::Mixed => {
            conv(2, c, 3)
                + n * res
                + if config.carry_state { conv(c, c, 1) } else { 0 }
                + conv(c, 2 * s2, 3)
        }
        Variant::Plain | Variant::Full => {
            let full = config.variant == Variant::Full;
            let streams: u64 = if full { 4 } else { 2 };
            let exchanges: u64 = if full { 3 } else { 1 };
            let embeds = 2 * conv(1, c, 3) + if full { 2 * conv(2, c, 3) } else { 0 };
            let layer = streams * res + exchanges * BieParams::flops(c, m, h, w);
            let advance = if config.carry_state { exchanges * conv(c, c, 1) } else { 0 };
            embeds + n * layer + advance + 2 * conv(c, s2, 3)
        }
    }
}

/// Closed-form parameter count, matching [`ModelState::count_params`].
pub fn param_count_formula(config: &ModelConfig) -> usize {
    let (c, m, s2) = (config.channels, config.structures, config.scale * config.scale);
    let res = 2 * conv_params(c, c, 3);
    let n = config.blocks;
    match config.variant {
        Variant::Mixed => {
            conv_params(2, c, 3)
                + n * res
                + if config.carry_state { conv_params(c, c, 1) } else { 0 }
                + conv_params(c, 2 * s2, 3)
        }
        Variant::Plain | Variant::Full => {
            let full = config.variant == Variant::Full;
            let (streams, exchanges) = if full { (4, 3) } else { (2, 1) };
            let embeds = 2 * conv_params(1, c, 3) + if full { 2 * conv_params(2, c, 3) } else { 0 };
            let layer = streams * res + exchanges * BieParams::param_count(c, m);
            let advance = if config.carry_state { exchanges * conv_params(c, c, 1) } else { 0 };
            embeds + n * layer + advance + 2 * conv_params(c, s2, 3)
        }
    }
}

#[cfg(test)]
mod tests;
