//! Runtime verification: the 64-bit gradient suite and the invariant
//! families behind `gradcheck` and `selftest`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bie::{bie_forward, bie_swap_symmetry_check, BieIo, BieParams, ScaleMode};
use crate::error::Result;
use crate::event::{
    count_image, decouple, merge, parse_event_file, resample, write_event_file, Event, EventStream,
    PolarFrame, Polarity, Window,
};
use crate::kv::KeyValues;
use crate::model::{frame_tensor, tensor_frame, Checkpoint, ModelConfig, ModelState, Variant};
use crate::nn::Initializer;
use crate::sim::{simulate_events, IntensityFrame, SimParams};
use crate::tensor::{grad_check, read_tensor, write_tensor, Graph, ParamSet, Tensor, Var};
use crate::train::{loss_window, AugmentDraw, Sample};

/// Relative-error bound of the gradient suite.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GRAD_STEP: f64 = 1e-5;
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_err: f64,
    pub coords: usize,
    pub worst: Option<(String, usize)>,
}

#[derive(Debug, Clone)]
pub struct GradSuiteReport {
    pub cases: Vec<GradCase>,
    pub elapsed: Duration,
}

impl GradSuiteReport {
    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_err <= GRAD_TOLERANCE)
    }

    pub fn first_failure(&self) -> Option<&GradCase> {
        self.cases.iter().find(|c| c.max_rel_err > GRAD_TOLERANCE)
    }
}

type Build = fn(&mut Graph<f64>, &ParamSet<f64>, &Ctx) -> Result<Var>;

/// Fixed tensors a case reads besides its parameters.
struct Ctx {
    weights: Vec<Tensor<f64>>,
    bie: Option<BieParams>,
    model: Option<ModelState<f64>>,
}

impl Ctx {
    /// Contracts `out` with a fixed random tensor so every output element
    /// contributes a distinct weight.
    fn project(&self, g: &mut Graph<f64>, out: Var, which: usize) -> Result<Var> {
        let w = g.constant(self.weights[which].clone());
        let p = g.mul(out, w)?;
        Ok(g.sum(p))
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so the ReLU kink sits outside `±h`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn p(g: &mut Graph<f64>, ps: &ParamSet<f64>, name: &str) -> Var {
    g.param(ps, ps.find(name).expect("declared case parameter"))
}

struct Case {
    name: &'static str,
    setup: fn(&mut ChaCha8Rng, u64) -> (ParamSet<f64>, Ctx),
    build: Build,
}

fn plain(params: &[(&str, Tensor<f64>)], weights: Vec<Tensor<f64>>) -> (ParamSet<f64>, Ctx) {
    let mut ps = ParamSet::new();
    for (n, t) in params {
        ps.add(*n, t.clone());
    }
    (
        ps,
        Ctx {
            weights,
            bie: None,
            model: None,
        },
    )
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "conv2d",
            setup: |r, _| {
                plain(
                    &[
                        ("x", random(r, &[2, 3, 4, 5])),
                        ("w", random(r, &[2, 3, 3, 3])),
                        ("b", random(r, &[2])),
                    ],
                    vec![random(r, &[2, 2, 4, 5])],
                )
            },
            build: |g, ps, c| {
                let (x, w, b) = (p(g, ps, "x"), p(g, ps, "w"), p(g, ps, "b"));
                let y = g.conv2d(x, w, Some(b))?;
                c.project(g, y, 0)
            },
        },
        Case {
            name: "relu",
            setup: |r, _| plain(&[("x", away_from_zero(r, &[3, 4]))], vec![random(r, &[3, 4])]),
            build: |g, ps, c| {
                let x = p(g, ps, "x");
                let y = g.relu(x);
                c.project(g, y, 0)
            },
        },
        Case {
            name: "sigmoid",
            setup: |r, _| plain(&[("x", random(r, &[3, 4]).map(|v| 3.0 * v))], vec![random(r, &[3, 4])]),
            build: |g, ps, c| {
                let x = p(g, ps, "x");
                let y = g.sigmoid(x);
                c.project(g, y, 0)
            },
        },
        Case {
            name: "softmax_lastdim",
            setup: |r, _| plain(&[("x", random(r, &[2, 3, 4]).map(|v| 2.0 * v))], vec![random(r, &[2, 3, 4])]),
            build: |g, ps, c| {
                let x = p(g, ps, "x");
                let y = g.softmax_lastdim(x);
                c.project(g, y, 0)
            },
        },
        Case {
            name: "layer_norm_channels",
            setup: |r, _| {
                plain(
                    &[
                        ("x", random(r, &[2, 4, 2, 3])),
                        ("gamma", random(r, &[4])),
                        ("beta", random(r, &[4])),
                    ],
                    vec![random(r, &[2, 4, 2, 3])],
                )
            },
            build: |g, ps, c| {
                let (x, ga, be) = (p(g, ps, "x"), p(g, ps, "gamma"), p(g, ps, "beta"));
                let y = g.layer_norm_channels(x, ga, be)?;
                c.project(g, y, 0)
            },
        },
        Case {
            name: "matmul+transpose",
            setup: |r, _| {
                plain(
                    &[("a", random(r, &[2, 3, 4])), ("b", random(r, &[2, 5, 4]))],
                    vec![random(r, &[2, 3, 5])],
                )
            },
            build: |g, ps, c| {
                let (a, b) = (p(g, ps, "a"), p(g, ps, "b"));
                let bt = g.transpose_last2(b)?;
                let y = g.matmul(a, bt)?;
                c.project(g, y, 0)
            },
        },
        Case {
            name: "concat+slice+reshape",
            setup: |r, _| {
                plain(
                    &[("a", random(r, &[1, 2, 3, 3])), ("b", random(r, &[1, 3, 3, 3]))],
                    vec![random(r, &[1, 3, 9])],
                )
            },
            build: |g, ps, c| {
                let (a, b) = (p(g, ps, "a"), p(g, ps, "b"));
                let cat = g.concat_channels(&[a, b])?;
                let mid = g.slice_channels(cat, 1, 3)?;
                let flat = g.reshape(mid, &[1, 3, 9])?;
                c.project(g, flat, 0)
            },
        },
        Case {
            name: "add+sub+mul+scale",
            setup: |r, _| {
                plain(
                    &[("a", random(r, &[2, 3])), ("b", random(r, &[2, 3])), ("c", random(r, &[2, 3]))],
                    vec![random(r, &[2, 3])],
                )
            },
            build: |g, ps, ctx| {
                let (a, b, c) = (p(g, ps, "a"), p(g, ps, "b"), p(g, ps, "c"));
                let s = g.add(a, b)?;
                let d = g.sub(s, c)?;
                let m = g.mul(d, a)?;
                let y = g.scale(m, 1.7);
                ctx.project(g, y, 0)
            },
        },
        Case {
            name: "bias_add",
            setup: |r, _| {
                plain(
                    &[("x", random(r, &[2, 3, 2, 2])), ("b", random(r, &[3]))],
                    vec![random(r, &[2, 3, 2, 2])],
                )
            },
            build: |g, ps, c| {
                let (x, b) = (p(g, ps, "x"), p(g, ps, "b"));
                let y = g.bias_add(x, b)?;
                c.project(g, y, 0)
            },
        },
        Case {
            name: "pixel_shuffle+unshuffle",
            setup: |r, _| {
                plain(
                    &[("x", random(r, &[1, 8, 2, 3])), ("y", random(r, &[1, 1, 4, 6]))],
                    vec![random(r, &[1, 2, 4, 6]), random(r, &[1, 4, 2, 3])],
                )
            },
            build: |g, ps, c| {
                let (x, y) = (p(g, ps, "x"), p(g, ps, "y"));
                let up = g.pixel_shuffle(x, 2)?;
                let down = g.pixel_unshuffle(y, 2)?;
                let a = c.project(g, up, 0)?;
                let b = c.project(g, down, 1)?;
                g.add(a, b)
            },
        },
        Case {
            name: "gate_mix",
            setup: |r, _| {
                plain(
                    &[
                        ("z", random(r, &[2, 5]).map(|v| 0.5 + 0.4 * v)),
                        ("a", random(r, &[2, 5])),
                        ("b", random(r, &[2, 5])),
                    ],
                    vec![random(r, &[2, 5])],
                )
            },
            build: |g, ps, c| {
                let (z, a, b) = (p(g, ps, "z"), p(g, ps, "a"), p(g, ps, "b"));
                let y = g.gate_mix(z, a, b)?;
                c.project(g, y, 0)
            },
        },
        Case {
            name: "mse+sum+sum_squares",
            setup: |r, _| plain(&[("a", random(r, &[3, 4])), ("b", random(r, &[3, 4]))], vec![]),
            build: |g, ps, _| {
                let (a, b) = (p(g, ps, "a"), p(g, ps, "b"));
                let m = g.mse(a, b)?;
                let s = g.sum(a);
                let q = g.sum_squares(b);
                let t = g.add(m, s)?;
                g.add(t, q)
            },
        },
        Case {
            name: "bie_block",
            setup: |r, seed| {
                let mut ps = ParamSet::new();
                let mut init = Initializer::new(seed);
                let bie = BieParams::declare(&mut ps, &mut init, "bie", 4, 3);
                let s = [1, 4, 3, 3];
                ps.add("h_a", random(r, &s));
                ps.add("h_b", random(r, &s));
                ps.add("h_int", random(r, &s));
                let weights = (0..3).map(|_| random(r, &s)).collect();
                (
                    ps,
                    Ctx {
                        weights,
                        bie: Some(bie),
                        model: None,
                    },
                )
            },
            build: |g, ps, c| {
                let io = BieIo {
                    h_a: p(g, ps, "h_a"),
                    h_b: p(g, ps, "h_b"),
                    h_int: p(g, ps, "h_int"),
                };
                let bie = c.bie.as_ref().expect("bie case");
                let (out, _) = bie_forward(g, ps, bie, io, ScaleMode::Eq2)?;
                let a = c.project(g, out.h_a, 0)?;
                let b = c.project(g, out.h_b, 1)?;
                let i = c.project(g, out.h_int, 2)?;
                let ab = g.add(a, b)?;
                g.add(ab, i)
            },
        },
        Case {
            name: "loss_window(forward_sequence)",
            setup: |r, seed| {
                let mut cfg = ModelConfig::toy(Variant::Full, 4, 1, 4, 2, 2);
                cfg.seed = seed;
                let model = ModelState::<f64>::new_uniform(cfg).expect("toy config is valid");
                let ps = model.params().clone();
                // two input frames then two targets, all counts in {0, 0.5, 1}
                let weights = [5usize, 5, 10, 10]
                    .iter()
                    .map(|&n| Tensor::from_fn(&[1, 2, n, n], |_| 0.5 * r.gen_range(0..3) as f64))
                    .collect();
                (
                    ps,
                    Ctx {
                        weights,
                        bie: None,
                        model: Some(model),
                    },
                )
            },
            build: |g, ps, c| {
                let model = c.model.as_ref().expect("model case");
                let frames: Vec<Var> = c.weights[..2].iter().map(|t| g.constant(t.clone())).collect();
                let targets: Vec<Var> = c.weights[2..].iter().map(|t| g.constant(t.clone())).collect();
                let out = model.forward_sequence_with(g, ps, &frames)?;
                loss_window(g, &out, &targets)
            },
        },
    ]
}

/// Names of every gradient case, in run order.
pub fn gradient_case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Central-difference checks of every differentiable op, the full BIE
/// block and the windowed loss through the recurrent model.
pub fn gradient_suite(seeds: &[u64]) -> Result<GradSuiteReport> {
    let start = Instant::now();
    let mut out = Vec::new();
    for &seed in seeds {
        for case in cases() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(17));
            let (mut ps, ctx) = (case.setup)(&mut rng, seed);
            let report = grad_check(&mut ps, GRAD_STEP, |g, ps| (case.build)(g, ps, &ctx))?;
            out.push(GradCase {
                name: case.name,
                seed,
                max_rel_err: report.max_rel_err,
                coords: report.coords,
                worst: report.worst,
            });
        }
    }
    Ok(GradSuiteReport {
        cases: out,
        elapsed: start.elapsed(),
    })
}

/// Outcome of one invariant family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FamilyOutcome {
    pub name: &'static str,
    /// The first failed assertion, if any.
    pub failure: Option<String>,
}

impl FamilyOutcome {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

type Check = std::result::Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

const FAMILY_SEEDS: u64 = 16;

fn random_stream(rng: &mut ChaCha8Rng, w: u32, h: u32, n: usize) -> EventStream {
    let events = (0..n)
        .map(|_| {
            let p = if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
            Event::new(rng.gen_range(0..w), rng.gen_range(0..h), rng.gen_range(0..1000), p)
        })
        .collect();
    EventStream::new(w, h, events).expect("events drawn inside the sensor")
}

fn random_counts(rng: &mut ChaCha8Rng, w: usize, h: usize, max: u32) -> PolarFrame {
    let mut map = || (0..w * h).map(|_| rng.gen_range(0..=max) as f64).collect::<Vec<_>>();
    let (pos, neg) = (map(), map());
    PolarFrame::from_maps(w, h, pos, neg, Window::new(100, 1100).expect("valid window")).expect("counts")
}

fn decouple_merge() -> Check {
    for seed in 0..FAMILY_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(0..60);
        let s = random_stream(&mut rng, 6, 5, n);
        let (pos, neg) = decouple(&s);
        ensure!(pos.len() + neg.len() == s.len(), "decouple lost events (seed {seed})");
        ensure!(
            pos.events().iter().all(|e| e.p == Polarity::Positive)
                && neg.events().iter().all(|e| e.p == Polarity::Negative),
            "decouple mixed polarities (seed {seed})"
        );
        let back = ok(merge(&pos, &neg))?;
        let mut want = s.events().to_vec();
        let mut got = back.events().to_vec();
        let key = |e: &Event| (e.t, e.y, e.x, e.p.sign());
        want.sort_by_key(key);
        got.sort_by_key(key);
        ensure!(want == got, "merge(decouple(s)) differs from s (seed {seed})");
    }
    Ok(())
}

fn count_conservation() -> Check {
    for seed in 0..FAMILY_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let s = random_stream(&mut rng, 4, 4, 80);
        let start = rng.gen_range(0..500);
        let window = ok(Window::new(start, start + rng.gen_range(1..500)))?;
        let f = ok(count_image(&s, window, (4, 4)))?;
        let direct = s.events().iter().filter(|e| e.t >= window.start && e.t < window.end).count();
        ensure!(f.total() as usize == direct, "count image total {} != {direct} (seed {seed})", f.total());
    }
    Ok(())
}

fn resample_round_trip() -> Check {
    for seed in 0..FAMILY_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let f = random_counts(&mut rng, 5, 3, 4);
        let s = resample(&f);
        let back = ok(count_image(&s, f.window(), (5, 3)))?;
        ensure!(back == f, "count_image(resample(f)) != f (seed {seed})");
    }
    Ok(())
}

fn pixel_shuffle_bijective() -> Check {
    for seed in 0..FAMILY_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let r = rng.gen_range(1..4);
        let x = random(&mut rng, &[1, 2 * r * r, 3, 2]);
        let mut g = Graph::<f64>::new();
        let v = g.constant(x.clone());
        let up = ok(g.pixel_shuffle(v, r))?;
        let down = ok(g.pixel_unshuffle(up, r))?;
        ensure!(g.value(down) == &x, "unshuffle(shuffle(x)) != x (r {r})");
        let mut a = x.data().to_vec();
        let mut b = g.value(up).data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        ensure!(a == b, "pixel shuffle is not a permutation (r {r})");
    }
    Ok(())
}

fn softmax_rows() -> Check {
    for seed in 0..FAMILY_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let x = random(&mut rng, &[3, 7]).map(|v| 20.0 * v);
        let mut g = Graph::<f64>::new();
        let v = g.constant(x);
        let s = g.softmax_lastdim(v);
        for row in g.value(s).data().chunks(7) {
            let sum: f64 = row.iter().sum();
            ensure!((sum - 1.0).abs() <= 1e-6, "softmax row sums to {sum}");
            ensure!(row.iter().all(|&p| p >= 0.0), "negative softmax entry");
        }
    }
    Ok(())
}

fn bie_setup(seed: u64, c: usize, m: usize) -> (ParamSet<f64>, BieParams) {
    let mut ps = ParamSet::new();
    let mut init = Initializer::new(seed);
    let p = BieParams::declare(&mut ps, &mut init, "bie", c, m);
    (ps, p)
}

fn attention_convexity() -> Check {
    for seed in 0..FAMILY_SEEDS {
        let (ps, p) = bie_setup(seed, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let s = [1, 2, 2, 2];
        let mut g = Graph::new();
        let io = BieIo {
            h_a: g.constant(random(&mut rng, &s)),
            h_b: g.constant(random(&mut rng, &s)),
            h_int: g.constant(random(&mut rng, &s)),
        };
        let (_, trace) = ok(bie_forward(&mut g, &ps, &p, io, ScaleMode::Eq2))?;
        for t in [trace.into_a, trace.into_b] {
            let a = g.value(t.attention).data();
            let v = g.value(t.values).data();
            let mixed = g.value(t.mixed).data();
            let (m, hw) = (2, 4);
            for i in 0..m {
                for j in 0..hw {
                    let col: Vec<f64> = (0..m).map(|r| v[r * hw + j]).collect();
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let oracle: f64 = (0..m).map(|r| a[i * m + r] * col[r]).sum();
                    let x = mixed[i * hw + j];
                    ensure!((x - oracle).abs() <= 1e-6, "attention mix {x} vs oracle {oracle}");
                    ensure!(x >= lo - 1e-6 && x <= hi + 1e-6, "attention mix {x} outside [{lo}, {hi}]");
                }
            }
        }
    }
    Ok(())
}

fn gate_betweenness() -> Check {
    for seed in 0..FAMILY_SEEDS {
        let (ps, p) = bie_setup(seed, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let s = [1, 4, 3, 3];
        let mut g = Graph::new();
        let io = BieIo {
            h_a: g.constant(random(&mut rng, &s)),
            h_b: g.constant(random(&mut rng, &s)),
            h_int: g.constant(random(&mut rng, &s)),
        };
        let (out, trace) = ok(bie_forward(&mut g, &ps, &p, io, ScaleMode::Eq2))?;
        for (o, t) in [(out.h_a, trace.into_a), (out.h_b, trace.into_b)] {
            let r = g.value(t.residual).data();
            let e = g.value(t.exchanged).data();
            for (i, &v) in g.value(o).data().iter().enumerate() {
                let (lo, hi) = (r[i].min(e[i]), r[i].max(e[i]));
                ensure!(v >= lo - 1e-6 && v <= hi + 1e-6, "gated output {v} outside [{lo}, {hi}]");
            }
        }
    }
    Ok(())
}

fn swap_symmetry() -> Check {
    for seed in 0..FAMILY_SEEDS {
        let (ps, p) = bie_setup(seed, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let s = [1, 4, 2, 3];
        let (a, b, i) = (random(&mut rng, &s), random(&mut rng, &s), random(&mut rng, &s));
        for mode in [ScaleMode::Eq2, ScaleMode::Pseudocode] {
            ensure!(
                ok(bie_swap_symmetry_check(&ps, &p, &a, &b, &i, mode))?,
                "BIE swap symmetry broken (seed {seed}, {})",
                mode.as_str()
            );
        }
    }
    Ok(())
}

fn toy_frames(rng: &mut ChaCha8Rng, n: usize) -> Vec<PolarFrame> {
    (0..n).map(|_| random_counts(rng, 4, 4, 3)).collect()
}

fn cir_zero_init() -> Check {
    for variant in [Variant::Mixed, Variant::Plain, Variant::Full] {
        let mut model = ok(ModelState::<f64>::new(ModelConfig::toy(variant, 4, 1, 4, 2, 3)))?;
        model.jitter(7, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(800);
        let a = toy_frames(&mut rng, 3);
        let mut b = toy_frames(&mut rng, 3);
        b[0] = a[0].clone();
        let out_a = ok(model.infer(&a))?;
        let out_b = ok(model.infer(&b))?;
        let alone = ok(model.infer(&a[..1]))?;
        ensure!(out_a[0] == out_b[0] && out_a[0] == alone[0], "first step depends on history ({variant})");
    }
    Ok(())
}

fn carry_off_factorization() -> Check {
    for variant in [Variant::Mixed, Variant::Plain, Variant::Full] {
        let mut cfg = ModelConfig::toy(variant, 4, 1, 4, 2, 3);
        cfg.carry_state = false;
        let mut model = ok(ModelState::<f64>::new(cfg))?;
        model.jitter(8, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(900);
        let frames = toy_frames(&mut rng, 3);
        let seq = ok(model.infer(&frames))?;
        let mut g = Graph::new();
        for t in 0..frames.len() {
            let cur = g.constant(frame_tensor(&frames[t]));
            let prev = match t {
                0 => g.constant(Tensor::zeros(&[1, 2, 4, 4])),
                _ => g.constant(frame_tensor(&frames[t - 1])),
            };
            let cir = model.zero_cir(&mut g, 4, 4);
            let (sr, _) = ok(model.forward_step(&mut g, cur, prev, &cir))?;
            let single = ok(tensor_frame(g.value(sr), frames[t].window()))?;
            ensure!(single == seq[t], "step {t} differs from an independent run ({variant})");
        }
    }
    Ok(())
}

fn simulator_ramp_oracle() -> Check {
    let params = SimParams::default();
    for seed in 0..FAMILY_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        // monotone per-pixel ramps: the count is exactly ⌊|ΔL| / θ⌋
        let n = rng.gen_range(2..6);
        let starts: Vec<f64> = (0..4).map(|_| rng.gen_range(1.0..200.0)).collect();
        let rates: Vec<f64> = (0..4).map(|_| rng.gen_range(0.3..3.0)).collect();
        let frames = (0..n)
            .map(|k| {
                let vals = starts.iter().zip(&rates).map(|(s, r)| s * r.powi(k as i32)).collect();
                IntensityFrame::new(2, 2, vals)
            })
            .collect::<Result<Vec<_>>>();
        let frames = ok(frames)?;
        let s = ok(simulate_events(&frames, 1000, params))?;
        for idx in 0..4 {
            let l = |f: &IntensityFrame| (f.values()[idx] + params.eps).ln();
            let delta = l(&frames[n - 1]) - l(&frames[0]);
            let want = (delta.abs() / params.theta).floor() as usize;
            let got: Vec<&Event> = s
                .events()
                .iter()
                .filter(|e| (e.y * 2 + e.x) as usize == idx)
                .collect();
            ensure!(got.len() == want, "pixel {idx}: {} events, oracle {want} (seed {seed})", got.len());
            let sign = if delta > 0.0 { 1 } else { -1 };
            ensure!(got.iter().all(|e| e.p.sign() == sign), "ramp polarity mismatch (seed {seed})");
        }
    }
    Ok(())
}

fn augmentation_involutions() -> Check {
    for seed in 0..FAMILY_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1100 + seed);
        let lr = toy_frames(&mut rng, 2);
        let hr = (0..2).map(|_| random_counts(&mut rng, 8, 8, 3)).collect();
        let sample = ok(Sample::new(lr, hr))?;
        ensure!(AugmentDraw::default().apply(&sample) == sample, "identity draw changed the sample");
        for bits in 1..8u8 {
            let draw = AugmentDraw {
                flip_horizontal: bits & 1 != 0,
                flip_vertical: bits & 2 != 0,
                swap_polarity: bits & 4 != 0,
            };
            ensure!(draw.apply(&draw.apply(&sample)) == sample, "{draw:?} is not an involution");
        }
    }
    Ok(())
}

fn format_round_trips() -> Check {
    for seed in 0..FAMILY_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1200 + seed);
        let n = rng.gen_range(0..40);
        let s = random_stream(&mut rng, 7, 3, n);
        ensure!(ok(parse_event_file(&write_event_file(&s)))? == s, "event file round trip failed");

        let t = random(&mut rng, &[2, 3, 1]);
        let mut buf = Vec::new();
        ok(write_tensor(&mut buf, &t))?;
        ensure!(ok(read_tensor::<f64, _>(&mut buf.as_slice()))? == t, "tensor dump round trip failed");
    }
    let mut kv = KeyValues::default();
    kv.set("a", 1);
    kv.set("b", "x y");
    ensure!(ok(KeyValues::parse(&kv.render()))? == kv, "key=value round trip failed");

    let model = ok(ModelState::<f32>::new(ModelConfig::toy(Variant::Full, 4, 1, 4, 2, 2)))?;
    let ckpt = Checkpoint {
        model,
        optimizer: None,
        lr_size: Some((4, 4)),
    };
    let bytes = ok(ckpt.to_bytes())?;
    let back = ok(Checkpoint::<f32>::from_bytes(&bytes))?;
    ensure!(back.model.params() == ckpt.model.params(), "checkpoint tensors changed");
    ensure!(back.model.config() == ckpt.model.config(), "checkpoint config changed");
    ensure!(ok(back.to_bytes())? == bytes, "checkpoint bytes not reproduced");
    Ok(())
}

/// Every invariant family with its name, in report order.
pub fn invariant_families() -> Vec<(&'static str, fn() -> Check)> {
    vec![
        ("decouple partition and merge round trip", decouple_merge as fn() -> Check),
        ("count conservation", count_conservation),
        ("resample round trip on integer frames", resample_round_trip),
        ("pixel-shuffle bijectivity", pixel_shuffle_bijective),
        ("softmax row normalization", softmax_rows),
        ("attention convex-combination bounds", attention_convexity),
        ("gate output betweenness", gate_betweenness),
        ("BIE swap symmetry", swap_symmetry),
        ("CIR zero-init independence at t=0", cir_zero_init),
        ("carry_state=false sequence factorization", carry_off_factorization),
        ("simulator monotone-ramp count oracle", simulator_ramp_oracle),
        ("augmentation involutions", augmentation_involutions),
        ("file-format round trips", format_round_trips),
    ]
}

pub fn selftest() -> Vec<FamilyOutcome> {
    invariant_families()
        .into_iter()
        .map(|(name, check)| FamilyOutcome {
            name,
            failure: check().err(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_family_passes() {
        for f in selftest() {
            assert!(f.passed(), "{}: {:?}", f.name, f.failure);
        }
    }

    #[test]
    fn gradient_suite_single_seed() {
        let report = gradient_suite(&[11]).unwrap();
        assert_eq!(report.cases.len(), gradient_case_names().len());
        for c in &report.cases {
            assert!(c.max_rel_err <= GRAD_TOLERANCE, "{c:?}");
            assert!(c.coords > 0);
        }
    }

    #[test]
    fn gradient_check_catches_a_wrong_derivative() {
        // relu evaluated right on its kink: the one-sided derivative the
        // tape reports cannot match the central difference
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::new(vec![1], vec![0.0]).unwrap());
        let report = grad_check(&mut ps, GRAD_STEP, |g, ps| {
            let x = p(g, ps, "x");
            Ok(g.relu(x))
        })
        .unwrap();
        assert!(report.max_rel_err > GRAD_TOLERANCE);
    }
}
