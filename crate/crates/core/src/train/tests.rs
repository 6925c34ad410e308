use super::*;
use crate::event::Window;
use crate::model::Variant;
use crate::sim::{make_pair, SceneSpec, SimParams};
use proptest::prelude::*;

fn frame(w: usize, h: usize, pos: Vec<f64>, neg: Vec<f64>) -> PolarFrame {
    PolarFrame::from_maps(w, h, pos, neg, Window::new(0, 10).unwrap()).unwrap()
}

fn bar_samples(t: usize) -> Vec<Sample> {
    let spec = SceneSpec::moving_bar(8, 8, 1.0, 5);
    let (lr, hr) = make_pair(&spec, 2, SimParams::default()).unwrap();
    samples_from_streams(&lr, &hr, spec.frame_dt_us, t).unwrap()
}

fn toy_train(iters: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        max_iters: iters,
        window: 2,
        augment: true,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn lr_schedule_points() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 0.001);
    assert_eq!(lr_at(3999, &cfg), 0.001);
    assert!((lr_at(4000, &cfg) - 0.00095).abs() < 1e-15);
    assert!((lr_at(8000, &cfg) - 0.0009025).abs() < 1e-15);
}

proptest! {
    #[test]
    fn lr_non_increasing(a in 0u64..1_000_000, b in 0u64..1_000_000) {
        let cfg = TrainConfig::default();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(lr_at(hi, &cfg) <= lr_at(lo, &cfg));
    }

    #[test]
    fn loss_non_negative_and_zero_iff_equal(
        a in proptest::collection::vec(0.0f64..5.0, 8),
        b in proptest::collection::vec(0.0f64..5.0, 8),
    ) {
        let fa = frame(2, 2, a[..4].to_vec(), a[4..].to_vec());
        let fb = frame(2, 2, b[..4].to_vec(), b[4..].to_vec());
        let l = loss_window_frames(&[fa.clone()], &[fb]).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, a == b);
        prop_assert_eq!(loss_window_frames(&[fa.clone()], &[fa]).unwrap(), 0.0);
    }
}

#[test]
fn loss_direct_formula() {
    let a = frame(2, 2, vec![0.0; 4], vec![0.0; 4]);
    let mut pos = vec![0.0; 4];
    pos[3] = 2.0;
    let b = frame(2, 2, pos, vec![0.0; 4]);
    assert_eq!(loss_window_frames(&[a.clone()], &[b.clone()]).unwrap(), 0.5);
    // additivity over time
    let c = frame(2, 2, vec![1.0; 4], vec![0.0; 4]);
    let l1 = loss_window_frames(&[a.clone()], &[b.clone()]).unwrap();
    let l2 = loss_window_frames(&[c.clone()], &[a.clone()]).unwrap();
    let both = loss_window_frames(&[a.clone(), c.clone()], &[b, a]).unwrap();
    assert_eq!(both, l1 + l2);
    assert!(loss_window_frames(&[c.clone()], &[]).is_err());
}

#[test]
fn graph_loss_matches_frames() {
    let a = frame(2, 1, vec![1.0, 2.0], vec![0.5, 0.0]);
    let b = frame(2, 1, vec![0.0, 2.5], vec![1.0, 3.0]);
    let mut g = Graph::<f64>::new();
    let va = g.constant(frame_tensor(&a));
    let vb = g.constant(frame_tensor(&b));
    let l = loss_window(&mut g, &[va, vb], &[vb, va]).unwrap();
    let direct = loss_window_frames(&[a.clone(), b.clone()], &[b, a]).unwrap();
    assert!((g.value(l).data()[0] - direct).abs() < 1e-15);
}

#[test]
fn augmentation_identity_and_involutions() {
    // asymmetric in both axes and polarities
    let lr = frame(2, 2, vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 2.0, 0.0]);
    let hr = frame(4, 4, (0..16).map(f64::from).collect(), vec![0.0; 16]);
    let sample = Sample::new(vec![lr], vec![hr]).unwrap();
    assert_eq!(AugmentDraw::default().apply(&sample), sample);
    for draw in [
        AugmentDraw { flip_horizontal: true, ..Default::default() },
        AugmentDraw { flip_vertical: true, ..Default::default() },
        AugmentDraw { swap_polarity: true, ..Default::default() },
        AugmentDraw { flip_horizontal: true, flip_vertical: true, swap_polarity: true },
    ] {
        let once = draw.apply(&sample);
        assert_ne!(once, sample, "{draw:?}");
        assert_eq!(draw.apply(&once), sample, "{draw:?}");
    }
}

#[test]
fn horizontal_flip_keeps_pairing() {
    let sample = bar_samples(2).remove(0);
    let flip = AugmentDraw { flip_horizontal: true, ..Default::default() }.apply(&sample);
    let s = sample.scale();
    // LR pixel x covers HR columns s·x .. s·x + s - 1, mirrored to the
    // block at the opposite edge
    let (lw, hw) = (sample.lr()[0].width(), sample.hr()[0].width());
    for t in 0..sample.len() {
        for y in 0..sample.hr()[t].height() {
            for x in 0..hw {
                let p = crate::event::Polarity::Positive;
                assert_eq!(flip.hr()[t].at(p, hw - 1 - x, y), sample.hr()[t].at(p, x, y));
                let lx = x / s;
                assert_eq!((hw - 1 - x) / s, lw - 1 - lx);
            }
        }
    }
}

#[test]
fn augmentation_is_seeded() {
    let sample = bar_samples(2).remove(0);
    let a = augment(&sample, &mut ChaCha8Rng::seed_from_u64(5));
    let b = augment(&sample, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(a, b);
}

#[test]
fn samples_cover_recording() {
    let spec = SceneSpec::moving_bar(8, 8, 1.0, 5);
    let (lr, hr) = make_pair(&spec, 2, SimParams::default()).unwrap();
    let samples = samples_from_streams(&lr, &hr, spec.frame_dt_us, 2).unwrap();
    let total_hr: f64 = samples.iter().flat_map(|s| s.hr()).map(|f| f.total()).sum();
    let total_lr: f64 = samples.iter().flat_map(|s| s.lr()).map(|f| f.total()).sum();
    assert_eq!(total_hr as usize, hr.len());
    assert_eq!(total_lr as usize, lr.len());
    assert!(samples.iter().all(|s| s.scale() == 2 && s.lr_size() == (4, 4)));
}

#[test]
fn sample_validation() {
    let lr = frame(2, 2, vec![0.0; 4], vec![0.0; 4]);
    let hr = frame(4, 4, vec![0.0; 16], vec![0.0; 16]);
    assert!(Sample::new(vec![lr.clone()], vec![hr.clone()]).is_ok());
    assert!(Sample::new(vec![lr.clone()], vec![]).is_err());
    let odd = frame(4, 2, vec![0.0; 8], vec![0.0; 8]);
    assert!(Sample::new(vec![lr], vec![odd]).is_err());
}

#[test]
fn zero_iterations_returns_initial_model() {
    let cfg = ModelConfig::toy(Variant::Plain, 4, 1, 4, 2, 2);
    let init = ModelState::<f32>::new(cfg.clone()).unwrap();
    let (model, trace) = train(bar_samples(2), cfg, toy_train(0)).unwrap();
    assert!(trace.is_empty());
    assert_eq!(model.params(), init.params());
    assert_eq!(model.iteration, 0);
}

#[test]
fn empty_dataset_rejected() {
    let cfg = ModelConfig::toy(Variant::Plain, 4, 1, 4, 2, 2);
    assert!(train(Vec::new(), cfg, toy_train(1)).is_err());
}

#[test]
fn training_is_deterministic_and_thread_independent() {
    let cfg = ModelConfig::toy(Variant::Full, 4, 1, 4, 2, 2);
    let (a, ta) = train(bar_samples(2), cfg.clone(), toy_train(4)).unwrap();
    let (b, tb) = train(bar_samples(2), cfg.clone(), toy_train(4)).unwrap();
    let threaded = TrainConfig { threads: 2, ..toy_train(4) };
    let (c, tc) = train(bar_samples(2), cfg, threaded).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(a.params(), b.params());
    assert_eq!(ta, tc);
    assert_eq!(a.params(), c.params());
    assert_eq!(ta.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let cfg = ModelConfig::toy(Variant::Plain, 4, 1, 4, 2, 2);
    let data = bar_samples(2);
    let (_, full) = train(data.clone(), cfg.clone(), toy_train(20)).unwrap();

    let mut first = Trainer::new(ModelState::<f32>::new(cfg).unwrap(), toy_train(10), data.clone()).unwrap();
    first.run(|_, _| Ok(())).unwrap();
    let bytes = first.checkpoint().to_bytes().unwrap();
    let ckpt = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    let mut second = Trainer::resume(ckpt, toy_train(20), data).unwrap();
    let resumed = second.run(|_, _| Ok(())).unwrap();
    assert_eq!(resumed.len(), 10);
    for (r, f) in resumed.iter().zip(&full[10..]) {
        assert_eq!(r.iter, f.iter);
        assert!((r.loss - f.loss).abs() <= 1e-6 * f.loss.abs().max(1.0), "{r:?} vs {f:?}");
    }
}

#[test]
fn non_finite_loss_aborts() {
    let cfg = ModelConfig::toy(Variant::Plain, 4, 1, 4, 2, 1);
    let lr = frame(2, 2, vec![f64::MAX; 4], vec![0.0; 4]);
    let hr = frame(4, 4, vec![0.0; 16], vec![0.0; 16]);
    let data = vec![Sample::new(vec![lr], vec![hr]).unwrap()];
    let tc = TrainConfig { window: 1, ..toy_train(3) };
    match train(data, cfg, tc) {
        Err(Error::NonFinite { iter, lr, .. }) => {
            assert_eq!(iter, 1);
            assert_eq!(lr, 0.001);
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn loss_csv_layout() {
    let mut buf = Vec::new();
    let rec = LossRecord { iter: 1, lr: 0.001, loss: 2.5, grad_norm: 0.0 };
    write_loss_csv(&mut buf, &[rec]).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "iter,lr,loss\n1,0.001,2.5\n");
}

#[test]
fn config_kv_round_trip() {
    let cfg = TrainConfig { lr0: 0.005, augment: false, max_iters: 77, ..TrainConfig::default() };
    let back = TrainConfig::from_kv(&KeyValues::parse(&cfg.to_kv().render()).unwrap()).unwrap();
    assert_eq!(back, cfg);
    let mut kv = cfg.to_kv();
    kv.set("decay", 1.5);
    assert!(TrainConfig::from_kv(&kv).is_err());
}
