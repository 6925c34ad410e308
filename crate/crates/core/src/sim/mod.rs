//! Synthetic scenes and a contrast-threshold event simulator producing
//! aligned low/high resolution event-stream pairs.

mod bicubic;

pub use bicubic::{bicubic_plane, cubic_weight};

use std::str::FromStr;

use crate::error::{arg, Error, Result};
use crate::event::{Event, EventStream, Polarity};
use crate::kv::KeyValues;

/// Floor applied after bicubic resampling so log intensity stays finite.
pub const MIN_INTENSITY: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    MovingBar,
    MovingDisk,
    CheckerTranslate,
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moving_bar" => Ok(SceneKind::MovingBar),
            "moving_disk" => Ok(SceneKind::MovingDisk),
            "checker_translate" => Ok(SceneKind::CheckerTranslate),
            other => Err(arg(format!("unknown scene kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub width: usize,
    pub height: usize,
    /// Pixels per frame along x and y.
    pub velocity: (f64, f64),
    pub n_frames: usize,
    pub frame_dt_us: u64,
    pub foreground: f64,
    pub background: f64,
}

impl SceneSpec {
    pub fn moving_bar(width: usize, height: usize, velocity_x: f64, n_frames: usize) -> Self {
        Self {
            kind: SceneKind::MovingBar,
            width,
            height,
            velocity: (velocity_x, 0.0),
            n_frames,
            frame_dt_us: 10_000,
            foreground: 200.0,
            background: 50.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(arg("scene resolution must be non-zero"));
        }
        if self.n_frames < 2 {
            return Err(arg("a scene needs at least 2 frames"));
        }
        if self.frame_dt_us == 0 {
            return Err(arg("frame_dt_us must be at least 1"));
        }
        for v in [self.foreground, self.background] {
            if !(v > 0.0 && v <= 255.0) {
                return Err(arg(format!("intensity {v} outside (0, 255]")));
            }
        }
        if !(self.velocity.0.is_finite() && self.velocity.1.is_finite()) {
            return Err(arg("velocity must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    /// Log-intensity step that triggers one event.
    pub theta: f64,
    /// Offset inside `ln(I + eps)`.
    pub eps: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            theta: 0.2,
            eps: 1e-3,
        }
    }
}

/// Linear intensity image, strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityFrame {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl IntensityFrame {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(arg(format!(
                "{} values do not fill a {width}x{height} frame",
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(arg("intensities must be finite and strictly positive"));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Scene file: `kind`, `width`, `height`, `velocity_x`, `velocity_y`,
/// `n_frames`, `frame_dt_us`, `theta`, `scale`, optionally `foreground`,
/// `background` and `eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub spec: SceneSpec,
    pub params: SimParams,
    pub scale: usize,
}

impl SceneConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let kind: SceneKind = kv
            .get_str("kind")
            .ok_or_else(|| Error::Format("missing key `kind`".into()))?
            .parse()?;
        let spec = SceneSpec {
            kind,
            width: kv.require("width")?,
            height: kv.require("height")?,
            velocity: (kv.get_or("velocity_x", 0.0)?, kv.get_or("velocity_y", 0.0)?),
            n_frames: kv.require("n_frames")?,
            frame_dt_us: kv.get_or("frame_dt_us", 10_000)?,
            foreground: kv.get_or("foreground", 200.0)?,
            background: kv.get_or("background", 50.0)?,
        };
        spec.validate()?;
        let defaults = SimParams::default();
        let params = SimParams {
            theta: kv.get_or("theta", defaults.theta)?,
            eps: kv.get_or("eps", defaults.eps)?,
        };
        if !(params.theta > 0.0) {
            return Err(arg("theta must be positive"));
        }
        Ok(Self {
            spec,
            params,
            scale: kv.get_or("scale", 2)?,
        })
    }
}

/// Deterministic analytic rendering of frame `frame_index`.
pub fn render_scene(spec: &SceneSpec, frame_index: usize) -> Result<IntensityFrame> {
    spec.validate()?;
    if frame_index >= spec.n_frames {
        return Err(arg(format!(
            "frame {frame_index} out of range for {} frames",
            spec.n_frames
        )));
    }
    let (w, h) = (spec.width, spec.height);
    let (fg, bg) = (spec.foreground, spec.background);
    let fi = frame_index as f64;
    let off_x = (fi * spec.velocity.0).round() as i64;
    let off_y = (fi * spec.velocity.1).round() as i64;

    let values: Vec<f64> = match spec.kind {
        SceneKind::MovingBar => {
            let bar = (w / 4).max(1) as i64;
            let start = off_x.rem_euclid(w as i64);
            (0..h)
                .flat_map(|_| {
                    (0..w as i64).map(move |x| {
                        if (x - start).rem_euclid(w as i64) < bar {
                            fg
                        } else {
                            bg
                        }
                    })
                })
                .collect()
        }
        SceneKind::MovingDisk => {
            let r = (w.min(h) as f64 / 4.0).max(1.0);
            let cx = (w as f64 / 2.0 + fi * spec.velocity.0).rem_euclid(w as f64);
            let cy = (h as f64 / 2.0 + fi * spec.velocity.1).rem_euclid(h as f64);
            (0..h)
                .flat_map(|y| {
                    (0..w).map(move |x| {
                        let dx = x as f64 + 0.5 - cx;
                        let dy = y as f64 + 0.5 - cy;
                        if dx * dx + dy * dy <= r * r {
                            fg
                        } else {
                            bg
                        }
                    })
                })
                .collect()
        }
        SceneKind::CheckerTranslate => {
            let sq = (w.min(h) / 4).max(1) as i64;
            (0..h as i64)
                .flat_map(|y| {
                    (0..w as i64).map(move |x| {
                        let cell = (x - off_x).div_euclid(sq) + (y - off_y).div_euclid(sq);
                        if cell.rem_euclid(2) == 0 {
                            fg
                        } else {
                            bg
                        }
                    })
                })
                .collect()
        }
    };
    IntensityFrame::new(w, h, values)
}

pub fn render_all(spec: &SceneSpec) -> Result<Vec<IntensityFrame>> {
    (0..spec.n_frames).map(|i| render_scene(spec, i)).collect()
}

/// Contrast-threshold simulation. Each pixel keeps a reference log level;
/// log intensity is interpolated linearly between frames `dt_us` apart and
/// an event fires at every interpolated `theta` crossing.
pub fn simulate_events(
    frames: &[IntensityFrame],
    dt_us: u64,
    params: SimParams,
) -> Result<EventStream> {
    if frames.len() < 2 {
        return Err(arg("simulation needs at least 2 frames"));
    }
    if !(params.theta > 0.0) {
        return Err(arg("theta must be positive"));
    }
    let (w, h) = (frames[0].width, frames[0].height);
    if frames.iter().any(|f| f.width != w || f.height != h) {
        return Err(arg("all frames must share one resolution"));
    }
    let log = |v: f64| (v + params.eps).ln();
    let theta = params.theta;
    let mut events = Vec::new();

    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let mut reference = log(frames[0].values[idx]);
            for (k, pair) in frames.windows(2).enumerate() {
                let l0 = log(pair[0].values[idx]);
                let l1 = log(pair[1].values[idx]);
                let t0 = k as u64 * dt_us;
                let delta = l1 - l0;
                let crossing_time = |level: f64| -> u64 {
                    let frac = (level - l0) / delta;
                    t0 + (frac * dt_us as f64).round() as u64
                };
                while l1 - reference >= theta {
                    reference += theta;
                    events.push(Event::new(
                        x as u32,
                        y as u32,
                        crossing_time(reference),
                        Polarity::Positive,
                    ));
                }
                while reference - l1 >= theta {
                    reference -= theta;
                    events.push(Event::new(
                        x as u32,
                        y as u32,
                        crossing_time(reference),
                        Polarity::Negative,
                    ));
                }
            }
        }
    }
    EventStream::new(w as u32, h as u32, events)
}

/// Bicubic resize of an intensity frame; results are floored at
/// [`MIN_INTENSITY`].
pub fn bicubic_resize(frame: &IntensityFrame, out_w: usize, out_h: usize) -> Result<IntensityFrame> {
    if out_w == 0 || out_h == 0 {
        return Err(arg("output dimensions must be at least 1"));
    }
    let values = bicubic_plane(&frame.values, frame.width, frame.height, out_w, out_h)
        .into_iter()
        .map(|v| v.max(MIN_INTENSITY))
        .collect();
    IntensityFrame::new(out_w, out_h, values)
}

/// Renders the scene, simulates the HR stream from full-size frames and
/// the LR stream from bicubic-downscaled frames on the same time axis.
pub fn make_pair(
    spec: &SceneSpec,
    scale: usize,
    params: SimParams,
) -> Result<(EventStream, EventStream)> {
    if scale == 0 {
        return Err(arg("scale must be at least 1"));
    }
    if spec.width % scale != 0 || spec.height % scale != 0 {
        return Err(arg(format!(
            "scene {}x{} is not divisible by scale {scale}",
            spec.width, spec.height
        )));
    }
    let hr_frames = render_all(spec)?;
    let (lw, lh) = (spec.width / scale, spec.height / scale);
    let lr_frames = hr_frames
        .iter()
        .map(|f| bicubic_resize(f, lw, lh))
        .collect::<Result<Vec<_>>>()?;
    let hr = simulate_events(&hr_frames, spec.frame_dt_us, params)?;
    let lr = simulate_events(&lr_frames, spec.frame_dt_us, params)?;
    Ok((lr, hr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn column_of_bar(f: &IntensityFrame, spec: &SceneSpec) -> usize {
        (0..f.width())
            .find(|&x| f.at(x, 0) == spec.foreground && f.at((x + f.width() - 1) % f.width(), 0) == spec.background)
            .unwrap()
    }

    #[test]
    fn bar_moves_one_column_per_frame() {
        let spec = SceneSpec::moving_bar(16, 8, 1.0, 4);
        let f0 = render_scene(&spec, 0).unwrap();
        let f1 = render_scene(&spec, 1).unwrap();
        assert_eq!(column_of_bar(&f1, &spec), column_of_bar(&f0, &spec) + 1);
        assert!(render_scene(&spec, 4).is_err());
    }

    #[test]
    fn zero_velocity_frames_identical() {
        for kind in [SceneKind::MovingBar, SceneKind::MovingDisk, SceneKind::CheckerTranslate] {
            let spec = SceneSpec {
                kind,
                velocity: (0.0, 0.0),
                ..SceneSpec::moving_bar(12, 12, 0.0, 3)
            };
            assert_eq!(render_scene(&spec, 0).unwrap(), render_scene(&spec, 2).unwrap());
        }
    }

    #[test]
    fn checker_is_two_valued() {
        let spec = SceneSpec {
            kind: SceneKind::CheckerTranslate,
            velocity: (0.7, -1.3),
            ..SceneSpec::moving_bar(12, 8, 0.0, 5)
        };
        for i in 0..5 {
            let f = render_scene(&spec, i).unwrap();
            assert!(f
                .values()
                .iter()
                .all(|&v| v == spec.foreground || v == spec.background));
        }
    }

    fn single_pixel(values: &[f64]) -> Vec<IntensityFrame> {
        values
            .iter()
            .map(|&v| IntensityFrame::new(1, 1, vec![v]).unwrap())
            .collect()
    }

    #[test]
    fn constant_intensity_no_events() {
        let s = simulate_events(&single_pixel(&[80.0; 5]), 100, SimParams::default()).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn ramp_of_0_65_gives_three_events() {
        let p = SimParams::default();
        let i0 = 10.0;
        let i1 = (i0 + p.eps) * 0.65f64.exp() - p.eps;
        let s = simulate_events(&single_pixel(&[i0, i1]), 1000, p).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.events().iter().all(|e| e.p == Polarity::Positive));
        assert!(s.events().windows(2).all(|w| w[0].t <= w[1].t));
        // crossings at 0.2, 0.4, 0.6 of a 0.65 ramp over 1000us
        let ts: Vec<u64> = s.events().iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![308, 615, 923]);
    }

    #[test]
    fn decreasing_pixel_fires_negative_only() {
        let s = simulate_events(&single_pixel(&[200.0, 120.0, 60.0, 20.0]), 50, SimParams::default())
            .unwrap();
        assert!(!s.is_empty());
        assert!(s.events().iter().all(|e| e.p == Polarity::Negative));
    }

    #[test]
    fn mismatched_resolution_rejected() {
        let a = IntensityFrame::new(2, 2, vec![1.0; 4]).unwrap();
        let b = IntensityFrame::new(1, 4, vec![1.0; 4]).unwrap();
        assert!(simulate_events(&[a.clone(), b], 10, SimParams::default()).is_err());
        assert!(simulate_events(&[a], 10, SimParams::default()).is_err());
    }

    #[test]
    fn bicubic_constant_and_identity() {
        let f = IntensityFrame::new(5, 3, vec![42.0; 15]).unwrap();
        let up = bicubic_resize(&f, 13, 7).unwrap();
        assert!(up.values().iter().all(|v| (v - 42.0).abs() < 1e-12));
        let g = render_scene(&SceneSpec::moving_bar(9, 6, 1.0, 2), 1).unwrap();
        assert_eq!(bicubic_resize(&g, 9, 6).unwrap(), g);
        assert!(bicubic_resize(&g, 0, 6).is_err());
    }

    #[test]
    fn bicubic_delta_upsample_matches_kernel() {
        // delta of height 1 on a unit background, upsampled 2x
        let mut v = vec![1.0; 64];
        v[4 * 8 + 4] = 2.0;
        let f = IntensityFrame::new(8, 8, v).unwrap();
        let up = bicubic_resize(&f, 16, 16).unwrap();
        // output pixel o samples source o/2 - 1/4; distance to the delta at 4
        // is one of 0.25, 0.75, 1.25, 1.75 (or >= 2) -- hand-evaluated weights
        let w = |o: usize| -> f64 {
            let d = (o as f64 / 2.0 - 0.25 - 4.0).abs();
            match d {
                d if d == 0.25 => 0.8671875,
                d if d == 0.75 => 0.2265625,
                d if d == 1.25 => -0.0703125,
                d if d == 1.75 => -0.0234375,
                _ => 0.0,
            }
        };
        for oy in 0..16 {
            for ox in 0..16 {
                let expected = 1.0 + w(ox) * w(oy);
                assert!((up.at(ox, oy) - expected).abs() < 1e-12, "({ox},{oy})");
            }
        }
    }

    #[test]
    fn pair_shapes_and_identity_scale() {
        let spec = SceneSpec::moving_bar(16, 16, 1.0, 5);
        let (lr, hr) = make_pair(&spec, 2, SimParams::default()).unwrap();
        assert_eq!((lr.width(), lr.height()), (8, 8));
        assert_eq!((hr.width(), hr.height()), (16, 16));
        let (a, b) = make_pair(&spec, 1, SimParams::default()).unwrap();
        assert_eq!(a, b);
        let horizon = (spec.n_frames as u64 - 1) * spec.frame_dt_us;
        assert!(lr.events().iter().chain(hr.events()).all(|e| e.t <= horizon));
        assert!(make_pair(&SceneSpec::moving_bar(15, 16, 1.0, 3), 2, SimParams::default()).is_err());
    }

    #[test]
    fn simulation_is_deterministic() {
        let spec = SceneSpec {
            kind: SceneKind::MovingDisk,
            velocity: (0.6, 0.3),
            ..SceneSpec::moving_bar(16, 16, 0.0, 6)
        };
        let a = make_pair(&spec, 2, SimParams::default()).unwrap();
        let b = make_pair(&spec, 2, SimParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scene_config_parses() {
        let c = SceneConfig::parse(
            "kind=moving_bar\nwidth=16\nheight=8\nvelocity_x=1\nvelocity_y=0\nn_frames=4\nframe_dt_us=500\ntheta=0.3\nscale=2\n",
        )
        .unwrap();
        assert_eq!(c.spec.kind, SceneKind::MovingBar);
        assert_eq!(c.scale, 2);
        assert_eq!(c.params.theta, 0.3);
        assert!(SceneConfig::parse("kind=spiral\nwidth=4\nheight=4\nn_frames=2\n").is_err());
        assert!(SceneConfig::parse("kind=moving_bar\nwidth=4\nheight=4\nn_frames=1\n").is_err());
    }

    proptest! {
        // monotone trajectories: count = floor(|total dL| / theta), every
        // polarity matches the direction of change
        #[test]
        fn monotone_count_oracle(
            start in 1.0f64..200.0,
            steps in prop::collection::vec(0.0f64..0.9, 1..6),
            up in any::<bool>(),
            theta in 0.05f64..0.5,
        ) {
            let p = SimParams { theta, eps: 1e-3 };
            let mut logs = vec![(start + p.eps).ln()];
            for s in &steps {
                let last = *logs.last().unwrap();
                logs.push(if up { last + s } else { last - s });
            }
            let values: Vec<f64> = logs.iter().map(|l| l.exp() - p.eps).collect();
            prop_assume!(values.iter().all(|v| *v > 0.0));
            // recompute the realized log trajectory exactly as the simulator sees it
            let realized: Vec<f64> = values.iter().map(|v| (v + p.eps).ln()).collect();
            let total = (realized[realized.len() - 1] - realized[0]).abs();
            let ratio = total / theta;
            prop_assume!((ratio - ratio.round()).abs() > 1e-6);
            let s = simulate_events(&single_pixel(&values), 1000, p).unwrap();
            prop_assert_eq!(s.len(), ratio.floor() as usize);
            let want = if up { Polarity::Positive } else { Polarity::Negative };
            prop_assert!(s.events().iter().all(|e| e.p == want));
            prop_assert!(s.events().windows(2).all(|w| w[0].t <= w[1].t));
        }
    }
}
