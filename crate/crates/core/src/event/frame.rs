use super::{Event, EventStream, Polarity};
use crate::error::{arg, shape, Result};

/// Half-open time interval `[start, end)` in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window {
    pub start: u64,
    pub end: u64,
}

impl Window {
    pub fn new(start: u64, end: u64) -> Result<Self> {
        if start >= end {
            return Err(arg(format!("window [{start}, {end}) is empty or inverted")));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, t: u64) -> bool {
        self.start <= t && t < self.end
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

/// Two-channel event count image over a time window. Both maps are
/// row-major `height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarFrame {
    width: usize,
    height: usize,
    pos: Vec<f64>,
    neg: Vec<f64>,
    window: Window,
}

impl PolarFrame {
    pub fn zeros(width: usize, height: usize, window: Window) -> Self {
        Self {
            width,
            height,
            pos: vec![0.0; width * height],
            neg: vec![0.0; width * height],
            window,
        }
    }

    pub fn from_maps(
        width: usize,
        height: usize,
        pos: Vec<f64>,
        neg: Vec<f64>,
        window: Window,
    ) -> Result<Self> {
        let n = width * height;
        if n == 0 || pos.len() != n || neg.len() != n {
            return Err(shape(format!(
                "count maps of length {}/{} do not fit {width}x{height}",
                pos.len(),
                neg.len()
            )));
        }
        if pos.iter().chain(&neg).any(|v| !(*v >= 0.0)) {
            return Err(arg("count maps must be non-negative"));
        }
        Ok(Self {
            width,
            height,
            pos,
            neg,
            window,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn pos(&self) -> &[f64] {
        &self.pos
    }

    pub fn neg(&self) -> &[f64] {
        &self.neg
    }

    pub fn channel(&self, p: Polarity) -> &[f64] {
        match p {
            Polarity::Positive => &self.pos,
            Polarity::Negative => &self.neg,
        }
    }

    pub fn at(&self, p: Polarity, x: usize, y: usize) -> f64 {
        self.channel(p)[y * self.width + x]
    }

    pub fn total(&self) -> f64 {
        self.pos.iter().sum::<f64>() + self.neg.iter().sum::<f64>()
    }

    pub fn same_shape(&self, other: &PolarFrame) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn swap_polarity(&self) -> PolarFrame {
        PolarFrame {
            pos: self.neg.clone(),
            neg: self.pos.clone(),
            ..self.clone()
        }
    }

    pub fn flip_horizontal(&self) -> PolarFrame {
        let (w, h) = (self.width, self.height);
        let flip = |m: &[f64]| -> Vec<f64> {
            (0..h)
                .flat_map(|y| (0..w).rev().map(move |x| m[y * w + x]))
                .collect()
        };
        PolarFrame {
            pos: flip(&self.pos),
            neg: flip(&self.neg),
            ..self.clone()
        }
    }

    pub fn flip_vertical(&self) -> PolarFrame {
        let (w, h) = (self.width, self.height);
        let flip = |m: &[f64]| -> Vec<f64> {
            (0..h)
                .rev()
                .flat_map(|y| m[y * w..(y + 1) * w].iter().copied())
                .collect()
        };
        PolarFrame {
            pos: flip(&self.pos),
            neg: flip(&self.neg),
            ..self.clone()
        }
    }
}

/// Counts positive and negative events per pixel inside `window`.
pub fn count_image(
    stream: &EventStream,
    window: Window,
    out_resolution: (usize, usize),
) -> Result<PolarFrame> {
    if window.is_empty() {
        return Err(arg(format!(
            "window [{}, {}) is empty or inverted",
            window.start, window.end
        )));
    }
    let (w, h) = (stream.width() as usize, stream.height() as usize);
    if out_resolution != (w, h) {
        return Err(arg(format!(
            "output resolution {:?} differs from stream resolution {w}x{h}",
            out_resolution
        )));
    }
    let mut frame = PolarFrame::zeros(w, h, window);
    // events are time-sorted, so the window is a contiguous slice
    let events = stream.events();
    let lo = events.partition_point(|e| e.t < window.start);
    let hi = events.partition_point(|e| e.t < window.end);
    for e in &events[lo..hi] {
        let idx = e.y as usize * w + e.x as usize;
        match e.p {
            Polarity::Positive => frame.pos[idx] += 1.0,
            Polarity::Negative => frame.neg[idx] += 1.0,
        }
    }
    Ok(frame)
}

/// `count` consecutive frames of length `window_len_us` starting at the
/// first event timestamp (0 for an empty stream).
pub fn frame_sequence(
    stream: &EventStream,
    window_len_us: u64,
    count: usize,
) -> Result<Vec<PolarFrame>> {
    let t0 = stream.first_timestamp().unwrap_or(0);
    frame_sequence_from(stream, t0, window_len_us, count)
}

/// Like [`frame_sequence`] with an explicit origin, so that paired LR/HR
/// streams can share one time axis.
pub fn frame_sequence_from(
    stream: &EventStream,
    t0: u64,
    window_len_us: u64,
    count: usize,
) -> Result<Vec<PolarFrame>> {
    if count == 0 {
        return Err(arg("frame count must be at least 1"));
    }
    if window_len_us == 0 {
        return Err(arg("window length must be at least 1us"));
    }
    let res = (stream.width() as usize, stream.height() as usize);
    (0..count as u64)
        .map(|k| {
            let start = t0 + k * window_len_us;
            count_image(stream, Window::new(start, start + window_len_us)?, res)
        })
        .collect()
}

/// Rounds a real-valued count half-up to a non-negative integer.
pub fn round_count(v: f64) -> u64 {
    if v.is_finite() && v >= 0.5 {
        (v + 0.5).floor() as u64
    } else {
        0
    }
}

/// Turns a count image back into events. A pixel holding `k` events gets
/// them at the mid-points of `k` equal sub-intervals of the window.
pub fn resample(frame: &PolarFrame) -> EventStream {
    let Window { start, end } = frame.window;
    let span = (end - start) as u128;
    let mut events = Vec::new();
    for y in 0..frame.height {
        for x in 0..frame.width {
            let idx = y * frame.width + x;
            for (p, map) in [
                (Polarity::Positive, &frame.pos),
                (Polarity::Negative, &frame.neg),
            ] {
                let k = round_count(map[idx]) as u128;
                for i in 0..k {
                    // floor((i + 1/2) * span / k) stays inside [0, span)
                    let offset = ((2 * i + 1) * span / (2 * k)) as u64;
                    events.push(Event::new(x as u32, y as u32, start + offset, p));
                }
            }
        }
    }
    EventStream::new(frame.width as u32, frame.height as u32, events)
        .expect("resampled events lie on the frame grid")
}
