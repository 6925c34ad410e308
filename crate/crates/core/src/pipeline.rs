//! File-level glue shared by the command-line tools: paired recordings on
//! disk and whole-stream super-resolution.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{arg, shape, Result};
use crate::event::{frame_sequence_from, parse_event_file, resample, EventStream, PolarFrame};
use crate::model::ModelState;
use crate::tensor::Real;
use crate::train::{samples_from_streams, Sample};

pub const LR_SUFFIX: &str = ".lr.events";
pub const HR_SUFFIX: &str = ".hr.events";

/// A recording stored as `<name>.lr.events` next to `<name>.hr.events`.
#[derive(Debug, Clone)]
pub struct Recording {
    pub name: String,
    pub lr: EventStream,
    pub hr: EventStream,
}

/// Every complete LR/HR pair in `dir`, sorted by name. An LR file without
/// its HR partner is an error.
pub fn load_recordings(dir: &Path) -> Result<Vec<Recording>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(file) = path.file_name().and_then(|f| f.to_str()) else {
            continue;
        };
        if let Some(stem) = file.strip_suffix(LR_SUFFIX) {
            names.push(stem.to_string());
        }
    }
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let read = |suffix: &str| -> Result<EventStream> {
                let path: PathBuf = dir.join(format!("{name}{suffix}"));
                let text = fs::read_to_string(&path)
                    .map_err(|e| arg(format!("{}: {e}", path.display())))?;
                parse_event_file(&text).map_err(|e| arg(format!("{}: {e}", path.display())))
            };
            Ok(Recording {
                lr: read(LR_SUFFIX)?,
                hr: read(HR_SUFFIX)?,
                name,
            })
        })
        .collect()
}

/// Training samples from every recording, in name order.
pub fn load_samples(dir: &Path, window_us: u64, t: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for rec in load_recordings(dir)? {
        out.extend(samples_from_streams(&rec.lr, &rec.hr, window_us, t)?);
    }
    Ok(out)
}

/// Result of [`super_resolve_stream`].
#[derive(Debug, Clone)]
pub struct SrOutput {
    pub stream: EventStream,
    /// The SR count frames before rounding, one per input window.
    pub frames: Vec<PolarFrame>,
}

/// Frames `stream` into `window_us` windows from its first event, runs the
/// model over consecutive chunks of `t` frames (fresh state per chunk) and
/// resamples every SR frame into one event stream at `S×` resolution.
pub fn super_resolve_stream<F: Real>(
    model: &ModelState<F>,
    stream: &EventStream,
    window_us: u64,
    t: usize,
) -> Result<SrOutput> {
    if t == 0 || window_us == 0 {
        return Err(arg("window length and frame count must be at least 1"));
    }
    let s = model.config().scale as u32;
    let (w, h) = (stream.width() * s, stream.height() * s);
    let (Some(t0), Some(t1)) = (stream.first_timestamp(), stream.last_timestamp()) else {
        return Ok(SrOutput {
            stream: EventStream::empty(w, h)?,
            frames: Vec::new(),
        });
    };
    let count = ((t1 - t0) / window_us + 1) as usize;
    let lr = frame_sequence_from(stream, t0, window_us, count)?;
    let mut frames = Vec::with_capacity(count);
    for chunk in lr.chunks(t) {
        frames.extend(model.infer(chunk)?);
    }
    let mut events = Vec::new();
    for f in &frames {
        if (f.width() as u32, f.height() as u32) != (w, h) {
            return Err(shape("model output does not match the scaled resolution"));
        }
        events.extend(resample(f).into_events());
    }
    Ok(SrOutput {
        stream: EventStream::new(w, h, events)?,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{write_event_file, Event, Polarity};
    use crate::model::{ModelConfig, Variant};

    fn model() -> ModelState<f32> {
        let mut m = ModelState::new(ModelConfig::toy(Variant::Plain, 4, 1, 4, 2, 2)).unwrap();
        m.jitter(1, 0.3);
        m
    }

    #[test]
    fn empty_stream_gives_header_only() {
        let out = super_resolve_stream(&model(), &EventStream::empty(3, 2).unwrap(), 100, 2).unwrap();
        assert_eq!(write_event_file(&out.stream), "6 4\n");
    }

    #[test]
    fn output_counts_match_rounded_frames() {
        let events = (0..40)
            .map(|i| Event::new(i % 3, (i / 3) % 2, 37 * i as u64, if i % 4 == 0 { Polarity::Negative } else { Polarity::Positive }))
            .collect();
        let s = EventStream::new(3, 2, events).unwrap();
        let out = super_resolve_stream(&model(), &s, 300, 2).unwrap();
        assert_eq!(out.frames.len(), (39 * 37) / 300 + 1);
        let rounded: u64 = out
            .frames
            .iter()
            .flat_map(|f| f.pos().iter().chain(f.neg()))
            .map(|&v| crate::event::round_count(v))
            .sum();
        assert_eq!(out.stream.len() as u64, rounded);
        assert_eq!((out.stream.width(), out.stream.height()), (6, 4));
    }

    #[test]
    fn recordings_pair_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let s = EventStream::new(2, 2, vec![Event::new(1, 1, 5, Polarity::Positive)]).unwrap();
        let big = EventStream::new(4, 4, vec![Event::new(3, 2, 7, Polarity::Negative)]).unwrap();
        fs::write(dir.path().join("b.lr.events"), write_event_file(&s)).unwrap();
        fs::write(dir.path().join("b.hr.events"), write_event_file(&big)).unwrap();
        fs::write(dir.path().join("a.lr.events"), write_event_file(&s)).unwrap();
        fs::write(dir.path().join("a.hr.events"), write_event_file(&big)).unwrap();
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let recs = load_recordings(dir.path()).unwrap();
        assert_eq!(recs.iter().map(|r| r.name.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        let samples = load_samples(dir.path(), 10, 1).unwrap();
        assert_eq!(samples.len(), 2);
        fs::write(dir.path().join("c.lr.events"), write_event_file(&s)).unwrap();
        assert!(load_recordings(dir.path()).is_err());
    }
}
