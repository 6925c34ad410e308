//! Event-stream data model: validated streams, polarity decoupling,
//! windowed two-channel count images and the inverse resampling.

mod frame;
mod io;

pub use frame::{count_image, frame_sequence, frame_sequence_from, resample, round_count, PolarFrame, Window};
pub use io::{parse_event_file, write_event_file};

use crate::error::{arg, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

/// A single pixel firing. Timestamps are integer microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u32,
    pub y: u32,
    pub t: u64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u32, y: u32, t: u64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }
}

/// Events from a `width`×`height` sensor, sorted non-decreasing by `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    width: u32,
    height: u32,
    events: Vec<Event>,
}

impl EventStream {
    /// Builds a stream, stable-sorting by timestamp. Fails if any event
    /// lies outside the sensor.
    pub fn new(width: u32, height: u32, mut events: Vec<Event>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(arg(format!("sensor resolution {width}x{height} is empty")));
        }
        if let Some(e) = events.iter().find(|e| e.x >= width || e.y >= height) {
            return Err(arg(format!(
                "event at ({}, {}) outside {width}x{height} sensor",
                e.x, e.y
            )));
        }
        events.sort_by_key(|e| e.t);
        Ok(Self {
            width,
            height,
            events,
        })
    }

    pub fn empty(width: u32, height: u32) -> Result<Self> {
        Self::new(width, height, Vec::new())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn first_timestamp(&self) -> Option<u64> {
        self.events.first().map(|e| e.t)
    }

    pub fn last_timestamp(&self) -> Option<u64> {
        self.events.last().map(|e| e.t)
    }

    /// Splits by polarity, preserving order within each side.
    pub fn decouple(&self) -> (EventStream, EventStream) {
        let (pos, neg): (Vec<Event>, Vec<Event>) = self
            .events
            .iter()
            .partition(|e| e.p == Polarity::Positive);
        (
            EventStream {
                width: self.width,
                height: self.height,
                events: pos,
            },
            EventStream {
                width: self.width,
                height: self.height,
                events: neg,
            },
        )
    }

    /// Maps every event to `(x / factor, y / factor)`. Dimensions that do
    /// not divide evenly are truncated and events in the remainder dropped.
    pub fn downsample(&self, factor: u32) -> Result<EventStream> {
        if factor == 0 {
            return Err(arg("downsampling factor must be at least 1"));
        }
        let width = self.width / factor;
        let height = self.height / factor;
        if width == 0 || height == 0 {
            return Err(arg(format!(
                "factor {factor} exceeds sensor size {}x{}",
                self.width, self.height
            )));
        }
        let events = self
            .events
            .iter()
            .filter(|e| e.x < width * factor && e.y < height * factor)
            .map(|e| Event {
                x: e.x / factor,
                y: e.y / factor,
                ..*e
            })
            .collect();
        Ok(EventStream {
            width,
            height,
            events,
        })
    }
}

pub fn decouple(stream: &EventStream) -> (EventStream, EventStream) {
    stream.decouple()
}

pub fn downsample_events(stream: &EventStream, factor: u32) -> Result<EventStream> {
    stream.downsample(factor)
}

/// Re-merges two polarity streams of the same resolution, sorted by time.
/// Ties keep `first` before `second`.
pub fn merge(first: &EventStream, second: &EventStream) -> Result<EventStream> {
    if first.width != second.width || first.height != second.height {
        return Err(arg("cannot merge streams of different resolution"));
    }
    let mut events = Vec::with_capacity(first.len() + second.len());
    events.extend_from_slice(&first.events);
    events.extend_from_slice(&second.events);
    EventStream::new(first.width, first.height, events)
}
