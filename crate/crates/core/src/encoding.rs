//! Event windows and their conversion to network input tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default aggregation window in microseconds.
pub const DEFAULT_WINDOW_US: u64 = 10_000;
/// Default number of temporal bins for voxel encoding.
pub const DEFAULT_BINS: usize = 6;

/// A single brightness-change event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Timestamp in microseconds.
    pub t: u64,
    /// +1 (ON) or -1 (OFF).
    pub p: i8,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: i8) -> Self {
        Event { x, y, t, p }
    }

    pub fn is_on(&self) -> bool {
        self.p > 0
    }
}

/// Events falling inside the half-open interval `[t0, t1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventWindow {
    pub events: Vec<Event>,
    pub t0: u64,
    pub t1: u64,
    pub width: usize,
    pub height: usize,
}

impl EventWindow {
    pub fn empty(t0: u64, t1: u64, width: usize, height: usize) -> Self {
        EventWindow {
            events: Vec::new(),
            t0,
            t1,
            width,
            height,
        }
    }

    /// Builds a window, checking bounds, ordering and polarity.
    pub fn new(events: Vec<Event>, t0: u64, t1: u64, width: usize, height: usize) -> Result<Self> {
        if t1 <= t0 {
            return Err(Error::InvalidArgument(format!("window bounds {t0}..{t1} are empty")));
        }
        validate_events(&events, width, height)?;
        if let Some(e) = events.iter().find(|e| e.t < t0 || e.t >= t1) {
            return Err(Error::InvalidArgument(format!(
                "event at t={} outside window [{t0}, {t1})",
                e.t
            )));
        }
        Ok(EventWindow {
            events,
            t0,
            t1,
            width,
            height,
        })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn duration(&self) -> u64 {
        self.t1 - self.t0
    }

    /// Event time mapped to [0, 1) relative to the window bounds.
    pub fn normalized_time(&self, e: &Event) -> f64 {
        (e.t - self.t0) as f64 / self.duration() as f64
    }

    /// Signed event count.
    pub fn polarity_sum(&self) -> i64 {
        self.events.iter().map(|e| e.p as i64).sum()
    }
}

fn validate_events(events: &[Event], width: usize, height: usize) -> Result<()> {
    let mut prev = 0u64;
    for (i, e) in events.iter().enumerate() {
        if e.t < prev {
            return Err(Error::UnorderedEvents { index: i, prev, t: e.t });
        }
        prev = e.t;
        if e.x as usize >= width || e.y as usize >= height {
            return Err(Error::InvalidArgument(format!(
                "event {i} at ({}, {}) outside {width}x{height} sensor",
                e.x, e.y
            )));
        }
        if e.p != 1 && e.p != -1 {
            return Err(Error::InvalidArgument(format!("event {i} has polarity {}", e.p)));
        }
    }
    Ok(())
}

/// Splits a time-ordered stream into consecutive windows `[k*w, (k+1)*w)`
/// from t = 0 up to the window holding the last event. Empty windows are kept.
pub fn slice_windows(events: &[Event], window_us: u64, width: usize, height: usize) -> Result<Vec<EventWindow>> {
    let end = events.last().map_or(0, |e| e.t + 1);
    slice_windows_until(events, window_us, width, height, end)
}

/// Like [`slice_windows`] but always covers `[0, end_us)`, emitting empty
/// windows where the stream is silent.
pub fn slice_windows_until(
    events: &[Event],
    window_us: u64,
    width: usize,
    height: usize,
    end_us: u64,
) -> Result<Vec<EventWindow>> {
    if window_us == 0 {
        return Err(Error::InvalidArgument("window width must be positive".into()));
    }
    validate_events(events, width, height)?;
    let end_us = end_us.max(events.last().map_or(0, |e| e.t + 1));
    let n = end_us.div_ceil(window_us) as usize;
    let mut windows: Vec<EventWindow> = (0..n)
        .map(|k| {
            let t0 = k as u64 * window_us;
            EventWindow::empty(t0, t0 + window_us, width, height)
        })
        .collect();
    for e in events {
        windows[(e.t / window_us) as usize].events.push(*e);
    }
    Ok(windows)
}

/// Per-pixel ON/OFF counts: channel 0 holds ON events, channel 1 OFF events.
pub fn count_encode(w: &EventWindow) -> Tensor {
    let (h, wd) = (w.height, w.width);
    let mut data = vec![0.0f32; 2 * h * wd];
    for e in &w.events {
        let c = if e.is_on() { 0 } else { 1 };
        data[(c * h + e.y as usize) * wd + e.x as usize] += 1.0;
    }
    Tensor::new(&[2, h, wd], data).expect("shape matches")
}

/// Signed voxel grid: each event's polarity is split between the two
/// temporal bins adjacent to `tau * (bins - 1)`.
pub fn voxel_encode(w: &EventWindow, bins: usize) -> Result<Tensor> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "voxel encoding needs at least 2 bins, got {bins}"
        )));
    }
    if w.t1 <= w.t0 {
        return Err(Error::InvalidArgument("window has no duration".into()));
    }
    let (h, wd) = (w.height, w.width);
    let plane = h * wd;
    let mut data = vec![0.0f32; bins * plane];
    let last = (bins - 1) as f64;
    for e in &w.events {
        let tb = w.normalized_time(e) * last;
        let b0 = (tb.floor() as usize).min(bins - 1);
        let frac = tb - b0 as f64;
        let px = e.y as usize * wd + e.x as usize;
        let p = e.p as f64;
        data[b0 * plane + px] += (p * (1.0 - frac)) as f32;
        if frac > 0.0 && b0 + 1 < bins {
            data[(b0 + 1) * plane + px] += (p * frac) as f32;
        }
    }
    Tensor::new(&[bins, h, wd], data)
}

/// How a window is turned into the network's input tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputCoding {
    /// Signed voxel grid with `n_in` bins.
    Voxel,
    /// Two-channel ON/OFF counts.
    Count,
}

impl InputCoding {
    pub fn encode(self, w: &EventWindow, channels: usize) -> Result<Tensor> {
        match self {
            InputCoding::Voxel => voxel_encode(w, channels),
            InputCoding::Count => {
                if channels != 2 {
                    return Err(Error::Config(format!(
                        "count encoding has 2 channels, model expects {channels}"
                    )));
                }
                Ok(count_encode(w))
            }
        }
    }
}

impl std::str::FromStr for InputCoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "voxel" => Ok(InputCoding::Voxel),
            "count" => Ok(InputCoding::Count),
            _ => Err(Error::Config(format!("unknown input coding '{s}'"))),
        }
    }
}
