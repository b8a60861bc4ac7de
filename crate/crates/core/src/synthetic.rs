//! Synthetic event streams from a bright rectangle translating at constant
//! velocity across a wrapping sensor.
//!
//! Each pixel tracks the covered fraction of its area. Every time that
//! fraction moves `contrast_step` away from the pixel's last reference
//! level an event fires, ON for rising and OFF for falling coverage.

use serde::{Deserialize, Serialize};

use crate::encoding::{slice_windows_until, Event, EventWindow};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BarSequence {
    pub width: usize,
    pub height: usize,
    pub n_windows: usize,
    pub window_us: u64,
    /// Pixels per window, (right, down).
    pub velocity: (f32, f32),
    /// Rectangle extent (width, height) in pixels.
    pub bar: (f32, f32),
    /// Top-left corner at t = 0.
    pub origin: (f32, f32),
    pub contrast_step: f32,
    /// Simulation steps per window.
    pub substeps: usize,
}

impl Default for BarSequence {
    fn default() -> Self {
        BarSequence {
            width: 16,
            height: 16,
            n_windows: 40,
            window_us: 10_000,
            velocity: (1.0, 1.0),
            bar: (3.0, 6.0),
            origin: (2.0, 3.0),
            contrast_step: 0.25,
            substeps: 40,
        }
    }
}

/// Length of `[a, a+1]` ∩ `[c, c+len]` on a circle of circumference `n`.
fn overlap_1d(a: f64, c: f64, len: f64, n: f64) -> f64 {
    let c = c.rem_euclid(n);
    [-n, 0.0, n]
        .iter()
        .map(|s| {
            let lo = (c + s).max(a);
            let hi = (c + s + len).min(a + 1.0);
            (hi - lo).max(0.0)
        })
        .sum()
}

impl BarSequence {
    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width > u16::MAX as usize || self.height > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("sensor {}x{}", self.width, self.height)));
        }
        if self.window_us == 0 || self.substeps == 0 || self.window_us < self.substeps as u64 {
            return Err(Error::InvalidArgument(
                "window must hold at least one microsecond per substep".into(),
            ));
        }
        if !(self.contrast_step.is_finite() && self.contrast_step > 0.0) {
            return Err(Error::InvalidArgument("contrast step must be positive".into()));
        }
        Ok(())
    }

    fn coverage(&self, t_windows: f64) -> Vec<f64> {
        let (w, h) = (self.width as f64, self.height as f64);
        let cx = self.origin.0 as f64 + self.velocity.0 as f64 * t_windows;
        let cy = self.origin.1 as f64 + self.velocity.1 as f64 * t_windows;
        let ox: Vec<f64> = (0..self.width)
            .map(|x| overlap_1d(x as f64, cx, self.bar.0 as f64, w))
            .collect();
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            let oy = overlap_1d(y as f64, cy, self.bar.1 as f64, h);
            out.extend(ox.iter().map(|&o| o * oy));
        }
        out
    }

    /// Time-ordered event stream covering `n_windows` windows.
    pub fn events(&self) -> Result<Vec<Event>> {
        self.validate()?;
        let mut level = self.coverage(0.0);
        let step = self.contrast_step as f64;
        let total = self.n_windows * self.substeps;
        let mut events = Vec::new();
        for s in 1..=total {
            let tw = s as f64 / self.substeps as f64;
            let t = (tw * self.window_us as f64).round() as u64;
            // the last sample belongs to the window after the sequence
            let t = t.min((self.n_windows as u64 * self.window_us).saturating_sub(1));
            for (q, c) in self.coverage(tw).into_iter().enumerate() {
                let (x, y) = ((q % self.width) as u16, (q / self.width) as u16);
                while c - level[q] >= step - 1e-9 {
                    level[q] += step;
                    events.push(Event::new(x, y, t, 1));
                }
                while level[q] - c >= step - 1e-9 {
                    level[q] -= step;
                    events.push(Event::new(x, y, t, -1));
                }
            }
        }
        Ok(events)
    }

    pub fn windows(&self) -> Result<Vec<EventWindow>> {
        let events = self.events()?;
        slice_windows_until(
            &events,
            self.window_us,
            self.width,
            self.height,
            self.n_windows as u64 * self.window_us,
        )
    }

    /// The true flow, identical at every pixel.
    pub fn ground_truth(&self) -> Tensor {
        let n = self.width * self.height;
        let mut d = vec![self.velocity.0; n];
        d.extend(vec![self.velocity.1; n]);
        Tensor::new(&[2, self.height, self.width], d).expect("shape matches")
    }
}
