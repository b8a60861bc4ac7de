//! Sparse flow evaluation: endpoint error, outliers and the weighted
//! average over the four reference sequences.

use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::encoding::EventWindow;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Endpoint error above which a pixel counts as an outlier.
pub const OUTLIER_THRESHOLD: f64 = 3.0;
/// Ground-truth components at or beyond this magnitude mark missing data.
pub const INVALID_FLOW: f32 = 1e9;

/// Reference sequences, in WAEE order.
pub const SEQUENCES: [&str; 4] = ["outdoor_day1", "indoor_flying1", "indoor_flying2", "indoor_flying3"];

/// Per-sequence normalisers for the weighted AEE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WaeeWeights {
    pub od1: f64,
    pub if1: f64,
    pub if2: f64,
    pub if3: f64,
}

impl WaeeWeights {
    pub const DT1: WaeeWeights = WaeeWeights {
        od1: 0.5375,
        if1: 0.7975,
        if2: 1.5475,
        if3: 1.2775,
    };
    pub const DT4: WaeeWeights = WaeeWeights {
        od1: 2.0150,
        if1: 2.9900,
        if2: 5.3675,
        if3: 4.3600,
    };

    /// Weights for a frame gap of 1 or 4.
    pub fn for_dt(dt: u32) -> Result<WaeeWeights> {
        match dt {
            1 => Ok(Self::DT1),
            4 => Ok(Self::DT4),
            _ => Err(Error::InvalidArgument(format!("dt must be 1 or 4, got {dt}"))),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.od1, self.if1, self.if2, self.if3]
    }
}

/// `mean(aee_i / w_i)` over the four sequences.
pub fn waee(aees: [f64; 4], weights: &WaeeWeights) -> f64 {
    aees.iter().zip(weights.as_array()).map(|(a, w)| a / w).sum::<f64>() / 4.0
}

/// Predicted and ground-truth flow plus the two evaluation masks.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub pred: Tensor,
    pub gt: Tensor,
    pub valid: Vec<bool>,
    pub events: Vec<bool>,
}

fn flow_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.chw() {
        Some((2, h, w)) => Ok((h, w)),
        _ => Err(Error::shape(
            "eval",
            format!("{what} flow must be 2×H×W, got {:?}", t.shape()),
        )),
    }
}

impl EvalSample {
    pub fn new(pred: Tensor, gt: Tensor, valid: Vec<bool>, events: Vec<bool>) -> Result<Self> {
        let (h, w) = flow_dims(&pred, "predicted")?;
        if flow_dims(&gt, "ground-truth")? != (h, w) || valid.len() != h * w || events.len() != h * w {
            return Err(Error::shape(
                "eval",
                "prediction, ground truth and masks differ in extent",
            ));
        }
        Ok(EvalSample {
            pred,
            gt,
            valid,
            events,
        })
    }

    /// Valid mask from the ground truth's finite, in-range entries and
    /// event mask from the pixels that fired in `window`.
    pub fn from_window(pred: Tensor, gt: Tensor, window: &EventWindow) -> Result<Self> {
        let (h, w) = flow_dims(&gt, "ground-truth")?;
        if (window.height, window.width) != (h, w) {
            return Err(Error::shape("eval", "event window extent differs from flow"));
        }
        let valid = (0..h * w)
            .map(|q| {
                let (u, v) = (gt.data()[q], gt.data()[h * w + q]);
                u.is_finite() && v.is_finite() && u.abs() < INVALID_FLOW && v.abs() < INVALID_FLOW
            })
            .collect();
        let mut events = vec![false; h * w];
        for e in &window.events {
            events[e.y as usize * w + e.x as usize] = true;
        }
        EvalSample::new(pred, gt, valid, events)
    }

    /// Endpoint errors at every evaluable pixel.
    pub fn endpoint_errors(&self) -> Vec<f64> {
        let n = self.valid.len();
        let (p, g) = (self.pred.data(), self.gt.data());
        (0..n)
            .filter(|&q| self.valid[q] && self.events[q])
            .map(|q| {
                let du = p[q] as f64 - g[q] as f64;
                let dv = p[n + q] as f64 - g[n + q] as f64;
                (du * du + dv * dv).sqrt()
            })
            .collect()
    }
}

/// Mean endpoint error over pixels with ground truth and events.
pub fn aee(sample: &EvalSample) -> Result<f64> {
    let e = sample.endpoint_errors();
    if e.is_empty() {
        return Err(Error::NoEvaluablePixels);
    }
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Percentage of evaluable pixels whose endpoint error exceeds `threshold`.
pub fn outlier_pct(sample: &EvalSample, threshold: f64) -> Result<f64> {
    let e = sample.endpoint_errors();
    if e.is_empty() {
        return Err(Error::NoEvaluablePixels);
    }
    Ok(100.0 * e.iter().filter(|&&x| x > threshold).count() as f64 / e.len() as f64)
}

/// Metrics of one sequence, averaged over its frames.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceScore {
    pub name: String,
    pub aee: f64,
    pub outlier_pct: f64,
    /// Frames that had at least one evaluable pixel.
    pub frames: usize,
}

/// Per-frame AEE and outlier percentage averaged over the frames that have
/// evaluable pixels.
pub fn score_sequence(name: &str, samples: &[EvalSample]) -> Result<SequenceScore> {
    let (mut a, mut o, mut n) = (0.0, 0.0, 0usize);
    for s in samples {
        match (aee(s), outlier_pct(s, OUTLIER_THRESHOLD)) {
            (Ok(x), Ok(y)) => {
                a += x;
                o += y;
                n += 1;
            }
            (Err(Error::NoEvaluablePixels), _) => {}
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    if n == 0 {
        return Err(Error::NoEvaluablePixels);
    }
    Ok(SequenceScore {
        name: name.to_string(),
        aee: a / n as f64,
        outlier_pct: o / n as f64,
        frames: n,
    })
}

/// Evaluation summary over one or more sequences.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub dt: u32,
    pub rows: Vec<SequenceScore>,
}

impl Report {
    /// WAEE when exactly the four reference sequences are present.
    pub fn waee(&self) -> Option<f64> {
        let aees: Option<Vec<f64>> = SEQUENCES
            .iter()
            .map(|s| self.rows.iter().find(|r| r.name == *s).map(|r| r.aee))
            .collect();
        let w = WaeeWeights::for_dt(self.dt).ok()?;
        aees.map(|a| waee([a[0], a[1], a[2], a[3]], &w))
    }

    pub fn mean_outlier_pct(&self) -> f64 {
        self.rows.iter().map(|r| r.outlier_pct).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "sequence,dt,aee,outlier_pct,frames")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{}",
                r.name, self.dt, r.aee, r.outlier_pct, r.frames
            )?;
        }
        if let Some(w) = self.waee() {
            writeln!(out, "WAEE,{},{:.6},{:.6},", self.dt, w, self.mean_outlier_pct())?;
        }
        Ok(())
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} {:>8} {:>8} {:>7}", "sequence", "AEE", "%Out", "frames")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<18} {:>8.3} {:>8.2} {:>7}",
                r.name, r.aee, r.outlier_pct, r.frames
            )?;
        }
        match self.waee() {
            Some(w) => writeln!(
                f,
                "{:<18} {:>8.3} {:>8.2}",
                format!("WAEE (dt={})", self.dt),
                w,
                self.mean_outlier_pct()
            ),
            None => writeln!(f, "{:<18} {:>8} {:>8.2}", "mean", "", self.mean_outlier_pct()),
        }
    }
}
