//! Self-supervised flow objective: motion-compensated average-timestamp
//! contrast in both time directions plus a Charbonnier smoothness prior.
//!
//! Events are warped to a reference time with the flow sampled at their
//! pixel and splatted bilinearly into per-polarity accumulators. The
//! average timestamp image `T = Σ w τ' / Σ w` is sharp (small) where the
//! flow aligns the events. The loss is `(Σ T+² + Σ T-²) / occupied`.

use crate::autograd::{Tape, Var};
use crate::encoding::EventWindow;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default weight of the smoothness term.
pub const DEFAULT_LAMBDA: f32 = 0.001;
pub const CHARBONNIER_EPS: f64 = 1e-3;
pub const CHARBONNIER_ALPHA: f64 = 0.5;

/// Reference time the events are warped to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeRef {
    /// Window start (backward warp).
    Start,
    /// Window end (forward warp).
    End,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpedEvent {
    pub x: f64,
    pub y: f64,
    /// Time weight: `tau` towards the end reference, `1 - tau` towards the start.
    pub tau: f64,
    pub p: i8,
    /// Displacement per unit flow, `dx'/du`.
    gain: f64,
    /// Source pixel (row-major index).
    src: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimestampImages {
    pub plus: Tensor,
    pub minus: Tensor,
    pub occupancy: Tensor,
}

fn flow_hw(flow: &Tensor, w: &EventWindow) -> Result<(usize, usize)> {
    match flow.chw() {
        Some((2, h, wd)) if h == w.height && wd == w.width => Ok((h, wd)),
        _ => Err(Error::shape(
            "warp_events",
            format!(
                "flow {:?} does not match a {}x{} sensor",
                flow.shape(),
                w.height,
                w.width
            ),
        )),
    }
}

/// Warps every event of `w` to `t_ref` along the flow at its pixel.
pub fn warp_events(flow: &Tensor, w: &EventWindow, t_ref: TimeRef) -> Result<Vec<WarpedEvent>> {
    let (h, wd) = flow_hw(flow, w)?;
    let (u, v) = flow.data().split_at(h * wd);
    Ok(w.events
        .iter()
        .map(|e| {
            let tau = w.normalized_time(e);
            let (gain, tau) = match t_ref {
                TimeRef::End => (1.0 - tau, tau),
                TimeRef::Start => (-tau, 1.0 - tau),
            };
            let src = e.y as usize * wd + e.x as usize;
            WarpedEvent {
                x: e.x as f64 + gain * u[src] as f64,
                y: e.y as f64 + gain * v[src] as f64,
                tau,
                p: e.p,
                gain,
                src,
            }
        })
        .collect())
}

/// In-frame bilinear taps of a continuous point: (pixel, weight, dw/dx, dw/dy).
fn taps(x: f64, y: f64, h: usize, w: usize) -> impl Iterator<Item = (usize, f64, f64, f64)> {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    [
        (0.0, 0.0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (1.0, 0.0, fx * (1.0 - fy), 1.0 - fy, -fx),
        (0.0, 1.0, (1.0 - fx) * fy, -fy, 1.0 - fx),
        (1.0, 1.0, fx * fy, fy, fx),
    ]
    .into_iter()
    .filter_map(move |(dx, dy, wt, gx, gy)| {
        let (px, py) = (x0 + dx, y0 + dy);
        (px >= 0.0 && py >= 0.0 && px < w as f64 && py < h as f64).then(|| (py as usize * w + px as usize, wt, gx, gy))
    })
}

struct Accum {
    /// [plus, minus] × (Σ w τ', Σ w)
    num: [Vec<f64>; 2],
    den: [Vec<f64>; 2],
}

impl Accum {
    fn splat(warped: &[WarpedEvent], h: usize, w: usize) -> Accum {
        let mut a = Accum {
            num: [vec![0.0; h * w], vec![0.0; h * w]],
            den: [vec![0.0; h * w], vec![0.0; h * w]],
        };
        for e in warped {
            let c = polarity_index(e.p);
            for (q, wt, _, _) in taps(e.x, e.y, h, w) {
                a.num[c][q] += wt * e.tau;
                a.den[c][q] += wt;
            }
        }
        a
    }

    fn average(&self, c: usize, q: usize) -> f64 {
        if self.den[c][q] > 0.0 {
            self.num[c][q] / self.den[c][q]
        } else {
            0.0
        }
    }

    fn occupied(&self) -> usize {
        (0..self.den[0].len())
            .filter(|&q| self.den[0][q] > 0.0 || self.den[1][q] > 0.0)
            .count()
    }
}

fn polarity_index(p: i8) -> usize {
    if p > 0 {
        0
    } else {
        1
    }
}

/// Per-polarity average timestamp images and the occupancy mask.
pub fn avg_timestamp_images(warped: &[WarpedEvent], height: usize, width: usize) -> TimestampImages {
    let a = Accum::splat(warped, height, width);
    let image = |c: usize| {
        let data = (0..height * width).map(|q| a.average(c, q) as f32).collect();
        Tensor::new(&[height, width], data).expect("shape matches")
    };
    let occ = (0..height * width)
        .map(|q| {
            if a.den[0][q] > 0.0 || a.den[1][q] > 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    TimestampImages {
        plus: image(0),
        minus: image(1),
        occupancy: Tensor::new(&[height, width], occ).expect("shape matches"),
    }
}

/// Contrast term for one reference time and its gradient w.r.t. the flow.
pub fn contrast_value_and_grad(flow: &Tensor, w: &EventWindow, t_ref: TimeRef) -> Result<(f64, Vec<f64>)> {
    let (h, wd) = flow_hw(flow, w)?;
    let mut grad = vec![0.0f64; 2 * h * wd];
    if w.is_empty() {
        return Ok((0.0, grad));
    }
    let warped = warp_events(flow, w, t_ref)?;
    let a = Accum::splat(&warped, h, wd);
    let n = a.occupied().max(1) as f64;
    let mut value = 0.0;
    for c in 0..2 {
        for q in 0..h * wd {
            let t = a.average(c, q);
            value += t * t;
        }
    }
    for e in &warped {
        let c = polarity_index(e.p);
        let (mut gx, mut gy) = (0.0, 0.0);
        for (q, _, dwx, dwy) in taps(e.x, e.y, h, wd) {
            let den = a.den[c][q];
            if den <= 0.0 {
                continue;
            }
            let t = a.num[c][q] / den;
            let dl_dw = 2.0 * t / n * (e.tau - t) / den;
            gx += dl_dw * dwx;
            gy += dl_dw * dwy;
        }
        grad[e.src] += gx * e.gain;
        grad[h * wd + e.src] += gy * e.gain;
    }
    Ok((value / n, grad))
}

/// Contrast term towards `t_ref` recorded on the tape.
pub fn contrast_term(tape: &mut Tape, flow: Var, w: &EventWindow, t_ref: TimeRef) -> Result<Var> {
    let (value, grad) = contrast_value_and_grad(tape.value(flow), w, t_ref)?;
    tape.fused_scalar(flow, value as f32, grad.into_iter().map(|g| g as f32).collect())
}

/// Forward plus backward contrast.
pub fn contrast_loss(tape: &mut Tape, flow: Var, w: &EventWindow) -> Result<Var> {
    let fw = contrast_term(tape, flow, w, TimeRef::End)?;
    let bw = contrast_term(tape, flow, w, TimeRef::Start)?;
    tape.add(fw, bw)
}

/// Mean Charbonnier penalty over all horizontal and vertical neighbour
/// differences of both flow channels, with its gradient.
pub fn smoothness_value_and_grad(flow: &Tensor) -> Result<(f64, Vec<f64>)> {
    let (c, h, w) = flow.chw().ok_or_else(|| {
        Error::shape(
            "charbonnier_smoothness",
            format!("expected C×H×W, got {:?}", flow.shape()),
        )
    })?;
    let d = flow.data();
    let mut grad = vec![0.0f64; d.len()];
    let count = c * (h * w.saturating_sub(1) + h.saturating_sub(1) * w);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let eps2 = CHARBONNIER_EPS * CHARBONNIER_EPS;
    let mut value = 0.0;
    let mut pair = |a: usize, b: usize| {
        let diff = d[b] as f64 - d[a] as f64;
        let base = diff * diff + eps2;
        value += base.powf(CHARBONNIER_ALPHA);
        let g = 2.0 * CHARBONNIER_ALPHA * diff * base.powf(CHARBONNIER_ALPHA - 1.0);
        grad[b] += g;
        grad[a] -= g;
    };
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = (ch * h + y) * w + x;
                if x + 1 < w {
                    pair(i, i + 1);
                }
                if y + 1 < h {
                    pair(i, i + w);
                }
            }
        }
    }
    let n = count as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((value / n, grad))
}

pub fn charbonnier_smoothness(tape: &mut Tape, flow: Var) -> Result<Var> {
    let (value, grad) = smoothness_value_and_grad(tape.value(flow))?;
    tape.fused_scalar(flow, value as f32, grad.into_iter().map(|g| g as f32).collect())
}

/// The scalar loss and its three parts.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub contrast_fw: f32,
    pub contrast_bw: f32,
    pub smooth: f32,
}

/// `contrast(end) + contrast(start) + lambda * smoothness`.
pub fn total_loss(tape: &mut Tape, flow: Var, w: &EventWindow, lambda: f32) -> Result<LossTerms> {
    let fw = contrast_term(tape, flow, w, TimeRef::End)?;
    let bw = contrast_term(tape, flow, w, TimeRef::Start)?;
    let sm = charbonnier_smoothness(tape, flow)?;
    let contrast = tape.add(fw, bw)?;
    let weighted = tape.scale(sm, lambda);
    let total = tape.add(contrast, weighted)?;
    Ok(LossTerms {
        total,
        contrast_fw: tape.value(fw).item(),
        contrast_bw: tape.value(bw).item(),
        smooth: tape.value(sm).item(),
    })
}

/// Sum of [`total_loss`] over every flow in `flows`; the reported parts
/// are summed as well.
pub fn multi_res_loss(tape: &mut Tape, flows: &[Var], w: &EventWindow, lambda: f32) -> Result<LossTerms> {
    let (first, rest) = flows
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("multi-resolution loss needs at least one flow".into()))?;
    let mut acc = total_loss(tape, *first, w, lambda)?;
    for &f in rest {
        let t = total_loss(tape, f, w, lambda)?;
        acc.total = tape.add(acc.total, t.total)?;
        acc.contrast_fw += t.contrast_fw;
        acc.contrast_bw += t.contrast_bw;
        acc.smooth += t.smooth;
    }
    Ok(acc)
}

/// Evaluates [`total_loss`] on a plain tensor.
pub fn total_loss_value(flow: &Tensor, w: &EventWindow, lambda: f32) -> Result<f32> {
    let mut tape = Tape::no_grad();
    let f = tape.constant(flow.clone());
    let t = total_loss(&mut tape, f, w, lambda)?;
    Ok(tape.value(t.total).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::Event;

    fn uniform_flow(h: usize, w: usize, u: f32, v: f32) -> Tensor {
        let mut d = vec![u; h * w];
        d.extend(vec![v; h * w]);
        Tensor::new(&[2, h, w], d).unwrap()
    }

    fn window(events: Vec<Event>) -> EventWindow {
        EventWindow::new(events, 0, 100, 5, 5).unwrap()
    }

    #[test]
    fn warp_directions() {
        let w = window(vec![Event::new(2, 2, 50, 1)]);
        let f = uniform_flow(5, 5, 2.0, 0.0);
        let fw = warp_events(&f, &w, TimeRef::End).unwrap()[0];
        let bw = warp_events(&f, &w, TimeRef::Start).unwrap()[0];
        assert_eq!((fw.x, fw.y), (3.0, 2.0));
        assert_eq!((bw.x, bw.y), (1.0, 2.0));
        assert_eq!(fw.tau + bw.tau, 1.0);
        let zero = warp_events(&uniform_flow(5, 5, 0.0, 0.0), &w, TimeRef::End).unwrap()[0];
        assert_eq!((zero.x, zero.y), (2.0, 2.0));
    }

    #[test]
    fn average_timestamps() {
        let w = window(vec![
            Event::new(1, 1, 20, 1),
            Event::new(3, 3, 50, -1),
            Event::new(1, 1, 80, 1),
        ]);
        let warped = warp_events(&uniform_flow(5, 5, 0.0, 0.0), &w, TimeRef::End).unwrap();
        let img = avg_timestamp_images(&warped, 5, 5);
        assert!((img.plus.data()[6] - 0.5).abs() < 1e-6);
        assert_eq!(img.minus.data()[18], 0.5);
        assert_eq!(img.occupancy.sum(), 2.0);

        let img = avg_timestamp_images(&[], 5, 5);
        assert_eq!(img.plus.sum() + img.minus.sum() + img.occupancy.sum(), 0.0);
    }

    #[test]
    fn empty_window_has_zero_contrast() {
        let w = EventWindow::empty(0, 100, 5, 5);
        let f = uniform_flow(5, 5, 1.0, -2.0);
        let (v, g) = contrast_value_and_grad(&f, &w, TimeRef::End).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        let loss = total_loss_value(&f, &w, 0.5).unwrap();
        assert!((loss - 0.5 * 1e-3).abs() < 1e-9);
    }

    #[test]
    fn constant_flow_smoothness_is_eps() {
        let (v, g) = smoothness_value_and_grad(&uniform_flow(4, 3, 0.3, 0.1)).unwrap();
        assert!((v - CHARBONNIER_EPS).abs() < 1e-12);
        assert!(g.iter().all(|&x| x == 0.0));
        let (v, _) = smoothness_value_and_grad(&uniform_flow(1, 1, 5.0, 5.0)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn lambda_zero_is_contrast_sum() {
        let w = window(vec![Event::new(1, 1, 20, 1), Event::new(2, 1, 70, 1)]);
        let f = uniform_flow(5, 5, 0.7, 0.2);
        let fw = contrast_value_and_grad(&f, &w, TimeRef::End).unwrap().0;
        let bw = contrast_value_and_grad(&f, &w, TimeRef::Start).unwrap().0;
        let total = total_loss_value(&f, &w, 0.0).unwrap();
        assert!((total as f64 - (fw + bw)).abs() < 1e-6);
    }

    #[test]
    fn duplicate_flows_double_multi_res_loss() {
        let w = window(vec![Event::new(1, 1, 20, 1), Event::new(2, 1, 70, -1)]);
        let mut tape = Tape::new();
        let f = tape.constant(uniform_flow(5, 5, 0.4, 0.1));
        let one = multi_res_loss(&mut tape, &[f], &w, 0.001).unwrap();
        let two = multi_res_loss(&mut tape, &[f, f], &w, 0.001).unwrap();
        assert_eq!(2.0 * tape.value(one.total).item(), tape.value(two.total).item());
        assert!(multi_res_loss(&mut tape, &[], &w, 0.001).is_err());
    }
}
