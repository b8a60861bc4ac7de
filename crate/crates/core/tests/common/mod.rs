//! Double-precision re-implementation of the sSNU network and the training
//! loss, written directly from the layer wiring. Used as a finite-difference
//! oracle for the single-precision autodiff gradients.

#![allow(dead_code)]

pub mod formats;
pub mod windows;

use std::collections::HashMap;

use flowspike::encoding::EventWindow;
use flowspike::network::{ArchConfig, Model, Recurrency};
use flowspike::neurons::NeuronKind;

const CHARB_EPS2: f64 = 1e-6;
/// Membrane and previous output of one layer.
type CellValues = (Vec<f64>, Vec<f64>);

pub struct RefNet {
    pub cfg: ArchConfig,
    pub h: usize,
    pub w: usize,
    /// Flat f64 copy of every parameter, in model order.
    pub flat: Vec<f64>,
    index: HashMap<String, (usize, Vec<usize>)>,
    pub names: Vec<String>,
}

struct Plane {
    c: usize,
    h: usize,
    w: usize,
    d: Vec<f64>,
}

impl RefNet {
    pub fn new(model: &Model) -> RefNet {
        assert_eq!(
            model.config().neuron_kind,
            NeuronKind::Ssnu,
            "reference covers sSNU only"
        );
        assert!(!model.config().multi_res_loss);
        let mut flat = Vec::new();
        let mut index = HashMap::new();
        let mut names = Vec::new();
        for (name, t) in model.named_params() {
            index.insert(name.to_string(), (flat.len(), t.shape().to_vec()));
            flat.extend(t.data().iter().map(|&v| v as f64));
            names.push(name.to_string());
        }
        RefNet {
            cfg: model.config().clone(),
            h: model.height(),
            w: model.width(),
            flat,
            index,
            names,
        }
    }

    fn get(&self, p: &[f64], name: &str) -> Option<(Vec<f64>, Vec<usize>)> {
        let (off, shape) = self.index.get(name)?;
        let n: usize = shape.iter().product();
        Some((p[*off..off + n].to_vec(), shape.clone()))
    }

    fn conv(&self, p: &[f64], name: &str, x: &Plane) -> Plane {
        let (wt, shape) = self
            .get(p, &format!("{name}.weight"))
            .unwrap_or_else(|| panic!("missing {name}"));
        let bias = self.get(p, &format!("{name}.bias")).map(|b| b.0);
        let (co, ci, k) = (shape[0], shape[1], shape[2]);
        assert_eq!(ci, x.c, "{name}");
        let pad = (k / 2) as isize;
        let (h, w) = (x.h, x.w);
        let mut out = vec![0.0; co * h * w];
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias.as_ref().map_or(0.0, |b| b[o]);
                    for c in 0..ci {
                        for ky in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let sx = xx as isize + kx as isize - pad;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc +=
                                    wt[((o * ci + c) * k + ky) * k + kx] * x.d[(c * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(o * h + y) * w + xx] = acc;
                }
            }
        }
        Plane { c: co, h, w, d: out }
    }

    fn layer(&self, p: &[f64], name: &str, x: &Plane, recurrent: bool, state: &mut (Vec<f64>, Vec<f64>)) -> Plane {
        let mut drive = self.conv(p, &format!("{name}.w"), x);
        if state.0.is_empty() {
            *state = (vec![0.0; drive.d.len()], vec![0.0; drive.d.len()]);
        }
        if recurrent {
            let prev_y = Plane {
                c: drive.c,
                h: drive.h,
                w: drive.w,
                d: state.1.clone(),
            };
            let r = self.conv(p, &format!("{name}.h"), &prev_y);
            drive.d.iter_mut().zip(&r.d).for_each(|(a, b)| *a += b);
        }
        let d_raw = self.get(p, &format!("{name}.d_raw")).unwrap().0;
        let v_th = self.get(p, &format!("{name}.v_th")).unwrap().0;
        let plane = drive.h * drive.w;
        let (s_prev, y_prev) = (&state.0, &state.1);
        let mut s = vec![0.0; drive.d.len()];
        let mut y = vec![0.0; drive.d.len()];
        for c in 0..drive.c {
            let d = 1.0 / (1.0 + (-d_raw[c]).exp());
            for q in c * plane..(c + 1) * plane {
                s[q] = (1.0 - d) * drive.d[q] + d * s_prev[q] * (1.0 - y_prev[q]);
                y[q] = 1.0 / (1.0 + (-(s[q] - v_th[c])).exp());
            }
        }
        *state = (s, y.clone());
        Plane { d: y, ..drive }
    }

    /// Runs the windows from zero state and returns the flow of every step.
    pub fn run(&self, p: &[f64], inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.cfg.n_stages;
        let (first, second) = match self.cfg.recurrency {
            Recurrency::RF => (true, false),
            Recurrency::FR => (false, true),
            Recurrency::RR => (true, true),
            Recurrency::FF => (false, false),
        };
        let mut states: HashMap<String, (Vec<f64>, Vec<f64>)> = HashMap::new();
        let mut flows = Vec::new();
        for input in inputs {
            let mut st = |name: &str| states.remove(name).unwrap_or_default();
            let mut put = Vec::new();
            let mut layer = |name: String, x: &Plane, rec: bool, put: &mut Vec<(String, CellValues)>| {
                let mut s = st(&name);
                let y = self.layer(p, &name, x, rec, &mut s);
                put.push((name, s));
                y
            };
            let x = Plane {
                c: self.cfg.n_in,
                h: self.h,
                w: self.w,
                d: input.clone(),
            };
            let x = layer("conv0".into(), &x, false, &mut put);
            let mut x = layer("conv1".into(), &x, false, &mut put);
            let mut skips = Vec::new();
            for k in 1..=n {
                let pooled = pool(&x);
                skips.push(x);
                x = layer(format!("s{k}.0"), &pooled, first, &mut put);
                x = layer(format!("s{k}.1"), &x, second, &mut put);
            }
            for j in 1..=n {
                let name = format!("u{}", j + 5 - n);
                let up = upsample(&x);
                let y = layer(format!("{name}.0"), &up, false, &mut put);
                let skip = skips.pop().unwrap();
                let mut cat = y.d;
                cat.extend(&skip.d);
                let cat = Plane {
                    c: y.c + skip.c,
                    h: y.h,
                    w: y.w,
                    d: cat,
                };
                x = layer(format!("{name}.1"), &cat, false, &mut put);
            }
            let pre = self.conv(p, "pred", &x);
            flows.push(pre.d.iter().map(|v| v.tanh() * self.cfg.max_flow as f64).collect());
            states.extend(put);
        }
        flows
    }

    /// Summed training loss over the windows.
    pub fn sequence_loss(&self, p: &[f64], inputs: &[Vec<f64>], windows: &[EventWindow], lambda: f64) -> f64 {
        self.run(p, inputs)
            .iter()
            .zip(windows)
            .map(|(f, w)| total_loss(f, w, self.h, self.w, lambda))
            .sum()
    }
}

fn pool(x: &Plane) -> Plane {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut d = vec![0.0; x.c * h * w];
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                let at = |dy: usize, dx: usize| x.d[(c * x.h + 2 * y + dy) * x.w + 2 * xx + dx];
                d[(c * h + y) * w + xx] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
    }
    Plane { c: x.c, h, w, d }
}

/// Half-pixel ×2 bilinear upsampling with clamped edges.
fn upsample(x: &Plane) -> Plane {
    let (h, w) = (2 * x.h, 2 * x.w);
    let tap = |o: usize, n: usize| {
        let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        (lo, hi, if lo == hi { 0.0 } else { s - lo as f64 })
    };
    let mut d = vec![0.0; x.c * h * w];
    for c in 0..x.c {
        for y in 0..h {
            let (y0, y1, fy) = tap(y, x.h);
            for xx in 0..w {
                let (x0, x1, fx) = tap(xx, x.w);
                let at = |yy: usize, xi: usize| x.d[(c * x.h + yy) * x.w + xi];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                d[(c * h + y) * w + xx] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Plane { c: x.c, h, w, d }
}

/// Average-timestamp contrast towards one end of the window.
pub fn contrast(flow: &[f64], win: &EventWindow, h: usize, w: usize, forward: bool) -> f64 {
    if win.events.is_empty() {
        return 0.0;
    }
    let mut num = vec![[0.0f64; 2]; h * w];
    let mut den = vec![[0.0f64; 2]; h * w];
    let dur = (win.t1 - win.t0) as f64;
    for e in &win.events {
        let tau = (e.t - win.t0) as f64 / dur;
        let (shift, weight) = if forward { (1.0 - tau, tau) } else { (-tau, 1.0 - tau) };
        let q = e.y as usize * w + e.x as usize;
        let x = e.x as f64 + shift * flow[q];
        let y = e.y as f64 + shift * flow[h * w + q];
        let pol = if e.p > 0 { 0 } else { 1 };
        let (x0, y0) = (x.floor(), y.floor());
        for (px, py, k) in [
            (x0, y0, (1.0 - (x - x0)) * (1.0 - (y - y0))),
            (x0 + 1.0, y0, (x - x0) * (1.0 - (y - y0))),
            (x0, y0 + 1.0, (1.0 - (x - x0)) * (y - y0)),
            (x0 + 1.0, y0 + 1.0, (x - x0) * (y - y0)),
        ] {
            if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
                continue;
            }
            let i = py as usize * w + px as usize;
            num[i][pol] += k * weight;
            den[i][pol] += k;
        }
    }
    let mut sum = 0.0;
    let mut occupied = 0usize;
    for i in 0..h * w {
        for pol in 0..2 {
            if den[i][pol] > 0.0 {
                let t = num[i][pol] / den[i][pol];
                sum += t * t;
            }
        }
        if den[i][0] > 0.0 || den[i][1] > 0.0 {
            occupied += 1;
        }
    }
    sum / occupied.max(1) as f64
}

pub fn charbonnier(flow: &[f64], h: usize, w: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                let i = (c * h + y) * w + x;
                if x + 1 < w {
                    sum += ((flow[i + 1] - flow[i]).powi(2) + CHARB_EPS2).sqrt();
                    n += 1;
                }
                if y + 1 < h {
                    sum += ((flow[i + w] - flow[i]).powi(2) + CHARB_EPS2).sqrt();
                    n += 1;
                }
            }
        }
    }
    sum / n.max(1) as f64
}

pub fn total_loss(flow: &[f64], win: &EventWindow, h: usize, w: usize, lambda: f64) -> f64 {
    contrast(flow, win, h, w, true) + contrast(flow, win, h, w, false) + lambda * charbonnier(flow, h, w)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Outcome of comparing autodiff gradients with central differences.
pub struct GradCheck {
    pub total: usize,
    pub within: usize,
    pub worst: Vec<(String, f64, f64, f64)>,
}

impl GradCheck {
    pub fn fraction(&self) -> f64 {
        self.within as f64 / self.total as f64
    }
}

/// Compares `grads` (flattened in model order) with f64 central differences
/// of the reference sequence loss.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    net: &RefNet,
    grads: &[f64],
    inputs: &[Vec<f64>],
    windows: &[EventWindow],
    lambda: f64,
    step: f64,
    tol: f64,
    floor: f64,
) -> GradCheck {
    let mut p = net.flat.clone();
    let mut within = 0;
    let mut worst = Vec::new();
    let owner = |i: usize| {
        net.names
            .iter()
            .rev()
            .find(|n| net.index[*n].0 <= i)
            .cloned()
            .unwrap_or_default()
    };
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = net.sequence_loss(&p, inputs, windows, lambda);
        p[i] = orig - step;
        let down = net.sequence_loss(&p, inputs, windows, lambda);
        p[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let e = rel_err(grads[i], fd, floor);
        if e < tol {
            within += 1;
        } else {
            worst.push((owner(i), grads[i], fd, e));
        }
    }
    worst.sort_by(|a, b| b.3.total_cmp(&a.3));
    worst.truncate(10);
    GradCheck {
        total: p.len(),
        within,
        worst,
    }
}
