//! Stateful neural units applied per pixel and per channel to convolutional
//! drive.
//!
//! * SNU: leaky integrate-and-fire with a multiplicative reset gate,
//!   `s_t = (1-d)(Wx_t + Hy_{t-1}) + d s_{t-1} (1 - y_{t-1})`,
//!   `y_t = step(s_t - v_th)`.
//! * sSNU: the same membrane with `y_t = sigmoid(s_t - v_th)`.
//! * SNUo: output-modulated unit,
//!   `s_t = g(Wx_t + Hy_{t-1} + d s_{t-1} (1 - ỹ_{t-1}))`,
//!   `ỹ_t = step(s_t - v_th)`, `y_t = ỹ_t * sigmoid(W_o x_t + H_o y_{t-1} + b_o)`
//!   with `g` a leaky ReLU.
//!
//! The decay is stored as an unconstrained logit and mapped through the
//! logistic function, so the effective `d` stays inside (0, 1).

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Slope `a` of the arctan-spike surrogate derivative.
pub const SURROGATE_SLOPE: f32 = 10.0;
/// Negative-side slope of the SNUo membrane activation.
pub const SNUO_LEAK: f32 = 0.1;
/// Initial effective decay.
pub const INIT_DECAY: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NeuronKind {
    #[serde(rename = "SNU")]
    Snu,
    #[serde(rename = "SNUo")]
    Snuo,
    #[serde(rename = "sSNU")]
    Ssnu,
}

impl NeuronKind {
    /// Whether the cell's (unmodulated) output is a binary spike.
    pub fn is_spiking(self) -> bool {
        !matches!(self, NeuronKind::Ssnu)
    }

    pub fn initial_threshold(self) -> f32 {
        match self {
            NeuronKind::Snuo => 0.5,
            NeuronKind::Snu | NeuronKind::Ssnu => 1.0,
        }
    }
}

impl std::fmt::Display for NeuronKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NeuronKind::Snu => "SNU",
            NeuronKind::Snuo => "SNUo",
            NeuronKind::Ssnu => "sSNU",
        })
    }
}

impl std::str::FromStr for NeuronKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "snu" => Ok(NeuronKind::Snu),
            "snuo" => Ok(NeuronKind::Snuo),
            "ssnu" => Ok(NeuronKind::Ssnu),
            _ => Err(Error::Config(format!("unknown neuron kind '{s}'"))),
        }
    }
}

/// Per-channel trainable dynamics of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronParams {
    pub kind: NeuronKind,
    /// Decay logit; effective decay is `sigmoid(d_raw)`.
    pub d_raw: Tensor,
    pub v_th: Tensor,
}

impl NeuronParams {
    pub fn new(kind: NeuronKind, channels: usize) -> Self {
        let logit = (INIT_DECAY / (1.0 - INIT_DECAY)).ln();
        NeuronParams {
            kind,
            d_raw: Tensor::full(&[channels], logit),
            v_th: Tensor::full(&[channels], kind.initial_threshold()),
        }
    }

    pub fn channels(&self) -> usize {
        self.v_th.numel()
    }

    pub fn decay(&self) -> Vec<f32> {
        self.d_raw.data().iter().map(|&r| crate::autograd::sigmoid(r)).collect()
    }
}

/// Membrane state carried between time steps, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub s: Tensor,
    pub y_prev: Tensor,
    /// Unmodulated previous output (SNUo only).
    pub y_tilde_prev: Option<Tensor>,
}

impl CellState {
    pub fn zeros(kind: NeuronKind, shape: &[usize]) -> Self {
        CellState {
            s: Tensor::zeros(shape),
            y_prev: Tensor::zeros(shape),
            y_tilde_prev: (kind == NeuronKind::Snuo).then(|| Tensor::zeros(shape)),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.s.shape()
    }
}

/// Zeroed copy of `state` with the same shapes.
pub fn reset_state(state: &CellState) -> CellState {
    CellState {
        s: Tensor::zeros(state.s.shape()),
        y_prev: Tensor::zeros(state.y_prev.shape()),
        y_tilde_prev: state.y_tilde_prev.as_ref().map(|t| Tensor::zeros(t.shape())),
    }
}

/// Cell state living on a tape during one episode.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub s: Var,
    pub y: Var,
    pub y_tilde: Option<Var>,
}

impl CellVars {
    /// Loads a detached state as constants (no history).
    pub fn load(tape: &mut Tape, state: &CellState) -> Self {
        CellVars {
            s: tape.constant(state.s.clone()),
            y: tape.constant(state.y_prev.clone()),
            y_tilde: state.y_tilde_prev.as_ref().map(|t| tape.constant(t.clone())),
        }
    }

    /// Copies the current values out, dropping graph history.
    pub fn detach(&self, tape: &Tape) -> CellState {
        CellState {
            s: tape.value(self.s).clone(),
            y_prev: tape.value(self.y).clone(),
            y_tilde_prev: self.y_tilde.map(|v| tape.value(v).clone()),
        }
    }

    /// The output propagated to downstream layers.
    pub fn output(&self) -> Var {
        self.y
    }
}

/// Decay logit and threshold registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub d_raw: Var,
    pub v_th: Var,
}

fn check_drive(tape: &Tape, drive: Var, prev: &CellVars) -> Result<()> {
    if tape.shape(drive) != tape.shape(prev.s) {
        return Err(Error::shape(
            "neuron step",
            format!(
                "drive {:?} does not match state {:?}",
                tape.shape(drive),
                tape.shape(prev.s)
            ),
        ));
    }
    Ok(())
}

fn total_drive(tape: &mut Tape, drive: Var, rec: Option<Var>) -> Result<Var> {
    match rec {
        Some(r) => tape.add(drive, r),
        None => Ok(drive),
    }
}

/// `(1-d)(drive + rec) + d s_{t-1} (1 - y_{t-1})`, shared by SNU and sSNU.
fn leaky_membrane(tape: &mut Tape, drive: Var, rec: Option<Var>, prev: &CellVars, p: &ParamVars) -> Result<Var> {
    check_drive(tape, drive, prev)?;
    let total = total_drive(tape, drive, rec)?;
    let d = tape.sigmoid(p.d_raw);
    let one_minus_d = tape.affine(d, -1.0, 1.0);
    let leak_in = tape.channel_mul(total, one_minus_d)?;
    let gate = tape.affine(prev.y, -1.0, 1.0);
    let kept = tape.mul(prev.s, gate)?;
    let carry = tape.channel_mul(kept, d)?;
    tape.add(leak_in, carry)
}

fn above_threshold(tape: &mut Tape, s: Var, p: &ParamVars) -> Result<Var> {
    let neg = tape.scale(p.v_th, -1.0);
    tape.channel_add(s, neg)
}

/// One SNU time step; the returned state's `y` is the spike output.
pub fn snu_step(tape: &mut Tape, drive: Var, rec: Option<Var>, prev: &CellVars, p: &ParamVars) -> Result<CellVars> {
    let s = leaky_membrane(tape, drive, rec, prev, p)?;
    let x = above_threshold(tape, s, p)?;
    let y = tape.spike_step(x, SURROGATE_SLOPE);
    Ok(CellVars { s, y, y_tilde: None })
}

/// One sSNU time step: sigmoid instead of step; the reset gate uses the
/// real-valued output.
pub fn ssnu_step(tape: &mut Tape, drive: Var, rec: Option<Var>, prev: &CellVars, p: &ParamVars) -> Result<CellVars> {
    let s = leaky_membrane(tape, drive, rec, prev, p)?;
    let x = above_threshold(tape, s, p)?;
    let y = tape.sigmoid(x);
    Ok(CellVars { s, y, y_tilde: None })
}

/// One SNUo time step. `mod_drive` already carries the modulation bias.
pub fn snuo_step(
    tape: &mut Tape,
    drive: Var,
    rec: Option<Var>,
    mod_drive: Var,
    mod_rec: Option<Var>,
    prev: &CellVars,
    p: &ParamVars,
) -> Result<CellVars> {
    check_drive(tape, drive, prev)?;
    if tape.shape(mod_drive) != tape.shape(drive) {
        return Err(Error::shape("snuo_step", "modulation drive shape differs from drive"));
    }
    let y_tilde_prev = prev
        .y_tilde
        .ok_or_else(|| Error::shape("snuo_step", "state lacks the unmodulated output"))?;
    let total = total_drive(tape, drive, rec)?;
    let d = tape.sigmoid(p.d_raw);
    let gate = tape.affine(y_tilde_prev, -1.0, 1.0);
    let kept = tape.mul(prev.s, gate)?;
    let carry = tape.channel_mul(kept, d)?;
    let pre = tape.add(total, carry)?;
    let s = tape.leaky_relu(pre, SNUO_LEAK);
    let x = above_threshold(tape, s, p)?;
    let y_tilde = tape.spike_step(x, SURROGATE_SLOPE);
    let m_in = total_drive(tape, mod_drive, mod_rec)?;
    let m = tape.sigmoid(m_in);
    let y = tape.mul(y_tilde, m)?;
    Ok(CellVars {
        s,
        y,
        y_tilde: Some(y_tilde),
    })
}
