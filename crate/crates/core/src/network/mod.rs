//! Spiking encoder/decoder for dense optical flow.
//!
//! Layout for `n` stages (channels `c_k = base * 2^min(k, n-1)`):
//!
//! ```text
//! input ─ conv0 7x7 ─ conv1 7x7 ─┬─ pool ─ s1 ─┬─ pool ─ s2 ... ─ sn
//!                                │             │                  │
//!                          skip ─┘       skip ─┘                  │
//!  pred 1x1 ─ tanh ─ u_n ─ ... ─ u_{n-1} ─ ... ─ up ─ conv ─ ‖skip ─ conv
//! ```
//!
//! Every convolution except the prediction head is followed by a neuron
//! cell. Recurrent convolutions only appear inside encoder blocks.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::encoding::InputCoding;
use crate::error::{Error, Result};
use crate::neurons::{snu_step, snuo_step, ssnu_step, CellState, CellVars, NeuronKind, NeuronParams, ParamVars};
use crate::tensor::Tensor;

/// Deepest supported network.
pub const MAX_STAGES: usize = 5;

/// Placement of recurrent convolutions within each encoder block:
/// first letter for the first convolution, second for the second.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Recurrency {
    RF,
    FR,
    RR,
    FF,
}

impl Recurrency {
    pub fn first(self) -> bool {
        matches!(self, Recurrency::RF | Recurrency::RR)
    }

    pub fn second(self) -> bool {
        matches!(self, Recurrency::FR | Recurrency::RR)
    }
}

impl std::fmt::Display for Recurrency {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for Recurrency {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('/', "").as_str() {
            "RF" => Ok(Recurrency::RF),
            "FR" => Ok(Recurrency::FR),
            "RR" => Ok(Recurrency::RR),
            "FF" => Ok(Recurrency::FF),
            _ => Err(Error::Config(format!("unknown recurrency pattern '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub n_in: usize,
    pub base_channels: usize,
    pub n_stages: usize,
    pub recurrency: Recurrency,
    pub neuron_kind: NeuronKind,
    /// Adds intermediate flow heads feeding every decoder block.
    pub multi_res_loss: bool,
    pub input_coding: InputCoding,
    /// Flow magnitude (pixels per window) that a saturated head maps to.
    pub max_flow: f32,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            n_in: 6,
            base_channels: 32,
            n_stages: 5,
            recurrency: Recurrency::RF,
            neuron_kind: NeuronKind::Snu,
            multi_res_loss: false,
            input_coding: InputCoding::Voxel,
            max_flow: 32.0,
        }
    }
}

impl ArchConfig {
    pub fn with_size(n_stages: usize, base_channels: usize) -> Self {
        ArchConfig {
            n_stages,
            base_channels,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        if !(2..=MAX_STAGES).contains(&self.n_stages) {
            return Err(Error::Config(format!(
                "n_stages must be in 2..={MAX_STAGES}, got {}",
                self.n_stages
            )));
        }
        if self.n_in == 0 {
            return Err(Error::Config("n_in must be at least 1".into()));
        }
        match self.input_coding {
            InputCoding::Count if self.n_in != 2 => {
                return Err(Error::Config(format!(
                    "count coding has 2 channels, n_in is {}",
                    self.n_in
                )))
            }
            InputCoding::Voxel if self.n_in < 2 => return Err(Error::Config("voxel coding needs n_in >= 2".into())),
            _ => {}
        }
        if !(self.max_flow.is_finite() && self.max_flow > 0.0) {
            return Err(Error::Config(format!(
                "max_flow must be positive, got {}",
                self.max_flow
            )));
        }
        Ok(())
    }

    /// Output channels of the first stage (`k = 0`) and of encoder block `k`.
    pub fn channels(&self, k: usize) -> usize {
        self.base_channels << k.min(self.n_stages - 1)
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.n_stages
    }

    pub fn check_size(&self, height: usize, width: usize) -> Result<()> {
        let d = self.divisor();
        if height == 0 || width == 0 || !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(Error::Config(format!(
                "input {height}x{width} must be a non-zero multiple of {d} in both dimensions for {} stages",
                self.n_stages
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvSlot {
    weight: usize,
    bias: Option<usize>,
    pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    name: String,
    feed: ConvSlot,
    rec: Option<ConvSlot>,
    mod_feed: Option<ConvSlot>,
    mod_rec: Option<ConvSlot>,
    d_raw: usize,
    v_th: usize,
    /// Output shape C×H×W.
    shape: [usize; 3],
}

/// A built network: parameters, wiring and per-layer membrane state.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ArchConfig,
    height: usize,
    width: usize,
    names: Vec<String>,
    params: Vec<Tensor>,
    layers: Vec<Layer>,
    head: ConvSlot,
    aux_heads: Vec<ConvSlot>,
    states: Vec<CellState>,
}

/// Parameters and live cell states of a model registered on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub params: Vec<Var>,
    pub cells: Vec<CellVars>,
}

/// Tape handles produced by one time step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Final flow, 2×H×W.
    pub flow: Var,
    /// Intermediate flows upsampled to H×W, deepest first (multi-res only).
    pub intermediates: Vec<Var>,
    /// Output of every neuron layer followed by the head's tanh output.
    pub activity: Vec<(String, Var)>,
}

/// Detached result of [`Model::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct FlowOutput {
    pub flow: Tensor,
    pub intermediates: Vec<Tensor>,
}

struct Builder {
    rng: ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Builder {
    fn tensor(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> ConvSlot {
        let fan_in = (cin * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let data = (0..cout * cin * k * k)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        let w = Tensor::new(&[cout, cin, k, k], data).expect("shape matches");
        let weight = self.tensor(format!("{name}.weight"), w);
        let bias = bias.then(|| self.tensor(format!("{name}.bias"), Tensor::zeros(&[cout])));
        ConvSlot {
            weight,
            bias,
            pad: k / 2,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer(
        &mut self,
        kind: NeuronKind,
        name: String,
        cin: usize,
        cout: usize,
        k: usize,
        recurrent: bool,
        hw: (usize, usize),
    ) -> Layer {
        let feed = self.conv(&format!("{name}.w"), cin, cout, k, true);
        let rec = recurrent.then(|| self.conv(&format!("{name}.h"), cout, cout, k, true));
        let (mod_feed, mod_rec) = if kind == NeuronKind::Snuo {
            (
                Some(self.conv(&format!("{name}.wo"), cin, cout, k, true)),
                recurrent.then(|| self.conv(&format!("{name}.ho"), cout, cout, k, false)),
            )
        } else {
            (None, None)
        };
        let np = NeuronParams::new(kind, cout);
        let d_raw = self.tensor(format!("{name}.d_raw"), np.d_raw);
        let v_th = self.tensor(format!("{name}.v_th"), np.v_th);
        Layer {
            name,
            feed,
            rec,
            mod_feed,
            mod_rec,
            d_raw,
            v_th,
            shape: [cout, hw.0, hw.1],
        }
    }
}

/// Name of decoder block `j` (1 = deepest) in an `n`-stage network; the
/// shallowest decoder is always `u5`, so reduced models keep the top names.
fn decoder_name(j: usize, n: usize) -> String {
    format!("u{}", j + MAX_STAGES - n)
}

impl Model {
    /// Builds a model for `height`×`width` inputs with seeded initialization.
    pub fn build(config: ArchConfig, height: usize, width: usize, seed: u64) -> Result<Model> {
        config.validate()?;
        config.check_size(height, width)?;
        let n = config.n_stages;
        let kind = config.neuron_kind;
        let aux = if config.multi_res_loss { 2 } else { 0 };
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            names: Vec::new(),
            params: Vec::new(),
        };
        let res = |k: usize| (height >> k, width >> k);
        let c0 = config.channels(0);
        let mut layers = vec![
            b.layer(kind, "conv0".into(), config.n_in, c0, 7, false, res(0)),
            b.layer(kind, "conv1".into(), c0, c0, 7, false, res(0)),
        ];
        for k in 1..=n {
            let (cin, cout) = (config.channels(k - 1), config.channels(k));
            let ks = if k == 1 { 5 } else { 3 };
            let r = config.recurrency;
            layers.push(b.layer(kind, format!("s{k}.0"), cin, cout, ks, r.first(), res(k)));
            layers.push(b.layer(kind, format!("s{k}.1"), cout, cout, ks, r.second(), res(k)));
        }
        let mut aux_heads = Vec::new();
        for j in 1..=n {
            let k = n + 1 - j;
            let (cin, cout) = (config.channels(k), config.channels(k - 1));
            let name = decoder_name(j, n);
            if config.multi_res_loss {
                aux_heads.push(b.conv(&format!("{name}.aux"), cin, 2, 1, true));
            }
            layers.push(b.layer(kind, format!("{name}.0"), cin + aux, cout, 3, false, res(k - 1)));
            layers.push(b.layer(kind, format!("{name}.1"), 2 * cout, cout, 3, false, res(k - 1)));
        }
        let head = b.conv("pred", c0, 2, 1, true);
        let states = layers.iter().map(|l| CellState::zeros(kind, &l.shape)).collect();
        Ok(Model {
            config,
            height,
            width,
            names: b.names,
            params: b.params,
            layers,
            head,
            aux_heads,
            states,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.config.n_in, self.height, self.width]
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    /// Names of the neuron layers in execution order.
    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    pub fn states(&self) -> &[CellState] {
        &self.states
    }

    /// Restores states taken from [`Model::states`] of a model with the same layout.
    pub fn set_states(&mut self, states: Vec<CellState>) -> Result<()> {
        let same = |a: &Tensor, b: &Tensor| a.shape() == b.shape();
        let compatible = states.len() == self.states.len()
            && states.iter().zip(&self.states).all(|(n, o)| {
                same(&n.s, &o.s)
                    && same(&n.y_prev, &o.y_prev)
                    && match (&n.y_tilde_prev, &o.y_tilde_prev) {
                        (Some(a), Some(b)) => same(a, b),
                        (None, None) => true,
                        _ => false,
                    }
            });
        if !compatible {
            return Err(Error::InvalidArgument("state layout does not match the model".into()));
        }
        self.states = states;
        Ok(())
    }

    /// Zeroes every membrane state (sequence boundary).
    pub fn reset_states(&mut self) {
        for s in &mut self.states {
            *s = crate::neurons::reset_state(s);
        }
    }

    /// Registers parameters (as trainable leaves when `trainable`) and the
    /// current states (as constants) on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let params = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        let cells = self.states.iter().map(|s| CellVars::load(tape, s)).collect();
        Bound { params, cells }
    }

    /// Copies the bound states back into the model, dropping their history.
    pub fn detach_states(&mut self, tape: &Tape, bound: &Bound) {
        self.states = bound.cells.iter().map(|c| c.detach(tape)).collect();
    }

    /// Gradients of the bound parameters, zeros where none flowed.
    pub fn grads(&self, tape: &Tape, bound: &Bound) -> Vec<Tensor> {
        bound
            .params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }

    fn conv(&self, tape: &mut Tape, bound: &Bound, slot: ConvSlot, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            bound.params[slot.weight],
            slot.bias.map(|i| bound.params[i]),
            slot.pad,
        )
    }

    fn neuron(&self, tape: &mut Tape, bound: &mut Bound, li: usize, x: Var) -> Result<Var> {
        let l = &self.layers[li];
        let prev = bound.cells[li];
        let drive = self.conv(tape, bound, l.feed, x)?;
        let rec = l.rec.map(|s| self.conv(tape, bound, s, prev.y)).transpose()?;
        let p = ParamVars {
            d_raw: bound.params[l.d_raw],
            v_th: bound.params[l.v_th],
        };
        let next = match self.config.neuron_kind {
            NeuronKind::Snu => snu_step(tape, drive, rec, &prev, &p)?,
            NeuronKind::Ssnu => ssnu_step(tape, drive, rec, &prev, &p)?,
            NeuronKind::Snuo => {
                let mf = l.mod_feed.expect("SNUo layers carry modulation weights");
                let md = self.conv(tape, bound, mf, x)?;
                let mr = l.mod_rec.map(|s| self.conv(tape, bound, s, prev.y)).transpose()?;
                snuo_step(tape, drive, rec, md, mr, &prev, &p)?
            }
        };
        bound.cells[li] = next;
        Ok(next.y)
    }

    fn flow_head(&self, tape: &mut Tape, bound: &Bound, slot: ConvSlot, x: Var) -> Result<(Var, Var)> {
        let pre = self.conv(tape, bound, slot, x)?;
        let unit = tape.tanh(pre);
        Ok((unit, tape.scale(unit, self.config.max_flow)))
    }

    /// Runs one time step on `tape`, advancing the states held in `bound`.
    pub fn step(&self, tape: &mut Tape, bound: &mut Bound, input: &Tensor) -> Result<StepOutput> {
        if input.shape() != self.input_shape() {
            return Err(Error::shape(
                "forward",
                format!("input {:?}, model expects {:?}", input.shape(), self.input_shape()),
            ));
        }
        let n = self.config.n_stages;
        let mut activity = Vec::with_capacity(self.layers.len() + 1);
        let mut run = |tape: &mut Tape, bound: &mut Bound, li: usize, x: Var| -> Result<Var> {
            let y = self.neuron(tape, bound, li, x)?;
            activity.push((self.layers[li].name.clone(), y));
            Ok(y)
        };

        let x = tape.constant(input.clone());
        let x = run(tape, bound, 0, x)?;
        let mut x = run(tape, bound, 1, x)?;
        let mut skips = Vec::with_capacity(n);
        for k in 1..=n {
            skips.push(x);
            let pooled = tape.avg_pool2(x)?;
            x = run(tape, bound, 2 * k, pooled)?;
            x = run(tape, bound, 2 * k + 1, x)?;
        }
        let mut intermediates = Vec::new();
        for j in 1..=n {
            if let Some(&slot) = self.aux_heads.get(j - 1) {
                let (unit, scaled) = self.flow_head(tape, bound, slot, x)?;
                intermediates.push(tape.upsample_nearest(scaled, (self.height, self.width))?);
                x = tape.concat_channels(x, unit)?;
            }
            let up = tape.upsample_bilinear2(x)?;
            let y = run(tape, bound, 2 * n + 2 * j, up)?;
            let skip = skips.pop().expect("one skip per decoder");
            let cat = tape.concat_channels(y, skip)?;
            x = run(tape, bound, 2 * n + 2 * j + 1, cat)?;
        }
        let (unit, flow) = self.flow_head(tape, bound, self.head, x)?;
        activity.push(("pred".to_string(), unit));
        Ok(StepOutput {
            flow,
            intermediates,
            activity,
        })
    }

    /// One inference step without gradient tracking; states advance in place.
    pub fn forward(&mut self, input: &Tensor) -> Result<FlowOutput> {
        let mut tape = Tape::no_grad();
        let mut bound = self.bind(&mut tape, false);
        let out = self.step(&mut tape, &mut bound, input)?;
        self.detach_states(&tape, &bound);
        Ok(FlowOutput {
            flow: tape.value(out.flow).clone(),
            intermediates: out.intermediates.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }
}
