//! Truncated back-propagation through time with an Adam optimizer.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::encoding::EventWindow;
use crate::error::{Error, Result};
use crate::loss::{multi_res_loss, total_loss, DEFAULT_LAMBDA};
use crate::network::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Windows per truncated back-propagation chunk.
    pub tbptt_interval: usize,
    pub learning_rate: f32,
    pub lambda: f32,
    pub epochs: usize,
    pub seed: u64,
    /// Also apply the loss to the intermediate flows.
    pub multi_res: bool,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tbptt_interval: 10,
            learning_rate: 1e-4,
            lambda: DEFAULT_LAMBDA,
            epochs: 1,
            seed: 0,
            multi_res: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tbptt_interval == 0 {
            return Err(Error::Config("tbptt_interval must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps.is_finite() && self.eps > 0.0)
        {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and eps must be positive".into(),
            ));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer state, one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    steps: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Applies one update and clears `grads`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &mut [Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for i in 0..params.len() {
            if grads[i].shape() != params[i].shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("gradient {i} shape differs from parameter"),
                ));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].data();
            for (j, p) in params[i].data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                if self.lr != 0.0 {
                    *p -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                }
            }
            grads[i].data_mut().fill(0.0);
        }
        Ok(())
    }
}

/// One row of the training log; loss parts are averaged over the chunk's windows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChunkLog {
    pub epoch: usize,
    pub chunk_index: usize,
    pub loss: f32,
    pub contrast_fw: f32,
    pub contrast_bw: f32,
    pub smooth: f32,
}

fn check_extents(model: &Model, windows: &[EventWindow]) -> Result<()> {
    if let Some((i, w)) = windows
        .iter()
        .enumerate()
        .find(|(_, w)| w.width != model.width() || w.height != model.height())
    {
        return Err(Error::InvalidArgument(format!(
            "window {i} is {}x{}, model expects {}x{}",
            w.width,
            w.height,
            model.width(),
            model.height()
        )));
    }
    Ok(())
}

/// Gradients of the summed loss of one chunk, starting from the model's
/// current states. States are left detached at the chunk end.
pub fn chunk_gradients(model: &mut Model, chunk: &[EventWindow], cfg: &TrainConfig) -> Result<(Vec<Tensor>, ChunkLog)> {
    let mut tape = Tape::new();
    let mut bound = model.bind(&mut tape, true);
    let mut log = ChunkLog {
        epoch: 0,
        chunk_index: 0,
        loss: 0.0,
        contrast_fw: 0.0,
        contrast_bw: 0.0,
        smooth: 0.0,
    };
    let mut total = None;
    for w in chunk {
        let input = model.config().input_coding.encode(w, model.config().n_in)?;
        let out = model.step(&mut tape, &mut bound, &input)?;
        let terms = if cfg.multi_res {
            let mut flows = out.intermediates.clone();
            flows.push(out.flow);
            multi_res_loss(&mut tape, &flows, w, cfg.lambda)?
        } else {
            total_loss(&mut tape, out.flow, w, cfg.lambda)?
        };
        log.contrast_fw += terms.contrast_fw;
        log.contrast_bw += terms.contrast_bw;
        log.smooth += terms.smooth;
        total = Some(match total {
            None => terms.total,
            Some(acc) => tape.add(acc, terms.total)?,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("empty chunk".into()))?;
    log.loss = tape.value(total).item();
    let n = chunk.len() as f32;
    log.loss /= n;
    log.contrast_fw /= n;
    log.contrast_bw /= n;
    log.smooth /= n;
    tape.backward(total)?;
    let grads = model.grads(&tape, &bound);
    model.detach_states(&tape, &bound);
    Ok((grads, log))
}

/// One pass over a sequence: states reset, then one update per chunk.
pub fn train_sequence(
    model: &mut Model,
    windows: &[EventWindow],
    cfg: &TrainConfig,
    opt: &mut Adam,
) -> Result<Vec<ChunkLog>> {
    cfg.validate()?;
    check_extents(model, windows)?;
    if cfg.multi_res && !model.config().multi_res_loss {
        return Err(Error::Config(
            "multi_res training needs a model built with multi_res_loss".into(),
        ));
    }
    model.reset_states();
    let mut logs = Vec::new();
    for (i, chunk) in windows.chunks(cfg.tbptt_interval).enumerate() {
        let (mut grads, mut log) = chunk_gradients(model, chunk, cfg)?;
        opt.step(model.params_mut(), &mut grads)?;
        log.chunk_index = i;
        logs.push(log);
    }
    Ok(logs)
}

/// Runs `cfg.epochs` passes with a fresh optimizer.
pub fn train(model: &mut Model, windows: &[EventWindow], cfg: &TrainConfig) -> Result<Vec<ChunkLog>> {
    cfg.validate()?;
    let mut opt = Adam::new(model.params(), cfg);
    let mut logs = Vec::new();
    for epoch in 0..cfg.epochs {
        for mut log in train_sequence(model, windows, cfg, &mut opt)? {
            log.epoch = epoch;
            logs.push(log);
        }
    }
    Ok(logs)
}

/// Mean chunk loss of each epoch.
pub fn epoch_means(logs: &[ChunkLog]) -> Vec<f32> {
    let epochs = logs.iter().map(|l| l.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let rows: Vec<f32> = logs.iter().filter(|l| l.epoch == e).map(|l| l.loss).collect();
            rows.iter().sum::<f32>() / rows.len().max(1) as f32
        })
        .collect()
}

pub fn write_log_csv<W: Write>(logs: &[ChunkLog], mut out: W) -> Result<()> {
    writeln!(out, "epoch,chunk_index,loss,contrast_fw,contrast_bw,smooth")?;
    for l in logs {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            l.epoch, l.chunk_index, l.loss, l.contrast_fw, l.contrast_bw, l.smooth
        )?;
    }
    Ok(())
}
