//! Layer activity traces, single-core latency and stage/channel sweeps.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Tape;
use crate::encoding::EventWindow;
use crate::error::{Error, Result};
use crate::network::{ArchConfig, Model, StepOutput};
use crate::parallel;
use crate::tensor::Tensor;

pub const WARMUP_RUNS: usize = 5;
/// Coefficient of variation above which a speed report is flagged noisy.
pub const NOISY_CV: f64 = 0.15;

/// Fraction of non-zero outputs per layer and time step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActivityTrace {
    /// `input`, every neuron layer in execution order, then `pred`.
    pub layers: Vec<String>,
    pub steps: Vec<Vec<f32>>,
}

impl ActivityTrace {
    pub fn layer(&self, name: &str) -> Option<Vec<f32>> {
        let i = self.layers.iter().position(|l| l == name)?;
        Some(self.steps.iter().map(|s| s[i]).collect())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,{}", self.layers.join(","))?;
        for (t, row) in self.steps.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{}", t + 1, cells.join(","))?;
        }
        Ok(())
    }
}

/// Non-zero fraction of the input and of every layer output of one step.
pub fn step_activity(tape: &Tape, input: &Tensor, out: &StepOutput) -> Vec<f32> {
    std::iter::once(input.nonzero_fraction())
        .chain(out.activity.iter().map(|(_, v)| tape.value(*v).nonzero_fraction()))
        .collect()
}

/// Runs inference over `windows` from reset states, recording activity.
pub fn activity_trace(model: &mut Model, windows: &[EventWindow]) -> Result<ActivityTrace> {
    model.reset_states();
    let mut layers = vec!["input".to_string()];
    layers.extend(model.layer_names().iter().map(|s| s.to_string()));
    layers.push("pred".into());
    let mut steps = Vec::with_capacity(windows.len());
    for w in windows {
        let input = model.config().input_coding.encode(w, model.config().n_in)?;
        let mut tape = Tape::no_grad();
        let mut bound = model.bind(&mut tape, false);
        let out = model.step(&mut tape, &mut bound, &input)?;
        steps.push(step_activity(&tape, &input, &out));
        model.detach_states(&tape, &bound);
    }
    Ok(ActivityTrace { layers, steps })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpeedReport {
    pub n_stages: usize,
    pub base_channels: usize,
    pub height: usize,
    pub width: usize,
    pub params: usize,
    pub n_runs: usize,
    pub threads: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub min_ms: f64,
    pub fps: f64,
    /// Coefficient of variation of the run times.
    pub cv: f64,
}

impl SpeedReport {
    pub fn is_noisy(&self) -> bool {
        self.cv > NOISY_CV
    }
}

/// Deterministic sparse voxel-like input.
pub fn profiling_input(shape: [usize; 3], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.iter().product())
        .map(|_| {
            if rng.gen_bool(0.1) {
                rng.gen_range(-1.0..1.0)
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(&shape, data).expect("shape matches")
}

/// Times `n_runs` forward passes after [`WARMUP_RUNS`] untimed ones. With
/// `single_thread` the kernels run on a one-worker pool.
pub fn speed_profile(model: &mut Model, n_runs: usize, single_thread: bool) -> Result<SpeedReport> {
    if n_runs == 0 {
        return Err(Error::InvalidArgument("n_runs must be at least 1".into()));
    }
    let input = profiling_input(model.input_shape(), 7);
    let run = |model: &mut Model| -> Result<(Vec<f64>, usize)> {
        model.reset_states();
        for _ in 0..WARMUP_RUNS {
            model.forward(&input)?;
        }
        let mut times = Vec::with_capacity(n_runs);
        for _ in 0..n_runs {
            let t0 = Instant::now();
            model.forward(&input)?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        Ok((times, parallel::current_threads()))
    };
    let (mut times, threads) = if single_thread {
        parallel::with_threads(1, || run(model))?
    } else {
        run(model)?
    };
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    times.sort_by(f64::total_cmp);
    let median = if times.len() % 2 == 1 {
        times[times.len() / 2]
    } else {
        0.5 * (times[times.len() / 2 - 1] + times[times.len() / 2])
    };
    let c = model.config();
    Ok(SpeedReport {
        n_stages: c.n_stages,
        base_channels: c.base_channels,
        height: model.height(),
        width: model.width(),
        params: model.param_count(),
        n_runs,
        threads,
        mean_ms: mean,
        median_ms: median,
        min_ms: times[0],
        fps: 1e3 / mean,
        cv: if mean > 0.0 { var.sqrt() / mean } else { 0.0 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub n_stages: usize,
    pub base_channels: usize,
    pub params: usize,
    pub fps: Option<f64>,
    pub metric: Option<f64>,
}

/// Options for [`reduction_sweep`].
#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub template: ArchConfig,
    pub size: usize,
    /// Timed runs per grid point; 0 skips timing.
    pub n_runs: usize,
    pub single_thread: bool,
    pub seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            template: ArchConfig::default(),
            size: 128,
            n_runs: 100,
            single_thread: true,
            seed: 0,
        }
    }
}

/// Builds every (stages, channels) combination, reporting parameter count,
/// throughput and an optional quality metric from `evaluate`.
pub fn reduction_sweep<F>(
    stages: &[usize],
    channels: &[usize],
    opts: &SweepOptions,
    mut evaluate: F,
) -> Result<Vec<SweepRow>>
where
    F: FnMut(&ArchConfig) -> Result<Option<f64>>,
{
    let mut rows = Vec::new();
    for &n in stages {
        for &c in channels {
            let cfg = ArchConfig {
                n_stages: n,
                base_channels: c,
                ..opts.template.clone()
            };
            let mut model = Model::build(cfg.clone(), opts.size, opts.size, opts.seed)?;
            let fps = if opts.n_runs > 0 {
                Some(speed_profile(&mut model, opts.n_runs, opts.single_thread)?.fps)
            } else {
                None
            };
            rows.push(SweepRow {
                n_stages: n,
                base_channels: c,
                params: model.param_count(),
                fps,
                metric: evaluate(&cfg)?,
            });
        }
    }
    Ok(rows)
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or(String::new(), |x| format!("{x:.prec$}"))
}

/// Table with one row per grid point: stages, channels, parameters (M), fps, metric.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "stages,channels,params_m,fps,metric")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.3},{},{}",
            r.n_stages,
            r.base_channels,
            r.params as f64 / 1e6,
            opt(r.fps, 2),
            opt(r.metric, 4)
        )?;
    }
    Ok(())
}

/// Scatter data: x = fps, y = metric, size = parameters in millions.
pub fn write_sweep_plot<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "x,y,size,label")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.3},{}s/{}ch",
            opt(r.fps, 2),
            opt(r.metric, 4),
            r.params as f64 / 1e6,
            r.n_stages,
            r.base_channels
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::BarSequence;

    #[test]
    fn silent_input_gives_silent_layers() {
        let mut m = Model::build(ArchConfig::with_size(2, 2), 16, 16, 0).unwrap();
        let windows = vec![EventWindow::empty(0, 10, 16, 16); 2];
        let trace = activity_trace(&mut m, &windows).unwrap();
        assert_eq!(trace.layers.len(), 2 + 10);
        assert!(trace.steps[0][..trace.layers.len() - 1].iter().all(|&f| f == 0.0));
    }

    #[test]
    fn fractions_lie_in_unit_interval() {
        let windows = BarSequence {
            n_windows: 4,
            ..Default::default()
        }
        .windows()
        .unwrap();
        let mut m = Model::build(ArchConfig::with_size(2, 2), 16, 16, 0).unwrap();
        let trace = activity_trace(&mut m, &windows).unwrap();
        assert_eq!(trace.steps.len(), 4);
        assert!(trace.steps.iter().flatten().all(|f| (0.0..=1.0).contains(f)));
        assert!(trace.layer("input").unwrap().iter().all(|&f| f > 0.0));
        let mut csv = Vec::new();
        trace.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv)
            .unwrap()
            .starts_with("step,input,conv0,conv1,s1.0"));
    }

    #[test]
    fn speed_report_is_positive() {
        let mut m = Model::build(ArchConfig::with_size(2, 2), 16, 16, 0).unwrap();
        let r = speed_profile(&mut m, 3, true).unwrap();
        assert!(r.fps > 0.0 && r.min_ms <= r.median_ms);
        assert_eq!(r.threads, 1);
        assert!(speed_profile(&mut m, 0, true).is_err());
    }

    #[test]
    fn sweep_covers_grid() {
        let opts = SweepOptions {
            size: 32,
            n_runs: 0,
            ..Default::default()
        };
        let rows = reduction_sweep(&[5, 3, 2], &[32, 24], &opts, |_| Ok(None)).unwrap();
        assert_eq!(rows.len(), 6);
        let m = Model::build(ArchConfig::with_size(3, 24), 32, 32, 0).unwrap();
        assert_eq!(rows[3].params, m.param_count());
        let mut plot = Vec::new();
        write_sweep_plot(&rows, &mut plot).unwrap();
        assert_eq!(String::from_utf8(plot).unwrap().lines().count(), 7);
    }
}
