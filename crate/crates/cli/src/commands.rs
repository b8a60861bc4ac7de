use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use flowspike::encoding::{slice_windows, EventWindow, InputCoding, DEFAULT_WINDOW_US};
use flowspike::error::Error;
use flowspike::io::events::EventHeader;
use flowspike::io::{self as fio, MaxMagnitude};
use flowspike::metrics::{score_sequence, waee, EvalSample, Report, WaeeWeights};
use flowspike::network::{load_checkpoint, save_checkpoint, ArchConfig, Model};
use flowspike::profiling::{
    activity_trace, reduction_sweep, speed_profile, write_sweep_csv, write_sweep_plot, SweepOptions,
};
use flowspike::synthetic::BarSequence;
use flowspike::training::{epoch_means, train, write_log_csv};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Cli, Command};

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Encode(a) => encode(&cfg, a),
        Command::Synth(a) => synth(&cfg, cli.seed, a),
        Command::Train(a) => train_cmd(&cfg, cli.seed, a),
        Command::Infer(a) => infer(&cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::ProfileActivity(a) => profile_activity(&cfg, cli.seed, a),
        Command::ProfileSpeed(a) => profile_speed(&cfg, cli.seed, a),
        Command::Sweep(a) => sweep(&cfg, cli.seed, a),
        Command::Viz(a) => viz(a),
        Command::Serve(a) => serve(&cfg, cli.seed, a),
    }
}

fn window_us(cfg: &RunConfig, flag: Option<u64>) -> u64 {
    flag.or(cfg.window_us).unwrap_or(DEFAULT_WINDOW_US)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load_windows(path: &Path, window_us: u64) -> anyhow::Result<(EventHeader, Vec<EventWindow>)> {
    let (header, events) = fio::read_events(path).with_context(|| format!("reading {}", path.display()))?;
    let windows = slice_windows(&events, window_us, header.width.into(), header.height.into())?;
    Ok((header, windows))
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

/// Checkpoint if given, else a fresh model sized to the sensor.
fn model_for(ckpt: Option<&Path>, arch: &ArchConfig, height: usize, width: usize, seed: u64) -> anyhow::Result<Model> {
    let m = match ckpt {
        Some(p) => load_model(p)?,
        None => Model::build(arch.clone(), height, width, seed)?,
    };
    if (m.height(), m.width()) != (height, width) {
        return Err(Error::InvalidArgument(format!(
            "model expects {}x{} input, events are {width}x{height}",
            m.width(),
            m.height()
        ))
        .into());
    }
    Ok(m)
}

#[derive(Serialize)]
struct EncodedWindow<'a> {
    index: usize,
    t0: u64,
    t1: u64,
    events: usize,
    shape: &'a [usize],
    data: &'a [f32],
}

fn encode(cfg: &RunConfig, a: &crate::EncodeArgs) -> anyhow::Result<()> {
    let coding = match &a.coding {
        Some(s) => s.parse::<InputCoding>()?,
        None => cfg.arch.input_coding,
    };
    let channels = match coding {
        InputCoding::Count => 2,
        InputCoding::Voxel => a.bins.unwrap_or(cfg.arch.n_in),
    };
    let (_, windows) = load_windows(&a.events, window_us(cfg, a.window_us))?;
    let mut out = create(&a.out)?;
    for (i, w) in windows.iter().enumerate() {
        let t = coding.encode(w, channels)?;
        let row = EncodedWindow {
            index: i,
            t0: w.t0,
            t1: w.t1,
            events: w.len(),
            shape: t.shape(),
            data: t.data(),
        };
        serde_json::to_writer(&mut out, &row)?;
        writeln!(out)?;
    }
    out.flush()?;
    println!(
        "encoded {} windows ({coding:?}, {channels} channels) to {}",
        windows.len(),
        a.out.display()
    );
    Ok(())
}

fn synth(cfg: &RunConfig, seed: u64, a: &crate::SynthArgs) -> anyhow::Result<()> {
    let _ = seed; // the generator is deterministic
    let seq = BarSequence {
        width: a.size,
        height: a.size,
        n_windows: a.windows,
        window_us: window_us(cfg, a.window_us),
        velocity: a.velocity,
        ..Default::default()
    };
    let events = seq.events()?;
    let side = u16::try_from(a.size).map_err(|_| Error::InvalidArgument("sensor too large".into()))?;
    fio::write_events(&a.out_events, side, side, &events)?;
    if let Some(gt) = &a.out_gt {
        fio::write_flow(gt, &seq.ground_truth())?;
    }
    println!(
        "wrote {} events over {} windows to {}",
        events.len(),
        a.windows,
        a.out_events.display()
    );
    Ok(())
}

fn train_cmd(cfg: &RunConfig, seed: u64, a: &crate::TrainArgs) -> anyhow::Result<()> {
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(lr) = a.lr {
        tc.learning_rate = lr;
    }
    tc.validate()?;
    let (h, windows) = load_windows(&a.events, window_us(cfg, a.window_us))?;
    let mut model = model_for(a.init.as_deref(), &cfg.arch, h.height.into(), h.width.into(), seed)?;
    let logs = train(&mut model, &windows, &tc)?;
    if let Some(p) = &a.log {
        write_log_csv(&logs, create(p)?)?;
    }
    for (e, m) in epoch_means(&logs).iter().enumerate() {
        println!("epoch {:>3}  mean chunk loss {m:.6}", e + 1);
    }
    save_checkpoint(&model, &a.out)?;
    println!("saved {}", a.out.display());
    Ok(())
}

fn infer(cfg: &RunConfig, a: &crate::InferArgs) -> anyhow::Result<()> {
    let mut model = load_model(&a.model)?;
    let (h, windows) = load_windows(&a.events, window_us(cfg, a.window_us))?;
    if (model.height(), model.width()) != (h.height.into(), h.width.into()) {
        return Err(Error::InvalidArgument("model and event sensor sizes differ".into()).into());
    }
    std::fs::create_dir_all(&a.out_dir)?;
    model.reset_states();
    for (i, w) in windows.iter().enumerate() {
        let c = model.config();
        let input = c.input_coding.encode(w, c.n_in)?;
        let flow = model.forward(&input)?.flow;
        fio::write_flow(a.out_dir.join(format!("flow_{i:05}.flo")), &flow)?;
        if a.png {
            let img = fio::flow_to_rgb(&flow, MaxMagnitude::Auto)?;
            fio::save_png(&img, a.out_dir.join(format!("flow_{i:05}.png")))?;
        }
    }
    println!("wrote {} flow fields to {}", windows.len(), a.out_dir.display());
    Ok(())
}

/// One window spanning every event of the file.
fn whole_file_window(h: &EventHeader, events: Vec<flowspike::encoding::Event>) -> anyhow::Result<EventWindow> {
    let (w, hh) = (h.width.into(), h.height.into());
    Ok(match (events.first(), events.last()) {
        (Some(f), Some(l)) => {
            let (t0, t1) = (f.t, l.t + 1);
            EventWindow::new(events, t0, t1, w, hh)?
        }
        _ => EventWindow::empty(0, 1, w, hh),
    })
}

fn eval(cfg: &RunConfig, a: &crate::EvalArgs) -> anyhow::Result<()> {
    let weights = WaeeWeights::for_dt(a.dt)?;
    let invalid = |m: &str| anyhow::Error::from(Error::InvalidArgument(m.into()));
    if let Some(v) = &a.aees {
        if v.len() != 4 {
            return Err(invalid("--aees takes exactly four comma-separated values"));
        }
        let w = waee([v[0], v[1], v[2], v[3]], &weights);
        println!("WAEE (dt={}) {w:.4}", a.dt);
        return Ok(());
    }
    let events = a.events.as_ref().ok_or_else(|| invalid("--events is required"))?;
    if a.pred.is_empty() || !(a.gt.len() == 1 || a.gt.len() == a.pred.len()) {
        return Err(invalid(
            "give at least one --pred and either one --gt or one per prediction",
        ));
    }
    let windows = if a.pred.len() == 1 {
        let (h, ev) = fio::read_events(events)?;
        vec![whole_file_window(&h, ev)?]
    } else {
        let (_, w) = load_windows(events, window_us(cfg, a.window_us))?;
        if w.len() < a.pred.len() {
            return Err(invalid(&format!(
                "{} predictions but only {} windows",
                a.pred.len(),
                w.len()
            )));
        }
        w
    };
    let mut samples = Vec::with_capacity(a.pred.len());
    for (i, p) in a.pred.iter().enumerate() {
        let pred = fio::read_flow(p).with_context(|| format!("reading {}", p.display()))?;
        let g = &a.gt[i.min(a.gt.len() - 1)];
        let gt = fio::read_flow(g).with_context(|| format!("reading {}", g.display()))?;
        samples.push(EvalSample::from_window(pred, gt, &windows[i])?);
    }
    let report = Report {
        dt: a.dt,
        rows: vec![score_sequence(&a.name, &samples)?],
    };
    print!("{report}");
    if let Some(p) = &a.csv {
        report.write_csv(create(p)?)?;
    }
    Ok(())
}

fn profile_activity(cfg: &RunConfig, seed: u64, a: &crate::ActivityArgs) -> anyhow::Result<()> {
    let (h, windows) = load_windows(&a.events, window_us(cfg, a.window_us))?;
    let mut model = model_for(a.model.as_deref(), &cfg.arch, h.height.into(), h.width.into(), seed)?;
    let trace = activity_trace(&mut model, &windows)?;
    match &a.out {
        Some(p) => trace.write_csv(create(p)?)?,
        None => trace.write_csv(io::stdout().lock())?,
    }
    Ok(())
}

fn profile_speed(cfg: &RunConfig, seed: u64, a: &crate::SpeedArgs) -> anyhow::Result<()> {
    let mut model = match &a.model {
        Some(p) => load_model(p)?,
        None => {
            let mut arch = cfg.arch.clone();
            arch.n_stages = a.stages.unwrap_or(arch.n_stages);
            arch.base_channels = a.channels.unwrap_or(arch.base_channels);
            Model::build(arch, a.size, a.size, seed)?
        }
    };
    let r = speed_profile(&mut model, a.runs, !a.multi_thread)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&r)?);
    } else {
        println!(
            "{} stages, {} ch, {}x{}, {:.3}M params, {} thread(s)",
            r.n_stages,
            r.base_channels,
            r.width,
            r.height,
            r.params as f64 / 1e6,
            r.threads
        );
        println!(
            "mean {:.2} ms  median {:.2} ms  min {:.2} ms  {:.2} fps  cv {:.3}",
            r.mean_ms, r.median_ms, r.min_ms, r.fps, r.cv
        );
    }
    if r.is_noisy() {
        eprintln!(
            "warning: timings are noisy (cv {:.2}); consider more runs or an idle machine",
            r.cv
        );
    }
    Ok(())
}

fn checkpoint_score(
    dir: &Path,
    arch: &ArchConfig,
    windows: &[EventWindow],
    gt: &flowspike::tensor::Tensor,
) -> anyhow::Result<Option<f64>> {
    let path: PathBuf = dir.join(format!("s{}_c{}.snuc", arch.n_stages, arch.base_channels));
    if !path.exists() {
        return Ok(None);
    }
    let mut model = load_model(&path)?;
    model.reset_states();
    let mut samples = Vec::with_capacity(windows.len());
    for w in windows {
        let c = model.config();
        let flow = model.forward(&c.input_coding.encode(w, c.n_in)?)?.flow;
        samples.push(EvalSample::from_window(flow, gt.clone(), w)?);
    }
    Ok(Some(score_sequence("sweep", &samples)?.aee))
}

fn sweep(cfg: &RunConfig, seed: u64, a: &crate::SweepArgs) -> anyhow::Result<()> {
    let opts = SweepOptions {
        template: cfg.arch.clone(),
        size: a.size,
        n_runs: a.runs,
        single_thread: true,
        seed,
    };
    let eval_data = match (&a.checkpoints, &a.events, &a.gt) {
        (Some(dir), Some(ev), Some(gt)) => {
            let (_, windows) = load_windows(ev, window_us(cfg, a.window_us))?;
            Some((dir.clone(), windows, fio::read_flow(gt)?))
        }
        _ => None,
    };
    let rows = reduction_sweep(&a.stages, &a.channels, &opts, |arch| match &eval_data {
        Some((dir, windows, gt)) => {
            checkpoint_score(dir, arch, windows, gt).map_err(|e| Error::InvalidArgument(format!("{e:#}")))
        }
        None => Ok(None),
    })?;
    write_sweep_csv(&rows, io::stdout().lock())?;
    if let Some(p) = &a.out {
        write_sweep_csv(&rows, create(p)?)?;
    }
    if let Some(p) = &a.plot {
        write_sweep_plot(&rows, create(p)?)?;
    }
    Ok(())
}

fn viz(a: &crate::VizArgs) -> anyhow::Result<()> {
    let flow = fio::read_flow(&a.flow).with_context(|| format!("reading {}", a.flow.display()))?;
    let max = a.max_mag.map_or(MaxMagnitude::Auto, MaxMagnitude::Fixed);
    let mut img = fio::flow_to_rgb(&flow, max)?;
    if let Some(cell) = a.arrows {
        img = fio::arrow_grid_overlay(&img, &flow, cell)?;
    }
    fio::save_png(&img, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn serve(cfg: &RunConfig, seed: u64, a: &crate::ServeArgs) -> anyhow::Result<()> {
    let model = match &a.model {
        Some(p) => load_model(p)?,
        None => Model::build(cfg.arch.clone(), a.height, a.width, seed)?,
    };
    let server = fio::Server::bind(&a.addr, model, a.window_us)?;
    eprintln!("listening on {}", server.local_addr()?);
    server.run(a.max_connections)?;
    Ok(())
}
