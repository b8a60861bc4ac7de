//! Valid sample streams for every binary format, a byte-level fuzzer over
//! them and the two-client TCP isolation check.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::thread;

use flowspike::encoding::Event;
use flowspike::io::server::{encode_frame, read_reply, FrameParser, Reply};
use flowspike::io::{read_events_from, read_flow_from, write_events_to, write_flow_to, Server, Session};
use flowspike::network::{read_checkpoint, write_checkpoint, ArchConfig, Model, Recurrency};
use flowspike::neurons::NeuronKind;
use flowspike::tensor::Tensor;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Events,
    Flow,
    Checkpoint,
    Frames,
}

pub const FORMATS: [Format; 4] = [Format::Events, Format::Flow, Format::Checkpoint, Format::Frames];

pub fn ramp_events(n: usize, width: u16, height: u16, t0: u64) -> Vec<Event> {
    (0..n)
        .map(|i| {
            Event::new(
                (i * 7 % width as usize) as u16,
                (i * 3 % height as usize) as u16,
                t0 + (i as u64) * 37,
                if i % 3 == 0 { -1 } else { 1 },
            )
        })
        .collect()
}

pub fn small_model(seed: u64) -> Model {
    Model::build(ArchConfig::with_size(2, 2), 8, 8, seed).unwrap()
}

pub fn valid_bytes(f: Format) -> Vec<u8> {
    let mut out = Vec::new();
    match f {
        Format::Events => write_events_to(&mut out, 8, 6, &ramp_events(12, 8, 6, 5)).unwrap(),
        Format::Flow => {
            let data = (0..2 * 3 * 4).map(|i| i as f32 * 0.25 - 2.0).collect();
            write_flow_to(&mut out, &Tensor::new(&[2, 3, 4], data).unwrap()).unwrap()
        }
        Format::Checkpoint => write_checkpoint(&small_model(1), &mut out).unwrap(),
        Format::Frames => {
            let ev = ramp_events(10, 8, 6, 5);
            out.extend(encode_frame(&ev[..4]).unwrap());
            out.extend(encode_frame(&[]).unwrap());
            out.extend(encode_frame(&ev[4..]).unwrap());
        }
    }
    out
}

/// Parses `bytes` as `f`; `Ok` when the whole input was accepted.
pub fn parse(f: Format, bytes: &[u8]) -> Result<(), String> {
    match f {
        Format::Events => read_events_from(bytes).map(drop).map_err(|e| e.to_string()),
        Format::Flow => read_flow_from(bytes).map(drop).map_err(|e| e.to_string()),
        Format::Checkpoint => read_checkpoint(bytes).map(drop).map_err(|e| e.to_string()),
        Format::Frames => {
            let mut p = FrameParser::new(8, 6);
            p.push(bytes);
            loop {
                match p.next_frame() {
                    Ok(Some(_)) => {}
                    Ok(None) if p.pending() == 0 => return Ok(()),
                    Ok(None) => return Err(format!("{} bytes of an incomplete frame", p.pending())),
                    Err(code) => return Err(format!("{code:?}")),
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum Mutation {
    /// Keep a strict prefix of this length (modulo the stream length).
    Truncate(usize),
    /// XOR bytes at positions inside the first 64 bytes (the headers).
    Header(Vec<(usize, u8)>),
    /// XOR bytes anywhere.
    Anywhere(Vec<(usize, u8)>),
    /// Replace the stream entirely.
    Arbitrary(Vec<u8>),
}

pub fn mutation() -> impl Strategy<Value = Mutation> {
    let flips = || prop::collection::vec((any::<usize>(), 1u8..=255), 1..6);
    prop_oneof![
        any::<usize>().prop_map(Mutation::Truncate),
        flips().prop_map(Mutation::Header),
        flips().prop_map(Mutation::Anywhere),
        prop::collection::vec(any::<u8>(), 0..96).prop_map(Mutation::Arbitrary),
    ]
}

pub fn apply(valid: &[u8], m: &Mutation) -> Vec<u8> {
    let mut b = valid.to_vec();
    match m {
        Mutation::Truncate(n) => b.truncate(n % valid.len()),
        Mutation::Header(flips) | Mutation::Anywhere(flips) => {
            let span = if matches!(m, Mutation::Header(_)) {
                valid.len().min(64)
            } else {
                valid.len()
            };
            for &(i, x) in flips {
                b[i % span] ^= x;
            }
        }
        Mutation::Arbitrary(raw) => b = raw.clone(),
    }
    b
}

#[derive(Debug, Default)]
pub struct FuzzStats {
    pub cases: u32,
    /// Inputs rejected with an error, per format in [`FORMATS`] order.
    pub rejected: [u32; 4],
}

/// Runs `cases` fuzz cases; each feeds one mutated stream to all four
/// readers. Truncated files must be rejected; nothing may panic. Frame
/// streams are exempt from the truncation rule since a cut at a frame
/// boundary leaves a valid stream.
pub fn fuzz(cases: u32) -> Result<FuzzStats, String> {
    let valid: Vec<Vec<u8>> = FORMATS.iter().map(|&f| valid_bytes(f)).collect();
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    let stats = std::cell::RefCell::new(FuzzStats::default());
    runner
        .run(&mutation(), |m| {
            stats.borrow_mut().cases += 1;
            for (i, &f) in FORMATS.iter().enumerate() {
                let bytes = apply(&valid[i], &m);
                let r = parse(f, &bytes);
                if r.is_err() {
                    stats.borrow_mut().rejected[i] += 1;
                }
                if matches!(m, Mutation::Truncate(_)) && f != Format::Frames && r.is_ok() {
                    return Err(TestCaseError::fail(format!(
                        "{f:?}: prefix of {} bytes accepted",
                        bytes.len()
                    )));
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(stats.into_inner())
}

fn client(addr: std::net::SocketAddr, frames: Vec<Vec<u8>>, expect: usize) -> Vec<Tensor> {
    let mut s = TcpStream::connect(addr).unwrap();
    for f in frames {
        s.write_all(&f).unwrap();
    }
    let mut flows = Vec::new();
    while flows.len() < expect {
        match read_reply(&mut s).unwrap() {
            Some(Reply::Flow(t)) => flows.push(t),
            Some(Reply::Error(code)) => panic!("server error {code}"),
            None => break,
        }
    }
    s.shutdown(std::net::Shutdown::Write).ok();
    let mut rest = Vec::new();
    s.read_to_end(&mut rest).unwrap();
    assert!(rest.is_empty(), "unexpected trailing reply bytes");
    flows
}

/// Two simultaneous clients stream different event sequences; each must
/// receive exactly what an isolated session yields for its own stream.
/// Returns the number of windows each client got back.
pub fn dual_client_isolation() -> Result<(usize, usize), String> {
    const WINDOW_US: u64 = 1000;
    // soft neurons, so every output depends on the input and on the state
    let cfg = ArchConfig {
        neuron_kind: NeuronKind::Ssnu,
        recurrency: Recurrency::RR,
        ..ArchConfig::with_size(2, 4)
    };
    let model = Model::build(cfg, 8, 8, 9).unwrap();
    let streams: Vec<Vec<Event>> = vec![
        ramp_events(400, 8, 8, 0),
        ramp_events(250, 8, 8, 300)
            .into_iter()
            .map(|mut e| {
                e.x = 7 - e.x;
                e.p = -e.p;
                e
            })
            .collect(),
    ];
    let frames: Vec<Vec<Vec<u8>>> = streams
        .iter()
        .map(|s| s.chunks(33).map(|c| encode_frame(c).unwrap()).collect())
        .collect();
    let isolated: Vec<Vec<Tensor>> = frames
        .iter()
        .map(|fs| {
            let mut sess = Session::new(model.clone(), WINDOW_US).unwrap();
            fs.iter().flat_map(|f| sess.feed(f).unwrap()).collect()
        })
        .collect();
    if isolated.iter().any(Vec::is_empty) {
        return Err("streams too short to complete a window".into());
    }

    let server = Server::bind("127.0.0.1:0", model, WINDOW_US).map_err(|e| e.to_string())?;
    let addr = server.local_addr().map_err(|e| e.to_string())?;
    let handle = thread::spawn(move || server.run(Some(2)));
    let clients: Vec<_> = frames
        .into_iter()
        .zip(&isolated)
        .map(|(fs, iso)| {
            let n = iso.len();
            thread::spawn(move || client(addr, fs, n))
        })
        .collect();
    let got: Vec<Vec<Tensor>> = clients.into_iter().map(|c| c.join().unwrap()).collect();
    handle.join().unwrap().map_err(|e| e.to_string())?;

    for (i, (g, iso)) in got.iter().zip(&isolated).enumerate() {
        if g.len() != iso.len() {
            return Err(format!(
                "client {i}: {} replies, isolated session gave {}",
                g.len(),
                iso.len()
            ));
        }
        for (k, (a, b)) in g.iter().zip(iso).enumerate() {
            let same = a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                return Err(format!("client {i} window {k} differs from its isolated session"));
            }
        }
    }
    if got[0].iter().zip(&got[1]).all(|(a, b)| a == b) {
        return Err("the two streams produced identical flow; the check is vacuous".into());
    }
    Ok((got[0].len(), got[1].len()))
}
