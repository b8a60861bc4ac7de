//! Live event ingestion over TCP.
//!
//! Client → server: frames of `u32 n` followed by `n` 10-byte EVT1 records.
//! Server → client: for every completed window, `u32 0x464C4F57`, `u16 w`,
//! `u16 h`, then `w·h` interleaved (u, v) f32 pairs. A malformed frame is
//! answered with `u32 0x45525221`, `u16 code` and the connection closes.
//! All integers and floats are little-endian.
//!
//! Each connection runs on its own copy of the model with fresh states,
//! so concurrent clients never share membrane potentials.

use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::thread;

use crate::encoding::{Event, EventWindow};
use crate::error::{Error, FormatError, Result};
use crate::io::events::{decode_record, encode_record, RECORD_LEN};
use crate::network::Model;
use crate::parallel;
use crate::tensor::Tensor;

pub const FLOW_MARKER: u32 = 0x464C_4F57;
pub const ERROR_MARKER: u32 = 0x4552_5221;
/// Largest accepted frame, in events.
pub const MAX_FRAME_EVENTS: u32 = 1 << 20;
/// A silence longer than this many windows starts a new sequence instead of
/// replaying every empty window.
pub const MAX_IDLE_WINDOWS: u64 = 1000;

/// Codes carried by an error frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    FrameTooLarge = 1,
    CoordinateOutOfRange = 2,
    BadPolarity = 3,
    TimestampRegression = 4,
    Internal = 5,
}

impl ErrorCode {
    pub fn from_u16(c: u16) -> Option<Self> {
        Some(match c {
            1 => ErrorCode::FrameTooLarge,
            2 => ErrorCode::CoordinateOutOfRange,
            3 => ErrorCode::BadPolarity,
            4 => ErrorCode::TimestampRegression,
            5 => ErrorCode::Internal,
            _ => return None,
        })
    }

    fn of(e: &Error) -> Self {
        match e {
            Error::Format { kind, .. } => match kind {
                FormatError::CoordinateOutOfRange { .. } => ErrorCode::CoordinateOutOfRange,
                FormatError::BadPolarity(_) => ErrorCode::BadPolarity,
                FormatError::TimestampRegression { .. } => ErrorCode::TimestampRegression,
                _ => ErrorCode::Internal,
            },
            _ => ErrorCode::Internal,
        }
    }
}

/// Incremental frame decoder. Bytes may arrive split anywhere; whatever
/// prefix has been pushed, the parser waits for the rest.
#[derive(Debug)]
pub struct FrameParser {
    width: u16,
    height: u16,
    buf: Vec<u8>,
    /// Stream offset of `buf[0]`.
    consumed: u64,
    prev_t: Option<u64>,
}

impl FrameParser {
    pub fn new(width: u16, height: u16) -> Self {
        FrameParser {
            width,
            height,
            buf: Vec::new(),
            consumed: 0,
            prev_t: None,
        }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes received but not yet part of a complete frame.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }

    /// Next complete frame, `Ok(None)` if more bytes are needed.
    pub fn next_frame(&mut self) -> std::result::Result<Option<Vec<Event>>, ErrorCode> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let n = u32::from_le_bytes(self.buf[..4].try_into().expect("4 bytes"));
        if n > MAX_FRAME_EVENTS {
            return Err(ErrorCode::FrameTooLarge);
        }
        let len = 4 + n as usize * RECORD_LEN;
        if self.buf.len() < len {
            return Ok(None);
        }
        let mut events = Vec::with_capacity(n as usize);
        let mut prev = self.prev_t;
        for (i, rec) in self.buf[4..len].chunks_exact(RECORD_LEN).enumerate() {
            let offset = self.consumed + 4 + (i * RECORD_LEN) as u64;
            let rec: &[u8; RECORD_LEN] = rec.try_into().expect("record length");
            let e = decode_record(rec, offset, self.width, self.height, prev).map_err(|e| ErrorCode::of(&e))?;
            prev = Some(e.t);
            events.push(e);
        }
        self.prev_t = prev;
        self.buf.drain(..len);
        self.consumed += len as u64;
        Ok(Some(events))
    }
}

/// Encodes events as one client frame.
pub fn encode_frame(events: &[Event]) -> Result<Vec<u8>> {
    let n = u32::try_from(events.len())
        .ok()
        .filter(|&n| n <= MAX_FRAME_EVENTS)
        .ok_or_else(|| Error::InvalidArgument(format!("frame of {} events is too large", events.len())))?;
    let mut out = Vec::with_capacity(4 + events.len() * RECORD_LEN);
    out.extend_from_slice(&n.to_le_bytes());
    for e in events {
        out.extend_from_slice(&encode_record(e)?);
    }
    Ok(out)
}

/// Groups a live stream into fixed windows. The first event anchors the
/// grid at the window boundary below it.
#[derive(Debug)]
pub struct WindowAggregator {
    window_us: u64,
    width: usize,
    height: usize,
    start: Option<u64>,
    events: Vec<Event>,
}

/// What the aggregator hands back for one incoming event.
#[derive(Debug, PartialEq)]
pub enum Completed {
    Windows(Vec<EventWindow>),
    /// A long silence: the previous partial window and the grid are dropped.
    Restart,
}

impl WindowAggregator {
    pub fn new(window_us: u64, width: usize, height: usize) -> Result<Self> {
        if window_us == 0 {
            return Err(Error::InvalidArgument("window length must be positive".into()));
        }
        Ok(WindowAggregator {
            window_us,
            width,
            height,
            start: None,
            events: Vec::new(),
        })
    }

    fn close(&mut self, t0: u64) -> EventWindow {
        let events = std::mem::take(&mut self.events);
        EventWindow::new(events, t0, t0 + self.window_us, self.width, self.height)
            .expect("aggregated events are ordered and in range")
    }

    /// Adds one event, returning every window it completes.
    pub fn push(&mut self, e: Event) -> Completed {
        let w = self.window_us;
        let start = *self.start.get_or_insert(e.t / w * w);
        let mut done = Vec::new();
        if e.t >= start + w {
            let skipped = (e.t - start) / w;
            if skipped > MAX_IDLE_WINDOWS {
                self.events.clear();
                self.start = Some(e.t / w * w);
                self.events.push(e);
                return Completed::Restart;
            }
            for k in 0..skipped {
                done.push(self.close(start + k * w));
            }
            self.start = Some(start + skipped * w);
        }
        self.events.push(e);
        Completed::Windows(done)
    }
}

/// Per-connection inference state, independent of any socket.
#[derive(Debug)]
pub struct Session {
    model: Model,
    parser: FrameParser,
    windows: WindowAggregator,
}

impl Session {
    /// Takes a model replica and resets its states.
    pub fn new(mut model: Model, window_us: u64) -> Result<Self> {
        let (h, w) = (model.height(), model.width());
        let (w16, h16) = match (u16::try_from(w), u16::try_from(h)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return Err(Error::InvalidArgument(format!("sensor {w}x{h} exceeds 16-bit extents"))),
        };
        model.reset_states();
        Ok(Session {
            model,
            parser: FrameParser::new(w16, h16),
            windows: WindowAggregator::new(window_us, w, h)?,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Consumes raw bytes and returns the flow of every window they complete.
    pub fn feed(&mut self, bytes: &[u8]) -> std::result::Result<Vec<Tensor>, ErrorCode> {
        self.parser.push(bytes);
        let mut flows = Vec::new();
        while let Some(frame) = self.parser.next_frame()? {
            for e in frame {
                match self.windows.push(e) {
                    Completed::Windows(done) => {
                        for w in done {
                            flows.push(self.infer(&w)?);
                        }
                    }
                    Completed::Restart => self.model.reset_states(),
                }
            }
        }
        Ok(flows)
    }

    fn infer(&mut self, w: &EventWindow) -> std::result::Result<Tensor, ErrorCode> {
        let c = self.model.config();
        let input = c.input_coding.encode(w, c.n_in).map_err(|_| ErrorCode::Internal)?;
        let out = self.model.forward(&input).map_err(|_| ErrorCode::Internal)?;
        Ok(out.flow)
    }
}

pub fn encode_flow_reply(flow: &Tensor) -> Vec<u8> {
    let (_, h, w) = flow.chw().expect("flow is 2xHxW");
    let mut out = Vec::with_capacity(8 + 8 * h * w);
    out.extend_from_slice(&FLOW_MARKER.to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    let (u, v) = (flow.channel(0), flow.channel(1));
    for (a, b) in u.iter().zip(v) {
        out.extend_from_slice(&a.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
    }
    out
}

pub fn encode_error_reply(code: ErrorCode) -> [u8; 6] {
    let mut out = [0u8; 6];
    out[..4].copy_from_slice(&ERROR_MARKER.to_le_bytes());
    out[4..].copy_from_slice(&(code as u16).to_le_bytes());
    out
}

/// A decoded server message.
#[derive(Clone, Debug, PartialEq)]
pub enum Reply {
    Flow(Tensor),
    Error(u16),
}

/// Reads one server message; `Ok(None)` on a clean end of stream.
pub fn read_reply<R: Read>(r: &mut R) -> Result<Option<Reply>> {
    let mut m = [0u8; 4];
    match r.read_exact(&mut m) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let truncated = |e: io::Error| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Format {
            offset: 0,
            kind: FormatError::Truncated,
        },
        _ => e.into(),
    };
    match u32::from_le_bytes(m) {
        FLOW_MARKER => {
            let mut d = [0u8; 4];
            r.read_exact(&mut d).map_err(truncated)?;
            let w = u16::from_le_bytes([d[0], d[1]]) as usize;
            let h = u16::from_le_bytes([d[2], d[3]]) as usize;
            let mut raw = vec![0u8; 8 * w * h];
            r.read_exact(&mut raw).map_err(truncated)?;
            let mut data = vec![0.0f32; 2 * w * h];
            for (i, px) in raw.chunks_exact(8).enumerate() {
                data[i] = f32::from_le_bytes(px[..4].try_into().expect("4 bytes"));
                data[w * h + i] = f32::from_le_bytes(px[4..].try_into().expect("4 bytes"));
            }
            Ok(Some(Reply::Flow(Tensor::new(&[2, h, w], data)?)))
        }
        ERROR_MARKER => {
            let mut c = [0u8; 2];
            r.read_exact(&mut c).map_err(truncated)?;
            Ok(Some(Reply::Error(u16::from_le_bytes(c))))
        }
        _ => Err(Error::Format {
            offset: 0,
            kind: FormatError::BadMagic,
        }),
    }
}

fn handle_connection(stream: TcpStream, model: Model, window_us: u64) -> Result<()> {
    let mut session = Session::new(model, window_us)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut buf = vec![0u8; 64 * 1024];
    parallel::with_threads(1, || -> Result<()> {
        loop {
            let n = match reader.read(&mut buf) {
                Ok(0) => return Ok(()),
                Ok(n) => n,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            };
            match session.feed(&buf[..n]) {
                Ok(flows) => {
                    for f in &flows {
                        writer.write_all(&encode_flow_reply(f))?;
                    }
                    writer.flush()?;
                }
                Err(code) => {
                    writer.write_all(&encode_error_reply(code))?;
                    writer.flush()?;
                    let _ = writer.get_ref().shutdown(std::net::Shutdown::Both);
                    return Ok(());
                }
            }
        }
    })
}

/// Accepts connections and serves each on its own thread with its own
/// model copy.
pub struct Server {
    listener: TcpListener,
    model: Model,
    window_us: u64,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, model: Model, window_us: u64) -> Result<Self> {
        // validate once up front rather than on every connection
        Session::new(model.clone(), window_us)?;
        Ok(Server {
            listener: TcpListener::bind(addr)?,
            model,
            window_us,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Serves until `max_connections` have been accepted and finished, or
    /// forever when `None`.
    pub fn run(self, max_connections: Option<usize>) -> Result<()> {
        let mut handles = Vec::new();
        for (i, stream) in self.listener.incoming().enumerate() {
            let stream = stream?;
            let model = self.model.clone();
            let window_us = self.window_us;
            handles.push(thread::spawn(move || handle_connection(stream, model, window_us)));
            if max_connections.is_some_and(|m| i + 1 >= m) {
                break;
            }
        }
        for h in handles {
            h.join()
                .map_err(|_| Error::InvalidArgument("connection handler panicked".into()))??;
        }
        Ok(())
    }
}
