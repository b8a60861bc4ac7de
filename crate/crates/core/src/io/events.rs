//! EVT1 event container.
//!
//! Layout (little-endian): `"EVT1"`, u16 width, u16 height, u64 event
//! count, then one 10-byte record per event: u16 x, u16 y, u32 t (µs),
//! i8 polarity, u8 padding.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::encoding::Event;
use crate::error::{Error, FormatError, Result};

pub const EVT_MAGIC: [u8; 4] = *b"EVT1";
pub const HEADER_LEN: u64 = 16;
pub const RECORD_LEN: usize = 10;

/// Sensor size and event count from an EVT1 header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventHeader {
    pub width: u16,
    pub height: u16,
    pub n_events: u64,
}

fn format_err(offset: u64, kind: FormatError) -> Error {
    Error::Format { offset, kind }
}

/// Reads exactly `buf.len()` bytes, reporting a short read as truncation at `offset`.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8], offset: u64) -> Result<()> {
    match r.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => Err(format_err(offset, FormatError::Truncated)),
        Err(e) => Err(e.into()),
    }
}

/// Encodes one event as a record.
pub fn encode_record(e: &Event) -> Result<[u8; RECORD_LEN]> {
    let t =
        u32::try_from(e.t).map_err(|_| Error::InvalidArgument(format!("timestamp {} does not fit in 32 bits", e.t)))?;
    let mut b = [0u8; RECORD_LEN];
    b[0..2].copy_from_slice(&e.x.to_le_bytes());
    b[2..4].copy_from_slice(&e.y.to_le_bytes());
    b[4..8].copy_from_slice(&t.to_le_bytes());
    b[8] = e.p as u8;
    Ok(b)
}

/// Decodes and checks one record found at byte `offset`. `prev` is the
/// timestamp of the preceding event, if any.
pub fn decode_record(b: &[u8; RECORD_LEN], offset: u64, width: u16, height: u16, prev: Option<u64>) -> Result<Event> {
    let x = u16::from_le_bytes([b[0], b[1]]);
    let y = u16::from_le_bytes([b[2], b[3]]);
    let t = u32::from_le_bytes([b[4], b[5], b[6], b[7]]) as u64;
    let p = b[8] as i8;
    if x >= width || y >= height {
        return Err(format_err(
            offset,
            FormatError::CoordinateOutOfRange {
                x: x.into(),
                y: y.into(),
                width: width.into(),
                height: height.into(),
            },
        ));
    }
    if p != 1 && p != -1 {
        return Err(format_err(offset, FormatError::BadPolarity(p)));
    }
    if let Some(prev) = prev.filter(|&prev| t < prev) {
        return Err(format_err(offset, FormatError::TimestampRegression { prev, t }));
    }
    Ok(Event::new(x, y, t, p))
}

/// Streaming EVT1 reader. Yields events one at a time and stops after the
/// first error.
pub struct EventReader<R> {
    inner: R,
    header: EventHeader,
    read: u64,
    prev: Option<u64>,
    failed: bool,
}

impl<R: Read> EventReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut h = [0u8; HEADER_LEN as usize];
        // a short magic is reported as truncation, a wrong one as bad magic
        read_full(&mut inner, &mut h[..4], 0)?;
        if h[..4] != EVT_MAGIC {
            return Err(format_err(0, FormatError::BadMagic));
        }
        read_full(&mut inner, &mut h[4..], 4)?;
        let header = EventHeader {
            width: u16::from_le_bytes([h[4], h[5]]),
            height: u16::from_le_bytes([h[6], h[7]]),
            n_events: u64::from_le_bytes(h[8..16].try_into().expect("8 bytes")),
        };
        if header.n_events > 0 && (header.width == 0 || header.height == 0) {
            return Err(format_err(
                4,
                FormatError::BadDimensions {
                    width: header.width.into(),
                    height: header.height.into(),
                },
            ));
        }
        Ok(EventReader {
            inner,
            header,
            read: 0,
            prev: None,
            failed: false,
        })
    }

    pub fn header(&self) -> EventHeader {
        self.header
    }

    fn next_event(&mut self) -> Result<Event> {
        let offset = HEADER_LEN + self.read * RECORD_LEN as u64;
        let mut b = [0u8; RECORD_LEN];
        read_full(&mut self.inner, &mut b, offset)?;
        let e = decode_record(&b, offset, self.header.width, self.header.height, self.prev)?;
        self.prev = Some(e.t);
        self.read += 1;
        Ok(e)
    }
}

impl<R: Read> Iterator for EventReader<R> {
    type Item = Result<Event>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.read == self.header.n_events {
            return None;
        }
        let r = self.next_event();
        self.failed = r.is_err();
        Some(r)
    }
}

/// Reads a whole EVT1 stream.
pub fn read_events_from<R: Read>(r: R) -> Result<(EventHeader, Vec<Event>)> {
    let reader = EventReader::new(r)?;
    let header = reader.header();
    // the count is untrusted; let the vector grow with what is really there
    let events = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, events))
}

pub fn read_events(path: impl AsRef<Path>) -> Result<(EventHeader, Vec<Event>)> {
    read_events_from(BufReader::new(File::open(path)?))
}

/// Writes an EVT1 stream after checking that the events are ordered,
/// inside the sensor and have 32-bit timestamps.
pub fn write_events_to<W: Write>(mut w: W, width: u16, height: u16, events: &[Event]) -> Result<()> {
    let mut prev = None;
    let mut records = Vec::with_capacity(events.len());
    for (i, e) in events.iter().enumerate() {
        let b = encode_record(e)?;
        let offset = HEADER_LEN + (i * RECORD_LEN) as u64;
        decode_record(&b, offset, width, height, prev).map_err(|err| match err {
            Error::Format { kind, .. } => Error::InvalidArgument(format!("event {i}: {kind}")),
            other => other,
        })?;
        prev = Some(e.t);
        records.push(b);
    }
    w.write_all(&EVT_MAGIC)?;
    w.write_all(&width.to_le_bytes())?;
    w.write_all(&height.to_le_bytes())?;
    w.write_all(&(events.len() as u64).to_le_bytes())?;
    for b in &records {
        w.write_all(b)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_events(path: impl AsRef<Path>, width: u16, height: u16, events: &[Event]) -> Result<()> {
    write_events_to(BufWriter::new(File::create(path)?), width, height, events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bytes(events: &[Event]) -> Vec<u8> {
        let mut out = Vec::new();
        write_events_to(&mut out, 8, 4, events).unwrap();
        out
    }

    #[test]
    fn round_trip_and_empty_file() {
        let ev = vec![
            Event::new(0, 0, 5, 1),
            Event::new(7, 3, 5, -1),
            Event::new(2, 1, u32::MAX as u64, 1),
        ];
        let b = bytes(&ev);
        assert_eq!(b.len(), 16 + 30);
        let (h, back) = read_events_from(&b[..]).unwrap();
        assert_eq!((h.width, h.height, h.n_events), (8, 4, 3));
        assert_eq!(back, ev);
        let (h, back) = read_events_from(&bytes(&[])[..]).unwrap();
        assert_eq!(h.n_events, 0);
        assert!(back.is_empty());
    }

    #[test]
    fn errors_cite_byte_offsets() {
        let mut b = bytes(&[Event::new(1, 1, 0, 1), Event::new(2, 2, 9, 1)]);
        // second record x = width
        b[26] = 8;
        let err = read_events_from(&b[..]).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Format {
                    offset: 26,
                    kind: FormatError::CoordinateOutOfRange { x: 8, .. }
                }
            ),
            "{err}"
        );

        let b = bytes(&[Event::new(1, 1, 0, 1)]);
        let err = read_events_from(&b[..b.len() - 1]).unwrap_err();
        assert!(matches!(
            err,
            Error::Format {
                offset: 16,
                kind: FormatError::Truncated
            }
        ));

        let mut b = bytes(&[Event::new(1, 1, 9, 1), Event::new(2, 2, 10, 1)]);
        b[30] = 3;
        let err = read_events_from(&b[..]).unwrap_err();
        assert!(matches!(
            err,
            Error::Format {
                offset: 26,
                kind: FormatError::TimestampRegression { prev: 9, t: 3 }
            }
        ));

        let mut b = bytes(&[]);
        b[3] = b'2';
        assert!(matches!(
            read_events_from(&b[..]).unwrap_err(),
            Error::Format {
                offset: 0,
                kind: FormatError::BadMagic
            }
        ));
    }

    #[test]
    fn writer_rejects_invalid_streams() {
        let mut out = Vec::new();
        assert!(write_events_to(&mut out, 8, 4, &[Event::new(8, 0, 0, 1)]).is_err());
        assert!(write_events_to(&mut out, 8, 4, &[Event::new(0, 0, 1 << 32, 1)]).is_err());
        assert!(write_events_to(&mut out, 8, 4, &[Event::new(0, 0, 2, 1), Event::new(0, 0, 1, 1)]).is_err());
        assert!(out.is_empty());
    }

    #[test]
    fn reader_streams_lazily() {
        let b = bytes(&[Event::new(1, 1, 0, 1), Event::new(2, 2, 9, -1)]);
        let mut r = EventReader::new(&b[..]).unwrap();
        assert_eq!(r.next().unwrap().unwrap().t, 0);
        assert_eq!(r.next().unwrap().unwrap().p, -1);
        assert!(r.next().is_none());
    }
}
