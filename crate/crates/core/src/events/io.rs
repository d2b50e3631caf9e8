//! "EVT1" event files: a 16-byte header (magic, width u16, height u16,
//! count u64) followed by 16-byte records (x u16, y u16, t u64, p i8, 3 pad
//! bytes), all little-endian and sorted by timestamp.

use std::path::Path;

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"EVT1";
const HEADER_LEN: usize = 16;
const RECORD_LEN: usize = 16;

pub fn encode_events(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&stream.width.to_le_bytes());
    out.extend_from_slice(&stream.height.to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in &stream.events {
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.extend_from_slice(&e.t.to_le_bytes());
        out.push(e.p.sign() as u8);
        out.extend_from_slice(&[0; 3]);
    }
    out
}

pub fn decode_events(buf: &[u8]) -> Result<EventStream> {
    if buf.len() < 4 {
        return Err(Error::Truncated {
            what: "header",
            needed: HEADER_LEN,
            available: buf.len(),
        });
    }
    let magic: [u8; 4] = buf[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    if buf.len() < HEADER_LEN {
        return Err(Error::Truncated {
            what: "header",
            needed: HEADER_LEN,
            available: buf.len(),
        });
    }
    let width = u16::from_le_bytes([buf[4], buf[5]]);
    let height = u16::from_le_bytes([buf[6], buf[7]]);
    let count = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let body = &buf[HEADER_LEN..];
    let needed = count.checked_mul(RECORD_LEN).ok_or_else(|| Error::Format(format!("event count {count} overflows")))?;
    if body.len() < needed {
        return Err(Error::Truncated {
            what: "event records",
            needed,
            available: body.len(),
        });
    }
    if body.len() > needed {
        return Err(Error::Format(format!("{} trailing bytes after {count} records", body.len() - needed)));
    }
    let mut events = Vec::with_capacity(count);
    let mut prev = 0u64;
    for (index, r) in body.chunks_exact(RECORD_LEN).enumerate() {
        let x = u16::from_le_bytes([r[0], r[1]]);
        let y = u16::from_le_bytes([r[2], r[3]]);
        let t = u64::from_le_bytes(r[4..12].try_into().unwrap());
        let p = match r[12] as i8 {
            1 => Polarity::On,
            -1 => Polarity::Off,
            other => {
                return Err(Error::InvalidRecord {
                    index,
                    reason: format!("polarity {other}"),
                })
            }
        };
        if x >= width || y >= height {
            return Err(Error::EventOutOfBounds { index, x, y, width, height });
        }
        if index > 0 && t < prev {
            return Err(Error::UnsortedTimestamps {
                index,
                previous: prev,
                current: t,
            });
        }
        prev = t;
        events.push(Event { x, y, t, p });
    }
    Ok(EventStream { width, height, events })
}

pub fn write_events(stream: &EventStream, path: impl AsRef<Path>) -> Result<()> {
    stream.validate()?;
    let path = path.as_ref();
    std::fs::write(path, encode_events(stream)).map_err(|e| Error::io(path, e))
}

pub fn read_events(path: impl AsRef<Path>) -> Result<EventStream> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_events(&buf)
}
