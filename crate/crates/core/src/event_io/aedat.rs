//! AEDAT 3.1 reader and writer for polarity events.
//!
//! Layout: an ASCII header of `#`-prefixed lines opened by `#!AER-DAT3.1`
//! and closed by `#!END-HEADER`, followed by packets. Each packet starts with
//! a 28-byte little-endian header
//!
//! ```text
//! u16 eventType  u16 eventSource  u32 eventSize  u32 eventTSOffset
//! u32 eventTSOverflow  u32 eventCapacity  u32 eventNumber  u32 eventValid
//! ```
//!
//! and carries `eventCapacity * eventSize` bytes of events. Polarity events
//! (type 1) are 8 bytes: a `u32` data word (bit 0 valid, bit 1 polarity,
//! bits 2..17 y, bits 17..32 x) and a `u32` timestamp whose high bits come
//! from `eventTSOverflow`.

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

pub const AEDAT_POLARITY_EVENT: u16 = 1;

const VERSION_LINE: &str = "#!AER-DAT3.1";
const END_HEADER: &str = "#!END-HEADER";
const PACKET_HEADER_LEN: usize = 28;
const POLARITY_EVENT_LEN: u32 = 8;

fn sensor_size(source: &str) -> Option<(u16, u16)> {
    let name = source.trim().to_ascii_uppercase();
    if name.starts_with("DVS128") {
        Some((128, 128))
    } else if name.starts_with("DAVIS240") {
        Some((240, 180))
    } else if name.starts_with("DAVIS346") {
        Some((346, 260))
    } else {
        None
    }
}

fn read_u16(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses the header; returns the sensor size and the offset of the first
/// packet.
fn parse_header(bytes: &[u8]) -> Result<((u16, u16), usize)> {
    let mut offset = 0;
    let mut first = true;
    let mut size = (128, 128);
    loop {
        let rest = &bytes[offset..];
        let Some(newline) = rest.iter().position(|b| *b == b'\n') else {
            let field = if first { "version line" } else { "END-HEADER" };
            return Err(Error::format(field, "header ended without a terminating line"));
        };
        let raw = &rest[..newline];
        let line = std::str::from_utf8(raw)
            .map_err(|_| Error::format("header", format!("non-ASCII header line at byte {offset}")))?
            .trim_end_matches('\r');
        offset += newline + 1;
        if first {
            if line != VERSION_LINE {
                return Err(Error::format(
                    "version line",
                    format!("expected `{VERSION_LINE}`, found `{line}`"),
                ));
            }
            first = false;
            continue;
        }
        if !line.starts_with('#') {
            return Err(Error::format(
                "header",
                format!("line `{line}` does not start with `#`"),
            ));
        }
        if line == END_HEADER {
            return Ok((size, offset));
        }
        if let Some(rest) = line.strip_prefix("#Source ") {
            let name = rest.split_once(':').map(|(_, n)| n).ok_or_else(|| {
                Error::format("Source", format!("missing `:` in `{line}`"))
            })?;
            size = sensor_size(name)
                .ok_or_else(|| Error::format("Source", format!("unknown sensor `{}`", name.trim())))?;
        }
    }
}

/// Reads every valid polarity event. The result is sorted by timestamp and
/// rebased so the first event is at 0.
pub fn parse_aedat(bytes: &[u8]) -> Result<EventStream> {
    let ((width, height), mut offset) = parse_header(bytes)?;
    let mut events = Vec::new();
    while offset < bytes.len() {
        if bytes.len() - offset < PACKET_HEADER_LEN {
            return Err(Error::Truncated {
                offset: offset as u64,
                message: format!(
                    "packet header needs {PACKET_HEADER_LEN} bytes, {} left",
                    bytes.len() - offset
                ),
            });
        }
        let header = &bytes[offset..offset + PACKET_HEADER_LEN];
        let event_type = read_u16(header, 0);
        let event_size = read_u32(header, 4);
        let ts_overflow = read_u32(header, 12);
        let capacity = read_u32(header, 20);
        let number = read_u32(header, 24);
        let body_start = offset + PACKET_HEADER_LEN;
        let body_len = capacity as usize * event_size as usize;
        if number > capacity {
            return Err(Error::format(
                "eventNumber",
                format!("packet at byte {offset} holds {number} events but capacity {capacity}"),
            ));
        }
        if bytes.len() - body_start < body_len {
            return Err(Error::Truncated {
                offset: body_start as u64,
                message: format!(
                    "packet body needs {body_len} bytes, {} left",
                    bytes.len() - body_start
                ),
            });
        }
        if event_type == AEDAT_POLARITY_EVENT {
            if event_size != POLARITY_EVENT_LEN {
                return Err(Error::format(
                    "eventSize",
                    format!("polarity events are 8 bytes, packet at byte {offset} says {event_size}"),
                ));
            }
            let overflow = (ts_overflow as u64) << 31;
            for i in 0..number as usize {
                let at = body_start + i * POLARITY_EVENT_LEN as usize;
                let data = read_u32(bytes, at);
                let ts = read_u32(bytes, at + 4);
                if data & 1 == 0 {
                    continue;
                }
                let polarity = if (data >> 1) & 1 == 1 {
                    Polarity::On
                } else {
                    Polarity::Off
                };
                let y = ((data >> 2) & 0x7FFF) as u16;
                let x = ((data >> 17) & 0x7FFF) as u16;
                events.push(Event::new(overflow | ts as u64, x, y, polarity));
            }
        }
        offset = body_start + body_len;
    }
    Ok(EventStream::new(events, width, height)?.rebased())
}

/// Encodes events as an AEDAT 3.1 file with one polarity packet per chunk of
/// `events_per_packet` events. Only 128×128 (DVS128) sensors are encodable.
pub fn write_aedat(stream: &EventStream, events_per_packet: usize) -> Result<Vec<u8>> {
    if (stream.width(), stream.height()) != (128, 128) {
        return Err(Error::format(
            "Source",
            format!(
                "writer only emits DVS128 headers, stream is {}x{}",
                stream.width(),
                stream.height()
            ),
        ));
    }
    let mut out = Vec::new();
    out.extend_from_slice(format!("{VERSION_LINE}\r\n").as_bytes());
    out.extend_from_slice(b"#Format: RAW\r\n");
    out.extend_from_slice(b"#Source 1: DVS128\r\n");
    out.extend_from_slice(format!("{END_HEADER}\r\n").as_bytes());
    for epoch in stream
        .events()
        .chunk_by(|a, b| a.timestamp >> 31 == b.timestamp >> 31)
    {
        for chunk in epoch.chunks(events_per_packet.max(1)) {
            encode_packet(&mut out, chunk);
        }
    }
    Ok(out)
}

fn encode_packet(out: &mut Vec<u8>, events: &[Event]) {
    // All events of a packet share one overflow word.
    let overflow = events.first().map_or(0, |e| (e.timestamp >> 31) as u32);
    let n = events.len() as u32;
    out.extend_from_slice(&AEDAT_POLARITY_EVENT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&POLARITY_EVENT_LEN.to_le_bytes());
    out.extend_from_slice(&4u32.to_le_bytes());
    out.extend_from_slice(&overflow.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    for event in events {
        let pol = u32::from(event.polarity == Polarity::On);
        let data = 1 | (pol << 1) | ((event.y as u32) << 2) | ((event.x as u32) << 17);
        out.extend_from_slice(&data.to_le_bytes());
        out.extend_from_slice(&((event.timestamp & 0x7FFF_FFFF) as u32).to_le_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &[u8] = b"#!AER-DAT3.1\r\n#Source 1: DVS128\r\n#!END-HEADER\r\n";

    /// Polarity packet assembled byte by byte, without the library writer.
    fn hand_packet(events: &[(u32, u16, u16, bool)]) -> Vec<u8> {
        let mut p = Vec::new();
        p.extend_from_slice(&[1, 0, 1, 0]); // type 1, source 1
        p.extend_from_slice(&[8, 0, 0, 0]); // size
        p.extend_from_slice(&[4, 0, 0, 0]); // ts offset
        p.extend_from_slice(&[0, 0, 0, 0]); // overflow
        let n = events.len() as u8;
        p.extend_from_slice(&[n, 0, 0, 0, n, 0, 0, 0, n, 0, 0, 0]);
        for &(ts, x, y, on) in events {
            let data: u32 = 1 | ((on as u32) << 1) | ((y as u32) << 2) | ((x as u32) << 17);
            p.extend_from_slice(&data.to_le_bytes());
            p.extend_from_slice(&ts.to_le_bytes());
        }
        p
    }

    #[test]
    fn single_on_event() {
        let mut bytes = HEADER.to_vec();
        bytes.extend(hand_packet(&[(100, 5, 7, true)]));
        let stream = parse_aedat(&bytes).unwrap();
        assert_eq!(stream.len(), 1);
        let e = stream.events()[0];
        assert_eq!((e.x, e.y, e.polarity), (5, 7, Polarity::On));
        // Rebased to the first event.
        assert_eq!(e.timestamp, 0);
        assert_eq!(stream.origin(), 100);
        assert_eq!((stream.width(), stream.height()), (128, 128));
    }

    #[test]
    fn header_only_is_empty() {
        let stream = parse_aedat(HEADER).unwrap();
        assert!(stream.is_empty());
        assert_eq!(stream.duration(), 0);
    }

    #[test]
    fn interleaved_packets_are_sorted() {
        let mut bytes = HEADER.to_vec();
        bytes.extend(hand_packet(&[(10, 1, 1, true), (30, 2, 2, false)]));
        bytes.extend(hand_packet(&[(20, 3, 3, true), (40, 4, 4, true)]));
        let stream = parse_aedat(&bytes).unwrap();
        let ts: Vec<u64> = stream.events().iter().map(|e| e.timestamp).collect();
        let mut oracle = ts.clone();
        oracle.sort();
        assert_eq!(ts, oracle);
        assert_eq!(ts, vec![0, 10, 20, 30]);
        assert_eq!(stream.events()[1].x, 3);
    }

    #[test]
    fn invalid_events_and_other_packets_are_skipped() {
        let mut bytes = HEADER.to_vec();
        // Special-event packet (type 0), 8-byte events.
        let mut special = hand_packet(&[(5, 0, 0, false)]);
        special[0] = 0;
        bytes.extend(special);
        let mut polarity = hand_packet(&[(7, 1, 2, true), (9, 3, 4, true)]);
        // Clear the valid bit of the second event.
        let at = 28 + 8;
        polarity[at] &= !1;
        bytes.extend(polarity);
        let stream = parse_aedat(&bytes).unwrap();
        assert_eq!(stream.len(), 1);
    }

    #[test]
    fn malformed_header_names_field() {
        match parse_aedat(b"#!AER-DAT2.0\r\n#!END-HEADER\r\n") {
            Err(Error::Format { field, .. }) => assert_eq!(field, "version line"),
            other => panic!("unexpected {other:?}"),
        }
        match parse_aedat(b"#!AER-DAT3.1\r\n#Source 1: XYZ\r\n#!END-HEADER\r\n") {
            Err(Error::Format { field, .. }) => assert_eq!(field, "Source"),
            other => panic!("unexpected {other:?}"),
        }
        match parse_aedat(b"#!AER-DAT3.1\r\n#Format: RAW\r\n") {
            Err(Error::Format { field, .. }) => assert_eq!(field, "END-HEADER"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_packet_reports_offset() {
        let mut bytes = HEADER.to_vec();
        let packet = hand_packet(&[(1, 1, 1, true)]);
        bytes.extend_from_slice(&packet[..packet.len() - 3]);
        match parse_aedat(&bytes) {
            Err(Error::Truncated { offset, .. }) => {
                assert_eq!(offset, (HEADER.len() + 28) as u64)
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut short = HEADER.to_vec();
        short.extend_from_slice(&[1, 0, 1]);
        assert!(matches!(
            parse_aedat(&short),
            Err(Error::Truncated { offset, .. }) if offset == HEADER.len() as u64
        ));
    }

    #[test]
    fn writer_matches_hand_encoding() {
        let stream = EventStream::new(vec![Event::new(100, 5, 7, Polarity::On)], 128, 128).unwrap();
        let written = write_aedat(&stream, 16).unwrap();
        let body = &written[written.len() - 36..];
        assert_eq!(body, hand_packet(&[(100, 5, 7, true)]).as_slice());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn round_trip_is_identity(
                raw in proptest::collection::vec((0u64..5_000_000, 0u16..128, 0u16..128, any::<bool>()), 0..200),
                per_packet in 1usize..64,
            ) {
                let events = raw
                    .into_iter()
                    .map(|(t, x, y, on)| Event::new(t, x, y, if on { Polarity::On } else { Polarity::Off }))
                    .collect();
                let stream = EventStream::new(events, 128, 128).unwrap().rebased();
                let bytes = write_aedat(&stream, per_packet).unwrap();
                let back = parse_aedat(&bytes).unwrap();
                prop_assert_eq!(back.events(), stream.events());
                let again = parse_aedat(&write_aedat(&back, per_packet).unwrap()).unwrap();
                prop_assert_eq!(again, back);
            }
        }
    }
}
