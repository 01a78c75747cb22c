//! Plain-text event format.
//!
//! ```text
//! width,height
//! timestamp_us,x,y,polarity
//! ...
//! ```
//!
//! Polarity is `1` for ON and `0` for OFF. Timestamps are already relative to
//! the recording start and are kept as written.

use std::fmt::Write as _;

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

fn field<T: std::str::FromStr>(raw: Option<&str>, line: usize, name: &str) -> Result<T> {
    let raw = raw.ok_or_else(|| Error::Parse {
        line,
        message: format!("missing field `{name}`"),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("field `{name}` is not a valid number: `{}`", raw.trim()),
    })
}

pub fn parse_portable_events(text: &str) -> Result<EventStream> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (header_line, header) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or(Error::Parse {
            line: 1,
            message: "missing `width,height` header".into(),
        })?;
    let mut parts = header.split(',');
    let width: u16 = field(parts.next(), header_line, "width")?;
    let height: u16 = field(parts.next(), header_line, "height")?;
    if parts.next().is_some() {
        return Err(Error::Parse {
            line: header_line,
            message: "header must be `width,height`".into(),
        });
    }

    let mut events = Vec::new();
    for (line, record) in lines {
        if record.trim().is_empty() {
            continue;
        }
        let mut parts = record.split(',');
        let timestamp: u64 = field(parts.next(), line, "timestamp")?;
        let x: u16 = field(parts.next(), line, "x")?;
        let y: u16 = field(parts.next(), line, "y")?;
        let polarity = match field::<u8>(parts.next(), line, "polarity")? {
            1 => Polarity::On,
            0 => Polarity::Off,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("polarity must be 0 or 1, got {other}"),
                })
            }
        };
        if parts.next().is_some() {
            return Err(Error::Parse {
                line,
                message: "expected 4 fields".into(),
            });
        }
        if x >= width || y >= height {
            return Err(Error::Parse {
                line,
                message: format!("({x}, {y}) outside a {width}x{height} sensor"),
            });
        }
        events.push(Event::new(timestamp, x, y, polarity));
    }
    EventStream::new(events, width, height)
}

pub fn write_portable_events(stream: &EventStream) -> String {
    let mut out = format!("{},{}\n", stream.width(), stream.height());
    for e in stream.events() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            e.timestamp,
            e.x,
            e.y,
            u8::from(e.polarity == Polarity::On)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_event() {
        let stream = parse_portable_events("128,128\n100,5,7,1\n").unwrap();
        assert_eq!(stream.events(), &[Event::new(100, 5, 7, Polarity::On)]);
    }

    #[test]
    fn empty_body() {
        let stream = parse_portable_events("128,128\n").unwrap();
        assert!(stream.is_empty());
        assert_eq!(stream.duration(), 0);
    }

    #[test]
    fn bad_polarity_reports_line() {
        match parse_portable_events("128,128\n1,1,1,0\n100,5,7,2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_field_reports_line() {
        match parse_portable_events("128,128\nabc,5,7,1\n") {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("timestamp"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_portable_events("12x,128\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn out_of_order_records_are_sorted() {
        let stream = parse_portable_events("4,4\n30,0,0,1\n10,1,1,0\n").unwrap();
        assert_eq!(stream.events()[0].timestamp, 10);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn round_trip_is_identity(
                raw in proptest::collection::vec((0u64..1_000_000, 0u16..64, 0u16..48, any::<bool>()), 0..100)
            ) {
                let events = raw
                    .into_iter()
                    .map(|(t, x, y, on)| Event::new(t, x, y, if on { Polarity::On } else { Polarity::Off }))
                    .collect();
                let stream = EventStream::new(events, 64, 48).unwrap();
                let back = parse_portable_events(&write_portable_events(&stream)).unwrap();
                prop_assert_eq!(back, stream);
            }
        }
    }
}
