use std::fmt::Write as _;

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

/// Parses the plain-text event format: `#` comments, a `width height`
/// header, then one `t x y p` record per line with `p` in {1, -1}.
/// Records may arrive unsorted; the result is stable-sorted by `t`.
pub fn parse_event_file(text: &str) -> Result<EventStream> {
    let mut header: Option<(u32, u32)> = None;
    let mut events = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();

        let Some((width, height)) = header else {
            if fields.len() != 2 {
                return Err(parse_err(line_no, "expected header `width height`"));
            }
            let w = parse_num::<u32>(fields[0], line_no, "width")?;
            let h = parse_num::<u32>(fields[1], line_no, "height")?;
            if w == 0 || h == 0 {
                return Err(parse_err(line_no, "sensor resolution must be non-zero"));
            }
            header = Some((w, h));
            continue;
        };

        if fields.len() != 4 {
            return Err(parse_err(
                line_no,
                &format!("expected `t x y p`, found {} fields", fields.len()),
            ));
        }
        let t = parse_num::<u64>(fields[0], line_no, "timestamp")?;
        let x = parse_num::<u32>(fields[1], line_no, "x")?;
        let y = parse_num::<u32>(fields[2], line_no, "y")?;
        let p = match fields[3] {
            "1" | "+1" => Polarity::Positive,
            "-1" => Polarity::Negative,
            other => {
                return Err(Error::Polarity {
                    line: line_no,
                    value: other.to_string(),
                })
            }
        };
        if x >= width || y >= height {
            return Err(Error::Bounds {
                line: line_no,
                x,
                y,
                width,
                height,
            });
        }
        events.push(Event { x, y, t, p });
    }

    let (width, height) = header.ok_or_else(|| parse_err(0, "missing `width height` header"))?;
    EventStream::new(width, height, events)
}

pub fn write_event_file(stream: &EventStream) -> String {
    let mut out = String::with_capacity(16 + stream.len() * 16);
    let _ = writeln!(out, "{} {}", stream.width(), stream.height());
    for e in stream.events() {
        let _ = writeln!(out, "{} {} {} {}", e.t, e.x, e.y, e.p.sign());
    }
    out
}

fn parse_err(line: usize, msg: &str) -> Error {
    Error::Parse {
        line,
        msg: msg.to_string(),
    }
}

fn parse_num<T: std::str::FromStr>(field: &str, line: usize, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| parse_err(line, &format!("invalid {what} `{field}`")))
}
