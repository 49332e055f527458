//! Token batch file formats.
//!
//! - CSV: one token per line, `d` comma-separated decimal floats.
//! - Binary: 8-byte header (`s: u32`, `d: u32`, little endian) followed by
//!   `s * d` little-endian `f32` values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::TokenBatch;
use crate::error::{Error, Result};

pub fn parse_csv(text: &str) -> Result<TokenBatch> {
    let mut flat = Vec::new();
    let mut d = None;
    let mut s = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut width = 0;
        for field in trimmed.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("cannot parse {:?} as a number", field.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, message: "non-finite value".into() });
            }
            flat.push(v);
            width += 1;
        }
        match d {
            None => d = Some(width),
            Some(expected) if expected != width => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {expected} values, found {width}"),
                })
            }
            Some(_) => {}
        }
        s += 1;
    }
    let d = d.ok_or(Error::Empty)?;
    let tokens = Array2::from_shape_vec((s, d), flat).map_err(|e| Error::Shape(e.to_string()))?;
    TokenBatch::new(tokens)
}

pub fn to_csv(batch: &TokenBatch) -> String {
    let mut out = String::new();
    for row in batch.tokens().outer_iter() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn read_bin(mut reader: impl Read) -> Result<TokenBatch> {
    let mut header = [0u8; 8];
    reader.read_exact(&mut header).map_err(|_| Error::Parse {
        line: 0,
        message: "truncated header".into(),
    })?;
    let s = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    if s == 0 {
        return Err(Error::Empty);
    }
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    if body.len() != s * d * 4 {
        return Err(Error::Parse {
            line: 0,
            message: format!("expected {} payload bytes for {s}x{d}, found {}", s * d * 4, body.len()),
        });
    }
    let flat: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let tokens = Array2::from_shape_vec((s, d), flat).map_err(|e| Error::Shape(e.to_string()))?;
    TokenBatch::new(tokens)
}

/// Writes the binary format. Features are narrowed to `f32`.
pub fn write_bin(batch: &TokenBatch, mut writer: impl Write) -> Result<()> {
    let s = u32::try_from(batch.s()).map_err(|_| Error::invalid("too many tokens for u32 header"))?;
    let d = u32::try_from(batch.d()).map_err(|_| Error::invalid("dimension too large for u32 header"))?;
    writer.write_all(&s.to_le_bytes())?;
    writer.write_all(&d.to_le_bytes())?;
    for v in batch.tokens().iter() {
        writer.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Loads a batch, choosing the format from the extension (`.bin` is binary,
/// anything else is CSV).
pub fn load(path: &Path) -> Result<TokenBatch> {
    if path.extension().is_some_and(|e| e == "bin") {
        read_bin(std::fs::File::open(path)?)
    } else {
        parse_csv(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn csv_parses_rows() {
        let b = parse_csv("0.9,0.1\n0.8, 0.2\n\n0.3,0.7\n").unwrap();
        assert_eq!((b.s(), b.d()), (3, 2));
        assert_eq!(b.row(1).to_vec(), vec![0.8, 0.2]);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        match parse_csv("1,2\n3,x\n") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_csv("1,2\n3,4\n5\n") {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_csv(""), Err(Error::Empty)));
        assert!(matches!(parse_csv("\n \n"), Err(Error::Empty)));
    }

    #[test]
    fn bin_header_layout() {
        let b = TokenBatch::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let mut buf = Vec::new();
        write_bin(&b, &mut buf).unwrap();
        assert_eq!(&buf[..8], &[1, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&buf[8..12], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 8 + 12);
    }

    #[test]
    fn bin_rejects_truncated_payload() {
        let mut buf = vec![2, 0, 0, 0, 2, 0, 0, 0];
        buf.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(matches!(read_bin(&buf[..]), Err(Error::Parse { .. })));
        assert!(matches!(read_bin(&[0u8; 8][..]), Err(Error::Empty)));
    }

    proptest! {
        #[test]
        fn bin_round_trips_f32_values(rows in prop::collection::vec(prop::collection::vec(-1e3f32..1e3, 3), 1..10)) {
            let rows64: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
            let b = TokenBatch::from_rows(&rows64).unwrap();
            let mut buf = Vec::new();
            write_bin(&b, &mut buf).unwrap();
            prop_assert_eq!(read_bin(&buf[..]).unwrap(), b.clone());
            prop_assert_eq!(parse_csv(&to_csv(&b)).unwrap(), b);
        }
    }
}
