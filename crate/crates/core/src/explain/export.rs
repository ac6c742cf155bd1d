use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes a binary (P5) 8-bit PGM of the last two dimensions of `map`,
/// min-max scaled to 0..=255. A constant map is written black.
pub fn write_pgm(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    let s = map.shape();
    if s.len() < 2 {
        return Err(Error::Shape {
            context: "pgm export (needs at least two dimensions)",
            expected: vec![1, 1],
            found: s.to_vec(),
        });
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let values = &map.data()[..h * w];
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Flattened map values as CSV fields (shortest round-trip formatting).
pub fn map_to_csv_row(map: &Tensor) -> Vec<String> {
    map.data().iter().map(|v| v.to_string()).collect()
}
