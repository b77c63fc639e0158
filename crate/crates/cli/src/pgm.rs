//! Binary PGM (P5) output for decoded sample means. 8-bit grayscale, 28x28;
//! samples are for eyeballing, so no image codec dependency is warranted.

use dtvae_core::{Error, Result, IMAGE_PIXELS, IMAGE_SIDE};
use std::path::Path;

pub fn write_pgm(path: &Path, means: &[f64]) -> Result<()> {
    if means.len() != IMAGE_PIXELS {
        return Err(Error::Contract(format!(
            "pgm expects {IMAGE_PIXELS} pixels, got {}",
            means.len()
        )));
    }
    let mut bytes = format!("P5\n{IMAGE_SIDE} {IMAGE_SIDE}\n255\n").into_bytes();
    bytes.extend(
        means
            .iter()
            .map(|&m| (m.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, bytes)?;
    Ok(())
}
