//! Dataset fixtures: IDX encoders and a synthetic MNIST-shaped generator.
//!
//! The real dataset is never downloaded by this project, so tests, demos,
//! and offline runs need a stand-in that exercises the exact same loaders
//! and training pipeline. The generator produces ten visually distinct
//! "digit" classes built from smooth blob strokes with per-image jitter;
//! the smoothness gives neighboring pixels the correlations that make a
//! full-covariance posterior worth having.

use crate::data::{Dataset, GrayImage, IMAGE_PIXELS, IMAGE_SIDE};
use crate::error::Result;
use crate::rng::stream;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::Rng;
use std::io::Write;
use std::path::Path;

/// Encode images into the IDX container (magic 0x00000803), quantizing
/// intensities back to bytes.
pub fn encode_idx_images(images: &[GrayImage]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * IMAGE_PIXELS);
    out.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    for img in images {
        out.extend(img.pixels().iter().map(|&p| (p * 255.0).round() as u8));
    }
    out
}

/// Encode labels into the IDX container (magic 0x00000801).
pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(bytes).expect("in-memory gzip");
    enc.finish().expect("in-memory gzip")
}

#[derive(Clone, Copy)]
struct Bump {
    cx: f64,
    cy: f64,
    sigma: f64,
    amp: f64,
}

fn class_bumps(seed: u64, class: u8) -> Vec<Bump> {
    let mut rng = stream(seed, "synth-template", class as u64);
    (0..4)
        .map(|_| Bump {
            cx: rng.gen_range(5.0..23.0),
            cy: rng.gen_range(5.0..23.0),
            sigma: rng.gen_range(1.8..4.5),
            amp: rng.gen_range(0.6..1.0),
        })
        .collect()
}

fn render(bumps: &[Bump], dx: f64, dy: f64, gain: f64) -> Vec<f64> {
    let mut pixels = vec![0.0f64; IMAGE_PIXELS];
    for (idx, p) in pixels.iter_mut().enumerate() {
        let x = (idx % IMAGE_SIDE) as f64;
        let y = (idx / IMAGE_SIDE) as f64;
        let mut v = 0.0;
        for b in bumps {
            let ddx = x - (b.cx + dx);
            let ddy = y - (b.cy + dy);
            let r2 = ddx * ddx + ddy * ddy;
            v += b.amp * (-r2 / (2.0 * b.sigma * b.sigma)).exp();
        }
        *p = (gain * v).min(1.0);
    }
    pixels
}

/// Deterministic synthetic dataset: `count` images cycling through ten
/// blob-stroke classes with per-image translation and gain jitter.
pub fn synthetic_dataset(count: usize, seed: u64) -> Dataset {
    let templates: Vec<Vec<Bump>> = (0..10).map(|c| class_bumps(seed, c)).collect();
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = (i % 10) as u8;
        let mut rng = stream(seed, "synth-image", i as u64);
        let dx = rng.gen_range(-2.0..2.0);
        let dy = rng.gen_range(-2.0..2.0);
        let gain = rng.gen_range(0.85..1.1);
        let pixels = render(&templates[class as usize], dx, dy, gain);
        images.push(GrayImage::from_pixels(pixels).expect("render stays in [0,1]"));
        labels.push(class);
    }
    Dataset::new(images, labels).expect("lengths match by construction")
}

/// Write a synthetic train/test pair under the standard MNIST file names.
pub fn write_synthetic_mnist(dir: &Path, train: usize, test: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let train_ds = synthetic_dataset(train, seed);
    // A different stream for the test split so the two sets are disjoint
    // draws from the same class templates.
    let test_ds = {
        let templates: Vec<Vec<Bump>> = (0..10).map(|c| class_bumps(seed, c)).collect();
        let mut images = Vec::with_capacity(test);
        let mut labels = Vec::with_capacity(test);
        for i in 0..test {
            let class = (i % 10) as u8;
            let mut rng = stream(seed, "synth-test-image", i as u64);
            let dx = rng.gen_range(-2.0..2.0);
            let dy = rng.gen_range(-2.0..2.0);
            let gain = rng.gen_range(0.85..1.1);
            let pixels = render(&templates[class as usize], dx, dy, gain);
            images.push(GrayImage::from_pixels(pixels).expect("render stays in [0,1]"));
            labels.push(class);
        }
        Dataset::new(images, labels).expect("lengths match by construction")
    };
    std::fs::write(
        dir.join("train-images-idx3-ubyte"),
        encode_idx_images(train_ds.images()),
    )?;
    std::fs::write(
        dir.join("train-labels-idx1-ubyte"),
        encode_idx_labels(train_ds.labels()),
    )?;
    std::fs::write(
        dir.join("t10k-images-idx3-ubyte"),
        encode_idx_images(test_ds.images()),
    )?;
    std::fs::write(
        dir.join("t10k-labels-idx1-ubyte"),
        encode_idx_labels(test_ds.labels()),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_mnist_dir;

    #[test]
    fn synthetic_dataset_is_deterministic_and_structured() {
        let a = synthetic_dataset(20, 7);
        let b = synthetic_dataset(20, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        // Same class, different images (jitter applies).
        assert_ne!(a.images()[0], a.images()[10]);
        assert_eq!(a.labels()[0], a.labels()[10]);
        // Not all-black: the blobs carry real mass.
        let mass: f64 = a.images()[0].pixels().iter().sum();
        assert!(mass > 10.0);
    }

    #[test]
    fn write_and_reload_synthetic_dir() {
        let dir = std::env::temp_dir().join(format!("dtvae-fixtures-{}", std::process::id()));
        write_synthetic_mnist(&dir, 30, 10, 3).unwrap();
        let loaded = load_mnist_dir(&dir).unwrap();
        assert_eq!(loaded.train.len(), 30);
        assert_eq!(loaded.test.len(), 10);
        std::fs::remove_dir_all(&dir).ok();
    }
}
