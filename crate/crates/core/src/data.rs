//! MNIST-shaped data handling: IDX container parsing (optionally gzipped),
//! dynamic binarization, and seeded minibatch iteration.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::stream;
use flate2::read::GzDecoder;
use rand::Rng;
use std::io::Read;
use std::path::Path;

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// One grayscale image, stored as `byte / 255` intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn from_bytes(bytes: &[u8]) -> Result<GrayImage> {
        if bytes.len() != IMAGE_PIXELS {
            return Err(Error::contract(format!(
                "image needs {IMAGE_PIXELS} bytes, got {}",
                bytes.len()
            )));
        }
        Ok(GrayImage {
            pixels: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    pub fn from_pixels(pixels: Vec<f64>) -> Result<GrayImage> {
        if pixels.len() != IMAGE_PIXELS {
            return Err(Error::contract(format!(
                "image needs {IMAGE_PIXELS} pixels, got {}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::contract("pixel intensities must lie in [0, 1]"));
        }
        Ok(GrayImage { pixels })
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }
}

/// An image set with labels. Labels are unused by training; they are kept
/// for sample-inspection tooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<GrayImage>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Vec<GrayImage>, labels: Vec<u8>) -> Result<Dataset> {
        if images.len() != labels.len() {
            return Err(Error::contract(format!(
                "{} images vs {} labels",
                images.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 9) {
            return Err(Error::contract("labels must be digits 0-9"));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[GrayImage] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// First `count` datapoints (or the whole set if shorter).
    pub fn subset(&self, count: usize) -> Dataset {
        let take = count.min(self.images.len());
        Dataset {
            images: self.images[..take].to_vec(),
            labels: self.labels[..take].to_vec(),
        }
    }

    /// Split off the last `count` datapoints as a validation set.
    pub fn split_validation(&self, count: usize) -> (Dataset, Dataset) {
        let cut = self.images.len().saturating_sub(count);
        (
            Dataset {
                images: self.images[..cut].to_vec(),
                labels: self.labels[..cut].to_vec(),
            },
            Dataset {
                images: self.images[cut..].to_vec(),
                labels: self.labels[cut..].to_vec(),
            },
        )
    }
}

fn gunzip_if_needed(bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| Error::Format {
                offset: 0,
                message: format!("gzip decode failed: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(bytes.to_vec())
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format {
            offset,
            message: format!("truncated header: need {end} bytes, have {}", bytes.len()),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse an IDX image file (magic 0x00000803, 28x28, optionally gzipped).
pub fn load_idx_images(raw: &[u8]) -> Result<Vec<GrayImage>> {
    let bytes = gunzip_if_needed(raw)?;
    let magic = read_be_u32(&bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad image magic 0x{magic:08x}, want 0x{IMAGES_MAGIC:08x}"),
        });
    }
    let count = read_be_u32(&bytes, 4)? as usize;
    let rows = read_be_u32(&bytes, 8)? as usize;
    let cols = read_be_u32(&bytes, 12)? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(Error::Format {
            offset: 8,
            message: format!("expected 28x28 images, got {rows}x{cols}"),
        });
    }
    let need = 16 + count * IMAGE_PIXELS;
    if bytes.len() < need {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("truncated payload: need {need} bytes, have {}", bytes.len()),
        });
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * IMAGE_PIXELS;
        images.push(GrayImage::from_bytes(&bytes[start..start + IMAGE_PIXELS])?);
    }
    Ok(images)
}

/// Parse an IDX label file (magic 0x00000801, labels 0-9, optionally gzipped).
pub fn load_idx_labels(raw: &[u8]) -> Result<Vec<u8>> {
    let bytes = gunzip_if_needed(raw)?;
    let magic = read_be_u32(&bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad label magic 0x{magic:08x}, want 0x{LABELS_MAGIC:08x}"),
        });
    }
    let count = read_be_u32(&bytes, 4)? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("truncated payload: need {need} bytes, have {}", bytes.len()),
        });
    }
    let labels = bytes[8..8 + count].to_vec();
    for (i, &l) in labels.iter().enumerate() {
        if l > 9 {
            return Err(Error::Format {
                offset: 8 + i,
                message: format!("label {l} out of range"),
            });
        }
    }
    Ok(labels)
}

fn read_file_pair(dir: &Path, base: &str) -> Result<Vec<u8>> {
    let plain = dir.join(base);
    let gz = dir.join(format!("{base}.gz"));
    let path = if plain.exists() {
        plain
    } else if gz.exists() {
        gz
    } else {
        return Err(Error::Io(format!(
            "neither {} nor {}.gz found in {}",
            base,
            base,
            dir.display()
        )));
    };
    Ok(std::fs::read(path)?)
}

/// Full train/test pair loaded from a directory with the standard MNIST
/// file names (plain or `.gz`).
#[derive(Debug, Clone)]
pub struct MnistDir {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_mnist_dir(dir: &Path) -> Result<MnistDir> {
    let train_images = load_idx_images(&read_file_pair(dir, "train-images-idx3-ubyte")?)?;
    let train_labels = load_idx_labels(&read_file_pair(dir, "train-labels-idx1-ubyte")?)?;
    let test_images = load_idx_images(&read_file_pair(dir, "t10k-images-idx3-ubyte")?)?;
    let test_labels = load_idx_labels(&read_file_pair(dir, "t10k-labels-idx1-ubyte")?)?;
    Ok(MnistDir {
        train: Dataset::new(train_images, train_labels)?,
        test: Dataset::new(test_images, test_labels)?,
    })
}

/// One dynamic binarization draw: each pixel is 1 with probability equal to
/// its gray intensity, fresh on every call.
pub fn dynamic_binarize(img: &GrayImage, rng: &mut impl Rng) -> Vec<f64> {
    img.pixels
        .iter()
        .map(|&p| if rng.gen::<f64>() < p { 1.0 } else { 0.0 })
        .collect()
}

/// A freshly binarized minibatch; row `r` of `x` is datapoint `indices[r]`.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub indices: Vec<usize>,
    pub x: Matrix,
}

/// Iterator over one epoch of shuffled, dynamically binarized minibatches.
/// The shuffle and the binarization draws are both keyed by `(seed, epoch)`,
/// so the epoch's batch sequence is a pure function of those values. The
/// final short batch is included.
pub struct MinibatchIter<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch: usize,
    pos: usize,
    bin_rng: rand_chacha::ChaCha8Rng,
}

pub fn minibatches(ds: &Dataset, batch: usize, seed: u64, epoch: usize) -> MinibatchIter<'_> {
    assert!(batch >= 1, "batch size must be >= 1");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = stream(seed, "shuffle", epoch as u64);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    MinibatchIter {
        ds,
        order,
        batch,
        pos: 0,
        bin_rng: stream(seed, "binarize", epoch as u64),
    }
}

impl Iterator for MinibatchIter<'_> {
    type Item = Minibatch;

    fn next(&mut self) -> Option<Minibatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let mut data = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        for &idx in &indices {
            data.extend(dynamic_binarize(&self.ds.images[idx], &mut self.bin_rng));
        }
        let x = Matrix::from_vec(indices.len(), IMAGE_PIXELS, data)
            .expect("binarized pixels are finite");
        Some(Minibatch { indices, x })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn tiny_images(n: usize, seed: u64) -> Vec<GrayImage> {
        let mut rng = stream(seed, "data-test", 0);
        (0..n)
            .map(|_| {
                GrayImage::from_pixels(
                    (0..IMAGE_PIXELS).map(|_| rng.gen_range(0.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn idx_round_trip_is_bit_exact() {
        let images = tiny_images(2, 1);
        let labels = vec![3u8, 7u8];
        let img_bytes = fixtures::encode_idx_images(&images);
        let lbl_bytes = fixtures::encode_idx_labels(&labels);

        let back = load_idx_images(&img_bytes).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(images.iter()) {
            for (x, y) in a.pixels().iter().zip(b.pixels()) {
                // Quantized to bytes on write; intensities come back as
                // exactly byte/255.
                assert!((x - (y * 255.0).round() / 255.0).abs() == 0.0);
            }
        }
        assert_eq!(load_idx_labels(&lbl_bytes).unwrap(), labels);

        // And byte-for-byte identical after a second encode.
        let again = fixtures::encode_idx_images(&back);
        assert_eq!(again, img_bytes);
    }

    #[test]
    fn gzip_payloads_are_auto_detected() {
        let images = tiny_images(3, 2);
        let bytes = fixtures::encode_idx_images(&images);
        let gz = fixtures::gzip(&bytes);
        let back = load_idx_images(&gz).unwrap();
        assert_eq!(back.len(), 3);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let labels = fixtures::encode_idx_labels(&[1, 2, 3]);
        match load_idx_images(&labels) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let images = tiny_images(2, 3);
        let mut bytes = fixtures::encode_idx_images(&images);
        bytes.truncate(bytes.len() - 10);
        assert!(matches!(
            load_idx_images(&bytes),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn empty_label_file_is_valid() {
        let bytes = fixtures::encode_idx_labels(&[]);
        assert!(load_idx_labels(&bytes).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_label_is_format_error() {
        let mut bytes = fixtures::encode_idx_labels(&[1, 2]);
        bytes[9] = 11;
        match load_idx_labels(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 9),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn binarize_degenerate_pixels() {
        let mut pixels = vec![0.0; IMAGE_PIXELS];
        pixels[1] = 1.0;
        let img = GrayImage::from_pixels(pixels).unwrap();
        let mut rng = stream(4, "data-test-bin", 0);
        for _ in 0..50 {
            let b = dynamic_binarize(&img, &mut rng);
            assert_eq!(b[0], 0.0);
            assert_eq!(b[1], 1.0);
            assert!(b.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn binarize_frequency_matches_intensity() {
        let img = GrayImage::from_pixels(vec![0.5; IMAGE_PIXELS]).unwrap();
        let mut rng = stream(5, "data-test-bin", 0);
        let draws = 10_000 / IMAGE_PIXELS + 13;
        let mut ones = 0usize;
        let mut total = 0usize;
        for _ in 0..draws {
            let b = dynamic_binarize(&img, &mut rng);
            ones += b.iter().filter(|&&v| v == 1.0).count();
            total += b.len();
        }
        let freq = ones as f64 / total as f64;
        assert!((freq - 0.5).abs() <= 0.02, "frequency {freq}");
    }

    #[test]
    fn binarize_is_deterministic_given_rng_state() {
        let img = tiny_images(1, 6).pop().unwrap();
        let a = dynamic_binarize(&img, &mut stream(6, "data-test-bin", 1));
        let b = dynamic_binarize(&img, &mut stream(6, "data-test-bin", 1));
        assert_eq!(a, b);
    }

    #[test]
    fn minibatch_sizes_include_remainder() {
        let ds = Dataset::new(tiny_images(5, 7), vec![0; 5]).unwrap();
        let sizes: Vec<usize> = minibatches(&ds, 2, 1, 0).map(|b| b.indices.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn minibatch_order_is_deterministic_and_a_permutation() {
        let ds = Dataset::new(tiny_images(7, 8), vec![0; 7]).unwrap();
        let collect = |seed, epoch| {
            minibatches(&ds, 3, seed, epoch)
                .flat_map(|b| b.indices)
                .collect::<Vec<_>>()
        };
        let a = collect(9, 0);
        assert_eq!(a, collect(9, 0));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn epochs_shuffle_differently() {
        let ds = Dataset::new(tiny_images(128, 9), vec![0; 128]).unwrap();
        let order = |epoch| {
            minibatches(&ds, 128, 3, epoch)
                .flat_map(|b| b.indices)
                .collect::<Vec<_>>()
        };
        assert_ne!(order(0), order(1));
    }

    #[test]
    fn batches_contain_only_binary_values() {
        let ds = Dataset::new(tiny_images(6, 10), vec![0; 6]).unwrap();
        for b in minibatches(&ds, 4, 11, 0) {
            assert!(b.x.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
