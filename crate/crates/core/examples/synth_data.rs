//! Generate a synthetic MNIST-shaped dataset for offline runs:
//!
//!   cargo run --release -p dtvae-core --example synth_data -- DIR [TRAIN] [TEST] [SEED]
//!
//! Writes the four standard IDX files (uncompressed) into DIR.

use dtvae_core::fixtures::write_synthetic_mnist;
use std::path::PathBuf;

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| {
        eprintln!("usage: synth_data DIR [TRAIN] [TEST] [SEED]");
        std::process::exit(2);
    }));
    let train: usize = args.next().map(|a| a.parse().expect("TRAIN")).unwrap_or(12_000);
    let test: usize = args.next().map(|a| a.parse().expect("TEST")).unwrap_or(2_000);
    let seed: u64 = args.next().map(|a| a.parse().expect("SEED")).unwrap_or(0);
    write_synthetic_mnist(&dir, train, test, seed).expect("write dataset");
    println!(
        "wrote {train} train / {test} test synthetic images to {}",
        dir.display()
    );
}
