//! Checkpoint container: a textual header followed by raw little-endian
//! doubles, so round trips are bit-exact without serialization machinery.
//!
//! Layout:
//!   line 1: the version string `DTVAE1`
//!   line 2: a single-line JSON config snapshot plus the epoch counter and
//!           optimizer step (keys in fixed order, floats in shortest
//!           round-trip form)
//!   body:   f64 arrays in canonical block order: all parameter blocks,
//!           then the Adam first moments, then the Adam second moments
//!
//! The dataset directory is deliberately not part of the snapshot; it is
//! machine-specific and is always supplied by flags.

use dtvae_core::nn::{AdamState, ModelParams};
use dtvae_core::vae::TrainConfig;
use dtvae_core::{Error, Result};
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_VERSION: &str = "DTVAE1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Number of completed epochs; training resumes here.
    pub epoch: usize,
}

fn format_header(cfg: &TrainConfig, epoch: usize, adam_step: u64) -> String {
    let subset = match cfg.subset {
        Some(s) => s.to_string(),
        None => "null".to_string(),
    };
    format!(
        concat!(
            "{{\"version\":\"{}\",\"latent\":{},\"rank\":{},\"epsilon\":{},",
            "\"hidden\":{},\"batch\":{},\"epochs\":{},\"lr\":{},\"seed\":{},",
            "\"subset\":{},\"val_split\":{},\"eval_samples\":{},",
            "\"epoch\":{},\"adam_step\":{}}}"
        ),
        CHECKPOINT_VERSION,
        cfg.latent,
        cfg.rank,
        cfg.epsilon,
        cfg.hidden,
        cfg.batch,
        cfg.epochs,
        cfg.lr,
        cfg.seed,
        subset,
        cfg.val_split,
        cfg.eval_samples,
        epoch,
        adam_step,
    )
}

fn json_field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("\"{key}\":");
    let start = line.find(&pat).ok_or_else(|| Error::Format {
        offset: 0,
        message: format!("missing field {key} in checkpoint header"),
    })? + pat.len();
    let rest = &line[start..];
    let end = rest
        .find([',', '}'])
        .ok_or_else(|| Error::Format {
            offset: start,
            message: format!("unterminated field {key}"),
        })?;
    Ok(&rest[..end])
}

fn parse_num<T: std::str::FromStr>(line: &str, key: &str) -> Result<T> {
    json_field(line, key)?.parse().map_err(|_| Error::Format {
        offset: 0,
        message: format!("bad value for {key} in checkpoint header"),
    })
}

/// Write a checkpoint atomically (temp file + rename), so an abort mid-write
/// always leaves the previous checkpoint intact.
pub fn save_checkpoint(
    path: &Path,
    cfg: &TrainConfig,
    params: &ModelParams,
    adam: &AdamState,
    epoch: usize,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let file = std::fs::File::create(&tmp)?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "{CHECKPOINT_VERSION}")?;
        writeln!(w, "{}", format_header(cfg, epoch, adam.step))?;
        for (_, block) in params.layers.blocks() {
            for v in block {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for moments in [adam.first_moments(), adam.second_moments()] {
            for block in moments {
                for v in block {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let nl1 = bytes.iter().position(|&b| b == b'\n').ok_or(Error::Format {
        offset: 0,
        message: "missing version line".into(),
    })?;
    let version = std::str::from_utf8(&bytes[..nl1]).map_err(|_| Error::Format {
        offset: 0,
        message: "version line is not UTF-8".into(),
    })?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 0,
            message: format!("version mismatch: found {version:?}, want {CHECKPOINT_VERSION:?}"),
        });
    }
    let nl2 = bytes[nl1 + 1..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(Error::Format {
            offset: nl1 + 1,
            message: "missing header line".into(),
        })?
        + nl1
        + 1;
    let header = std::str::from_utf8(&bytes[nl1 + 1..nl2]).map_err(|_| Error::Format {
        offset: nl1 + 1,
        message: "header line is not UTF-8".into(),
    })?;

    let subset_raw = json_field(header, "subset")?;
    let config = TrainConfig {
        latent: parse_num(header, "latent")?,
        rank: parse_num(header, "rank")?,
        epsilon: parse_num(header, "epsilon")?,
        hidden: parse_num(header, "hidden")?,
        batch: parse_num(header, "batch")?,
        epochs: parse_num(header, "epochs")?,
        lr: parse_num(header, "lr")?,
        seed: parse_num(header, "seed")?,
        data_dir: std::path::PathBuf::new(),
        subset: if subset_raw == "null" {
            None
        } else {
            Some(subset_raw.parse().map_err(|_| Error::Format {
                offset: 0,
                message: "bad subset value".into(),
            })?)
        },
        val_split: parse_num(header, "val_split")?,
        eval_samples: parse_num(header, "eval_samples")?,
    };
    let epoch: usize = parse_num(header, "epoch")?;
    let adam_step: u64 = parse_num(header, "adam_step")?;

    let mut params = ModelParams::zeros(config.model_config())?;
    let payload = &bytes[nl2 + 1..];
    let param_count: usize = params.layers.blocks().iter().map(|(_, b)| b.len()).sum();
    let want = param_count * 3 * 8;
    if payload.len() != want {
        return Err(Error::Format {
            offset: nl2 + 1,
            message: format!(
                "payload is {} bytes, want {want} for this config",
                payload.len()
            ),
        });
    }
    let mut cursor = 0usize;
    let mut read_block = |len: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let mut raw = [0u8; 8];
            raw.copy_from_slice(&payload[cursor..cursor + 8]);
            cursor += 8;
            out.push(f64::from_le_bytes(raw));
        }
        out
    };
    let lens: Vec<usize> = params.layers.blocks().iter().map(|(_, b)| b.len()).collect();
    let mut param_data: Vec<Vec<f64>> = Vec::with_capacity(lens.len());
    for &len in &lens {
        param_data.push(read_block(len));
    }
    let m: Vec<Vec<f64>> = lens.iter().map(|&len| read_block(len)).collect();
    let v: Vec<Vec<f64>> = lens.iter().map(|&len| read_block(len)).collect();

    for ((_, block), data) in params.layers.blocks_mut().into_iter().zip(param_data) {
        block.copy_from_slice(&data);
    }
    let adam = AdamState::from_parts(m, v, adam_step, &params)?;
    Ok(Checkpoint {
        config,
        params,
        adam,
        epoch,
    })
}

/// Do two configs describe the same training run (up to dataset location
/// and epoch budget)? Resuming requires this to hold.
pub fn configs_compatible(a: &TrainConfig, b: &TrainConfig) -> bool {
    a.latent == b.latent
        && a.rank == b.rank
        && a.epsilon == b.epsilon
        && a.hidden == b.hidden
        && a.batch == b.batch
        && a.lr == b.lr
        && a.seed == b.seed
        && a.subset == b.subset
        && a.val_split == b.val_split
        && a.eval_samples == b.eval_samples
}

#[cfg(test)]
mod tests {
    use super::*;
    use dtvae_core::nn::{init_params, ParamGrads};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            latent: 4,
            rank: 2,
            epsilon: 0.001,
            hidden: 8,
            batch: 16,
            epochs: 3,
            lr: 1e-3,
            seed: 9,
            subset: Some(100),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = tiny_config();
        let params = init_params(&cfg.model_config(), cfg.seed).unwrap();
        let mut adam = AdamState::new(&params);
        // Push some state through the optimizer so the moments are nonzero.
        let mut p2 = params.clone();
        let mut g = ParamGrads::zeros(&cfg.model_config());
        for (_, b) in g.layers.blocks_mut() {
            for (i, v) in b.iter_mut().enumerate() {
                *v = (i as f64 * 0.37).sin();
            }
        }
        dtvae_core::nn::adam_step(&mut p2, &mut adam, &g, 1e-3).unwrap();

        let path = std::env::temp_dir().join(format!("dtvae-ckpt-{}.dtvae", std::process::id()));
        save_checkpoint(&path, &cfg, &p2, &adam, 2).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        std::fs::remove_file(&path).ok();

        assert_eq!(loaded.epoch, 2);
        assert_eq!(loaded.adam.step, 1);
        assert_eq!(loaded.params, p2);
        assert_eq!(loaded.adam, adam);
        assert!(configs_compatible(&loaded.config, &cfg));
        assert_eq!(loaded.config.epochs, cfg.epochs);
    }

    #[test]
    fn version_mismatch_is_format_error() {
        let path = std::env::temp_dir().join(format!("dtvae-bad-{}.dtvae", std::process::id()));
        std::fs::write(&path, b"DTVAE9\n{}\n").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        std::fs::remove_file(&path).ok();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("version mismatch"));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let cfg = tiny_config();
        let params = init_params(&cfg.model_config(), 1).unwrap();
        let adam = AdamState::new(&params);
        let path = std::env::temp_dir().join(format!("dtvae-trunc-{}.dtvae", std::process::id()));
        save_checkpoint(&path, &cfg, &params, &adam, 0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        std::fs::remove_file(&path).ok();
        assert!(matches!(err, Error::Format { .. }));
    }
}
