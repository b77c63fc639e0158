//! `dtvae` command line: train, evaluate, gradient-check, self-test, and
//! sample a dyadic-transform VAE on MNIST-format data.
//!
//! Exit codes: 0 success; 1 a verification command found a violation;
//! 2 bad flags, paths, or file formats; 3 training aborted on a poisoned
//! (non-finite) update, with the last epoch checkpoint left intact.

use clap::{Args, Parser, Subcommand};
use dtvae_cli::{configs_compatible, load_checkpoint, pgm, RunSink};
use dtvae_core::data::load_mnist_dir;
use dtvae_core::gradcheck::{run_gradcheck, worst_rel_err, GradCheckSettings};
use dtvae_core::nn::{decoder_forward, ModelConfig};
use dtvae_core::rng::stream;
use dtvae_core::vae::{evaluate, resume, train, TrainConfig};
use dtvae_core::{gaussian, selftest, Error, Vector};
use rand_distr::StandardNormal;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "dtvae", version, about = "Dyadic-transform VAE trainer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics.csv plus per-epoch checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test set; prints `test_elbo=<nats>`.
    Eval(EvalArgs),
    /// Compare analytic gradients to finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Run the dense-oracle verification suites with fixed seeds.
    Selftest(SelftestArgs),
    /// Decode prior samples from a checkpoint into PGM images.
    Sample(SampleArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding the four MNIST IDX files (plain or .gz).
    #[arg(long)]
    data_dir: PathBuf,
    /// Latent dimensionality.
    #[arg(long, default_value_t = 50)]
    latent: usize,
    /// Transform rank k; 0 trains the plain diagonal-posterior baseline.
    #[arg(long, default_value_t = 0)]
    rank: usize,
    /// Transform scale.
    #[arg(long, default_value_t = 0.001)]
    epsilon: f64,
    /// Hidden width of the two-layer encoder/decoder trunks.
    #[arg(long, default_value_t = 500)]
    hidden: usize,
    /// Minibatch size.
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train on only the first COUNT images.
    #[arg(long)]
    subset: Option<usize>,
    /// Hold out a validation split and log it per epoch.
    #[arg(long, default_value_t = false)]
    val_split: bool,
    /// Output directory for metrics.csv and checkpoint.dtvae.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier (compatible) run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    /// ELBO samples per datapoint.
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    latent: usize,
    #[arg(long, default_value_t = 2)]
    rank: usize,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Per-block relative-error tolerance.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Test hook: perturb the named block's analytic gradient so the
    /// failure path itself can be exercised.
    #[arg(long, hide = true)]
    corrupt_block: Option<String>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        // Both abort a run mid-flight with the last checkpoint intact: a
        // non-finite update, or a transform that left the positive-definite
        // regime.
        Error::PoisonedUpdate { .. } | Error::NonPdPosterior { .. } => 3,
        _ => 2,
    }
}

fn cmd_train(args: TrainArgs) -> i32 {
    let cfg = TrainConfig {
        latent: args.latent,
        rank: args.rank,
        epsilon: args.epsilon,
        hidden: args.hidden,
        batch: args.batch,
        epochs: args.epochs,
        lr: args.lr,
        seed: args.seed,
        data_dir: args.data_dir.clone(),
        subset: args.subset,
        val_split: args.val_split,
        eval_samples: 1,
    };
    let run = || -> dtvae_core::Result<()> {
        let data = load_mnist_dir(&args.data_dir)?;
        let mut sink = RunSink::create(&args.out, &cfg)?;
        match &args.resume {
            Some(path) => {
                let ckpt = load_checkpoint(path)?;
                if !configs_compatible(&ckpt.config, &cfg) {
                    return Err(Error::Contract(
                        "checkpoint config does not match the requested run".into(),
                    ));
                }
                resume(&cfg, &data.train, ckpt.params, ckpt.adam, ckpt.epoch, &mut sink)?;
            }
            None => {
                train(&cfg, &data.train, &mut sink)?;
            }
        }
        Ok(())
    };
    match run() {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("train failed: {e}");
            exit_code_for(&e)
        }
    }
}

fn cmd_eval(args: EvalArgs) -> i32 {
    let run = || -> dtvae_core::Result<f64> {
        let ckpt = load_checkpoint(&args.checkpoint)?;
        let data = load_mnist_dir(&args.data_dir)?;
        let bd = evaluate(&ckpt.params, &data.test, args.samples, args.seed)?;
        Ok(bd.elbo)
    };
    match run() {
        Ok(elbo) => {
            println!("test_elbo={elbo}");
            0
        }
        Err(e) => {
            eprintln!("eval failed: {e}");
            exit_code_for(&e)
        }
    }
}

fn cmd_gradcheck(args: GradcheckArgs) -> i32 {
    let settings = GradCheckSettings {
        cfg: ModelConfig {
            input: dtvae_core::IMAGE_PIXELS,
            hidden: args.hidden,
            latent: args.latent,
            rank: args.rank,
            epsilon: args.epsilon,
        },
        batch: args.batch,
        step: args.step,
        tol: args.tol,
    };
    let reports = match run_gradcheck(&settings, args.seed, args.corrupt_block.as_deref()) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("gradcheck failed to run: {e}");
            return exit_code_for(&e);
        }
    };
    for r in &reports {
        println!(
            "block {:<16} rel_err {:.3e}  (analytic {:.3e}, fd {:.3e})",
            r.name, r.rel_err, r.analytic_norm, r.fd_norm
        );
    }
    let worst = worst_rel_err(&reports);
    println!("worst rel_err {worst:.3e} (tol {:.0e})", settings.tol);
    if worst <= settings.tol {
        0
    } else {
        let bad = reports
            .iter()
            .filter(|r| r.rel_err > settings.tol)
            .map(|r| r.name)
            .collect::<Vec<_>>()
            .join(", ");
        eprintln!("gradient check failed in: {bad}");
        1
    }
}

fn cmd_selftest(args: SelftestArgs) -> i32 {
    let t0 = Instant::now();
    let reports = selftest::run_all(args.seed);
    let mut ok = true;
    for r in &reports {
        println!(
            "[{}] {:<42} {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        ok &= r.pass;
    }
    println!(
        "selftest {} in {:.1}s",
        if ok { "passed" } else { "FAILED" },
        t0.elapsed().as_secs_f64()
    );
    if ok {
        0
    } else {
        1
    }
}

fn cmd_sample(args: SampleArgs) -> i32 {
    let run = || -> dtvae_core::Result<()> {
        let ckpt = load_checkpoint(&args.checkpoint)?;
        std::fs::create_dir_all(&args.out)?;
        let latent = ckpt.config.latent;
        let mut rng = stream(args.seed, "sample", 0);
        for i in 0..args.count {
            let z = Vector::from(
                (0..latent)
                    .map(|_| rand::Rng::sample::<f64, _>(&mut rng, StandardNormal))
                    .collect::<Vec<_>>(),
            );
            let (logits, _) = decoder_forward(&ckpt.params, &z)?;
            let means: Vec<f64> = logits.iter().map(|&l| gaussian::sigmoid(l)).collect();
            pgm::write_pgm(&args.out.join(format!("sample_{i:03}.pgm")), &means)?;
        }
        Ok(())
    };
    match run() {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("sample failed: {e}");
            exit_code_for(&e)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::Selftest(args) => cmd_selftest(args),
        Cmd::Sample(args) => cmd_sample(args),
    };
    std::process::exit(code);
}
