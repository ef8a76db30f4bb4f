use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bridgepan::baselines::Method;
use bridgepan::bridge::GuidanceMode;
use bridgepan::commands::{self, BaselineArgs, DegradeArgs, EvalArgs, SharpenArgs, SynthArgs, TrainArgs};
use bridgepan::net::Variant;
use bridgepan::verify::{self, Suite};
use bridgepan::Error;
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

const VERIFY_FAILED: u8 = 5;

#[derive(Parser)]
#[command(name = "bridgepan", version, about = "Band-agnostic diffusion-bridge pansharpening")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a reduced-resolution (Wald) training triple from an MS/PAN pair.
    Degrade {
        #[arg(long)]
        ms: PathBuf,
        #[arg(long)]
        pan: PathBuf,
        #[arg(long)]
        ratio: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic sharp-edged Wald triples.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 4)]
        bands: usize,
        /// Reference side length in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        ratio: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the mapping network and denoiser on a directory of triples.
    Train {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "micro")]
        variant: Variant,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 0.001)]
        gamma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse an MS/PAN pair with a trained checkpoint.
    Sharpen {
        #[arg(long)]
        ms: PathBuf,
        #[arg(long)]
        pan: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long, default_value_t = 3)]
        nfe: usize,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long, default_value = "state")]
        mode: GuidanceMode,
        /// Use `project(reference)` in place of the denoiser.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long)]
        preview: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a fused image against a reference, or without one.
    Eval {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        ms: Option<PathBuf>,
        #[arg(long)]
        pan: Option<PathBuf>,
        #[arg(long)]
        ratio: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run built-in invariant suites.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        /// Also write the results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classical pansharpening baselines.
    Baseline {
        #[arg(long)]
        ms: PathBuf,
        #[arg(long)]
        pan: PathBuf,
        #[arg(long)]
        ratio: usize,
        /// ihs, gs, sfim, brovey or all.
        #[arg(long, default_value = "all")]
        method: String,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn sha256_hex(path: &Path) -> Result<String, Error> {
    let bytes = bridgepan::io::read_file(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn print_digest(path: &Path) -> Result<(), Error> {
    println!("{}  {}", sha256_hex(path)?, path.display());
    Ok(())
}

fn configure_threads() {
    let Ok(v) = std::env::var("BRIDGEPAN_THREADS") else { return };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size worker pool: {e}");
            }
        }
        _ => log::warn!("ignoring BRIDGEPAN_THREADS={v:?}; expected a positive integer"),
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.cmd {
        Cmd::Degrade { ms, pan, ratio, out } => {
            let m = commands::cmd_degrade(&DegradeArgs { ms, pan, ratio, out: out.clone() })?;
            println!(
                "wrote {}: ms {:?}, pan {:?}, reference {:?}",
                out.display(),
                m.ms_dims,
                m.pan_dims,
                m.reference_dims
            );
        }
        Cmd::Synth { out, count, bands, size, ratio, seed } => {
            let dirs = commands::cmd_synth(&SynthArgs { out, count, bands, size, ratio, seed })?;
            for d in dirs {
                println!("{}", d.display());
            }
        }
        Cmd::Train { data_dir, variant, steps, seed, lr, batch, gamma, out } => {
            let o = commands::cmd_train(&TrainArgs { data_dir, variant, steps, seed, lr, batch, gamma, out })?;
            if let (Some(first), Some(last)) = (o.rows.first(), o.rows.last()) {
                println!("loss_ref step 1 {:.5} -> step {} {:.5}", first.loss_ref, last.step, last.loss_ref);
            }
            print_digest(&o.checkpoint)?;
        }
        Cmd::Sharpen { ms, pan, ckpt, variant, nfe, eta, mode, oracle, preview, out } => {
            let args = SharpenArgs { ms, pan, ckpt, variant, nfe, eta, mode, oracle, preview, out };
            commands::cmd_sharpen(&args)?;
            print_digest(&args.out)?;
        }
        Cmd::Eval { fused, reference, ms, pan, ratio, out } => {
            let rep = commands::cmd_eval(&EvalArgs { fused, reference, ms, pan, ratio, out })?;
            println!("{}", serde_json::to_string_pretty(&rep).expect("report serialises"));
        }
        Cmd::Verify { suite, out } => {
            let checks = commands::cmd_verify(suite, out.as_deref())?;
            print!("{}", verify::format_table(&checks));
            let mut suites: Vec<&str> = checks.iter().map(|c| c.suite).collect();
            suites.dedup();
            for s in suites {
                let secs: f64 = checks.iter().filter(|c| c.suite == s).map(|c| c.seconds).sum();
                println!("suite {s}: {secs:.3} s");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            if failed > 0 {
                return Ok(VERIFY_FAILED);
            }
        }
        Cmd::Baseline { ms, pan, ratio, method, reference, out } => {
            let method = match method.as_str() {
                "all" => None,
                m => Some(m.parse::<Method>()?),
            };
            let res = commands::cmd_baseline(&BaselineArgs { ms, pan, ratio, method, reference, out })?;
            for (m, rep) in res {
                println!("{:<7} qnr {:.4} psnr {}", m.name(), rep.qnr.unwrap_or(f64::NAN), rep.psnr.map(|p| format!("{p:.3}")).unwrap_or("-".into()));
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    configure_threads();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
