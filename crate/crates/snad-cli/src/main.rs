//! `snad`: deterministic, file-based access to everything in the library.
//!
//! Every subcommand is a pure function of its flags and `--seed`; each run
//! echoes its fully resolved configuration to a sidecar file next to the
//! primary output (or to stdout when there is none). Exit codes: 0 success,
//! 1 validation failure, 2 internal invariant violation.

use clap::{Parser, Subcommand, ValueEnum};
use snad::blur::{apply_blur, linear_kernel, trajectory_kernel, BlurKernel};
use snad::image::{read_netpbm, write_netpbm, Image};
use snad::metrics::{format_psnr, l1_pct, metrics_csv, psnr, ssim, MetricRow};
use snad::norm::NormMode;
use snad::scene::write_dataset;
use snad::tensor_io::write_tensor;
use snad::texture::{extract_texture, LaplacianStencil};
use snad::train::{ablation_csv, run_ablation, train_toy, TrainConfig};
use snad::verify;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "snad",
    version,
    about = "Region-separable normalization, blur synthesis, and a toy deblurring GAN",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    /// Seed behind every stochastic choice this invocation makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Primary output path (directory or file, depending on the subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Which artifacts to write when a subcommand offers both a viewable and
    /// an exact form.
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Both)]
    format: OutputFormat,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    /// Netpbm visualization only.
    Pgm,
    /// Exact tensor file only.
    Snt,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum KernelChoice {
    /// Straight 45-degree motion kernel.
    Linear45,
    /// Seeded random-walk kernel.
    Traj,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SuiteChoice {
    Norm,
    Decomp,
    Grad,
    Spectral,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum NormChoice {
    Sn,
    Bn,
    In,
}

impl NormChoice {
    fn mode(self) -> NormMode {
        match self {
            NormChoice::Sn => NormMode::Separable,
            NormChoice::Bn => NormMode::Batch,
            NormChoice::In => NormMode::Instance,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled synthetic scenes as NNNN_img.ppm / NNNN_lbl.pgm.
    Synth {
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Blur an image with a motion kernel (size 1 means the identity).
    Blur {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = KernelChoice::Linear45)]
        kernel: KernelChoice,
        /// Kernel side length for the linear kernel.
        #[arg(long, default_value_t = 25)]
        size: usize,
        /// Motion angle in degrees for the linear kernel.
        #[arg(long, default_value_t = 45.0)]
        angle: f64,
        /// Gaussian noise standard deviation.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Trajectory kernel size bounds (odd).
        #[arg(long, default_value_t = 13)]
        min: usize,
        #[arg(long, default_value_t = 29)]
        max: usize,
    },
    /// Dump seeded trajectory kernels.
    Kernels {
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 13)]
        min: usize,
        #[arg(long, default_value_t = 29)]
        max: usize,
    },
    /// Run the invariant suites; exit 0 iff all pass.
    Check {
        #[arg(long, value_enum, default_value_t = SuiteChoice::All)]
        suite: SuiteChoice,
    },
    /// Train the toy GAN on a dataset directory.
    TrainToy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Metrics CSV destination.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum)]
        norm: Option<NormChoice>,
        #[arg(long)]
        batch: Option<usize>,
        /// key=value config file; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory for the trained parameters.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// PSNR / SSIM / L1 between two images of equal size.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Laplacian texture response of an image.
    Texture {
        #[arg(long)]
        input: PathBuf,
    },
    /// Train the SN/BN/IN variants under one seed and emit a comparison CSV.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
}

/// Failure modes with their exit codes.
enum CliError {
    /// Bad flags, unreadable files, invalid parameters: exit 1.
    Validation(String),
    /// A mathematical invariant did not hold at runtime: exit 2.
    Invariant(String),
}

impl From<snad::Error> for CliError {
    fn from(e: snad::Error) -> Self {
        match e {
            snad::Error::Numeric(msg) => CliError::Invariant(msg),
            other => CliError::Validation(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not failures.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Invariant(msg)) => {
            eprintln!("invariant violation: {msg}");
            ExitCode::from(2)
        }
    }
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path, CliError> {
    out.as_deref()
        .ok_or_else(|| CliError::Validation("this subcommand needs --out".into()))
}

/// Echoes the resolved configuration next to the primary output, or to
/// stdout when the run produces no files.
fn echo_config(primary: Option<&Path>, lines: &str) -> Result<(), CliError> {
    match primary {
        Some(path) => {
            let sidecar = if path.extension().is_some() {
                path.with_extension(format!(
                    "{}.config",
                    path.extension().unwrap_or_default().to_string_lossy()
                ))
            } else {
                path.join("run-config.txt")
            };
            if let Some(parent) = sidecar.parent() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| CliError::Validation(format!("{}: {e}", parent.display())))?;
            }
            std::fs::write(&sidecar, lines)
                .map_err(|e| CliError::Validation(format!("{}: {e}", sidecar.display())))?;
        }
        None => {
            for line in lines.lines() {
                println!("# {line}");
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth { count, size } => {
            let out = require_out(&cli.out)?;
            write_dataset(out, count, size, seed)?;
            echo_config(
                Some(out),
                &format!("command=synth\ncount={count}\nsize={size}\nseed={seed}\nout={}\n", out.display()),
            )?;
            println!("wrote {count} scene pairs under {}", out.display());
            Ok(())
        }
        Command::Blur {
            input,
            kernel,
            size,
            angle,
            noise,
            min,
            max,
        } => {
            let out = require_out(&cli.out)?;
            let image = read_netpbm(&input)?;
            let tensor = image.to_tensor();
            let k = if size == 1 {
                BlurKernel::identity()
            } else {
                match kernel {
                    KernelChoice::Linear45 => linear_kernel(size, angle)?,
                    KernelChoice::Traj => trajectory_kernel(seed, (min, max))?,
                }
            };
            let blurred = apply_blur(&tensor, &k, noise, seed)?;
            write_netpbm(&Image::from_tensor(&blurred)?, out)?;
            echo_config(
                Some(out),
                &format!(
                    "command=blur\ninput={}\nkernel={kernel:?}\nsize={size}\nangle={angle}\nnoise={noise}\nmin={min}\nmax={max}\nseed={seed}\nout={}\n",
                    input.display(),
                    out.display()
                ),
            )?;
            println!("blurred {} -> {}", input.display(), out.display());
            Ok(())
        }
        Command::Kernels { count, min, max } => {
            let out = require_out(&cli.out)?;
            std::fs::create_dir_all(out)
                .map_err(|e| CliError::Validation(format!("{}: {e}", out.display())))?;
            for i in 0..count {
                let k = trajectory_kernel(seed + i as u64, (min, max))?;
                if cli.format != OutputFormat::Snt {
                    write_netpbm(&k.to_image(), &out.join(format!("kernel_{i:04}.pgm")))?;
                }
                if cli.format != OutputFormat::Pgm {
                    write_tensor(&out.join(format!("kernel_{i:04}.snt")), &k.to_tensor())?;
                }
            }
            echo_config(
                Some(out),
                &format!(
                    "command=kernels\ncount={count}\nmin={min}\nmax={max}\nseed={seed}\nformat={:?}\nout={}\n",
                    cli.format,
                    out.display()
                ),
            )?;
            println!("wrote {count} kernels under {}", out.display());
            Ok(())
        }
        Command::Check { suite } => {
            echo_config(None, &format!("command=check\nsuite={suite:?}\nseed={seed}\n"))?;
            let reports = match suite {
                SuiteChoice::Decomp => vec![verify::verify_decomposition(1000, seed)],
                SuiteChoice::Norm => vec![
                    verify::verify_sn_standardization(200, seed.wrapping_add(1)),
                    verify::verify_bias_ordering(20, seed.wrapping_add(2)),
                ],
                SuiteChoice::Grad => vec![verify::verify_gradients(seed.wrapping_add(3))],
                SuiteChoice::Spectral => vec![verify::verify_spectral(seed.wrapping_add(4))],
                SuiteChoice::All => verify::all_suites(seed),
            };
            let mut all_ok = true;
            for report in &reports {
                let verdict = if report.passed { "PASS" } else { "FAIL" };
                println!("{:<10} {verdict}  {}", report.name, report.detail);
                all_ok &= report.passed;
            }
            if all_ok {
                Ok(())
            } else {
                Err(CliError::Invariant("one or more suites failed".into()))
            }
        }
        Command::TrainToy {
            data,
            steps,
            report,
            norm,
            batch,
            config,
            checkpoint,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
                    TrainConfig::from_kv(&text)?
                }
                None => TrainConfig::default(),
            };
            cfg.seed = seed;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(b) = batch {
                cfg.batch_size = b;
            }
            if let Some(n) = norm {
                cfg.norm_mode = n.mode();
            }
            cfg.validate()?;

            let mut outcome = train_toy(&data, &cfg)?;
            let csv = outcome.csv();
            if let Some(path) = &report {
                std::fs::write(path, &csv)
                    .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            }
            let checkpoint_dir = checkpoint.or(cli.out);
            if let Some(dir) = &checkpoint_dir {
                outcome.write_checkpoints(dir)?;
            }
            let primary = report.as_deref().or(checkpoint_dir.as_deref());
            echo_config(primary, &format!("command=train-toy\ndata={}\n{}", data.display(), cfg.to_kv()))?;

            let (pg, pb) = outcome.evaluate_psnr()?;
            let last = outcome.rows.last();
            println!(
                "trained {} steps | final total_g {} | train psnr: generated {} vs blurred {}",
                cfg.steps,
                last.map_or("n/a".into(), |r| format!("{:.6}", r.total_g)),
                format_psnr(pg),
                format_psnr(pb)
            );
            Ok(())
        }
        Command::Metrics { a, b } => {
            let ia = read_netpbm(&a)?.to_tensor();
            let ib = read_netpbm(&b)?.to_tensor();
            let row = MetricRow {
                pair_id: format!(
                    "{}-vs-{}",
                    a.file_stem().unwrap_or_default().to_string_lossy(),
                    b.file_stem().unwrap_or_default().to_string_lossy()
                ),
                psnr_db: psnr(&ia, &ib, 1.0)?,
                ssim: ssim(&ia, &ib)?,
                l1_pct: l1_pct(&ia, &ib)?,
            };
            if let Some(out) = &cli.out {
                std::fs::write(out, metrics_csv(std::slice::from_ref(&row)))
                    .map_err(|e| CliError::Validation(format!("{}: {e}", out.display())))?;
            }
            echo_config(
                cli.out.as_deref(),
                &format!("command=metrics\na={}\nb={}\n", a.display(), b.display()),
            )?;
            println!(
                "psnr_db={} ssim={:.6} l1_pct={:.6}",
                format_psnr(row.psnr_db),
                row.ssim,
                row.l1_pct
            );
            Ok(())
        }
        Command::Texture { input } => {
            let out = require_out(&cli.out)?;
            std::fs::create_dir_all(out)
                .map_err(|e| CliError::Validation(format!("{}: {e}", out.display())))?;
            let image = read_netpbm(&input)?.to_tensor();
            let response = extract_texture(&image, LaplacianStencil::FourNeighbor)?;
            if cli.format != OutputFormat::Pgm {
                write_tensor(&out.join("texture.snt"), &response)?;
            }
            if cli.format != OutputFormat::Snt {
                // Signed responses mapped to [0, 255] via 128 + clamp(64 * t).
                let [_, _, h, w] = response.shape();
                for (c, name) in ["texture_r.pgm", "texture_g.pgm", "texture_b.pgm"]
                    .iter()
                    .enumerate()
                {
                    let mut img = Image::new(w, h, 1)?;
                    for y in 0..h {
                        for x in 0..w {
                            let v = 128.0 + (64.0 * response.at(0, c, y, x)).clamp(-128.0, 127.0);
                            img.set_sample(x, y, 0, v.round() as u8);
                        }
                    }
                    write_netpbm(&img, &out.join(name))?;
                }
            }
            echo_config(
                Some(out),
                &format!(
                    "command=texture\ninput={}\nformat={:?}\nout={}\n",
                    input.display(),
                    cli.format,
                    out.display()
                ),
            )?;
            println!("wrote texture dump under {}", out.display());
            Ok(())
        }
        Command::Ablate { data, steps, batch } => {
            let out = require_out(&cli.out)?;
            let base = TrainConfig {
                steps,
                batch_size: batch,
                seed,
                ..TrainConfig::default()
            };
            let pairs = snad::scene::load_dataset(&data)?;
            let rows = run_ablation(&pairs, &base)?;
            let csv = ablation_csv(&rows);
            std::fs::write(out, &csv)
                .map_err(|e| CliError::Validation(format!("{}: {e}", out.display())))?;
            echo_config(
                Some(out),
                &format!(
                    "command=ablate\ndata={}\nsteps={steps}\nbatch={batch}\nseed={seed}\nout={}\n",
                    data.display(),
                    out.display()
                ),
            )?;
            print!("{csv}");
            Ok(())
        }
    }
}
