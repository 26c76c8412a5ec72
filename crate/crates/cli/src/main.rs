use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use splat2d::metrics::QualityReport;
use splat2d::raster;
use splat2d::targets::{self, TargetKind, TargetSpec};
use splat2d::train::{self, Checkpoint, TrainConfig};
use splat2d::verify;
use splat2d::{Image, Policy};

#[derive(Parser)]
#[command(name = "splat2d", version, about = "2D Gaussian splatting with direction-aware densification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one scene to a target image.
    Train(RunArgs),
    /// Train once per policy on the same target and seed.
    Compare {
        /// Comma-separated policy names (baseline, abs, gdags, gdags-s, gdags-c).
        #[arg(long, value_delimiter = ',', default_value = "baseline,abs,gdags")]
        policies: Vec<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Render a checkpoint and score it against a target.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target PPM; defaults to the synthetic target recorded in the checkpoint.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Write the render and metrics.csv here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write a synthetic target as a binary PPM.
    GenTarget {
        #[arg(long, default_value = "mixed")]
        kind: String,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Gradient and von Mises self-checks.
    Verify {
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 20)]
        fd_scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Extra `--key value` overrides, applied after the config file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

impl RunArgs {
    fn build(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        let mut rest = self.overrides.iter();
        while let Some(flag) = rest.next() {
            let Some(key) = flag.strip_prefix("--") else {
                bail!("expected `--key value`, got {flag:?}");
            };
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = rest.next().with_context(|| format!("missing value for --{key}"))?;
                    (key.to_string(), v.clone())
                }
            };
            cfg.set(&key, &value)?;
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = Some(dir.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run_train(args: &RunArgs) -> Result<()> {
    let cfg = args.build()?;
    let start = Instant::now();
    let out = train::train(&cfg)?;
    println!("policy {} iterations {} in {:.1}s", cfg.policy, out.iteration, start.elapsed().as_secs_f64());
    println!("initial psnr {:.3}", out.initial_psnr);
    println!("{},n_gaussians,memory_bytes", QualityReport::CSV_HEADER);
    println!("{},{},{}", out.report.csv_row(), out.scene.len(), out.memory_bytes());
    Ok(())
}

fn run_compare(policies: &[String], args: &RunArgs) -> Result<()> {
    let cfg = args.build()?;
    let policies: Vec<Policy> = policies.iter().map(|p| p.parse()).collect::<Result<_, _>>()?;
    let start = Instant::now();
    let rows = train::compare(&cfg, &policies)?;
    print!("{}", train::comparison_csv(&rows));
    eprintln!("compared {} policies in {:.1}s", rows.len(), start.elapsed().as_secs_f64());
    if rows.iter().all(|r| r.outcome.is_err()) {
        bail!("every policy failed");
    }
    Ok(())
}

fn run_eval(checkpoint: &PathBuf, target: Option<&PathBuf>, out_dir: Option<&PathBuf>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = TrainConfig::default();
    for (k, v) in &ck.config {
        cfg.set(k, v).with_context(|| format!("checkpoint config entry {k}"))?;
    }
    let target = match target {
        Some(path) => Image::load_ppm(path)?,
        None => train::load_target(&cfg)?,
    };
    let rendered = raster::render(&ck.scene, target.width(), target.height(), &cfg.raster_config());
    let report = QualityReport::evaluate(&rendered, &target)?;
    let row = format!("{},{}", report.csv_row(), ck.scene.len());
    println!("{},n_gaussians", QualityReport::CSV_HEADER);
    println!("{row}");
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        rendered.save_ppm(dir.join("eval.ppm"))?;
        std::fs::write(dir.join("metrics.csv"), format!("{},n_gaussians\n{row}\n", QualityReport::CSV_HEADER))
            .context("writing metrics.csv")?;
    }
    Ok(())
}

fn run_gen_target(kind: &str, width: usize, height: usize, seed: u64, output: &PathBuf) -> Result<()> {
    let kind: TargetKind = kind.parse()?;
    let img = targets::generate(&TargetSpec::new(kind, width, height, seed))?;
    img.save_ppm(output)?;
    println!("wrote {kind} {width}x{height} seed {seed} to {}", output.display());
    Ok(())
}

fn run_verify(samples: usize, fd_scenes: usize, seed: u64) -> Result<bool> {
    let mut ok = true;
    println!("kappa,empirical_c,analytic_c,asymptotic_c,abs_error");
    for row in verify::vmf_table(&verify::VMF_KAPPAS, samples, seed)? {
        println!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            row.kappa,
            row.empirical,
            row.analytic,
            row.asymptotic,
            row.abs_error()
        );
        ok &= row.abs_error() <= 0.01;
    }
    let suite = verify::gradient_suite(fd_scenes, seed)?;
    let fd_ok = suite.worst_rel_error <= 1e-3 && suite.worst_stream_gap <= 1e-6;
    println!(
        "gradients: {} scenes, {} probes, worst relative error {:.3e}, worst stream gap {:.3e} [{}]",
        suite.scenes,
        suite.probes,
        suite.worst_rel_error,
        suite.worst_stream_gap,
        if fd_ok { "ok" } else { "FAIL" }
    );
    Ok(ok && fd_ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => run_train(args),
        Command::Compare { policies, run } => run_compare(policies, run),
        Command::Eval { checkpoint, target, out_dir } => run_eval(checkpoint, target.as_ref(), out_dir.as_ref()),
        Command::GenTarget { kind, width, height, seed, output } => run_gen_target(kind, *width, *height, *seed, output),
        Command::Verify { samples, fd_scenes, seed } => match run_verify(*samples, *fd_scenes, *seed) {
            Ok(true) => Ok(()),
            Ok(false) => Err(anyhow::anyhow!("verification failed")),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
