//! The training loop and policy comparison runs.
//!
//! One iteration is render, backward (folding positional subgradients into the
//! densification statistics), Adam step, and on round iterations a
//! densification round. Runs are deterministic for a fixed config and seed.

pub mod checkpoint;
pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::densify::{densify_round, DensifyReport, Policy, RoundContext};
use crate::error::{Error, Result};
use crate::gaussian::{logit, Gaussian2D, Scene};
use crate::image::Image;
use crate::metrics::{self, QualityReport};
use crate::optim::{AdamConfig, OPACITY_COLUMN, SceneOptimizer};
use crate::raster::{self, StatsFold};
use crate::stats::GradStats;

pub use checkpoint::Checkpoint;
pub use config::{GradUnits, TrainConfig};

pub const TELEMETRY_HEADER: &str = "iteration,n_split,n_clone,n_pruned,n_total,loss,psnr";
pub const COMPARISON_HEADER: &str = "policy,psnr,ssim,l1,mse,n_gaussians,memory_bytes,rounds,status";

const INIT_OPACITY: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TelemetryRow {
    pub iteration: u64,
    pub n_before: usize,
    pub n_split: usize,
    pub n_clone: usize,
    pub n_pruned: usize,
    pub n_total: usize,
    pub loss: f64,
    pub psnr: f64,
}

impl TelemetryRow {
    fn new(report: &DensifyReport, n_before: usize, loss: f64, psnr: f64) -> Self {
        TelemetryRow {
            iteration: report.iteration,
            n_before,
            n_split: report.n_split,
            n_clone: report.n_clone,
            n_pruned: report.n_pruned,
            n_total: report.n_total_after,
            loss,
            psnr,
        }
    }

    /// `n_total = n_before + n_split + n_clone - n_pruned`.
    pub fn balanced(&self) -> bool {
        self.n_before + self.n_split + self.n_clone == self.n_total + self.n_pruned
    }
}

pub fn telemetry_csv(rows: &[TelemetryRow]) -> String {
    let mut out = format!("{TELEMETRY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.8},{:.4}",
            r.iteration, r.n_split, r.n_clone, r.n_pruned, r.n_total, r.loss, r.psnr
        );
    }
    out
}

/// Initial scene: `n0` Gaussians at uniform positions, colored by the target
/// pixel underneath, isotropic with standard deviation `extent / sqrt(n0)`.
pub fn init_scene(target: &Image, n0: usize, background: [f64; 3], rng: &mut impl Rng) -> Result<Scene> {
    if n0 == 0 {
        return Err(Error::Config("n0 must be >= 1".into()));
    }
    let (w, h) = (target.width() as f64, target.height() as f64);
    let sigma = w.max(h) / (n0 as f64).sqrt();
    let gaussians = (0..n0)
        .map(|_| {
            let mu = [rng.random::<f64>() * w, rng.random::<f64>() * h];
            let px = (mu[0] as usize).min(target.width() - 1);
            let py = (mu[1] as usize).min(target.height() - 1);
            Gaussian2D::isotropic(mu, sigma, INIT_OPACITY, target.get(px, py), rng.random())
        })
        .collect();
    Ok(Scene::new(gaussians, background))
}

pub fn load_target(cfg: &TrainConfig) -> Result<Image> {
    match &cfg.target {
        Some(path) => Image::load_ppm(path),
        None => crate::targets::generate(&cfg.target_spec()),
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub scene: Scene,
    pub iteration: u64,
    pub initial_psnr: f64,
    pub report: QualityReport,
    pub telemetry: Vec<TelemetryRow>,
    pub final_render: Image,
}

impl TrainOutcome {
    pub fn memory_bytes(&self) -> usize {
        checkpoint::scene_record_bytes(&self.scene)
    }

    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            scene: self.scene.clone(),
            config: cfg.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io("creating output directory", dir, e))
}

fn write_file(path: &Path, body: &str, context: &'static str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(context, path, e))
}

/// Runs the full loop on `target`. When `cfg.out_dir` is set, telemetry,
/// checkpoint, renders and metrics are written there.
pub fn train_on(cfg: &TrainConfig, target: &Image) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (width, height) = (target.width(), target.height());
    let extent = width.max(height) as f64;
    let raster_cfg = cfg.raster_config();
    let densify_cfg = cfg.densify_config(extent);
    let stats_scale = cfg.grad_units.scale(width, height);

    if let Some(dir) = &cfg.out_dir {
        create_dir(dir)?;
        if cfg.snapshot_every > 0 {
            create_dir(&dir.join("snapshots"))?;
        }
        target.save_ppm(dir.join("target.ppm"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scene = init_scene(target, cfg.n0, cfg.background, &mut rng)?;
    let mut optimizer = SceneOptimizer::new(scene.len(), cfg.learning_rates(extent), AdamConfig::default());
    let mut stats = GradStats::new(scene.len());
    let initial_psnr = metrics::psnr(&raster::render(&scene, width, height, &raster_cfg), target)?;
    let mut telemetry = Vec::new();
    let reset_logit = logit(cfg.opacity_reset_value);

    for it in 1..=cfg.iterations {
        let collecting = it < cfg.densify_stop;
        let fold = collecting.then(|| StatsFold { stats: &mut stats, scale: stats_scale });
        let (rendered, backward) = raster::render_and_backward(&scene, target, cfg.loss, &raster_cfg, fold);
        optimizer.step(&mut scene, &backward.grads, it)?;

        if densify_cfg.is_round(it) {
            let n_before = scene.len();
            let ctx = RoundContext {
                iteration: it,
                clone_step: optimizer.lr_pos(it),
                grad_to_pixels: [1.0 / stats_scale[0], 1.0 / stats_scale[1]],
            };
            let report = densify_round(&mut scene, &mut stats, &mut optimizer, &densify_cfg, ctx, &mut rng)?;
            let psnr = metrics::psnr(&rendered, target)?;
            telemetry.push(TelemetryRow::new(&report, n_before, backward.loss, psnr));
        }

        if cfg.opacity_reset && it % cfg.opacity_reset_interval == 0 && it < cfg.densify_stop {
            for g in &mut scene.gaussians {
                g.logit_opacity = g.logit_opacity.min(reset_logit);
            }
            optimizer.state.zero_column(OPACITY_COLUMN);
        }

        if let Some(dir) = &cfg.out_dir {
            if cfg.snapshot_every > 0 && it % cfg.snapshot_every == 0 {
                let snap = raster::render(&scene, width, height, &raster_cfg);
                snap.save_ppm(dir.join("snapshots").join(format!("iter_{it:06}.ppm")))?;
            }
        }
    }

    let final_render = raster::render(&scene, width, height, &raster_cfg);
    let report = QualityReport::evaluate(&final_render, target)?;
    let outcome = TrainOutcome { scene, iteration: cfg.iterations, initial_psnr, report, telemetry, final_render };

    if let Some(dir) = &cfg.out_dir {
        write_file(&dir.join("telemetry.csv"), &telemetry_csv(&outcome.telemetry), "writing telemetry")?;
        outcome.checkpoint(cfg).save(dir.join("checkpoint.csv"))?;
        outcome.final_render.save_ppm(dir.join("final.ppm"))?;
        let metrics_csv = format!(
            "{},n_gaussians,memory_bytes\n{},{},{}\n",
            QualityReport::CSV_HEADER,
            outcome.report.csv_row(),
            outcome.scene.len(),
            outcome.memory_bytes()
        );
        write_file(&dir.join("metrics.csv"), &metrics_csv, "writing metrics")?;
        write_file(&dir.join("config.txt"), &cfg.to_text(), "writing config echo")?;
    }
    Ok(outcome)
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let target = load_target(cfg)?;
    train_on(cfg, &target)
}

#[derive(Clone, Debug)]
pub struct CompareRow {
    pub policy: Policy,
    pub outcome: std::result::Result<TrainOutcome, String>,
}

impl CompareRow {
    pub fn csv_row(&self) -> String {
        match &self.outcome {
            Ok(o) => format!(
                "{},{},{},{},{},ok",
                self.policy,
                o.report.csv_row(),
                o.scene.len(),
                o.memory_bytes(),
                o.telemetry.len()
            ),
            Err(e) => format!("{},,,,,,,,error: {}", self.policy, e.replace(',', ";")),
        }
    }
}

pub fn comparison_csv(rows: &[CompareRow]) -> String {
    let mut out = format!("{COMPARISON_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Directory for run `index` of a comparison.
pub fn compare_run_dir(out_dir: &Path, index: usize, policy: Policy) -> PathBuf {
    out_dir.join(format!("{index}-{policy}"))
}

/// Trains once per policy on the same target and seed. A failing policy is
/// reported in its row; the others still run.
pub fn compare(cfg: &TrainConfig, policies: &[Policy]) -> Result<Vec<CompareRow>> {
    if policies.len() < 2 {
        return Err(Error::Config("compare needs at least two policies".into()));
    }
    let target = load_target(cfg)?;
    if let Some(dir) = &cfg.out_dir {
        create_dir(dir)?;
    }
    let rows: Vec<CompareRow> = policies
        .par_iter()
        .enumerate()
        .map(|(i, &policy)| {
            let run_cfg = TrainConfig {
                policy,
                out_dir: cfg.out_dir.as_ref().map(|d| compare_run_dir(d, i, policy)),
                ..cfg.clone()
            };
            CompareRow { policy, outcome: train_on(&run_cfg, &target).map_err(|e| e.to_string()) }
        })
        .collect();
    if let Some(dir) = &cfg.out_dir {
        write_file(&dir.join("comparison.csv"), &comparison_csv(&rows), "writing comparison")?;
        for (i, row) in rows.iter().enumerate() {
            if let Ok(o) = &row.outcome {
                let name = format!("telemetry_{i}-{}.csv", row.policy);
                write_file(&dir.join(name), &telemetry_csv(&o.telemetry), "writing telemetry")?;
            }
        }
    }
    Ok(rows)
}
