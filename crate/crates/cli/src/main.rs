use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use lrf::config::{AllocationMode, ConfigError, RunConfig};
use lrf::outputs::{write_reports, write_run, RunDir};
use lrf::pipeline::{self, PipelineError, Result};
use lrf::{artifact, store};
use lrf_core::engines::{EngineKind, TruncationReport};

#[derive(Parser)]
#[command(
    name = "lrf",
    version,
    about = "Activation-aware low-rank compression of toy models"
)]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Target fraction of parameters removed.
    #[arg(long, global = true)]
    ratio: Option<f64>,
    /// plain, cholesky, double_svd or admm_noise.
    #[arg(long, global = true)]
    engine: Option<String>,
    /// homogeneous or heterogeneous.
    #[arg(long, global = true)]
    allocation: Option<String>,
    /// Polish factors with L-BFGS after truncation.
    #[arg(long, global = true)]
    refine: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the model and accumulate per-site Grams.
    Calibrate {
        /// Use an existing model artifact instead of generating one.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Turn Grams into a compression plan.
    Allocate,
    /// Factor every site according to the plan.
    Compress,
    /// Compare the compressed model against the original.
    Evaluate,
    /// Run every stage in memory and report stage timings.
    Bench,
    /// Run every stage and write all artifacts.
    Run,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = cli.ratio {
        cfg.target_ratio = r;
    }
    if let Some(e) = &cli.engine {
        cfg.engine = EngineKind::parse(e)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown engine {e:?}")))?;
    }
    if let Some(a) = &cli.allocation {
        cfg.allocation = AllocationMode::parse(a)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown allocation {a:?}")))?;
    }
    if cli.refine {
        cfg.refine = true;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn failure_check(reports: &[TruncationReport]) -> Result<()> {
    for r in reports.iter().filter(|r| !r.status.is_ok()) {
        if let lrf_core::engines::SiteStatus::Failed { reason } = &r.status {
            eprintln!("site {} failed: {reason}", r.site_id);
        }
    }
    if !reports.is_empty() && reports.iter().all(|r| !r.status.is_ok()) {
        return Err(PipelineError::AllSitesFailed);
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let dir = RunDir::new(&cfg.output_dir);
    match &cli.command {
        Command::Calibrate { model } => {
            let pool = pipeline::thread_pool(&cfg)?;
            let t = Instant::now();
            let model = match model {
                Some(p) => store::load_model(p)?,
                None => pipeline::build_model(&cfg)?,
            };
            let calib = pipeline::calibrate(&cfg, &model, &pool)?;
            let holdout = pipeline::holdout_batch(&cfg, model.input_dim())?;
            let elapsed = ms_since(t);
            artifact::write_json(&dir.config(), &cfg)?;
            store::save_model(&model, &dir.model())?;
            let seeds = cfg.stream_seeds();
            let meta = |s: u64| [("seed".to_string(), s.to_string())].into_iter().collect();
            store::save_calibration(&calib.batch, &meta(seeds.1), &dir.calibration())?;
            store::save_calibration(&holdout, &meta(seeds.2), &dir.holdout())?;
            store::save_grams(&calib.grams, &dir.grams())?;
            for g in &calib.grams {
                eprintln!("{}: {} samples", g.site_id, g.sample_count());
            }
            dir.record_timing(|tm| tm.calibrate = elapsed)?;
        }
        Command::Allocate => {
            let model = store::load_model(&dir.model())?;
            let grams = store::load_grams(&dir.grams())?;
            let t = Instant::now();
            let plan = pipeline::allocate_plan(&cfg, &model, &grams)?;
            let elapsed = ms_since(t);
            store::save_plan(&plan, &dir.plan())?;
            println!(
                "{:<10} {:<6} {:>14} {:>10} {:>6}",
                "site", "type", "score", "ratio", "rank"
            );
            for e in &plan.entries {
                let score = e
                    .l_min_score
                    .map_or_else(|| "-".to_string(), |s| format!("{s:.6e}"));
                println!(
                    "{:<10} {:<6} {:>14} {:>10.6} {:>6}",
                    e.site_id, e.matrix_type, score, e.allocated_ratio, e.resolved_rank
                );
            }
            for (ty, mean) in plan.group_means() {
                println!("group {ty}: mean ratio {mean:.12}");
            }
            dir.record_timing(|tm| tm.allocate = elapsed)?;
        }
        Command::Compress => {
            let pool = pipeline::thread_pool(&cfg)?;
            let model = store::load_model(&dir.model())?;
            let grams = store::load_grams(&dir.grams())?;
            let plan = store::load_plan(&dir.plan())?;
            let t = Instant::now();
            let (mut compressed, mut reports) =
                pipeline::compress(&cfg, &model, &grams, &plan, &pool)?;
            let compress_ms = ms_since(t);
            let t = Instant::now();
            if cfg.refine {
                pipeline::refine(&cfg, &model, &grams, &mut compressed, &mut reports, &pool)?;
            }
            let refine_ms = ms_since(t);
            compressed.save(&dir.compressed())?;
            artifact::write_json(&dir.reports(), &reports)?;
            dir.record_timing(|tm| {
                tm.compress = compress_ms;
                tm.refine = refine_ms;
            })?;
            failure_check(&reports)?;
        }
        Command::Evaluate => {
            let model = store::load_model(&dir.model())?;
            let compressed = store::CompressedModel::load(&dir.compressed())?;
            let reports: Vec<TruncationReport> = artifact::read_json(&dir.reports())?;
            let holdout = store::load_calibration(&dir.holdout())?;
            let t = Instant::now();
            let mut summary = pipeline::evaluate(
                &cfg,
                &model,
                &compressed,
                &reports,
                &holdout,
                dir.read_timings(),
            )?;
            let elapsed = ms_since(t);
            summary.stage_timings_ms = dir.record_timing(|tm| tm.evaluate = elapsed)?;
            write_reports(&dir, &model, &summary)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary.totals).expect("totals serialize")
            );
            println!("output mse {:e}", summary.end_to_end.output_mse);
        }
        Command::Bench => {
            let out = pipeline::run(&cfg)?;
            let t = &out.summary.stage_timings_ms;
            println!(
                "{}",
                serde_json::to_string_pretty(t).expect("timings serialize")
            );
            println!(
                "allocate/compress time ratio {:.4}",
                t.allocate / t.compress.max(f64::MIN_POSITIVE)
            );
        }
        Command::Run => {
            let out = pipeline::run(&cfg)?;
            write_run(&dir, &out)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&out.summary.totals).expect("totals serialize")
            );
            failure_check(&out.summary.per_site)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
