//! In-memory pipeline stages. Every stage is deterministic given the config;
//! only wall-clock fields vary between runs.

use std::collections::BTreeMap;
use std::time::Instant;

use lrf_core::allocation::{allocate, homogeneous_plan, score_sites, CompressionPlan};
use lrf_core::calibration::{
    forward, forward_capture, generate_calibration, GramAccumulator, ToyModel, WeightSite,
};
use lrf_core::engines::{
    gram_condition, gram_loss, gram_min_loss, refine_lbfgs, truncate_admm_noise, truncate_cholesky,
    truncate_double_svd_with_tol, truncate_plain, EngineKind, LowRankFactors, TruncationReport,
};
use lrf_core::synth::generate_model;
use lrf_core::DenseMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::ArtifactError;
use crate::config::{AllocationMode, ConfigError, RunConfig};
use crate::store::{CompressedModel, CompressedSite, SiteWeights};

/// Columns per calibration chunk. Fixed so the Gram sums do not depend on
/// the worker count.
pub const CALIB_CHUNK: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("infeasible budget: {0}")]
    Infeasible(lrf_core::Error),
    #[error(transparent)]
    Core(lrf_core::Error),
    #[error("artifacts disagree: {0}")]
    ArtifactMismatch(String),
    #[error("every site failed to compress")]
    AllSitesFailed,
    #[error("worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

impl From<lrf_core::Error> for PipelineError {
    fn from(e: lrf_core::Error) -> Self {
        match e {
            lrf_core::Error::InfeasibleBudget { .. } => PipelineError::Infeasible(e),
            other => PipelineError::Core(other),
        }
    }
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Infeasible(_) => 3,
            PipelineError::Artifact(_) | PipelineError::ArtifactMismatch(_) => 4,
            PipelineError::AllSitesFailed => 5,
            PipelineError::Core(_) | PipelineError::Pool(_) => 1,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageTimings {
    pub calibrate: f64,
    pub allocate: f64,
    pub compress: f64,
    pub refine: f64,
    pub evaluate: f64,
    /// Wall clock of the whole run, or the sum of stages when they ran as
    /// separate commands.
    pub total: f64,
}

impl StageTimings {
    pub fn stage_sum(&self) -> f64 {
        self.calibrate + self.allocate + self.compress + self.refine + self.evaluate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub sum_theoretical_loss_sq: f64,
    /// Over sites that compressed successfully.
    pub sum_achieved_loss_sq: f64,
    pub dense_params: usize,
    pub stored_params: usize,
    pub param_reduction_achieved: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEnd {
    pub holdout_samples: usize,
    /// Mean squared difference between original and compressed outputs.
    pub output_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub config: RunConfig,
    pub per_site: Vec<TruncationReport>,
    pub totals: Totals,
    pub end_to_end: EndToEnd,
    pub stage_timings_ms: StageTimings,
}

impl EvaluationSummary {
    pub fn all_failed(&self) -> bool {
        !self.per_site.is_empty() && self.totals.failures == self.per_site.len()
    }
}

pub struct Calibration {
    pub batch: DenseMatrix,
    /// Sorted by site id.
    pub grams: Vec<GramAccumulator>,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn thread_pool(cfg: &RunConfig) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.worker_count()?)
        .build()?)
}

pub fn build_model(cfg: &RunConfig) -> Result<ToyModel> {
    Ok(generate_model(&cfg.model_spec, cfg.stream_seeds().0)?)
}

pub fn calibration_batch(cfg: &RunConfig, input_dim: usize) -> Result<DenseMatrix> {
    Ok(generate_calibration(
        cfg.stream_seeds().1,
        cfg.calib.n_samples,
        input_dim,
        cfg.calib.distribution,
    )?)
}

pub fn holdout_batch(cfg: &RunConfig, input_dim: usize) -> Result<DenseMatrix> {
    Ok(generate_calibration(
        cfg.stream_seeds().2,
        cfg.calib.holdout_samples,
        input_dim,
        cfg.calib.distribution,
    )?)
}

fn column_block(x: &DenseMatrix, start: usize, len: usize) -> DenseMatrix {
    DenseMatrix::from_fn(x.rows(), len, |i, j| x[(i, start + j)])
}

/// Streams `batch` through the model in fixed-size chunks on the pool and
/// merges the per-chunk Grams in chunk order.
pub fn accumulate_grams(
    model: &ToyModel,
    batch: &DenseMatrix,
    pool: &rayon::ThreadPool,
) -> Result<Vec<GramAccumulator>> {
    let starts: Vec<usize> = (0..batch.cols()).step_by(CALIB_CHUNK).collect();
    let partial: Vec<BTreeMap<String, GramAccumulator>> = pool.install(|| {
        starts
            .par_iter()
            .map(|&s| {
                let block = column_block(batch, s, CALIB_CHUNK.min(batch.cols() - s));
                let capture = forward_capture(model, &block)?;
                capture
                    .activations
                    .into_iter()
                    .map(|(site, x)| {
                        let mut acc = GramAccumulator::new(site.clone(), x.rows());
                        acc.accumulate(&x)?;
                        Ok((site, acc))
                    })
                    .collect::<lrf_core::Result<BTreeMap<_, _>>>()
            })
            .collect::<lrf_core::Result<Vec<_>>>()
    })?;
    let mut merged: BTreeMap<String, GramAccumulator> = BTreeMap::new();
    for chunk in partial {
        for (site, acc) in chunk {
            match merged.get_mut(&site) {
                Some(total) => total.merge(&acc)?,
                None => {
                    merged.insert(site, acc);
                }
            }
        }
    }
    Ok(merged.into_values().collect())
}

pub fn calibrate(
    cfg: &RunConfig,
    model: &ToyModel,
    pool: &rayon::ThreadPool,
) -> Result<Calibration> {
    let batch = calibration_batch(cfg, model.input_dim())?;
    let grams = accumulate_grams(model, &batch, pool)?;
    Ok(Calibration { batch, grams })
}

/// Gram handed to the engines, honouring `normalize_gram`.
fn effective_gram(cfg: &RunConfig, acc: &GramAccumulator) -> DenseMatrix {
    if cfg.calib.normalize_gram {
        acc.normalized_gram()
    } else {
        acc.gram().clone()
    }
}

fn gram_map(cfg: &RunConfig, grams: &[GramAccumulator]) -> BTreeMap<String, DenseMatrix> {
    grams
        .iter()
        .map(|g| (g.site_id.clone(), effective_gram(cfg, g)))
        .collect()
}

fn check_coverage(model: &ToyModel, grams: &[GramAccumulator]) -> Result<()> {
    for site in model.layers() {
        let g = grams
            .iter()
            .find(|g| g.site_id == site.site_id)
            .ok_or_else(|| {
                PipelineError::ArtifactMismatch(format!("no gram for site {}", site.site_id))
            })?;
        if g.dim() != site.input_dim() {
            return Err(PipelineError::ArtifactMismatch(format!(
                "gram for {} is {}-dimensional, weight takes {}",
                site.site_id,
                g.dim(),
                site.input_dim()
            )));
        }
    }
    Ok(())
}

pub fn allocate_plan(
    cfg: &RunConfig,
    model: &ToyModel,
    grams: &[GramAccumulator],
) -> Result<CompressionPlan> {
    check_coverage(model, grams)?;
    let plan = match cfg.allocation {
        AllocationMode::Homogeneous => homogeneous_plan(model.layers(), cfg.target_ratio)?,
        AllocationMode::Heterogeneous => {
            let scores = score_sites(model.layers(), &gram_map(cfg, grams), cfg.target_ratio)?;
            allocate(
                model.layers(),
                &scores,
                cfg.target_ratio,
                &cfg.allocation_params,
            )?
        }
    };
    Ok(plan)
}

fn run_engine(
    cfg: &RunConfig,
    w: &DenseMatrix,
    g: &DenseMatrix,
    k: usize,
    warnings: &mut Vec<String>,
) -> lrf_core::Result<LowRankFactors> {
    let p = &cfg.engine_params;
    match cfg.engine {
        EngineKind::Plain => truncate_plain(w, k),
        EngineKind::Cholesky => {
            let out = truncate_cholesky(w, g, k, p.jitter)?;
            if out.jittered {
                warnings.push(format!(
                    "gram not positive definite; factored with jitter {}",
                    p.jitter
                ));
            }
            Ok(out.factors)
        }
        EngineKind::DoubleSvd => truncate_double_svd_with_tol(w, g, k, p.pinv_tol),
        EngineKind::AdmmNoise => {
            let out = truncate_admm_noise(w, g, k, &p.admm)?;
            if !out.converged && p.admm.eps > 0.0 {
                warnings.push(format!(
                    "admm stopped after {} iterations without converging",
                    out.iterations
                ));
            }
            if out.non_monotone {
                warnings.push("admm objective rose during iteration".into());
            }
            Ok(out.factors)
        }
    }
}

fn compress_site(
    cfg: &RunConfig,
    site: &WeightSite,
    acc: &GramAccumulator,
    k: usize,
) -> (SiteWeights, TruncationReport) {
    let start = Instant::now();
    let w = &site.weight;
    let raw = acc.gram();
    let g = effective_gram(cfg, acc);
    let condition = gram_condition(raw).ok().flatten();
    let theoretical = gram_min_loss(w, raw, k);
    let mut warnings = Vec::new();
    let outcome = theoretical.and_then(|th| {
        let f = run_engine(cfg, w, &g, k, &mut warnings)?;
        let achieved = gram_loss(w, &f, raw)?;
        Ok((th, f, achieved))
    });
    let (weights, mut report) = match outcome {
        Ok((th, f, achieved)) => (
            SiteWeights::Factored(f),
            TruncationReport::succeeded(
                site.site_id.clone(),
                cfg.engine,
                k,
                th,
                achieved,
                condition,
            ),
        ),
        Err(e) => {
            let th = gram_min_loss(w, raw, k).unwrap_or(f64::NAN);
            (
                SiteWeights::Dense(w.clone()),
                TruncationReport::failed(
                    site.site_id.clone(),
                    cfg.engine,
                    k,
                    th,
                    condition,
                    e.to_string(),
                ),
            )
        }
    };
    report.warnings = warnings;
    report.wall_time_ms = elapsed_ms(start);
    (weights, report)
}

/// Compresses every site on the pool. Engine failures are recorded in the
/// reports and leave the site dense.
pub fn compress(
    cfg: &RunConfig,
    model: &ToyModel,
    grams: &[GramAccumulator],
    plan: &CompressionPlan,
    pool: &rayon::ThreadPool,
) -> Result<(CompressedModel, Vec<TruncationReport>)> {
    check_coverage(model, grams)?;
    let mut jobs = Vec::with_capacity(model.layers().len());
    for site in model.layers() {
        let entry = plan.entry(&site.site_id).ok_or_else(|| {
            PipelineError::ArtifactMismatch(format!("plan has no entry for {}", site.site_id))
        })?;
        if (entry.rows, entry.cols) != site.weight.shape() {
            return Err(PipelineError::ArtifactMismatch(format!(
                "plan shape for {} disagrees with the model",
                site.site_id
            )));
        }
        let acc = grams
            .iter()
            .find(|g| g.site_id == site.site_id)
            .expect("coverage checked");
        jobs.push((site, acc, entry.resolved_rank));
    }
    let results: Vec<(SiteWeights, TruncationReport)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(site, acc, k)| compress_site(cfg, site, acc, k))
            .collect()
    });

    let mut sites = Vec::with_capacity(results.len());
    let mut reports = Vec::with_capacity(results.len());
    for ((site, _, _), (weights, report)) in jobs.iter().zip(results) {
        sites.push(CompressedSite {
            site_id: site.site_id.clone(),
            layer_index: site.layer_index,
            matrix_type: site.matrix_type,
            weights,
        });
        reports.push(report);
    }
    reports.sort_by(|a, b| a.site_id.cmp(&b.site_id));
    Ok((
        CompressedModel {
            activation: model.activation(),
            sites,
        },
        reports,
    ))
}

/// L-BFGS polish of every factored site, in place.
pub fn refine(
    cfg: &RunConfig,
    model: &ToyModel,
    grams: &[GramAccumulator],
    compressed: &mut CompressedModel,
    reports: &mut [TruncationReport],
    pool: &rayon::ThreadPool,
) -> Result<()> {
    let params = cfg.engine_params.lbfgs;
    let updates: Vec<Option<(LowRankFactors, f64, f64, bool)>> = pool.install(|| {
        compressed
            .sites
            .par_iter()
            .map(|s| {
                let SiteWeights::Factored(init) = &s.weights else {
                    return Ok(None);
                };
                let start = Instant::now();
                let w = &model.site(&s.site_id).expect("site present").weight;
                let acc = grams
                    .iter()
                    .find(|g| g.site_id == s.site_id)
                    .expect("gram present");
                let out = refine_lbfgs(init, w, &effective_gram(cfg, acc), &params)?;
                let achieved = gram_loss(w, &out.factors, acc.gram())?;
                Ok(Some((
                    out.factors,
                    achieved,
                    elapsed_ms(start),
                    out.line_search_failed,
                )))
            })
            .collect::<lrf_core::Result<Vec<_>>>()
    })?;
    for (site, update) in compressed.sites.iter_mut().zip(updates) {
        let Some((factors, achieved, ms, ls_failed)) = update else {
            continue;
        };
        let report = reports
            .iter_mut()
            .find(|r| r.site_id == site.site_id)
            .ok_or_else(|| {
                PipelineError::ArtifactMismatch(format!("no report for {}", site.site_id))
            })?;
        let mut refined = TruncationReport::succeeded(
            site.site_id.clone(),
            report.engine,
            report.rank,
            report.theoretical_loss,
            achieved,
            report.gram_condition,
        );
        refined.refined = true;
        refined.wall_time_ms = report.wall_time_ms + ms;
        refined.warnings = std::mem::take(&mut report.warnings);
        if ls_failed {
            refined
                .warnings
                .push("line search failed; kept the best iterate".into());
        }
        *report = refined;
        site.weights = SiteWeights::Factored(factors);
    }
    Ok(())
}

fn output_mse(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    let d = a.sub(b)?;
    let n = (d.rows() * d.cols()) as f64;
    Ok(d.as_slice().iter().map(|v| v * v).sum::<f64>() / n)
}

pub fn evaluate(
    cfg: &RunConfig,
    model: &ToyModel,
    compressed: &CompressedModel,
    reports: &[TruncationReport],
    holdout: &DenseMatrix,
    stage_timings_ms: StageTimings,
) -> Result<EvaluationSummary> {
    if compressed.sites.len() != model.layers().len() || reports.len() != model.layers().len() {
        return Err(PipelineError::ArtifactMismatch(
            "compressed model, reports and model list different sites".into(),
        ));
    }
    for (orig, comp) in model.layers().iter().zip(&compressed.sites) {
        let shape = match &comp.weights {
            SiteWeights::Factored(f) => (f.rows(), f.cols()),
            SiteWeights::Dense(w) => w.shape(),
        };
        if orig.site_id != comp.site_id || orig.weight.shape() != shape {
            return Err(PipelineError::ArtifactMismatch(format!(
                "site {} differs between artifacts",
                orig.site_id
            )));
        }
    }
    let dense_model = compressed.densified()?;
    let y0 = forward(model, holdout)?;
    let y1 = forward(&dense_model, holdout)?;

    let dense_params: usize = model
        .layers()
        .iter()
        .map(|s| s.weight.rows() * s.weight.cols())
        .sum();
    let stored_params = compressed.param_count();
    let ok = reports.iter().filter(|r| r.status.is_ok());
    let totals = Totals {
        sum_theoretical_loss_sq: reports
            .iter()
            .map(|r| r.theoretical_loss * r.theoretical_loss)
            .sum(),
        sum_achieved_loss_sq: ok.filter_map(|r| r.achieved_loss).map(|a| a * a).sum(),
        dense_params,
        stored_params,
        param_reduction_achieved: 1.0 - stored_params as f64 / dense_params as f64,
        failures: reports.iter().filter(|r| !r.status.is_ok()).count(),
    };
    let mut per_site = reports.to_vec();
    per_site.sort_by(|a, b| a.site_id.cmp(&b.site_id));
    Ok(EvaluationSummary {
        config: cfg.clone(),
        per_site,
        totals,
        end_to_end: EndToEnd {
            holdout_samples: holdout.cols(),
            output_mse: output_mse(&y0, &y1)?,
        },
        stage_timings_ms,
    })
}

/// Everything a full run produces.
pub struct RunOutput {
    pub model: ToyModel,
    pub calibration: Calibration,
    pub holdout: DenseMatrix,
    pub plan: CompressionPlan,
    pub compressed: CompressedModel,
    pub summary: EvaluationSummary,
}

pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let pool = thread_pool(cfg)?;
    let t0 = Instant::now();
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let model = build_model(cfg)?;
    let calibration = calibrate(cfg, &model, &pool)?;
    timings.calibrate = elapsed_ms(t);

    let t = Instant::now();
    let plan = allocate_plan(cfg, &model, &calibration.grams)?;
    timings.allocate = elapsed_ms(t);

    let t = Instant::now();
    let (mut compressed, mut reports) = compress(cfg, &model, &calibration.grams, &plan, &pool)?;
    timings.compress = elapsed_ms(t);

    let t = Instant::now();
    if cfg.refine {
        refine(
            cfg,
            &model,
            &calibration.grams,
            &mut compressed,
            &mut reports,
            &pool,
        )?;
    }
    timings.refine = elapsed_ms(t);

    let t = Instant::now();
    let holdout = holdout_batch(cfg, model.input_dim())?;
    let mut summary = evaluate(
        cfg,
        &model,
        &compressed,
        &reports,
        &holdout,
        StageTimings::default(),
    )?;
    timings.evaluate = elapsed_ms(t);
    timings.total = elapsed_ms(t0);
    summary.stage_timings_ms = timings;
    Ok(RunOutput {
        model,
        calibration,
        holdout,
        plan,
        compressed,
        summary,
    })
}
