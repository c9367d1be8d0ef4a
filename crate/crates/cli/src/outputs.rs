//! Output directory layout and the CSV reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lrf_core::calibration::ToyModel;
use lrf_core::engines::TruncationReport;

use crate::artifact::{read_json, write_atomic, write_json, ArtifactError, Result};
use crate::pipeline::{EvaluationSummary, RunOutput, StageTimings};
use crate::store;

/// File names inside a run's output directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }
    pub fn calibration(&self) -> PathBuf {
        self.root.join("calibration.json")
    }
    pub fn holdout(&self) -> PathBuf {
        self.root.join("holdout.json")
    }
    pub fn grams(&self) -> PathBuf {
        self.root.join("grams.json")
    }
    pub fn plan(&self) -> PathBuf {
        self.root.join("plan.json")
    }
    pub fn compressed(&self) -> PathBuf {
        self.root.join("compressed.json")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports.json")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
    pub fn per_site_csv(&self) -> PathBuf {
        self.root.join("per_site.csv")
    }
    pub fn per_layer_csv(&self) -> PathBuf {
        self.root.join("per_layer.csv")
    }
    /// Stage timings kept apart from the deterministic artifacts.
    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }

    pub fn read_timings(&self) -> StageTimings {
        read_json(&self.timings()).unwrap_or_default()
    }

    pub fn record_timing(&self, update: impl FnOnce(&mut StageTimings)) -> Result<StageTimings> {
        let mut t = self.read_timings();
        update(&mut t);
        t.total = t.stage_sum();
        write_json(&self.timings(), &t)?;
        Ok(t)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> ArtifactError {
    ArtifactError::Io {
        path: path.into(),
        source: std::io::Error::other(e),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

fn layer_and_type(model: &ToyModel, site_id: &str) -> (usize, String) {
    model
        .site(site_id)
        .map_or((usize::MAX, String::new()), |s| {
            (s.layer_index, s.matrix_type.to_string())
        })
}

pub fn per_site_csv(
    model: &ToyModel,
    reports: &[TruncationReport],
) -> std::result::Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "site_id",
        "layer",
        "type",
        "rank",
        "theoretical",
        "achieved",
        "normalized",
    ])?;
    for r in reports {
        let (layer, ty) = layer_and_type(model, &r.site_id);
        w.write_record([
            r.site_id.clone(),
            layer.to_string(),
            ty,
            r.rank.to_string(),
            format!("{:e}", r.theoretical_loss),
            fmt_opt(r.achieved_loss),
            fmt_opt(r.normalized_loss),
        ])?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

/// One row per layer with the squared losses of its sites summed.
pub fn per_layer_csv(
    model: &ToyModel,
    reports: &[TruncationReport],
) -> std::result::Result<Vec<u8>, csv::Error> {
    let mut rows: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for r in reports {
        let (layer, _) = layer_and_type(model, &r.site_id);
        let row = rows.entry(layer).or_default();
        row.0 += r.theoretical_loss * r.theoretical_loss;
        row.1 += r.achieved_loss.map_or(0.0, |a| a * a);
        row.2 += usize::from(!r.status.is_ok());
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "layer",
        "theoretical_loss_sq",
        "achieved_loss_sq",
        "failed_sites",
    ])?;
    for (layer, (th, ach, failed)) in rows {
        w.write_record([
            layer.to_string(),
            format!("{th:e}"),
            format!("{ach:e}"),
            failed.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

pub fn write_reports(dir: &RunDir, model: &ToyModel, summary: &EvaluationSummary) -> Result<()> {
    write_json(&dir.summary(), summary)?;
    let path = dir.per_site_csv();
    write_atomic(
        &path,
        &per_site_csv(model, &summary.per_site).map_err(|e| csv_error(&path, e))?,
    )?;
    let path = dir.per_layer_csv();
    write_atomic(
        &path,
        &per_layer_csv(model, &summary.per_site).map_err(|e| csv_error(&path, e))?,
    )
}

/// Writes every artifact of a full run.
pub fn write_run(dir: &RunDir, out: &RunOutput) -> Result<()> {
    let cfg = &out.summary.config;
    write_json(&dir.config(), cfg)?;
    store::save_model(&out.model, &dir.model())?;
    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), cfg.stream_seeds().1.to_string());
    store::save_calibration(&out.calibration.batch, &meta, &dir.calibration())?;
    meta.insert("seed".to_string(), cfg.stream_seeds().2.to_string());
    store::save_calibration(&out.holdout, &meta, &dir.holdout())?;
    store::save_grams(&out.calibration.grams, &dir.grams())?;
    store::save_plan(&out.plan, &dir.plan())?;
    out.compressed.save(&dir.compressed())?;
    write_json(&dir.reports(), &out.summary.per_site)?;
    write_json(&dir.timings(), &out.summary.stage_timings_ms)?;
    write_reports(dir, &out.model, &out.summary)
}
