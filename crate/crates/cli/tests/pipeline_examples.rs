use lrf::config::{AllocationMode, RunConfig};
use lrf::outputs::{per_layer_csv, per_site_csv, write_run, RunDir};
use lrf::pipeline::{self, accumulate_grams, evaluate, StageTimings};
use lrf::store::{CompressedModel, CompressedSite, SiteWeights};
use lrf_core::calibration::{Activation, MatrixType, SampleDistribution, ToyModel, WeightSite};
use lrf_core::engines::{EngineKind, LowRankFactors, SiteStatus};
use lrf_core::synth::ModelSpec;
use lrf_core::DenseMatrix;

fn pool(n: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .unwrap()
}

fn small_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        model_spec: ModelSpec {
            dims: vec![10, 8, 12, 8, 6],
            matrix_types: vec![MatrixType::Q, MatrixType::K],
            decay: vec![0.8, 1.6],
            activation: Activation::Relu,
            weight_scale: 1.0,
            weight_rank: None,
        },
        threads: Some(2),
        ..RunConfig::default()
    }
}

fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum()
    })
}

#[test]
fn identity_model_on_identity_batch() {
    let site = WeightSite {
        site_id: "L00.Dense".into(),
        layer_index: 0,
        matrix_type: MatrixType::Dense,
        weight: DenseMatrix::identity(8),
    };
    let model = ToyModel::new(vec![site], Activation::Identity).unwrap();
    // Twenty stacked copies of I span several calibration chunks.
    let copies = 20;
    let batch = DenseMatrix::from_fn(8, 8 * copies, |i, j| if j % 8 == i { 1.0 } else { 0.0 });
    let grams = accumulate_grams(&model, &batch, &pool(3)).unwrap();
    assert_eq!(grams.len(), 1);
    assert_eq!(grams[0].sample_count(), (8 * copies) as u64);
    assert_eq!(
        grams[0].gram(),
        &DenseMatrix::identity(8).scale(copies as f64)
    );
}

#[test]
fn grams_match_a_scripted_reference() {
    let cfg = RunConfig {
        model_spec: ModelSpec {
            dims: vec![5, 7, 4, 6],
            matrix_types: vec![MatrixType::Up, MatrixType::Down, MatrixType::Dense],
            decay: vec![1.0],
            activation: Activation::Relu,
            weight_scale: 1.5,
            weight_rank: None,
        },
        calib: lrf::config::CalibConfig {
            n_samples: 150,
            ..Default::default()
        },
        ..small_config(3)
    };
    let model = pipeline::build_model(&cfg).unwrap();
    let calib = pipeline::calibrate(&cfg, &model, &pool(2)).unwrap();

    // Straight-line forward pass with explicit loops.
    let mut h = calib.batch.clone();
    for (i, site) in model.layers().iter().enumerate() {
        let gram_ref = naive_matmul(&h, &h.transpose());
        let got = calib
            .grams
            .iter()
            .find(|g| g.site_id == site.site_id)
            .unwrap();
        let err = got.gram().sub(&gram_ref).unwrap().frobenius_norm();
        assert!(
            err <= 1e-12 * gram_ref.frobenius_norm(),
            "{}: {err}",
            site.site_id
        );
        assert_eq!(got.sample_count(), 150);
        let z = naive_matmul(&site.weight, &h);
        h = if i + 1 < model.layers().len() {
            z.map(|v| v.max(0.0))
        } else {
            z
        };
    }
}

#[test]
fn calibration_does_not_depend_on_worker_count() {
    let cfg = small_config(8);
    let model = pipeline::build_model(&cfg).unwrap();
    let one = pipeline::calibrate(&cfg, &model, &pool(1)).unwrap();
    let four = pipeline::calibrate(&cfg, &model, &pool(4)).unwrap();
    for (a, b) in one.grams.iter().zip(&four.grams) {
        assert_eq!(a, b);
    }
}

#[test]
fn zero_ratio_on_parity_rank_model_is_lossless() {
    // rank(W) = 4 = 8·8/(8+8), so the R = 0 budget holds every weight exactly.
    let cfg = RunConfig {
        target_ratio: 0.0,
        engine: EngineKind::DoubleSvd,
        allocation: AllocationMode::Homogeneous,
        model_spec: ModelSpec {
            dims: vec![8, 8, 8, 8],
            matrix_types: vec![MatrixType::Q],
            decay: vec![0.5],
            activation: Activation::Relu,
            weight_scale: 1.0,
            weight_rank: Some(4),
        },
        ..small_config(4)
    };
    let out = pipeline::run(&cfg).unwrap();
    assert!(out.plan.entries.iter().all(|e| e.resolved_rank == 4));
    assert!(
        out.summary.end_to_end.output_mse <= 1e-18,
        "mse {}",
        out.summary.end_to_end.output_mse
    );
    assert_eq!(out.summary.totals.failures, 0);
}

#[test]
fn cholesky_failure_on_low_rank_calibration_is_recorded() {
    let mut cfg = small_config(5);
    cfg.engine = EngineKind::Cholesky;
    cfg.engine_params.jitter = 0.0;
    cfg.calib.distribution = SampleDistribution::LowRank(3);
    let out = pipeline::run(&cfg).unwrap();
    let first = &out.summary.per_site[0];
    assert_eq!(first.site_id, "L00.Q");
    assert!(matches!(first.status, SiteStatus::Failed { .. }));
    assert_eq!(first.achieved_loss, None);
    assert!(matches!(
        out.compressed.sites[0].weights,
        SiteWeights::Dense(_)
    ));
    assert!(out.summary.totals.failures >= 1);

    let dir = tempfile::tempdir().unwrap();
    let run_dir = RunDir::new(dir.path());
    write_run(&run_dir, &out).unwrap();
    assert_eq!(
        CompressedModel::load(&run_dir.compressed()).unwrap(),
        out.compressed
    );
}

#[test]
fn jitter_rescues_the_same_sites() {
    let mut cfg = small_config(5);
    cfg.engine = EngineKind::Cholesky;
    cfg.calib.distribution = SampleDistribution::LowRank(3);
    let out = pipeline::run(&cfg).unwrap();
    let first = &out.summary.per_site[0];
    assert!(first.status.is_ok());
    assert!(first.warnings.iter().any(|w| w.contains("jitter")));
}

#[test]
fn double_svd_reaches_the_floor_on_every_site() {
    let mut cfg = small_config(6);
    cfg.target_ratio = 0.2;
    let out = pipeline::run(&cfg).unwrap();
    assert_eq!(out.summary.per_site.len(), 4);
    for r in &out.summary.per_site {
        let n = r.normalized_loss.unwrap();
        assert!((1.0 - 1e-9..=1.0 + 1e-8).contains(&n), "{}: {n}", r.site_id);
        assert!(r.respects_lower_bound());
    }
}

#[test]
fn every_engine_and_refinement_completes() {
    for engine in EngineKind::ALL {
        for refine in [false, true] {
            let cfg = RunConfig {
                engine,
                refine,
                target_ratio: 0.4,
                ..small_config(9)
            };
            let out = pipeline::run(&cfg).unwrap();
            for r in &out.summary.per_site {
                assert!(
                    r.respects_lower_bound(),
                    "{engine}: {:?}",
                    r.normalized_loss
                );
                match &r.status {
                    SiteStatus::Ok => assert_eq!(r.refined, refine),
                    // A dead ReLU unit leaves a zero row in the Gram, which
                    // the noise engine cannot invert.
                    SiteStatus::Failed { reason } => {
                        assert_eq!(engine, EngineKind::AdmmNoise, "{}: {reason}", r.site_id);
                        assert_eq!(r.gram_condition, None);
                        assert!(reason.contains("not invertible"));
                    }
                }
            }
        }
    }
}

#[test]
fn refinement_never_raises_site_losses() {
    let base = RunConfig {
        engine: EngineKind::Plain,
        target_ratio: 0.5,
        ..small_config(10)
    };
    let plain = pipeline::run(&base).unwrap();
    let refined = pipeline::run(&RunConfig {
        refine: true,
        ..base
    })
    .unwrap();
    for (a, b) in plain.summary.per_site.iter().zip(&refined.summary.per_site) {
        let (la, lb) = (a.achieved_loss.unwrap(), b.achieved_loss.unwrap());
        assert!(lb <= la * (1.0 + 1e-12), "{}: {la} -> {lb}", a.site_id);
    }
}

#[test]
fn identity_compression_has_zero_output_error() {
    let cfg = small_config(11);
    let out = pipeline::run(&cfg).unwrap();
    let identical = CompressedModel {
        activation: out.model.activation(),
        sites: out
            .model
            .layers()
            .iter()
            .map(|s| CompressedSite {
                site_id: s.site_id.clone(),
                layer_index: s.layer_index,
                matrix_type: s.matrix_type,
                weights: SiteWeights::Factored(LowRankFactors::exact(&s.weight)),
            })
            .collect(),
    };
    let summary = evaluate(
        &cfg,
        &out.model,
        &identical,
        &out.summary.per_site,
        &out.holdout,
        StageTimings::default(),
    )
    .unwrap();
    assert_eq!(summary.end_to_end.output_mse, 0.0);
}

#[test]
fn csv_reports_have_one_row_per_site_and_layer() {
    let out = pipeline::run(&small_config(12)).unwrap();
    let site_csv = per_site_csv(&out.model, &out.summary.per_site).unwrap();
    let mut rdr = csv::Reader::from_reader(site_csv.as_slice());
    let headers: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        headers,
        [
            "site_id",
            "layer",
            "type",
            "rank",
            "theoretical",
            "achieved",
            "normalized"
        ]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), out.model.layers().len());
    for (row, report) in rows.iter().zip(&out.summary.per_site) {
        assert_eq!(&row[0], report.site_id);
        assert_eq!(row[4].parse::<f64>().unwrap(), report.theoretical_loss);
        assert_eq!(
            row[5].parse::<f64>().unwrap(),
            report.achieved_loss.unwrap()
        );
    }
    let layer_csv = per_layer_csv(&out.model, &out.summary.per_site).unwrap();
    assert_eq!(
        csv::Reader::from_reader(layer_csv.as_slice())
            .records()
            .count(),
        4
    );
}

#[test]
fn evaluate_rejects_mismatched_artifacts() {
    let out = pipeline::run(&small_config(13)).unwrap();
    let mut short = out.compressed.clone();
    short.sites.pop();
    let err = evaluate(
        &out.summary.config,
        &out.model,
        &short,
        &out.summary.per_site,
        &out.holdout,
        StageTimings::default(),
    );
    assert!(matches!(
        err,
        Err(pipeline::PipelineError::ArtifactMismatch(_))
    ));
}

#[test]
fn parameter_reduction_tracks_the_target() {
    for allocation in [AllocationMode::Homogeneous, AllocationMode::Heterogeneous] {
        for ratio in [0.1, 0.3, 0.6] {
            let cfg = RunConfig {
                allocation,
                target_ratio: ratio,
                ..small_config(14)
            };
            let out = pipeline::run(&cfg).unwrap();
            let t = &out.summary.totals;
            let slack: usize = out
                .model
                .layers()
                .iter()
                .map(|s| s.input_dim() + s.output_dim())
                .sum();
            let target_params = (1.0 - ratio) * t.dense_params as f64;
            assert!(
                (t.stored_params as f64 - target_params).abs() <= slack as f64,
                "{allocation:?} {ratio}"
            );
        }
    }
}

#[test]
fn stage_timings_account_for_the_run() {
    let out = pipeline::run(&RunConfig {
        threads: None,
        ..RunConfig::default()
    })
    .unwrap();
    let t = &out.summary.stage_timings_ms;
    for (name, v) in [
        ("calibrate", t.calibrate),
        ("allocate", t.allocate),
        ("compress", t.compress),
        ("refine", t.refine),
        ("evaluate", t.evaluate),
    ] {
        assert!(v > 0.0, "{name} took {v}");
    }
    assert!((t.total - t.stage_sum()).abs() <= 0.05 * t.total, "{t:?}");
    assert!(t.allocate < t.compress, "{t:?}");
}
