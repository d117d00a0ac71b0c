use msi_core::features::{build_matrix, merge};
use msi_core::harness::{self, ModeSet, Reduction, StudyConfig, TrainedPipeline};
use msi_core::models::{stratified_split, ModelKind};
use msi_core::preprocess::PipelineOptions;
use msi_core::synth::{self, CaseStudyKind};
use msi_core::Mode;
use serde_json::json;

fn small(kind: CaseStudyKind) -> StudyConfig {
    StudyConfig::with_overrides(
        kind,
        &json!({
            "data": {"width": 40, "height": 40, "replicates": 2, "levels_pct": [0, 20, 40], "color_classes": 4},
            "crop": {"x": 5, "y": 5, "w": 30, "h": 30}
        }),
    )
    .unwrap()
}

#[test]
fn overrides_keep_kind_defaults() {
    let cfg = StudyConfig::with_overrides(
        CaseStudyKind::CoconutOil,
        &json!({"block": 5, "data": {"replicates": 3}}),
    )
    .unwrap();
    assert_eq!(cfg.block, 5);
    assert_eq!(cfg.data.replicates, Some(3));
    assert_eq!(cfg.data.width, 120);
    assert!(cfg.bilateral.is_none());
    assert!(cfg.kl_curve);
    assert_eq!(cfg.mode_sets, vec![ModeSet::Transmittance]);

    assert!(StudyConfig::with_overrides(CaseStudyKind::Turmeric, &json!({"block": "ten"})).is_err());
}

#[test]
fn repeatability_is_exact_without_drift() {
    let steady = harness::repeatability_report(&harness::repeatability_fixture(7, 5, 0.0).unwrap()).unwrap();
    assert_eq!(steady.max_deviation_pct, 0.0);
    assert_eq!(steady.capture_means.len(), 5);

    let low = harness::repeatability_report(&harness::repeatability_fixture(7, 5, 0.02).unwrap()).unwrap();
    let high = harness::repeatability_report(&harness::repeatability_fixture(7, 5, 0.04).unwrap()).unwrap();
    assert!(0.0 < low.max_deviation_pct && low.max_deviation_pct < high.max_deviation_pct);

    let one = harness::repeatability_fixture(7, 2, 0.0).unwrap();
    assert!(harness::repeatability_report(&one[..1]).is_err());
}

#[test]
fn spatial_report_flattens_its_own_reference() {
    let white = synth::render(&harness::white_scene(Mode::Reflectance, 60, 3).unwrap()).unwrap();
    let options = PipelineOptions::for_mode(Mode::Reflectance);
    let cfg = StudyConfig::default();
    let r = harness::spatial_consistency_report(&white, &white, &options, &cfg.spatial_fit, 10).unwrap();
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    assert!(max(&r.after_spatial.band_rsd) < 0.2 * max(&r.before.band_rsd));
    assert!(r.after_spectral.interband_spread < r.before.interband_spread);
    assert_eq!(r.heatmap_before.len(), 60 * 60);
    assert_eq!(r.heatmap_before[r.center.1 * 60 + r.center.0], 0.0);
    let region = r.recommended_region.unwrap();
    assert!(region.x + region.w <= 60 && region.y + region.h <= 60);
}

#[test]
fn trained_pipeline_round_trips() {
    let cfg = small(CaseStudyKind::Turmeric);
    let data = synth::generate_case_study(CaseStudyKind::Turmeric, &cfg.data, 5).unwrap();
    let r = harness::prepare_mode(&data, Mode::Reflectance, true, &cfg).unwrap();
    let t = harness::prepare_mode(&data, Mode::Transmittance, true, &cfg).unwrap();
    let m = merge(
        &build_matrix(&r, Mode::Reflectance, cfg.block).unwrap(),
        &build_matrix(&t, Mode::Transmittance, cfg.block).unwrap(),
    )
    .unwrap();
    let split = stratified_split(&m, 0.5, 1, cfg.granularity).unwrap();
    let (train, test) = split.apply(&m);

    for (reduction, kind) in [
        (Reduction::Lda, ModelKind::Logistic),
        (Reduction::Pca, ModelKind::RandomForest),
    ] {
        let p = TrainedPipeline::fit(&train, reduction, kind, &cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        p.save(&path).unwrap();
        let back = TrainedPipeline::load(&path).unwrap();
        assert_eq!(back.predict(&test).unwrap(), p.predict(&test).unwrap());
        assert_eq!(back.evaluate(&test).unwrap(), p.evaluate(&test).unwrap());
    }

    let reflectance_only = build_matrix(&r, Mode::Reflectance, cfg.block).unwrap();
    let p = TrainedPipeline::fit(&train, Reduction::None, ModelKind::Knn, &cfg, 9).unwrap();
    assert!(p.predict(&reflectance_only).is_err());
}

#[test]
fn small_study_writes_every_artifact() {
    let mut cfg = small(CaseStudyKind::Turmeric);
    cfg.classifiers = vec![ModelKind::Knn, ModelKind::DecisionTree];
    let report = harness::run_case_study(CaseStudyKind::Turmeric, &cfg, 11).unwrap();
    // corrections on/off × three mode sets × one reduction × two classifiers
    assert_eq!(report.accuracy.len(), 12);
    assert_eq!(report.matrix_shapes.len(), 6);
    assert!(report.lda_loadings.is_some());
    assert!(!report.scatter.is_empty());

    let again = harness::run_case_study(CaseStudyKind::Turmeric, &cfg, 11).unwrap();
    assert_eq!(report, again);

    let dir = tempfile::tempdir().unwrap();
    report.write(dir.path()).unwrap();
    for f in ["report.json", "accuracy.csv", "lda_loadings.dat", "lda_scatter.dat"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let csv = report.accuracy_csv();
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn oil_study_builds_kl_curve() {
    let cfg = small(CaseStudyKind::CoconutOil);
    let report = harness::run_case_study(CaseStudyKind::CoconutOil, &cfg, 4).unwrap();
    let kl = report.kl.as_ref().unwrap();
    assert_eq!(kl.medians.len(), 3);
    assert!(kl.medians[2].1 > kl.medians[0].1);
    let dir = tempfile::tempdir().unwrap();
    report.write(dir.path()).unwrap();
    for f in ["kl_curve.csv", "kl_map.json", "kl_fit.dat"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}
