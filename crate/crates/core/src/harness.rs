//! Reliability reports and end-to-end case-study drivers.
//!
//! A case study renders its dataset, preprocesses every capture with gains
//! fitted on the study's white reference, builds superpixel matrices,
//! splits them by sample, reduces them with PCA or LDA fitted on the
//! training rows, and scores each classifier on the held-out rows. Every
//! output is a pure function of the configuration and the master seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::{Label, Mode, Sample, SpectralCube};
use crate::divergence::{self, CurveParams, CurvePoint, FunctionalMap, ScalarFeature};
use crate::error::{Error, Result};
use crate::features::{
    self, apply_normalizer, band_normalize, build_matrix, merge, superpixels, ComponentCount, DataMatrix, Projection,
};
use crate::models::{self, encode_labels, EvaluationReport, Granularity, ModelKind, ModelParams, Split};
use crate::preprocess::{
    box_blur, fit_gains, preprocess_pipeline, BilateralParams, PipelineOptions, Rect, SpatialFitParams,
};
use crate::rng;
use crate::sample_io::write_json;
use crate::synth::{self, CaseStudyConfig, CaseStudyKind, SceneConfig};

/// Master seed of the reference runs.
pub const DEFAULT_SEED: u64 = 42;

/// Peak relative intensity drift of the repeatability fixture.
pub const DEFAULT_DRIFT: f64 = 0.04;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean of values that are often all identical; the shifted form returns
/// the common value exactly in that case.
fn shifted_mean(v: &[f64]) -> f64 {
    let first = v[0];
    first + v.iter().map(|x| x - first).sum::<f64>() / v.len() as f64
}

fn rsd(v: &[f64]) -> f64 {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    var.sqrt() / m
}

// ---------------------------------------------------------------------------
// spatial consistency

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceStats {
    /// Relative standard deviation of each band's superpixel surface.
    pub band_rsd: Vec<f64>,
    pub band_mean: Vec<f64>,
    /// `(max − min) / mean` of the band means.
    pub interband_spread: f64,
    /// Mean spectral distance to the reference pixel.
    pub mean_distance: f64,
}

/// Intensity surfaces are sampled on the superpixel grid, so per-pixel
/// shot noise does not mask the illumination shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialReport {
    pub wavelengths: Vec<u32>,
    pub width: usize,
    pub height: usize,
    pub block: usize,
    /// Pixel with the highest smoothed total intensity before correction.
    pub center: (usize, usize),
    pub before: SurfaceStats,
    pub after_spatial: SurfaceStats,
    pub after_spectral: SurfaceStats,
    /// `[band][block row-major]` superpixel means before and after
    /// spatial + spectral correction.
    pub surface_before: Vec<Vec<f64>>,
    pub surface_after: Vec<Vec<f64>>,
    /// Row-major per-pixel distance maps.
    pub heatmap_before: Vec<f64>,
    pub heatmap_after: Vec<f64>,
    /// Pixels in the top intensity quartile and the bottom distance
    /// quartile.
    pub recommended_pixels: usize,
    /// Bounding box of the recommended pixels, if any.
    pub recommended_region: Option<Rect>,
}

fn total_intensity(cube: &SpectralCube) -> Vec<f64> {
    let n = cube.width() * cube.height();
    let mut total = vec![0.0; n];
    for f in cube.bands() {
        for (t, v) in total.iter_mut().zip(f.data()) {
            *t += v;
        }
    }
    total
}

fn distance_map(cube: &SpectralCube, center: (usize, usize)) -> Vec<f64> {
    let w = cube.width();
    let c = center.1 * w + center.0;
    let n = w * cube.height();
    let mut d2 = vec![0.0; n];
    for f in cube.bands() {
        let data = f.data();
        for (acc, v) in d2.iter_mut().zip(data) {
            *acc += (v - data[c]).powi(2);
        }
    }
    d2.into_iter().map(f64::sqrt).collect()
}

fn surface_stats(
    cube: &SpectralCube,
    block: usize,
    mask: &[bool],
    center: (usize, usize),
) -> Result<(SurfaceStats, Vec<Vec<f64>>)> {
    let sp = superpixels(cube, block)?;
    let surfaces: Vec<Vec<f64>> = sp.columns().into_iter().map(|c| c.to_vec()).collect();
    let band_rsd = surfaces.iter().map(|s| rsd(s)).collect();
    let band_mean: Vec<f64> = cube
        .bands()
        .iter()
        .map(|f| {
            let vals: Vec<f64> = f.data().iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
            mean(&vals)
        })
        .collect();
    let lo = band_mean.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = band_mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let dist = distance_map(cube, center);
    Ok((
        SurfaceStats {
            band_rsd,
            interband_spread: (hi - lo) / mean(&band_mean),
            band_mean,
            mean_distance: mean(&dist),
        },
        surfaces,
    ))
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < v.len() {
        v[i] * (1.0 - frac) + v[i + 1] * frac
    } else {
        v[i]
    }
}

/// Flat-field statistics of `target` before and after corrections fitted on
/// `reference`. Pass the same capture twice to inspect the fit itself; a
/// second, independent white capture measures how well the gains transfer.
/// Only the crop and dark settings of `options` are used.
pub fn spatial_consistency_report(
    reference: &Sample,
    target: &Sample,
    options: &PipelineOptions,
    params: &SpatialFitParams,
    block: usize,
) -> Result<SpatialReport> {
    let base_opts = PipelineOptions {
        crop: options.crop,
        dark: options.dark,
        ..PipelineOptions::none()
    };
    let spatial_opts = PipelineOptions {
        spatial: true,
        ..base_opts.clone()
    };
    let full_opts = PipelineOptions {
        spatial: true,
        spectral: true,
        ..base_opts.clone()
    };
    let gains = fit_gains(reference, &full_opts, params)?;
    let before = preprocess_pipeline(target, &gains, &base_opts)?.cube;
    let spatial = preprocess_pipeline(target, &gains, &spatial_opts)?.cube;
    let corrected = preprocess_pipeline(target, &gains, &full_opts)?.cube;
    let mask = gains
        .spatial
        .as_ref()
        .map(|g| g.valid_mask())
        .unwrap_or_else(|| vec![true; before.width() * before.height()]);

    let (w, h) = (before.width(), before.height());
    let n_bands = before.bands().len() as f64;
    let mean_intensity = total_intensity(&before).into_iter().map(|v| v / n_bands).collect();
    let smooth = box_blur(&crate::cube::Frame::normalized(w, h, mean_intensity)?, params.window);
    let s = smooth.data();
    let argmax = (0..s.len()).fold(0, |best, i| if s[i] > s[best] { i } else { best });
    let center = (argmax % w, argmax / w);

    let (before_stats, surface_before) = surface_stats(&before, block, &mask, center)?;
    let (spatial_stats, _) = surface_stats(&spatial, block, &mask, center)?;
    let (after_stats, surface_after) = surface_stats(&corrected, block, &mask, center)?;
    let heatmap_before = distance_map(&before, center);
    let heatmap_after = distance_map(&corrected, center);

    let top_intensity = quantile(s, 0.75);
    let low_distance = quantile(&heatmap_before, 0.25);
    let mut count = 0;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for i in 0..s.len() {
        if s[i] >= top_intensity && heatmap_before[i] <= low_distance {
            count += 1;
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    Ok(SpatialReport {
        wavelengths: before.band_set().wavelengths().to_vec(),
        width: w,
        height: h,
        block,
        center,
        before: before_stats,
        after_spatial: spatial_stats,
        after_spectral: after_stats,
        surface_before,
        surface_after,
        heatmap_before,
        heatmap_after,
        recommended_pixels: count,
        recommended_region: (count > 0).then(|| Rect {
            x: x0,
            y: y0,
            w: x1 - x0 + 1,
            h: y1 - y0 + 1,
        }),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

impl SpatialReport {
    /// Writes `consistency.json` and gnuplot-ready surface and heatmap
    /// files.
    pub fn write(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write_json(&dir.join("consistency.json"), self)?;
        write_text(&dir.join("surface_before.dat"), &self.surface_dat(false))?;
        write_text(&dir.join("surface_after.dat"), &self.surface_dat(true))?;
        write_text(&dir.join("heatmap_before.dat"), &self.heatmap_dat(false))?;
        write_text(&dir.join("heatmap_after.dat"), &self.heatmap_dat(true))
    }

    /// `x y value` rows with blank lines between scan lines.
    pub fn heatmap_dat(&self, after: bool) -> String {
        let map = if after {
            &self.heatmap_after
        } else {
            &self.heatmap_before
        };
        let mut out = String::from("# x y distance\n");
        for y in 0..self.height {
            for x in 0..self.width {
                let _ = writeln!(out, "{x} {y} {}", map[y * self.width + x]);
            }
            out.push('\n');
        }
        out
    }

    /// `bx by value` rows per band, one gnuplot index block per band.
    pub fn surface_dat(&self, after: bool) -> String {
        let surfaces = if after {
            &self.surface_after
        } else {
            &self.surface_before
        };
        let bx = self.width / self.block;
        let mut out = String::new();
        for (nm, s) in self.wavelengths.iter().zip(surfaces) {
            let _ = writeln!(out, "# band {nm} nm: bx by intensity");
            for (i, v) in s.iter().enumerate() {
                let _ = writeln!(out, "{} {} {v}", i % bx, i / bx);
            }
            out.push_str("\n\n");
        }
        out
    }
}

// ---------------------------------------------------------------------------
// repeatability

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandRepeatability {
    pub wavelength_nm: u32,
    pub mean: f64,
    pub max_deviation_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatabilityReport {
    pub n_captures: usize,
    /// `[capture][band]` mean dark-subtracted intensity.
    pub capture_means: Vec<Vec<f64>>,
    pub bands: Vec<BandRepeatability>,
    pub max_deviation_pct: f64,
}

impl RepeatabilityReport {
    /// Writes `repeatability.json` and `repeatability.dat` (one row per
    /// capture, one column per band).
    pub fn write(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write_json(&dir.join("repeatability.json"), self)?;
        let mut t = String::from("# capture");
        for b in &self.bands {
            let _ = write!(t, " {}", b.wavelength_nm);
        }
        t.push('\n');
        for (i, m) in self.capture_means.iter().enumerate() {
            let _ = write!(t, "{i}");
            for v in m {
                let _ = write!(t, " {v}");
            }
            t.push('\n');
        }
        write_text(&dir.join("repeatability.dat"), &t)
    }
}

/// Largest percentage deviation of a capture's band mean from the mean over
/// all captures.
pub fn repeatability_report(series: &[Sample]) -> Result<RepeatabilityReport> {
    if series.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "repeatability needs at least 2 captures, got {}",
            series.len()
        )));
    }
    let band_set = series[0].cube.band_set();
    let mut capture_means = Vec::with_capacity(series.len());
    for s in series {
        if s.cube.band_set() != band_set {
            return Err(Error::InvalidBandSet(format!(
                "capture {} has a different band set",
                s.id
            )));
        }
        let cube = crate::preprocess::subtract_dark(&s.cube)?;
        capture_means.push(cube.bands().iter().map(|f| f.mean()).collect::<Vec<f64>>());
    }
    let mut bands = Vec::new();
    for (b, &nm) in band_set.wavelengths().iter().enumerate() {
        let vals: Vec<f64> = capture_means.iter().map(|m| m[b]).collect();
        let m = shifted_mean(&vals);
        if m <= 0.0 {
            return Err(Error::ZeroMeanBand(nm));
        }
        let dev = vals.iter().map(|v| (v - m).abs() / m * 100.0).fold(0.0, f64::max);
        bands.push(BandRepeatability {
            wavelength_nm: nm,
            mean: m,
            max_deviation_pct: dev,
        });
    }
    let max_deviation_pct = bands.iter().map(|b| b.max_deviation_pct).fold(0.0, f64::max);
    Ok(RepeatabilityReport {
        n_captures: series.len(),
        capture_means,
        bands,
        max_deviation_pct,
    })
}

/// White reference scene under the default study illumination and noise.
pub fn white_scene(mode: Mode, size: usize, seed: u64) -> Result<SceneConfig> {
    let cfg = CaseStudyConfig::default();
    let mixture = crate::synth::MixtureSpec::pure(synth::materials::white_reference(), cfg.depth)?;
    let mut scene = SceneConfig::new(mode, mixture);
    scene.sample_id = format!("white-{}", mode.as_str());
    scene.band_set = cfg.band_set.clone();
    scene.illumination = cfg.illumination.clone();
    scene.noise = cfg.noise.clone();
    scene.width = size;
    scene.height = size;
    scene.rng_seed = seed;
    Ok(scene)
}

/// Default repeat-capture fixture: a small white target captured `n_times`
/// with per-capture intensity drift.
pub fn repeatability_fixture(seed: u64, n_times: usize, drift: f64) -> Result<Vec<Sample>> {
    let mut scene = white_scene(Mode::Reflectance, 40, rng::stream_seed(&[seed, 0x002E_9EA7]))?;
    scene.sample_id = "repeat".into();
    synth::render_repeat_series(&scene, n_times, drift)
}

// ---------------------------------------------------------------------------
// case studies

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Pca,
    Lda,
    None,
}

impl Reduction {
    pub fn as_str(self) -> &'static str {
        match self {
            Reduction::Pca => "pca",
            Reduction::Lda => "lda",
            Reduction::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSet {
    Reflectance,
    Transmittance,
    Merged,
}

impl ModeSet {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeSet::Reflectance => "reflectance",
            ModeSet::Transmittance => "transmittance",
            ModeSet::Merged => "merged",
        }
    }
}

/// Everything a case study run depends on besides the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub data: CaseStudyConfig,
    pub crop: Option<Rect>,
    pub block: usize,
    pub split_fraction: f64,
    pub granularity: Granularity,
    pub spatial_fit: SpatialFitParams,
    /// Bilateral stage used when corrections are on.
    pub bilateral: Option<BilateralParams>,
    pub mode_sets: Vec<ModeSet>,
    /// Run once with and once without spatial/spectral corrections.
    pub compare_corrections: bool,
    pub reductions: Vec<Reduction>,
    pub pca_components: ComponentCount,
    pub lda_gamma_scale: f64,
    pub classifiers: Vec<ModelKind>,
    pub models: ModelParams,
    /// KL adulteration curve on the transmittance captures.
    pub kl_curve: bool,
    pub curve: CurveParams,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig::for_kind(CaseStudyKind::Turmeric)
    }
}

impl StudyConfig {
    pub fn for_kind(kind: CaseStudyKind) -> StudyConfig {
        let base = StudyConfig {
            data: CaseStudyConfig::default(),
            crop: Some(Rect {
                x: 10,
                y: 10,
                w: 100,
                h: 100,
            }),
            block: 10,
            split_fraction: 0.75,
            granularity: Granularity::SampleLevel,
            spatial_fit: SpatialFitParams::default(),
            bilateral: Some(BilateralParams::default()),
            mode_sets: vec![ModeSet::Reflectance, ModeSet::Transmittance, ModeSet::Merged],
            compare_corrections: true,
            reductions: vec![Reduction::Lda],
            pca_components: ComponentCount::default(),
            lda_gamma_scale: features::LDA_GAMMA_SCALE,
            classifiers: ModelKind::ALL.to_vec(),
            models: ModelParams::default(),
            kl_curve: false,
            curve: CurveParams::default(),
        };
        match kind {
            CaseStudyKind::Turmeric => base,
            CaseStudyKind::CoconutOil => StudyConfig {
                // edge-preserving smoothing would collapse the pixel
                // distributions the KL curve is built from
                bilateral: None,
                mode_sets: vec![ModeSet::Transmittance],
                compare_corrections: false,
                classifiers: vec![
                    ModelKind::Logistic,
                    ModelKind::Knn,
                    ModelKind::LinearSvm,
                    ModelKind::DecisionTree,
                ],
                kl_curve: true,
                ..base
            },
            CaseStudyKind::ColorChart => StudyConfig {
                mode_sets: vec![ModeSet::Reflectance],
                compare_corrections: false,
                reductions: vec![Reduction::Pca, Reduction::Lda],
                ..base
            },
        }
    }

    /// Kind defaults overlaid with the fields present in `overrides`
    /// (nested objects merge key by key).
    pub fn with_overrides(kind: CaseStudyKind, overrides: &serde_json::Value) -> Result<StudyConfig> {
        fn overlay(base: &mut serde_json::Value, top: &serde_json::Value) {
            match (base, top) {
                (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
                    for (k, v) in t {
                        match b.get_mut(k) {
                            Some(slot) => overlay(slot, v),
                            None => {
                                b.insert(k.clone(), v.clone());
                            }
                        }
                    }
                }
                (slot, v) => *slot = v.clone(),
            }
        }
        let mut base = serde_json::to_value(StudyConfig::for_kind(kind)).expect("config serializes");
        overlay(&mut base, overrides);
        serde_json::from_value(base).map_err(|e| Error::param(format!("study config: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub corrections: bool,
    pub mode: ModeSet,
    pub reduction: Reduction,
    pub classifier: ModelKind,
    pub accuracy: f64,
    pub evaluation: EvaluationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Loadings {
    pub mode: ModeSet,
    pub columns: Vec<String>,
    /// `[component][column]`
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub sample_id: String,
    pub label: Label,
    pub train: bool,
    pub ld1: f64,
    pub ld2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub points: Vec<CurvePoint>,
    /// `(level_pct, median KL)`
    pub medians: Vec<(f64, f64)>,
    /// Fit of median KL against level.
    pub map: FunctionalMap,
    /// Fit over every replicate point.
    pub map_all_points: FunctionalMap,
    pub spearman_medians: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyReport {
    pub kind: CaseStudyKind,
    pub seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Rows and columns of each evaluated matrix.
    pub matrix_shapes: BTreeMap<String, (usize, usize)>,
    pub accuracy: Vec<AccuracyRow>,
    pub lda_loadings: Option<Loadings>,
    pub scatter: Vec<ScatterPoint>,
    pub kl: Option<KlReport>,
}

impl CaseStudyReport {
    /// Highest accuracy among rows matching the filter.
    pub fn best(&self, corrections: bool, mode: ModeSet, reduction: Reduction) -> Option<&AccuracyRow> {
        self.accuracy
            .iter()
            .filter(|r| r.corrections == corrections && r.mode == mode && r.reduction == reduction)
            .max_by(|a, b| a.accuracy.total_cmp(&b.accuracy).then(b.classifier.cmp(&a.classifier)))
    }

    pub fn accuracy_of(&self, corrections: bool, mode: ModeSet, reduction: Reduction, kind: ModelKind) -> Option<f64> {
        self.accuracy
            .iter()
            .find(|r| {
                r.corrections == corrections && r.mode == mode && r.reduction == reduction && r.classifier == kind
            })
            .map(|r| r.accuracy)
    }

    pub fn accuracy_csv(&self) -> String {
        let mut out = String::from("corrections,mode,reduction,classifier,accuracy\n");
        for r in &self.accuracy {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.corrections,
                r.mode.as_str(),
                r.reduction.as_str(),
                r.classifier,
                r.accuracy
            );
        }
        out
    }

    /// Writes `report.json`, `accuracy.csv` and the plot data files.
    pub fn write(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let put = |name: &str, text: String| write_text(&dir.join(name), &text);
        write_json(&dir.join("report.json"), self)?;
        put("accuracy.csv", self.accuracy_csv())?;
        if let Some(l) = &self.lda_loadings {
            let mut t = String::from("# column");
            for i in 0..l.components.len() {
                let _ = write!(t, " LD{}", i + 1);
            }
            t.push('\n');
            for (j, c) in l.columns.iter().enumerate() {
                t.push_str(c);
                for comp in &l.components {
                    let _ = write!(t, " {}", comp[j]);
                }
                t.push('\n');
            }
            put("lda_loadings.dat", t)?;
        }
        if !self.scatter.is_empty() {
            let mut t = String::from("# label ld1 ld2 train sample_id\n");
            for p in &self.scatter {
                let _ = writeln!(
                    t,
                    "{} {} {} {} {}",
                    p.label,
                    p.ld1,
                    p.ld2,
                    u8::from(p.train),
                    p.sample_id
                );
            }
            put("lda_scatter.dat", t)?;
        }
        if let Some(kl) = &self.kl {
            let mut buf = Vec::new();
            divergence::write_curve_csv(&kl.points, &mut buf).expect("in-memory write");
            put("kl_curve.csv", String::from_utf8(buf).expect("ascii"))?;
            write_json(&dir.join("kl_map.json"), &kl.map)?;
            let mut t = String::from("# level_pct median_kl fitted\n");
            for &(x, y) in &kl.medians {
                let _ = writeln!(t, "{x} {y} {}", kl.map.eval(x));
            }
            put("kl_fit.dat", t)?;
        }
        Ok(())
    }
}

/// Pipeline options of a study: every correction stage of `mode` or, with
/// corrections off, dark subtraction only. Both crop the same region.
pub fn study_options(mode: Mode, corrections: bool, cfg: &StudyConfig) -> PipelineOptions {
    let options = if corrections {
        PipelineOptions {
            bilateral: cfg.bilateral,
            ..PipelineOptions::for_mode(mode)
        }
    } else {
        PipelineOptions {
            dark: true,
            ..PipelineOptions::none()
        }
    };
    options.with_crop(cfg.crop)
}

/// Preprocesses `samples` with gains fitted on `white`.
pub fn prepare_samples(
    samples: &[Sample],
    white: &Sample,
    corrections: bool,
    cfg: &StudyConfig,
) -> Result<Vec<Sample>> {
    let options = study_options(white.mode(), corrections, cfg);
    let gains = fit_gains(white, &options, &cfg.spatial_fit)?;
    samples
        .par_iter()
        .map(|s| {
            if s.mode() != white.mode() {
                return Err(Error::ModeMismatch {
                    expected: white.mode().to_string(),
                    found: s.mode().to_string(),
                });
            }
            preprocess_pipeline(s, &gains, &options)
        })
        .collect()
}

/// Corrected (or dark-only) captures of one mode of a study.
pub fn prepare_mode(
    data: &synth::CaseStudyData,
    mode: Mode,
    corrections: bool,
    cfg: &StudyConfig,
) -> Result<Vec<Sample>> {
    let white = data
        .white(mode)
        .ok_or_else(|| Error::param(format!("no white reference for {mode}")))?;
    prepare_samples(data.dataset(mode).samples(), white, corrections, cfg)
}

struct Reduced {
    normalizer: features::Normalizer,
    train: Array2<f64>,
    test: Array2<f64>,
    projection: Option<Projection>,
}

fn reduce(train: &DataMatrix, test: &DataMatrix, reduction: Reduction, cfg: &StudyConfig) -> Result<Reduced> {
    let (norm, train_n) = band_normalize(train)?;
    let test_n = apply_normalizer(&norm, test)?;
    let cols: Vec<String> = train.col_labels().iter().map(|c| c.to_string()).collect();
    let projection = match reduction {
        Reduction::None => None,
        Reduction::Pca => Some(features::pca_fit(train_n.values(), cfg.pca_components, cols)?),
        Reduction::Lda => {
            let (_, y) = encode_labels(&train_n.labels());
            Some(features::lda_fit(
                train_n.values(),
                &y,
                None,
                cfg.lda_gamma_scale,
                cols,
            )?)
        }
    };
    Ok(match &projection {
        None => Reduced {
            normalizer: norm,
            train: train_n.values().clone(),
            test: test_n.values().clone(),
            projection: None,
        },
        Some(p) => Reduced {
            normalizer: norm,
            train: p.transform(train_n.values())?,
            test: p.transform(test_n.values())?,
            projection,
        },
    })
}

fn score(
    reduced: &Reduced,
    train: &DataMatrix,
    test: &DataMatrix,
    cfg: &StudyConfig,
    seed: u64,
) -> Result<Vec<(ModelKind, EvaluationReport)>> {
    let (y_train, y_test) = (train.labels(), test.labels());
    cfg.classifiers
        .par_iter()
        .map(|&kind| {
            let model = models::fit(kind, &reduced.train, &y_train, &cfg.models, seed)?;
            let predicted = model.predict(&reduced.test)?;
            let cm = models::ConfusionMatrix::from_predictions(&y_test, &predicted)?;
            Ok((kind, cm.report()))
        })
        .collect()
}

fn scatter_points(reduced: &Reduced, train: &DataMatrix, test: &DataMatrix) -> Vec<ScatterPoint> {
    if reduced.train.ncols() < 2 {
        return Vec::new();
    }
    let all = ndarray::concatenate(ndarray::Axis(0), &[reduced.train.view(), reduced.test.view()]).expect("same width");
    let unit = features::unit_range(&features::leading_columns(&all, 2));
    let meta = train
        .row_meta()
        .iter()
        .map(|m| (m, true))
        .chain(test.row_meta().iter().map(|m| (m, false)));
    meta.zip(unit.rows())
        .map(|((m, is_train), r)| ScatterPoint {
            sample_id: m.sample_id.clone(),
            label: m.label,
            train: is_train,
            ld1: r[0],
            ld2: r[1],
        })
        .collect()
}

/// KL curve over the first LDA component fitted on every capture's
/// superpixel rows.
pub fn kl_report(samples: &[Sample], block: usize, params: &CurveParams, gamma_scale: f64) -> Result<KlReport> {
    let mode = samples.first().ok_or(Error::EmptyData)?.mode();
    let m = build_matrix(samples, mode, block)?;
    let (_, y) = encode_labels(&m.labels());
    let cols = m.col_labels().iter().map(|c| c.to_string()).collect();
    let projection = features::lda_fit(m.values(), &y, Some(1), gamma_scale, cols)?;
    let feature = ScalarFeature::Projection {
        projection,
        component: 0,
    };
    kl_report_with(samples, &feature, params)
}

/// KL curve over an arbitrary per-pixel scalar feature, with the linear map
/// fitted on per-level medians.
pub fn kl_report_with(samples: &[Sample], feature: &ScalarFeature, params: &CurveParams) -> Result<KlReport> {
    let points = divergence::adulteration_curve(samples, feature, params)?;
    let medians = divergence::median_by_level(&points);
    let map = divergence::fit_linear(&medians)?;
    let all: Vec<(f64, f64)> = points.iter().map(|p| (p.level_pct, p.kl)).collect();
    let map_all_points = divergence::fit_linear(&all)?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = medians.iter().cloned().unzip();
    Ok(KlReport {
        spearman_medians: divergence::spearman(&xs, &ys)?,
        points,
        medians,
        map,
        map_all_points,
    })
}

/// Full study: render, preprocess, split, reduce, classify, and for the oil
/// study build the KL curve.
pub fn run_case_study(kind: CaseStudyKind, cfg: &StudyConfig, seed: u64) -> Result<CaseStudyReport> {
    let data = synth::generate_case_study(kind, &cfg.data, seed)?;
    run_on_data(&data, cfg, seed)
}

/// Same as [`run_case_study`] on already rendered captures.
pub fn run_on_data(data: &synth::CaseStudyData, cfg: &StudyConfig, seed: u64) -> Result<CaseStudyReport> {
    let kind = data.kind;
    let modes_needed = |ms: ModeSet| -> Vec<Mode> {
        match ms {
            ModeSet::Reflectance => vec![Mode::Reflectance],
            ModeSet::Transmittance => vec![Mode::Transmittance],
            ModeSet::Merged => vec![Mode::Reflectance, Mode::Transmittance],
        }
    };
    let corrections: Vec<bool> = if cfg.compare_corrections {
        vec![true, false]
    } else {
        vec![true]
    };

    let mut accuracy = Vec::new();
    let mut matrix_shapes = BTreeMap::new();
    let mut lda_loadings = None;
    let mut scatter = Vec::new();
    let mut split: Option<Split> = None;
    let mut corrected_t: Option<Vec<Sample>> = None;

    for &corr in &corrections {
        let mut prepared: BTreeMap<Mode, DataMatrix> = BTreeMap::new();
        for &ms in &cfg.mode_sets {
            for mode in modes_needed(ms) {
                if let std::collections::btree_map::Entry::Vacant(e) = prepared.entry(mode) {
                    let samples = prepare_mode(data, mode, corr, cfg)?;
                    e.insert(build_matrix(&samples, mode, cfg.block)?);
                    if corr && mode == Mode::Transmittance && cfg.kl_curve {
                        corrected_t = Some(samples);
                    }
                }
            }
        }
        for &ms in &cfg.mode_sets {
            let matrix = match ms {
                ModeSet::Reflectance => prepared[&Mode::Reflectance].clone(),
                ModeSet::Transmittance => prepared[&Mode::Transmittance].clone(),
                ModeSet::Merged => merge(&prepared[&Mode::Reflectance], &prepared[&Mode::Transmittance])?,
            };
            matrix_shapes
                .entry(format!("{}{}", ms.as_str(), if corr { "" } else { "_uncorrected" }))
                .or_insert((matrix.n_rows(), matrix.n_cols()));
            // one split for the whole study; paired ids make it valid for
            // every mode
            let sp = match &split {
                Some(s) => s.clone(),
                None => {
                    let s = models::stratified_split(
                        &matrix,
                        cfg.split_fraction,
                        rng::stream_seed(&[seed, 0x5B11]),
                        cfg.granularity,
                    )?;
                    split = Some(s.clone());
                    s
                }
            };
            let (train, test) = sp.apply(&matrix);
            for &red in &cfg.reductions {
                let reduced = reduce(&train, &test, red, cfg)?;
                for (classifier, evaluation) in score(&reduced, &train, &test, cfg, seed)? {
                    accuracy.push(AccuracyRow {
                        corrections: corr,
                        mode: ms,
                        reduction: red,
                        classifier,
                        accuracy: evaluation.accuracy,
                        evaluation,
                    });
                }
                // loadings and scatter from the richest corrected LDA view
                if corr && red == Reduction::Lda && ms == *cfg.mode_sets.last().expect("non-empty") {
                    let p = reduced.projection.as_ref().expect("lda projection");
                    lda_loadings = Some(Loadings {
                        mode: ms,
                        columns: p.input_columns.clone(),
                        components: p.components.rows().into_iter().map(|r| r.to_vec()).collect(),
                        eigenvalues: p.eigenvalues.clone(),
                    });
                    scatter = scatter_points(&reduced, &train, &test);
                }
            }
        }
    }

    let kl = match corrected_t {
        Some(samples) => Some(kl_report(&samples, cfg.block, &cfg.curve, cfg.lda_gamma_scale)?),
        None => None,
    };
    let split = split.ok_or_else(|| Error::param("no mode sets configured"))?;
    Ok(CaseStudyReport {
        kind,
        seed,
        train_samples: split.train_ids.len(),
        test_samples: split.test_ids.len(),
        matrix_shapes,
        accuracy,
        lda_loadings,
        scatter,
        kl,
    })
}

// ---------------------------------------------------------------------------
// standalone pipelines

/// Normalizer, optional projection and classifier fitted together, so a
/// saved model can be applied to a fresh matrix with the same columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedPipeline {
    pub columns: Vec<String>,
    pub normalizer: features::Normalizer,
    pub reduction: Reduction,
    pub projection: Option<Projection>,
    pub model: models::Model,
}

impl TrainedPipeline {
    pub fn fit(
        train: &DataMatrix,
        reduction: Reduction,
        kind: ModelKind,
        cfg: &StudyConfig,
        seed: u64,
    ) -> Result<TrainedPipeline> {
        let empty = train.select_rows(&[]);
        let reduced = reduce(train, &empty, reduction, cfg)?;
        let model = models::fit(kind, &reduced.train, &train.labels(), &cfg.models, seed)?;
        Ok(TrainedPipeline {
            columns: train.col_labels().iter().map(|c| c.to_string()).collect(),
            normalizer: reduced.normalizer,
            reduction,
            projection: reduced.projection,
            model,
        })
    }

    pub fn predict(&self, matrix: &DataMatrix) -> Result<Vec<Label>> {
        let columns: Vec<String> = matrix.col_labels().iter().map(|c| c.to_string()).collect();
        if columns != self.columns {
            return Err(Error::param(format!(
                "model expects columns [{}], matrix has [{}]",
                self.columns.join(","),
                columns.join(",")
            )));
        }
        let x = apply_normalizer(&self.normalizer, matrix)?;
        let x = match &self.projection {
            Some(p) => p.transform(x.values())?,
            None => x.values().clone(),
        };
        self.model.predict(&x)
    }

    pub fn evaluate(&self, matrix: &DataMatrix) -> Result<EvaluationReport> {
        let predicted = self.predict(matrix)?;
        Ok(models::ConfusionMatrix::from_predictions(&matrix.labels(), &predicted)?.report())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<TrainedPipeline> {
        crate::sample_io::read_json(path)
    }
}
