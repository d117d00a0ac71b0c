//! KL-divergence adulteration curves.
//!
//! Every specimen is reduced to a scalar per pixel (a projection score or a
//! single band), binned into a smoothed histogram, and compared against the
//! pooled histogram of the unadulterated replicates. The divergence against
//! adulteration level is then fitted with ordinary least squares.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cube::{Label, Sample};
use crate::error::{Error, Result};
use crate::features::{pixel_rows, Projection};

/// Smoothed probability mass over fixed bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub bin_edges: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistogramParams {
    pub n_bins: usize,
    pub range: (f64, f64),
    pub epsilon: f64,
}

impl Default for HistogramParams {
    fn default() -> Self {
        HistogramParams {
            n_bins: 64,
            range: (0.0, 1.0),
            epsilon: 1e-9,
        }
    }
}

/// Bins are right-open except the last; values outside the range land in
/// the edge bins. `epsilon` is added to every bin before renormalizing.
pub fn histogram(values: &[f64], params: &HistogramParams) -> Result<Distribution> {
    if values.is_empty() {
        return Err(Error::EmptyData);
    }
    let (lo, hi) = params.range;
    let n = params.n_bins;
    if n == 0 || !(hi > lo) || !(params.epsilon >= 0.0) {
        return Err(Error::param("histogram needs bins > 0, hi > lo and epsilon >= 0"));
    }
    let width = (hi - lo) / n as f64;
    let mut counts = vec![0.0f64; n];
    for &v in values {
        let i = if v.is_nan() {
            return Err(Error::param("NaN in histogram input"));
        } else if v <= lo {
            0
        } else {
            (((v - lo) / width).floor() as usize).min(n - 1)
        };
        counts[i] += 1.0;
    }
    let total = values.len() as f64 + params.epsilon * n as f64;
    let probs = counts.iter().map(|c| (c + params.epsilon) / total).collect();
    let bin_edges = (0..=n).map(|i| lo + width * i as f64).collect();
    Ok(Distribution { bin_edges, probs })
}

/// `Σ P ln(P/Q)` in nats; bins with `P = 0` contribute nothing.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.bin_edges != q.bin_edges || p.probs.len() != q.probs.len() {
        return Err(Error::EdgeMismatch);
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.probs.iter().zip(&q.probs) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Ok(f64::INFINITY);
            }
            kl += pi * (pi / qi).ln();
        }
    }
    // rounding can leave a tiny negative sum for identical inputs
    Ok(kl.max(0.0))
}

/// Least-squares line `Y = slope·X + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionalMap {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

impl FunctionalMap {
    pub fn eval(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

pub fn fit_linear(points: &[(f64, f64)]) -> Result<FunctionalMap> {
    let n = points.len() as f64;
    let first = points.first().ok_or(Error::EmptyData)?.0;
    if points.iter().all(|p| p.0 == first) {
        return Err(Error::InsufficientData("need at least 2 distinct X values".into()));
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = points.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(FunctionalMap {
        slope,
        intercept,
        r_squared,
    })
}

/// Ranks starting at 1; ties share their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InsufficientData(
            "need two equal-length series of 2+ values".into(),
        ));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::InsufficientData(
            "constant series has no rank correlation".into(),
        ));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// How a specimen is reduced to one value per pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarFeature {
    /// Score on one component of a fitted projection.
    Projection { projection: Projection, component: usize },
    /// Raw value of one band.
    Band { wavelength_nm: u32 },
}

impl ScalarFeature {
    pub fn pixel_values(&self, sample: &Sample) -> Result<Vec<f64>> {
        match self {
            ScalarFeature::Projection { projection, component } => {
                if *component >= projection.n_components() {
                    return Err(Error::param(format!(
                        "projection has {} components, asked for {}",
                        projection.n_components(),
                        component + 1
                    )));
                }
                let rows: Array2<f64> = pixel_rows(&sample.cube);
                let scores = projection.transform(&rows)?;
                Ok(scores.column(*component).to_vec())
            }
            ScalarFeature::Band { wavelength_nm } => sample
                .cube
                .band(*wavelength_nm)
                .map(|f| f.data().to_vec())
                .ok_or(Error::MissingFrame(*wavelength_nm)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveParams {
    pub histogram: HistogramParams,
    /// Values are mapped linearly onto the histogram range from this
    /// interval; `None` uses the min and max over all specimens.
    pub value_range: Option<(f64, f64)>,
    pub reference_level: f64,
}

impl Default for CurveParams {
    fn default() -> Self {
        CurveParams {
            histogram: HistogramParams::default(),
            value_range: None,
            reference_level: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub level_pct: f64,
    pub replicate: usize,
    pub sample_id: String,
    pub kl: f64,
}

/// One KL value per specimen against the pooled reference-level histogram.
/// Points are ordered by level, then sample id; `replicate` counts within a
/// level.
pub fn adulteration_curve(
    samples: &[Sample],
    feature: &ScalarFeature,
    params: &CurveParams,
) -> Result<Vec<CurvePoint>> {
    if samples.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut ordered: Vec<&Sample> = samples.iter().collect();
    ordered.sort_by(|a, b| a.label.cmp(&b.label).then_with(|| a.id.cmp(&b.id)));
    let values: Vec<Vec<f64>> = ordered.iter().map(|s| feature.pixel_values(s)).collect::<Result<_>>()?;

    let (lo, hi) = match params.value_range {
        Some(r) => r,
        None => values
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            }),
    };
    if !(hi > lo) {
        return Err(Error::param("feature values have no spread"));
    }
    let (h_lo, h_hi) = params.histogram.range;
    let scale = |v: &f64| h_lo + (v - lo) / (hi - lo) * (h_hi - h_lo);

    let reference = Label::AdulterationPct(params.reference_level);
    let pooled: Vec<f64> = ordered
        .iter()
        .zip(&values)
        .filter(|(s, _)| s.label == reference)
        .flat_map(|(_, v)| v.iter().map(scale))
        .collect();
    if pooled.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no specimens at the reference level {}%",
            params.reference_level
        )));
    }
    let p = histogram(&pooled, &params.histogram)?;

    let mut replicate_of: BTreeMap<Label, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(ordered.len());
    for (s, v) in ordered.iter().zip(&values) {
        let scaled: Vec<f64> = v.iter().map(scale).collect();
        let q = histogram(&scaled, &params.histogram)?;
        let r = replicate_of.entry(s.label).or_default();
        out.push(CurvePoint {
            level_pct: s.label.value(),
            replicate: *r,
            sample_id: s.id.clone(),
            kl: kl_divergence(&p, &q)?,
        });
        *r += 1;
    }
    Ok(out)
}

/// Median KL per level, ascending by level.
pub fn median_by_level(points: &[CurvePoint]) -> Vec<(f64, f64)> {
    let mut groups: BTreeMap<Label, Vec<f64>> = BTreeMap::new();
    for p in points {
        groups
            .entry(Label::AdulterationPct(p.level_pct))
            .or_default()
            .push(p.kl);
    }
    groups
        .into_iter()
        .map(|(l, mut v)| {
            v.sort_by(f64::total_cmp);
            let m = v.len();
            let med = if m % 2 == 1 {
                v[m / 2]
            } else {
                0.5 * (v[m / 2 - 1] + v[m / 2])
            };
            (l.value(), med)
        })
        .collect()
}

/// CSV with header `level_pct,replicate,kl`.
pub fn write_curve_csv<W: Write>(points: &[CurvePoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "level_pct,replicate,kl")?;
    for p in points {
        writeln!(out, "{},{},{}", p.level_pct, p.replicate, p.kl)?;
    }
    Ok(())
}

pub fn save_curve_csv(points: &[CurvePoint], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_curve_csv(points, &mut buf).expect("writing to memory");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_bin(p: [f64; 2]) -> Distribution {
        Distribution {
            bin_edges: vec![0.0, 0.5, 1.0],
            probs: p.to_vec(),
        }
    }

    #[test]
    fn histogram_basics() {
        let d = histogram(&[0.3; 10], &HistogramParams::default()).unwrap();
        assert_eq!(d.probs.len(), 64);
        assert!((d.probs[19] - 1.0).abs() < 1e-7);
        assert!(d.probs.iter().enumerate().all(|(i, &p)| i == 19 || p < 1e-9));
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(
            histogram(&[], &HistogramParams::default()),
            Err(Error::EmptyData)
        ));
        let edges = histogram(&[-3.0, 1.0, 7.0], &HistogramParams::default()).unwrap();
        assert!((edges.probs[0] - 1.0 / 3.0).abs() < 1e-7);
        assert!((edges.probs[63] - 2.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn kl_two_bin_and_identity() {
        let p = two_bin([0.5, 0.5]);
        let q = two_bin([0.25, 0.75]);
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_divergence(&p, &q).unwrap() - want).abs() < 1e-12);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let other = Distribution {
            bin_edges: vec![0.0, 0.4, 1.0],
            probs: vec![0.5, 0.5],
        };
        assert!(matches!(kl_divergence(&p, &other), Err(Error::EdgeMismatch)));
    }

    #[test]
    fn fit_lines() {
        let pts: Vec<(f64, f64)> = (0..6).map(|i| (i as f64, 2.0 * i as f64 + 1.0)).collect();
        let m = fit_linear(&pts).unwrap();
        assert!((m.slope - 2.0).abs() < 1e-12 && (m.intercept - 1.0).abs() < 1e-12);
        assert!((m.r_squared - 1.0).abs() < 1e-12);
        let flat = fit_linear(&[(0.0, 3.0), (1.0, 3.0), (2.0, 3.0)]).unwrap();
        assert_eq!((flat.slope, flat.r_squared), (0.0, 0.0));
        assert!(fit_linear(&[(1.0, 0.0), (1.0, 2.0)]).is_err());
    }

    #[test]
    fn spearman_ties_and_order() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 90.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    fn dist(raw: &[f64]) -> Distribution {
        let s: f64 = raw.iter().sum();
        Distribution {
            bin_edges: (0..=raw.len()).map(|i| i as f64).collect(),
            probs: raw.iter().map(|r| r / s).collect(),
        }
    }

    proptest! {
        #[test]
        fn kl_nonnegative(a in proptest::collection::vec(1e-6f64..1.0, 8), b in proptest::collection::vec(1e-6f64..1.0, 8)) {
            prop_assert!(kl_divergence(&dist(&a), &dist(&b)).unwrap() >= 0.0);
        }

        #[test]
        fn kl_permutation_invariant(a in proptest::collection::vec(1e-6f64..1.0, 6), b in proptest::collection::vec(1e-6f64..1.0, 6), rot in 0usize..6) {
            let mut ar = a.clone();
            let mut br = b.clone();
            ar.rotate_left(rot);
            br.rotate_left(rot);
            let k1 = kl_divergence(&dist(&a), &dist(&b)).unwrap();
            let k2 = kl_divergence(&dist(&ar), &dist(&br)).unwrap();
            prop_assert!((k1 - k2).abs() < 1e-12);
        }

        #[test]
        fn fit_linear_exact(slope in -10.0f64..10.0, intercept in -10.0f64..10.0) {
            let pts: Vec<(f64, f64)> = (0..9).map(|i| (5.0 * i as f64, slope * 5.0 * i as f64 + intercept)).collect();
            let m = fit_linear(&pts).unwrap();
            prop_assert!((m.slope - slope).abs() < 1e-9);
            prop_assert!((m.intercept - intercept).abs() < 1e-9);
        }
    }
}
