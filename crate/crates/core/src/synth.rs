//! Synthetic chamber and specimen simulator.
//!
//! Stands in for the physical device: Gaussian LED emission bands, a
//! linear-mixing (reflectance) or Beer-Lambert (transmittance) specimen
//! model, a tilted and radially falling illumination field, shot noise,
//! a fixed-pattern dark frame and 16-bit clamping. Output is deterministic
//! for a given seed; every band and every sample draws from its own
//! keyed random stream.

use std::f64::consts::LN_2;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::{BandSet, Dataset, Domain, Frame, Label, Mode, Sample, SpectralCube, RAW_MAX};
use crate::error::{Error, Result};
use crate::rng;

/// Emission band of one LED type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedSpec {
    pub peak_nm: u32,
    pub fwhm_nm: f64,
    pub relative_power: f64,
}

impl LedSpec {
    pub fn new(peak_nm: u32, fwhm_nm: f64, relative_power: f64) -> Result<Self> {
        let led = LedSpec {
            peak_nm,
            fwhm_nm,
            relative_power,
        };
        led.validate()?;
        Ok(led)
    }

    fn validate(&self) -> Result<()> {
        if !(self.fwhm_nm > 0.0 && self.fwhm_nm.is_finite()) {
            return Err(Error::param(format!("LED {} nm: fwhm must be > 0", self.peak_nm)));
        }
        if !(self.relative_power > 0.0 && self.relative_power.is_finite()) {
            return Err(Error::param(format!("LED {} nm: power must be > 0", self.peak_nm)));
        }
        Ok(())
    }

    /// Default emission parameters for a panel wavelength. Widths follow
    /// the usual datasheet spread (narrower in the UV/visible, wider in the
    /// NIR); powers are relative and only need to be unequal.
    pub fn panel_default(peak_nm: u32) -> LedSpec {
        let (fwhm_nm, relative_power) = match peak_nm {
            365 => (20.0, 0.55),
            405 => (22.0, 0.80),
            428 => (25.0, 0.70),
            473 => (28.0, 0.90),
            530 => (35.0, 1.00),
            575 => (30.0, 0.60),
            621 => (25.0, 0.75),
            660 => (25.0, 0.85),
            735 => (35.0, 0.65),
            770 => (40.0, 0.70),
            830 => (45.0, 0.95),
            850 => (45.0, 0.90),
            890 => (50.0, 0.80),
            940 => (50.0, 0.70),
            nm if nm < 700 => (30.0, 1.0),
            _ => (45.0, 1.0),
        };
        LedSpec {
            peak_nm,
            fwhm_nm,
            relative_power,
        }
    }
}

/// Relative intensity of `led` at `wavelength_nm`; equals the LED's
/// relative power at the peak and half of it at `peak ± fwhm/2`.
pub fn led_emission(led: &LedSpec, wavelength_nm: f64) -> f64 {
    let d = wavelength_nm - f64::from(led.peak_nm);
    led.relative_power * (-4.0 * LN_2 * d * d / (led.fwhm_nm * led.fwhm_nm)).exp()
}

/// Piecewise-linear function of wavelength, constant beyond its end points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct Curve(Vec<(f64, f64)>);

impl Curve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Curve> {
        if points.is_empty() {
            return Err(Error::param("curve needs at least one point"));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::param("curve points must be finite"));
        }
        if points.windows(2).any(|p| p[0].0 >= p[1].0) {
            return Err(Error::param("curve wavelengths must be strictly increasing"));
        }
        Ok(Curve(points))
    }

    pub fn constant(value: f64) -> Curve {
        Curve(vec![(0.0, value)])
    }

    /// Samples `f` every `step_nm` over `[lo_nm, hi_nm]`.
    pub fn sampled(lo_nm: f64, hi_nm: f64, step_nm: f64, f: impl Fn(f64) -> f64) -> Curve {
        let n = ((hi_nm - lo_nm) / step_nm).round() as usize;
        Curve(
            (0..=n)
                .map(|i| {
                    let x = lo_nm + i as f64 * step_nm;
                    (x, f(x))
                })
                .collect(),
        )
    }

    pub fn eval(&self, nm: f64) -> f64 {
        let pts = &self.0;
        if nm <= pts[0].0 {
            return pts[0].1;
        }
        let last = pts[pts.len() - 1];
        if nm >= last.0 {
            return last.1;
        }
        let i = pts.partition_point(|p| p.0 <= nm);
        let (x0, y0) = pts[i - 1];
        let (x1, y1) = pts[i];
        y0 + (y1 - y0) * (nm - x0) / (x1 - x0)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.0
    }
}

impl TryFrom<Vec<(f64, f64)>> for Curve {
    type Error = Error;
    fn try_from(v: Vec<(f64, f64)>) -> Result<Self> {
        Curve::new(v)
    }
}

impl From<Curve> for Vec<(f64, f64)> {
    fn from(c: Curve) -> Self {
        c.0
    }
}

/// Optical properties of one pure substance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    pub name: String,
    /// Albedo in `[0, 1]`.
    pub reflectance: Curve,
    /// Absorption coefficient per unit depth, `>= 0`.
    pub absorbance: Curve,
}

impl MaterialSpec {
    pub fn new(name: impl Into<String>, reflectance: Curve, absorbance: Curve) -> Result<Self> {
        let m = MaterialSpec {
            name: name.into(),
            reflectance,
            absorbance,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self
            .reflectance
            .points()
            .iter()
            .any(|&(_, a)| !(0.0..=1.0).contains(&a))
        {
            return Err(Error::param(format!("{}: albedo outside [0, 1]", self.name)));
        }
        if self.absorbance.points().iter().any(|&(_, a)| a < 0.0) {
            return Err(Error::param(format!("{}: negative absorbance", self.name)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub material: MaterialSpec,
    pub fraction: f64,
}

/// A specimen: weighted materials plus an optical path length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub components: Vec<Component>,
    pub depth: f64,
}

impl MixtureSpec {
    pub fn new(components: Vec<(MaterialSpec, f64)>, depth: f64) -> Result<Self> {
        let m = MixtureSpec {
            components: components
                .into_iter()
                .map(|(material, fraction)| Component { material, fraction })
                .collect(),
            depth,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn pure(material: MaterialSpec, depth: f64) -> Result<Self> {
        MixtureSpec::new(vec![(material, 1.0)], depth)
    }

    /// Binary mixture with `adulterant_fraction` of the second material.
    pub fn binary(
        base: &MaterialSpec,
        adulterant: &MaterialSpec,
        adulterant_fraction: f64,
        depth: f64,
    ) -> Result<Self> {
        MixtureSpec::new(
            vec![
                (base.clone(), 1.0 - adulterant_fraction),
                (adulterant.clone(), adulterant_fraction),
            ],
            depth,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::param("mixture has no components"));
        }
        for c in &self.components {
            c.material.validate()?;
            if !(0.0..=1.0).contains(&c.fraction) {
                return Err(Error::param(format!(
                    "fraction {} of {} outside [0, 1]",
                    c.fraction, c.material.name
                )));
            }
        }
        let total: f64 = self.components.iter().map(|c| c.fraction).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::param(format!("fractions sum to {total}, expected 1")));
        }
        if !(self.depth > 0.0 && self.depth.is_finite()) {
            return Err(Error::param("depth must be > 0"));
        }
        Ok(())
    }

    pub fn albedo(&self, nm: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.fraction * c.material.reflectance.eval(nm))
            .sum()
    }

    pub fn transmission(&self, nm: f64) -> f64 {
        let a: f64 = self
            .components
            .iter()
            .map(|c| c.fraction * c.material.absorbance.eval(nm))
            .sum();
        (-a * self.depth).exp()
    }
}

/// Emission-weighted mean albedo (reflectance) or transmission
/// (transmittance) of `mixture` under `led`, in `[0, 1]`.
///
/// Trapezoid rule on a ~1 nm grid over `peak ± 3·fwhm`.
pub fn effective_band_response(mixture: &MixtureSpec, led: &LedSpec, mode: Mode) -> f64 {
    let span = 6.0 * led.fwhm_nm;
    let n = span.ceil().max(1.0) as usize;
    let h = span / n as f64;
    let lo = f64::from(led.peak_nm) - 3.0 * led.fwhm_nm;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=n {
        let nm = lo + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        let e = w * led_emission(led, nm);
        let s = match mode {
            Mode::Reflectance => mixture.albedo(nm),
            Mode::Transmittance => mixture.transmission(nm),
        };
        num += e * s;
        den += e;
    }
    num / den
}

/// Spatial illumination field over the imaging plane:
/// `base · (1 + tilt_x·(x−cx)/W + tilt_y·(y−cy)/H) · exp(−radial_falloff·r²)`
/// with `r` the distance from the centre in frame-normalized units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IlluminationProfile {
    pub tilt_x: f64,
    pub tilt_y: f64,
    pub radial_falloff: f64,
    /// Pixel coordinates of the falloff centre; frame centre when absent.
    pub center: Option<(f64, f64)>,
    pub base: f64,
}

impl Default for IlluminationProfile {
    /// Tilt (0.15, 0.10) with the falloff solved for a 70% darkest-corner
    /// to peak ratio.
    fn default() -> Self {
        IlluminationProfile::with_corner_ratio(0.15, 0.10, 0.7, 0.85).expect("default profile is attainable")
    }
}

impl IlluminationProfile {
    pub fn flat(base: f64) -> Self {
        IlluminationProfile {
            tilt_x: 0.0,
            tilt_y: 0.0,
            radial_falloff: 0.0,
            center: None,
            base,
        }
    }

    /// Solves for the radial falloff that gives the requested ratio of the
    /// darkest corner to the brightest point.
    pub fn with_corner_ratio(tilt_x: f64, tilt_y: f64, ratio: f64, base: f64) -> Result<Self> {
        if !(0.0 < ratio && ratio <= 1.0) {
            return Err(Error::param("corner ratio must be in (0, 1]"));
        }
        let mut p = IlluminationProfile {
            tilt_x,
            tilt_y,
            radial_falloff: 0.0,
            center: None,
            base,
        };
        const PROBE: usize = 101;
        if p.corner_peak_ratio(PROBE, PROBE) < ratio {
            return Err(Error::param("tilt alone already darkens the corners past the ratio"));
        }
        let (mut lo, mut hi) = (0.0, 20.0);
        for _ in 0..60 {
            p.radial_falloff = 0.5 * (lo + hi);
            if p.corner_peak_ratio(PROBE, PROBE) > ratio {
                lo = p.radial_falloff;
            } else {
                hi = p.radial_falloff;
            }
        }
        p.radial_falloff = 0.5 * (lo + hi);
        Ok(p)
    }

    fn center_px(&self, width: usize, height: usize) -> (f64, f64) {
        self.center
            .unwrap_or(((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0))
    }

    pub fn at(&self, x: usize, y: usize, width: usize, height: usize) -> f64 {
        let (cx, cy) = self.center_px(width, height);
        let u = (x as f64 - cx) / width as f64;
        let v = (y as f64 - cy) / height as f64;
        self.base * (1.0 + self.tilt_x * u + self.tilt_y * v) * (-self.radial_falloff * (u * u + v * v)).exp()
    }

    pub fn map(&self, width: usize, height: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                out.push(self.at(x, y, width, height));
            }
        }
        out
    }

    /// Darkest corner divided by the brightest pixel.
    pub fn corner_peak_ratio(&self, width: usize, height: usize) -> f64 {
        let map = self.map(width, height);
        let peak = map.iter().copied().fold(f64::MIN, f64::max);
        let corners = [
            map[0],
            map[width - 1],
            map[(height - 1) * width],
            map[height * width - 1],
        ];
        corners.iter().copied().fold(f64::MAX, f64::min) / peak
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(self.base > 0.0 && self.base <= 1.0) {
            return Err(Error::param("illumination base must be in (0, 1]"));
        }
        if self.radial_falloff < 0.0 {
            return Err(Error::param("radial falloff must be >= 0"));
        }
        // The linear factor is extremal at the corners.
        for &(x, y) in &[(0, 0), (width - 1, 0), (0, height - 1), (width - 1, height - 1)] {
            if self.at(x, y, width, height) <= 0.0 {
                return Err(Error::param("illumination not positive over the frame"));
            }
        }
        Ok(())
    }
}

/// Sensor and capture noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Fixed-pattern dark signal, counts.
    pub dark_mean: f64,
    pub dark_sd: f64,
    /// Per-pixel multiplicative noise, relative standard deviation.
    pub shot_sd_fraction: f64,
    /// Relative amplitude of capture-to-capture intensity drift.
    pub drift_amplitude: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            dark_mean: 600.0,
            dark_sd: 40.0,
            shot_sd_fraction: 0.02,
            drift_amplitude: 0.04,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            dark_mean: 0.0,
            dark_sd: 0.0,
            shot_sd_fraction: 0.0,
            drift_amplitude: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.dark_mean,
            self.dark_sd,
            self.shot_sd_fraction,
            self.drift_amplitude,
        ];
        if all.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::param("noise parameters must be finite and >= 0"))
        }
    }
}

/// Everything needed to render one capture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    #[serde(default = "default_scene_id")]
    pub sample_id: String,
    #[serde(default = "default_scene_label")]
    pub label: Label,
    #[serde(default)]
    pub band_set: BandSet,
    pub mode: Mode,
    pub mixture: MixtureSpec,
    #[serde(default)]
    pub illumination: IlluminationProfile,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default = "default_size")]
    pub width: usize,
    #[serde(default = "default_size")]
    pub height: usize,
    #[serde(default)]
    pub rng_seed: u64,
    /// Per-band LEDs; panel defaults when absent.
    #[serde(default)]
    pub leds: Option<Vec<LedSpec>>,
    /// Overall specimen gain (placement, surface finish).
    #[serde(default = "one")]
    pub gain: f64,
}

fn default_scene_id() -> String {
    "scene".into()
}
fn default_scene_label() -> Label {
    Label::ClassId(0)
}
fn default_size() -> usize {
    100
}
fn one() -> f64 {
    1.0
}

impl SceneConfig {
    pub fn new(mode: Mode, mixture: MixtureSpec) -> Self {
        SceneConfig {
            sample_id: default_scene_id(),
            label: default_scene_label(),
            band_set: BandSet::full(),
            mode,
            mixture,
            illumination: IlluminationProfile::default(),
            noise: NoiseSpec::default(),
            width: 100,
            height: 100,
            rng_seed: 0,
            leds: None,
            gain: 1.0,
        }
    }

    pub fn leds(&self) -> Result<Vec<LedSpec>> {
        match &self.leds {
            None => Ok(self
                .band_set
                .wavelengths()
                .iter()
                .map(|&nm| LedSpec::panel_default(nm))
                .collect()),
            Some(leds) => {
                if leds.len() != self.band_set.len()
                    || leds
                        .iter()
                        .zip(self.band_set.wavelengths())
                        .any(|(l, &nm)| l.peak_nm != nm)
                {
                    return Err(Error::param("LED list must match the band set one-to-one"));
                }
                for l in leds {
                    l.validate()?;
                }
                Ok(leds.clone())
            }
        }
    }

    /// Pre-illumination response per band: LED power times the specimen's
    /// effective band response, times the specimen gain.
    pub fn band_responses(&self) -> Result<Vec<f64>> {
        Ok(self
            .leds()?
            .iter()
            .map(|led| self.gain * led.relative_power * effective_band_response(&self.mixture, led, self.mode))
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::param("scene dimensions must be positive"));
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::param("gain must be > 0"));
        }
        self.mixture.validate()?;
        self.illumination.validate(self.width, self.height)?;
        self.noise.validate()?;
        self.leds()?;
        Ok(())
    }
}

const DARK_STREAM: u64 = u64::MAX;
const DRIFT_STREAM: u64 = u64::MAX - 1;

fn render_scaled(scene: &SceneConfig, intensity_factor: f64) -> Result<Sample> {
    scene.validate()?;
    let (w, h) = (scene.width, scene.height);
    let responses = scene.band_responses()?;
    let illum = scene.illumination.map(w, h);

    let noise = &scene.noise;
    let mut dark_rng = rng::stream(&[scene.rng_seed, DARK_STREAM]);
    let dark: Vec<f64> = (0..w * h)
        .map(|_| {
            let n: f64 = dark_rng.sample(StandardNormal);
            (noise.dark_mean + noise.dark_sd * n).round().clamp(0.0, RAW_MAX)
        })
        .collect();

    let frames = responses
        .iter()
        .enumerate()
        .map(|(b, &resp)| {
            let mut rng = rng::stream(&[scene.rng_seed, b as u64]);
            let data = illum
                .iter()
                .zip(&dark)
                .map(|(&il, &d)| {
                    let n: f64 = rng.sample(StandardNormal);
                    let signal = RAW_MAX * resp * il * intensity_factor * (1.0 + noise.shot_sd_fraction * n);
                    (signal.round() + d).clamp(0.0, RAW_MAX)
                })
                .collect();
            Frame::raw(w, h, data)
        })
        .collect::<Result<Vec<_>>>()?;

    let cube = SpectralCube::new(
        scene.band_set.clone(),
        scene.mode,
        Domain::Raw,
        frames,
        Frame::raw(w, h, dark)?,
    )?;
    Ok(Sample::new(scene.sample_id.clone(), cube, scene.label))
}

/// Renders one capture of the scene.
pub fn render(scene: &SceneConfig) -> Result<Sample> {
    render_scaled(scene, 1.0)
}

/// Repeated captures of the same scene with a per-capture intensity factor
/// `1 + drift_amplitude·u_k`, `u_k` uniform in `[-1, 1]`.
pub fn render_repeat_series(scene: &SceneConfig, n_times: usize, drift_amplitude: f64) -> Result<Vec<Sample>> {
    if n_times < 2 {
        return Err(Error::InsufficientData(format!(
            "a repeat series needs at least 2 captures, got {n_times}"
        )));
    }
    if !(0.0..1.0).contains(&drift_amplitude) {
        return Err(Error::param("drift amplitude must be in [0, 1)"));
    }
    (0..n_times)
        .map(|k| {
            let u: f64 = rng::stream(&[scene.rng_seed, DRIFT_STREAM, k as u64]).random_range(-1.0..=1.0);
            let mut s = render_scaled(scene, 1.0 + drift_amplitude * u)?;
            s.id = format!("{}-t{:02}", scene.sample_id, k);
            Ok(s)
        })
        .collect()
}

/// Built-in specimen materials. All curves are smooth inventions that give
/// the case studies their qualitative behaviour; none are measured spectra.
pub mod materials {
    use super::{Curve, MaterialSpec};

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn bump(nm: f64, center: f64, width: f64) -> f64 {
        let z = (nm - center) / width;
        (-z * z).exp()
    }

    fn material(name: &str, refl: impl Fn(f64) -> f64, abs: impl Fn(f64) -> f64) -> MaterialSpec {
        MaterialSpec::new(
            name,
            Curve::sampled(300.0, 1100.0, 5.0, refl),
            Curve::sampled(300.0, 1100.0, 5.0, abs),
        )
        .expect("built-in material is valid")
    }

    /// Uniform white target: high flat albedo, no absorption.
    pub fn white_reference() -> MaterialSpec {
        MaterialSpec::new("white reference", Curve::constant(0.95), Curve::constant(0.0)).expect("valid")
    }

    pub fn turmeric_powder() -> MaterialSpec {
        material(
            "turmeric powder",
            |nm| 0.12 + 0.58 * sigmoid((nm - 515.0) / 18.0) - 0.05 * sigmoid((nm - 800.0) / 60.0),
            |nm| 0.2 + 2.2 * bump(nm, 425.0, 45.0),
        )
    }

    /// Rice flour as seen mixed into turmeric: a near copy of the turmeric
    /// albedo, so adjacent levels overlap within reflectance noise.
    pub fn rice_flour_powder() -> MaterialSpec {
        material(
            "rice flour powder",
            |nm| {
                let t = 0.12 + 0.58 * sigmoid((nm - 515.0) / 18.0) - 0.05 * sigmoid((nm - 800.0) / 60.0);
                (t + 0.0075 + 0.006 * bump(nm, 450.0, 60.0) - 0.0045 * sigmoid((nm - 750.0) / 40.0)).min(1.0)
            },
            |nm| 0.6 + 0.25 * (500.0 / nm).powi(2),
        )
    }

    pub fn turmeric_solution() -> MaterialSpec {
        material(
            "turmeric solution",
            |_| 0.1,
            |nm| 0.15 + 1.6 * bump(nm, 425.0, 40.0) + 0.1 * bump(nm, 660.0, 80.0),
        )
    }

    /// Dissolved rice flour: broadband turbidity, stronger toward the blue.
    pub fn rice_flour_solution() -> MaterialSpec {
        material(
            "rice flour solution",
            |_| 0.1,
            |nm| 0.35 + 0.5 * (450.0 / nm).powi(3) + 0.3 * bump(nm, 940.0, 60.0),
        )
    }

    pub fn coconut_oil() -> MaterialSpec {
        material("coconut oil", |_| 0.08, |nm| 0.03 + 0.6 * bump(nm, 360.0, 25.0))
    }

    /// Palm oil: carotenoid absorption across the blue and green.
    pub fn palm_oil() -> MaterialSpec {
        material(
            "palm oil",
            |_| 0.08,
            |nm| {
                0.03 + 0.6 * bump(nm, 360.0, 25.0)
                    + 0.336 * bump(nm, 470.0, 45.0)
                    + 0.096 * bump(nm, 370.0, 30.0)
                    + 0.018 * bump(nm, 900.0, 60.0)
            },
        )
    }

    /// Deterministic palette of `n` distinct colour patches.
    pub fn color_palette(n: usize) -> Vec<MaterialSpec> {
        (0..n)
            .map(|i| {
                // Low-discrepancy spread of patch parameters.
                let g = |k: f64| ((i as f64 + 1.0) * k).fract();
                let base = 0.08 + 0.25 * g(0.618_034);
                let amp = 0.25 + 0.45 * g(0.414_214);
                let center = 380.0 + 560.0 * g(0.754_878);
                let width = 40.0 + 90.0 * g(0.569_840);
                let edge_at = 450.0 + 400.0 * g(0.324_718);
                let edge = 0.3 * g(0.866_025) * if i % 2 == 0 { 1.0 } else { -1.0 };
                material(
                    &format!("patch {i:02}"),
                    move |nm| {
                        (base
                            + amp * bump(nm, center, width)
                            + edge * sigmoid((nm - edge_at) / 25.0)
                            + 0.3 * edge.abs())
                        .clamp(0.02, 0.98)
                    },
                    |_| 0.0,
                )
            })
            .collect()
    }
}

/// Which of the three studies to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStudyKind {
    Turmeric,
    CoconutOil,
    ColorChart,
}

impl CaseStudyKind {
    pub fn name(self) -> &'static str {
        match self {
            CaseStudyKind::Turmeric => "turmeric",
            CaseStudyKind::CoconutOil => "coconut_oil",
            CaseStudyKind::ColorChart => "color_chart",
        }
    }

    pub fn modes(self) -> &'static [Mode] {
        match self {
            CaseStudyKind::Turmeric => &Mode::ALL,
            CaseStudyKind::CoconutOil => &[Mode::Transmittance],
            CaseStudyKind::ColorChart => &[Mode::Reflectance],
        }
    }

    pub fn default_replicates(self) -> usize {
        match self {
            CaseStudyKind::Turmeric => 9,
            CaseStudyKind::CoconutOil => 8,
            CaseStudyKind::ColorChart => 4,
        }
    }

    fn stream_id(self) -> u64 {
        match self {
            CaseStudyKind::Turmeric => 1,
            CaseStudyKind::CoconutOil => 2,
            CaseStudyKind::ColorChart => 3,
        }
    }
}

impl std::str::FromStr for CaseStudyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "turmeric" => Ok(CaseStudyKind::Turmeric),
            "coconut_oil" | "coconut-oil" | "oil" => Ok(CaseStudyKind::CoconutOil),
            "color_chart" | "color-chart" | "colorchart" => Ok(CaseStudyKind::ColorChart),
            other => Err(Error::param(format!("unknown case study {other:?}"))),
        }
    }
}

/// Knobs for dataset generation. Every field has a default, so `{}` is a
/// valid config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaseStudyConfig {
    pub band_set: BandSet,
    /// Rendered frame size before cropping.
    pub width: usize,
    pub height: usize,
    pub illumination: IlluminationProfile,
    pub noise: NoiseSpec,
    pub leds: Option<Vec<LedSpec>>,
    /// Adulteration levels in percent (ignored for the colour chart).
    pub levels_pct: Vec<f64>,
    /// Replicates per level or colour; kind default when absent.
    pub replicates: Option<usize>,
    pub color_classes: usize,
    /// Preparation error: standard deviation of the actual adulterant
    /// fraction around the nominal level (absolute fraction).
    pub fraction_jitter_sd: f64,
    /// Relative standard deviation of per-capture specimen gain.
    pub gain_jitter_sd: f64,
    /// Optical path length for transmittance captures.
    pub depth: f64,
    /// Overrides for the `(base, adulterant)` materials in each mode.
    pub reflectance_materials: Option<(MaterialSpec, MaterialSpec)>,
    pub transmittance_materials: Option<(MaterialSpec, MaterialSpec)>,
}

impl Default for CaseStudyConfig {
    fn default() -> Self {
        CaseStudyConfig {
            band_set: BandSet::full(),
            width: 120,
            height: 120,
            illumination: IlluminationProfile::default(),
            noise: NoiseSpec::default(),
            leds: None,
            levels_pct: (0..=8).map(|i| f64::from(i) * 5.0).collect(),
            replicates: None,
            color_classes: 24,
            fraction_jitter_sd: 0.002,
            gain_jitter_sd: 0.003,
            depth: 1.0,
            reflectance_materials: None,
            transmittance_materials: None,
        }
    }
}

/// Rendered captures of one study. Turmeric fills both modes with paired
/// ids; the other studies fill one mode. `white` holds one uniform
/// reference capture per populated mode.
#[derive(Clone, Debug)]
pub struct CaseStudyData {
    pub kind: CaseStudyKind,
    pub reflectance: Dataset,
    pub transmittance: Dataset,
    pub white: Vec<Sample>,
}

impl CaseStudyData {
    pub fn dataset(&self, mode: Mode) -> &Dataset {
        match mode {
            Mode::Reflectance => &self.reflectance,
            Mode::Transmittance => &self.transmittance,
        }
    }

    pub fn white(&self, mode: Mode) -> Option<&Sample> {
        self.white.iter().find(|s| s.mode() == mode)
    }
}

struct Specimen {
    id: String,
    label: Label,
    fraction: f64,
    color: usize,
}

fn mode_stream(mode: Mode) -> u64 {
    match mode {
        Mode::Reflectance => 0,
        Mode::Transmittance => 1,
    }
}

/// Renders a full study: every specimen in every mode of the study, plus a
/// white reference per mode.
pub fn generate_case_study(kind: CaseStudyKind, config: &CaseStudyConfig, master_seed: u64) -> Result<CaseStudyData> {
    let replicates = config.replicates.unwrap_or(kind.default_replicates());
    if replicates == 0 {
        return Err(Error::param("replicates must be >= 1"));
    }
    let kid = kind.stream_id();

    let mut specimens = Vec::new();
    match kind {
        CaseStudyKind::ColorChart => {
            for c in 0..config.color_classes {
                for r in 0..replicates {
                    specimens.push(Specimen {
                        id: format!("color-c{c:02}-r{r}"),
                        label: Label::ClassId(c as u32),
                        fraction: 0.0,
                        color: c,
                    });
                }
            }
        }
        _ => {
            let prefix = kind.name();
            for &pct in &config.levels_pct {
                let label = Label::pct(pct)?;
                for r in 0..replicates {
                    let idx = specimens.len() as u64;
                    let jitter: f64 = rng::stream(&[master_seed, kid, idx, 0xF4AC]).sample::<f64, _>(StandardNormal)
                        * config.fraction_jitter_sd;
                    specimens.push(Specimen {
                        id: format!("{prefix}-p{:04.1}-r{r}", pct),
                        label,
                        fraction: (pct / 100.0 + jitter).clamp(0.0, 1.0),
                        color: 0,
                    });
                }
            }
        }
    }

    let palette = if kind == CaseStudyKind::ColorChart {
        materials::color_palette(config.color_classes)
    } else {
        Vec::new()
    };
    let (r_base, r_adult) = config
        .reflectance_materials
        .clone()
        .unwrap_or_else(|| (materials::turmeric_powder(), materials::rice_flour_powder()));
    let (t_base, t_adult) = config.transmittance_materials.clone().unwrap_or_else(|| match kind {
        CaseStudyKind::CoconutOil => (materials::coconut_oil(), materials::palm_oil()),
        _ => (materials::turmeric_solution(), materials::rice_flour_solution()),
    });

    let scene_for = |mode: Mode, mixture: MixtureSpec, id: String, label: Label, seed: u64, gain: f64| SceneConfig {
        sample_id: id,
        label,
        band_set: config.band_set.clone(),
        mode,
        mixture,
        illumination: config.illumination.clone(),
        noise: config.noise.clone(),
        width: config.width,
        height: config.height,
        rng_seed: seed,
        leds: config.leds.clone(),
        gain,
    };

    let render_mode = |mode: Mode| -> Result<Dataset> {
        let samples = specimens
            .par_iter()
            .enumerate()
            .map(|(i, sp)| {
                let key = [master_seed, kid, i as u64, mode_stream(mode)];
                let seed = rng::stream_seed(&key);
                let gain_noise: f64 = rng::stream(&[seed, 0x6A1]).sample(StandardNormal);
                let gain = (1.0 + config.gain_jitter_sd * gain_noise).max(0.05);
                let mixture = match (kind, mode) {
                    (CaseStudyKind::ColorChart, _) => MixtureSpec::pure(palette[sp.color].clone(), config.depth)?,
                    (_, Mode::Reflectance) => MixtureSpec::binary(&r_base, &r_adult, sp.fraction, config.depth)?,
                    (_, Mode::Transmittance) => MixtureSpec::binary(&t_base, &t_adult, sp.fraction, config.depth)?,
                };
                render(&scene_for(mode, mixture, sp.id.clone(), sp.label, seed, gain))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples)
    };

    let mut data = CaseStudyData {
        kind,
        reflectance: Dataset::default(),
        transmittance: Dataset::default(),
        white: Vec::new(),
    };
    for &mode in kind.modes() {
        let ds = render_mode(mode)?;
        match mode {
            Mode::Reflectance => data.reflectance = ds,
            Mode::Transmittance => data.transmittance = ds,
        }
        let white_seed = rng::stream_seed(&[master_seed, kid, 0x0057_4817, mode_stream(mode)]);
        let mixture = MixtureSpec::pure(materials::white_reference(), config.depth)?;
        data.white.push(render(&scene_for(
            mode,
            mixture,
            format!("white-{}", mode.as_str()),
            Label::ClassId(0),
            white_seed,
            1.0,
        ))?);
    }
    Ok(data)
}
