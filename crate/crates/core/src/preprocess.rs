//! Correction chain applied to every capture before feature extraction:
//! crop, dark-frame subtraction, flat-field (spatial) gain, per-band
//! (spectral) gain, bilateral denoising.

use serde::{Deserialize, Serialize};

use crate::cube::{Domain, Frame, Mode, Sample, SpectralCube};
use crate::error::{Error, Result};

/// Dark-subtracts and rescales to `[0, 1]`:
/// `max(0, raw − dark) / 65535`. The output dark frame is all zero.
pub fn subtract_dark(cube: &SpectralCube) -> Result<SpectralCube> {
    let scale = cube.domain().max_value();
    let dark = cube.dark().data();
    let bands = cube
        .bands()
        .iter()
        .map(|f| {
            let data = f
                .data()
                .iter()
                .zip(dark)
                .map(|(&v, &d)| ((v - d).max(0.0) / scale).min(1.0))
                .collect();
            f.with_data(data, 1.0)
        })
        .collect();
    let zero = cube.dark().with_data(vec![0.0; dark.len()], 1.0);
    cube.with_frames(Domain::Normalized, bands, zero)
}

/// Rescales to `[0, 1]` without touching the dark signal.
pub fn to_normalized(cube: &SpectralCube) -> Result<SpectralCube> {
    let scale = cube.domain().max_value();
    let conv = |f: &Frame| f.with_data(f.data().iter().map(|v| v / scale).collect(), 1.0);
    cube.with_frames(
        Domain::Normalized,
        cube.bands().iter().map(conv).collect(),
        conv(cube.dark()),
    )
}

/// Mean filter over a `window × window` neighbourhood with edge replication.
pub fn box_blur(frame: &Frame, window: usize) -> Frame {
    let (w, h) = frame.dims();
    let r = (window / 2) as isize;
    let src = frame.data();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    // Separable: horizontal pass then vertical pass.
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for dx in -r..=r {
                acc += row[clamp(x as isize + dx, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    let norm = ((2 * r + 1) * (2 * r + 1)) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                acc += tmp[clamp(y as isize + dy, h) * w + x];
            }
            out[y * w + x] = acc / norm;
        }
    }
    frame.with_data(out, frame.saturation_level())
}

/// Parameters of the flat-field fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpatialFitParams {
    /// Box-blur window applied to the white reference (odd).
    pub window: usize,
    /// Pixels dimmer than `floor · max` are flagged and their gain capped
    /// at `1 / floor`.
    pub floor: f64,
}

impl Default for SpatialFitParams {
    fn default() -> Self {
        SpatialFitParams {
            window: 11,
            floor: 0.05,
        }
    }
}

/// Per-band, per-pixel multiplicative flat-field correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialGain {
    pub width: usize,
    pub height: usize,
    pub wavelengths: Vec<u32>,
    /// `gains[b][y * width + x]`.
    pub gains: Vec<Vec<f64>>,
    /// Pixels where the reference fell below the floor.
    pub flagged: Vec<Vec<bool>>,
}

impl SpatialGain {
    /// Pixel mask that is unflagged in every band.
    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.width * self.height)
            .map(|i| self.flagged.iter().all(|f| !f[i]))
            .collect()
    }
}

/// Fits `g_b = max(s_b) / s_b` where `s_b` is the smoothed white reference.
pub fn fit_spatial_gain(white: &SpectralCube, params: &SpatialFitParams) -> Result<SpatialGain> {
    if params.window == 0 || params.window.is_multiple_of(2) {
        return Err(Error::param("smoothing window must be odd and >= 1"));
    }
    if !(params.floor > 0.0 && params.floor < 1.0) {
        return Err(Error::param("floor must be in (0, 1)"));
    }
    let mut gains = Vec::with_capacity(white.bands().len());
    let mut flagged = Vec::with_capacity(white.bands().len());
    for (nm, frame) in white.iter() {
        let smooth = box_blur(frame, params.window);
        let peak = smooth.min_max().1;
        if peak <= 0.0 {
            return Err(Error::DegenerateReference(nm));
        }
        let cutoff = params.floor * peak;
        let (g, f): (Vec<f64>, Vec<bool>) = smooth
            .data()
            .iter()
            .map(|&s| {
                if s < cutoff {
                    (1.0 / params.floor, true)
                } else {
                    (peak / s, false)
                }
            })
            .unzip();
        gains.push(g);
        flagged.push(f);
    }
    Ok(SpatialGain {
        width: white.width(),
        height: white.height(),
        wavelengths: white.band_set().wavelengths().to_vec(),
        gains,
        flagged,
    })
}

fn check_bands(cube: &SpectralCube, wavelengths: &[u32]) -> Result<()> {
    if cube.band_set().wavelengths() != wavelengths {
        return Err(Error::InvalidBandSet(format!(
            "gain fitted for {:?}, cube has {:?}",
            wavelengths,
            cube.band_set().wavelengths()
        )));
    }
    Ok(())
}

/// Result of a clamping correction: the cube and how many pixels hit 1.
#[derive(Clone, Debug)]
pub struct Corrected {
    pub cube: SpectralCube,
    pub clamped: usize,
}

fn scale_bands(cube: &SpectralCube, factor: impl Fn(usize, usize) -> f64) -> Result<Corrected> {
    if cube.domain() != Domain::Normalized {
        return Err(Error::param(
            "gains apply to normalized cubes; subtract the dark frame first",
        ));
    }
    let mut clamped = 0;
    let bands = cube
        .bands()
        .iter()
        .enumerate()
        .map(|(b, f)| {
            let data = f
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let out = v * factor(b, i);
                    if out > 1.0 {
                        clamped += 1;
                        1.0
                    } else {
                        out
                    }
                })
                .collect();
            f.with_data(data, 1.0)
        })
        .collect();
    Ok(Corrected {
        cube: cube.with_frames(Domain::Normalized, bands, cube.dark().clone())?,
        clamped,
    })
}

/// Multiplies every band by its gain map and clamps at 1.
pub fn apply_spatial_gain(cube: &SpectralCube, gain: &SpatialGain) -> Result<Corrected> {
    if (cube.width(), cube.height()) != (gain.width, gain.height) {
        return Err(Error::DimensionMismatch {
            expected: (gain.width, gain.height),
            found: (cube.width(), cube.height()),
        });
    }
    check_bands(cube, &gain.wavelengths)?;
    let out = scale_bands(cube, |b, i| gain.gains[b][i])?;
    if out.clamped > 0 {
        log::warn!("spatial correction clamped {} pixels at 1.0", out.clamped);
    }
    Ok(out)
}

/// Per-band scalar balancing the device's spectral response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralGain {
    pub wavelengths: Vec<u32>,
    pub gains: Vec<f64>,
}

/// `c_b = max_b(m_b) / m_b` with `m_b` the band mean over unflagged pixels
/// (all pixels when no mask is given).
pub fn fit_spectral_gain(white: &SpectralCube, mask: Option<&[bool]>) -> Result<SpectralGain> {
    let means = white
        .iter()
        .map(|(nm, f)| {
            let (sum, n) = f
                .data()
                .iter()
                .enumerate()
                .filter(|(i, _)| mask.is_none_or(|m| m[*i]))
                .fold((0.0, 0usize), |(s, n), (_, &v)| (s + v, n + 1));
            let mean = if n == 0 { 0.0 } else { sum / n as f64 };
            if mean <= 0.0 {
                Err(Error::ZeroMeanBand(nm))
            } else {
                Ok(mean)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let top = means.iter().copied().fold(f64::MIN, f64::max);
    Ok(SpectralGain {
        wavelengths: white.band_set().wavelengths().to_vec(),
        gains: means.iter().map(|m| top / m).collect(),
    })
}

/// `out_b = min(1, in_b · c_b)`.
pub fn apply_spectral_gain(cube: &SpectralCube, gain: &SpectralGain) -> Result<Corrected> {
    check_bands(cube, &gain.wavelengths)?;
    let out = scale_bands(cube, |b, _| gain.gains[b])?;
    if out.clamped > 0 {
        log::warn!("spectral correction saturated {} pixels at 1.0", out.clamped);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BilateralParams {
    pub window: usize,
    pub sigma_s: f64,
    pub sigma_r: f64,
}

impl Default for BilateralParams {
    fn default() -> Self {
        BilateralParams {
            window: 5,
            sigma_s: 2.0,
            sigma_r: 0.1,
        }
    }
}

/// Edge-preserving smoothing: each output pixel is the mean of its window
/// weighted by a spatial Gaussian and a Gaussian on the intensity
/// difference to the centre. Borders replicate the edge pixels.
pub fn bilateral_filter(frame: &Frame, params: &BilateralParams) -> Result<Frame> {
    let BilateralParams {
        window,
        sigma_s,
        sigma_r,
    } = *params;
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::param("bilateral window must be odd and >= 1"));
    }
    if !(sigma_s > 0.0 && sigma_r > 0.0) {
        return Err(Error::param("bilateral sigmas must be > 0"));
    }
    let (w, h) = frame.dims();
    let r = (window / 2) as isize;
    let src = frame.data();

    let mut spatial = Vec::with_capacity(window * window);
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dx * dx + dy * dy) as f64;
            spatial.push((-d2 / (2.0 * sigma_s * sigma_s)).exp());
        }
    }
    let range_denom = 2.0 * sigma_r * sigma_r;

    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let center = src[y as usize * w + x as usize];
            let (mut num, mut den) = (0.0, 0.0);
            let mut k = 0;
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    let v = src[yy * w + xx];
                    let diff = v - center;
                    let wt = spatial[k] * (-diff * diff / range_denom).exp();
                    num += wt * diff;
                    den += wt;
                    k += 1;
                }
            }
            // Accumulating offsets from the centre keeps flat regions exact.
            out.push(center + num / den);
        }
    }
    Ok(frame.with_data(out, frame.saturation_level()))
}

/// Crop rectangle in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Which stages run. Stages always run in the order crop, dark, spatial,
/// spectral, bilateral.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub crop: Option<Rect>,
    pub dark: bool,
    pub spatial: bool,
    pub spectral: bool,
    pub bilateral: Option<BilateralParams>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions::for_mode(Mode::Reflectance)
    }
}

impl PipelineOptions {
    /// Everything on, except the spectral gain in transmittance where
    /// near-saturated transparent specimens lose information under it.
    pub fn for_mode(mode: Mode) -> Self {
        PipelineOptions {
            crop: None,
            dark: true,
            spatial: true,
            spectral: mode == Mode::Reflectance,
            bilateral: Some(BilateralParams::default()),
        }
    }

    pub fn none() -> Self {
        PipelineOptions {
            crop: None,
            dark: false,
            spatial: false,
            spectral: false,
            bilateral: None,
        }
    }

    pub fn with_crop(mut self, crop: Option<Rect>) -> Self {
        self.crop = crop;
        self
    }
}

/// Gains fitted from a white reference capture.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub spatial: Option<SpatialGain>,
    pub spectral: Option<SpectralGain>,
}

/// Runs crop and dark subtraction on the white reference, then fits the
/// spatial gain and (on the spatially corrected reference) the spectral
/// gain, as enabled in `options`.
pub fn fit_gains(white: &Sample, options: &PipelineOptions, params: &SpatialFitParams) -> Result<Gains> {
    let mut cube = match options.crop {
        Some(r) => white.cube.crop(r.x, r.y, r.w, r.h)?,
        None => white.cube.clone(),
    };
    cube = if options.dark {
        subtract_dark(&cube)?
    } else {
        to_normalized(&cube)?
    };
    let mut gains = Gains::default();
    let mut mask = None;
    if options.spatial {
        let g = fit_spatial_gain(&cube, params)?;
        cube = apply_spatial_gain(&cube, &g)?.cube;
        mask = Some(g.valid_mask());
        gains.spatial = Some(g);
    }
    if options.spectral {
        gains.spectral = Some(fit_spectral_gain(&cube, mask.as_deref())?);
    }
    Ok(gains)
}

/// Applies the enabled stages in fixed order and records them in the
/// sample's provenance.
pub fn preprocess_pipeline(sample: &Sample, gains: &Gains, options: &PipelineOptions) -> Result<Sample> {
    let mut provenance = sample.provenance.clone();
    let mut cube = sample.cube.clone();
    if let Some(r) = options.crop {
        cube = cube.crop(r.x, r.y, r.w, r.h)?;
        provenance.push(format!("crop({},{},{},{})", r.x, r.y, r.w, r.h));
    }
    if options.dark {
        cube = subtract_dark(&cube)?;
        provenance.push("dark".into());
    } else if cube.domain() == crate::cube::Domain::Raw {
        cube = to_normalized(&cube)?;
    }
    if options.spatial {
        let g = gains
            .spatial
            .as_ref()
            .ok_or_else(|| Error::param("spatial stage enabled but no spatial gain fitted"))?;
        cube = apply_spatial_gain(&cube, g)?.cube;
        provenance.push("spatial".into());
    }
    if options.spectral {
        let g = gains
            .spectral
            .as_ref()
            .ok_or_else(|| Error::param("spectral stage enabled but no spectral gain fitted"))?;
        cube = apply_spectral_gain(&cube, g)?.cube;
        provenance.push("spectral".into());
    }
    if let Some(p) = options.bilateral {
        let bands = cube
            .bands()
            .iter()
            .map(|f| bilateral_filter(f, &p))
            .collect::<Result<Vec<_>>>()?;
        cube = cube.with_frames(cube.domain(), bands, cube.dark().clone())?;
        provenance.push(format!("bilateral({},{},{})", p.window, p.sigma_s, p.sigma_r));
    }
    Ok(Sample {
        id: sample.id.clone(),
        cube,
        label: sample.label,
        provenance,
    })
}
