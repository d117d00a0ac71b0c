//! Domain types: band sets, frames, spectral cubes, labelled samples.
//!
//! Every constructor validates its invariants, so a value of any of these
//! types that exists is well formed. Nothing here is mutated after it is
//! built; operations return new values.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest raw sensor count (16-bit).
pub const RAW_MAX: f64 = 65535.0;

/// Dominant wavelengths of the fourteen LED types on the light panels.
pub const DEFAULT_WAVELENGTHS_NM: [u32; 14] = [365, 405, 428, 473, 530, 575, 621, 660, 735, 770, 830, 850, 890, 940];

/// Ordered set of band wavelengths in nanometres.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct BandSet(Vec<u32>);

impl BandSet {
    pub fn new(wavelengths_nm: Vec<u32>) -> Result<Self> {
        if wavelengths_nm.is_empty() {
            return Err(Error::InvalidBandSet("no wavelengths".into()));
        }
        if wavelengths_nm.contains(&0) {
            return Err(Error::InvalidBandSet("wavelengths must be positive".into()));
        }
        for pair in wavelengths_nm.windows(2) {
            match pair[0].cmp(&pair[1]) {
                Ordering::Less => {}
                Ordering::Equal => return Err(Error::DuplicateWavelength(pair[0])),
                Ordering::Greater => {
                    return Err(Error::InvalidBandSet(format!(
                        "not strictly increasing at {} > {}",
                        pair[0], pair[1]
                    )))
                }
            }
        }
        Ok(BandSet(wavelengths_nm))
    }

    /// All fourteen panel wavelengths.
    pub fn full() -> Self {
        BandSet(DEFAULT_WAVELENGTHS_NM.to_vec())
    }

    /// Thirteen-band configuration: the full set minus one wavelength.
    pub fn without(&self, nm: u32) -> Result<Self> {
        if !self.0.contains(&nm) {
            return Err(Error::MissingFrame(nm));
        }
        BandSet::new(self.0.iter().copied().filter(|&w| w != nm).collect())
    }

    pub fn wavelengths(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, nm: u32) -> Option<usize> {
        self.0.binary_search(&nm).ok()
    }
}

impl Default for BandSet {
    fn default() -> Self {
        BandSet::full()
    }
}

impl TryFrom<Vec<u32>> for BandSet {
    type Error = Error;
    fn try_from(v: Vec<u32>) -> Result<Self> {
        BandSet::new(v)
    }
}

impl From<BandSet> for Vec<u32> {
    fn from(b: BandSet) -> Self {
        b.0
    }
}

/// Illumination geometry used for a capture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Reflectance,
    Transmittance,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Reflectance, Mode::Transmittance];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Reflectance => "reflectance",
            Mode::Transmittance => "transmittance",
        }
    }

    /// One-letter column tag used in matrix headers (`R:530`, `T:830`).
    pub fn tag(self) -> char {
        match self {
            Mode::Reflectance => 'R',
            Mode::Transmittance => 'T',
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reflectance" => Ok(Mode::Reflectance),
            "transmittance" => Ok(Mode::Transmittance),
            other => Err(Error::UnknownMode(other.to_string())),
        }
    }
}

/// Numeric domain of the frames in a cube.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Integer counts in `[0, 65535]`.
    Raw,
    /// Floats in `[0, 1]`.
    Normalized,
}

impl Domain {
    pub fn max_value(self) -> f64 {
        match self {
            Domain::Raw => RAW_MAX,
            Domain::Normalized => 1.0,
        }
    }
}

/// A single monochrome band image, dense row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<f64>,
    level: f64,
    saturated: bool,
}

impl Frame {
    /// Builds a frame and flags it saturated when any pixel reaches
    /// `saturation_level`.
    pub fn new(width: usize, height: usize, data: Vec<f64>, saturation_level: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::param("frame dimensions must be positive"));
        }
        if data.len() != width * height {
            return Err(Error::param(format!(
                "frame data has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        let saturated = data.iter().any(|&v| v >= saturation_level);
        Ok(Frame {
            width,
            height,
            data,
            level: saturation_level,
            saturated,
        })
    }

    pub fn raw(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|&v| !(0.0..=RAW_MAX).contains(&v) || v.fract() != 0.0) {
            return Err(Error::param("raw frame values must be integers in [0, 65535]"));
        }
        Frame::new(width, height, data, RAW_MAX)
    }

    pub fn normalized(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        Frame::new(width, height, data, 1.0)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        saturation_level: f64,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Frame::new(width, height, data, saturation_level)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_saturated(&self) -> bool {
        self.saturated
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Pixel `(i, j)` of the result is pixel `(x + i, y + j)` of `self`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Frame> {
        check_rect(x, y, w, h, self.width, self.height)?;
        let mut data = Vec::with_capacity(w * h);
        for row in y..y + h {
            let start = row * self.width + x;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        Ok(Frame {
            width: w,
            height: h,
            saturated: data.iter().any(|&v| v >= self.level),
            data,
            level: self.level,
        })
    }

    /// Value at or above which a pixel counts as saturated.
    pub fn saturation_level(&self) -> f64 {
        self.level
    }

    /// Same geometry, new pixel values.
    pub fn with_data(&self, data: Vec<f64>, saturation_level: f64) -> Frame {
        assert_eq!(data.len(), self.data.len(), "pixel count must not change");
        let saturated = data.iter().any(|&v| v >= saturation_level);
        Frame {
            width: self.width,
            height: self.height,
            data,
            level: saturation_level,
            saturated,
        }
    }
}

fn check_rect(x: usize, y: usize, w: usize, h: usize, width: usize, height: usize) -> Result<()> {
    let fits =
        w > 0 && h > 0 && x.checked_add(w).is_some_and(|r| r <= width) && y.checked_add(h).is_some_and(|b| b <= height);
    if fits {
        Ok(())
    } else {
        Err(Error::OutOfBounds {
            x,
            y,
            w,
            h,
            width,
            height,
        })
    }
}

/// One specimen captured in every band of a band set, plus its dark frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralCube {
    band_set: BandSet,
    mode: Mode,
    domain: Domain,
    bands: Vec<Frame>,
    dark: Frame,
}

impl SpectralCube {
    /// `bands[i]` is the frame for `band_set.wavelengths()[i]`.
    pub fn new(band_set: BandSet, mode: Mode, domain: Domain, bands: Vec<Frame>, dark: Frame) -> Result<Self> {
        if bands.len() != band_set.len() {
            let have = bands.len();
            let missing = band_set.wavelengths().get(have).copied().unwrap_or_default();
            return Err(if have < band_set.len() {
                Error::MissingFrame(missing)
            } else {
                Error::InvalidBandSet(format!("{} frames for {} wavelengths", have, band_set.len()))
            });
        }
        let dims = dark.dims();
        if let Some(bad) = bands.iter().find(|f| f.dims() != dims) {
            return Err(Error::DimensionMismatch {
                expected: dims,
                found: bad.dims(),
            });
        }
        Ok(SpectralCube {
            band_set,
            mode,
            domain,
            bands,
            dark,
        })
    }

    pub fn band_set(&self) -> &BandSet {
        &self.band_set
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn bands(&self) -> &[Frame] {
        &self.bands
    }

    pub fn dark(&self) -> &Frame {
        &self.dark
    }

    pub fn band(&self, nm: u32) -> Option<&Frame> {
        self.band_set.index_of(nm).map(|i| &self.bands[i])
    }

    /// `(wavelength, frame)` pairs in increasing wavelength order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, &Frame)> {
        self.band_set.wavelengths().iter().copied().zip(self.bands.iter())
    }

    pub fn width(&self) -> usize {
        self.dark.width()
    }

    pub fn height(&self) -> usize {
        self.dark.height()
    }

    /// Crops the same rectangle out of every band and the dark frame.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<SpectralCube> {
        check_rect(x, y, w, h, self.width(), self.height())?;
        let bands = self
            .bands
            .iter()
            .map(|f| f.crop(x, y, w, h))
            .collect::<Result<Vec<_>>>()?;
        let dark = self.dark.crop(x, y, w, h)?;
        SpectralCube::new(self.band_set.clone(), self.mode, self.domain, bands, dark)
    }

    /// Keeps only the listed wavelengths (e.g. to derive a 13-band cube).
    pub fn select_bands(&self, band_set: &BandSet) -> Result<SpectralCube> {
        let bands = band_set
            .wavelengths()
            .iter()
            .map(|&nm| self.band(nm).cloned().ok_or(Error::MissingFrame(nm)))
            .collect::<Result<Vec<_>>>()?;
        SpectralCube::new(band_set.clone(), self.mode, self.domain, bands, self.dark.clone())
    }

    pub(crate) fn with_frames(&self, domain: Domain, bands: Vec<Frame>, dark: Frame) -> Result<Self> {
        SpectralCube::new(self.band_set.clone(), self.mode, domain, bands, dark)
    }
}

/// Class label of a sample: an adulteration percentage or a palette index.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    AdulterationPct(f64),
    ClassId(u32),
}

impl Label {
    pub fn pct(p: f64) -> Result<Label> {
        if (0.0..=100.0).contains(&p) {
            Ok(Label::AdulterationPct(p))
        } else {
            Err(Error::param(format!("adulteration {p} outside [0, 100]")))
        }
    }

    /// Numeric value used for regression and CSV export.
    pub fn value(self) -> f64 {
        match self {
            Label::AdulterationPct(p) => p,
            Label::ClassId(c) => f64::from(c),
        }
    }
}

impl PartialEq for Label {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Label {}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Label {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Label::AdulterationPct(a), Label::AdulterationPct(b)) => a.total_cmp(b),
            (Label::ClassId(a), Label::ClassId(b)) => a.cmp(b),
            (Label::AdulterationPct(_), Label::ClassId(_)) => Ordering::Less,
            (Label::ClassId(_), Label::AdulterationPct(_)) => Ordering::Greater,
        }
    }
}

impl Hash for Label {
    fn hash<H: Hasher>(&self, state: &mut H) {
        match self {
            Label::AdulterationPct(p) => {
                0u8.hash(state);
                p.to_bits().hash(state);
            }
            Label::ClassId(c) => {
                1u8.hash(state);
                c.hash(state);
            }
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::AdulterationPct(p) => write!(f, "{p}"),
            Label::ClassId(c) => write!(f, "{c}"),
        }
    }
}

/// A labelled capture. `provenance` lists the preprocessing stages applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub cube: SpectralCube,
    pub label: Label,
    pub provenance: Vec<String>,
}

impl Sample {
    pub fn new(id: impl Into<String>, cube: SpectralCube, label: Label) -> Self {
        Sample {
            id: id.into(),
            cube,
            label,
            provenance: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.cube.mode()
    }
}

/// Samples with unique ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateSample(s.id.clone()));
            }
        }
        Ok(Dataset { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_cube(w: usize, h: usize, bands: &BandSet) -> SpectralCube {
        let frames = (0..bands.len())
            .map(|b| Frame::from_fn(w, h, RAW_MAX, |x, y| (b * 10_000 + y * w + x) as f64).unwrap())
            .collect();
        let dark = Frame::from_fn(w, h, RAW_MAX, |x, y| ((x + y) % 7) as f64).unwrap();
        SpectralCube::new(bands.clone(), Mode::Reflectance, Domain::Raw, frames, dark).unwrap()
    }

    #[test]
    fn band_set_rejects_unsorted_and_duplicates() {
        assert!(matches!(
            BandSet::new(vec![400, 400]),
            Err(Error::DuplicateWavelength(400))
        ));
        assert!(BandSet::new(vec![500, 400]).is_err());
        assert!(BandSet::new(vec![]).is_err());
        assert_eq!(BandSet::full().len(), 14);
        assert_eq!(BandSet::full().without(365).unwrap().len(), 13);
    }

    #[test]
    fn crop_device_geometry() {
        // 1280x1024 would be slow to build per band in a unit test; the
        // mapping is size independent so use a wide but short strip.
        let bands = BandSet::full();
        let cube = ramp_cube(700, 570, &bands);
        let out = cube.crop(590, 462, 100, 100).unwrap();
        assert_eq!((out.width(), out.height()), (100, 100));
        assert_eq!(out.bands().len(), 14);
        assert_eq!(out.dark().dims(), (100, 100));
        for (b, f) in out.bands().iter().enumerate() {
            assert_eq!(f.get(7, 3), cube.bands()[b].get(597, 465));
        }
    }

    #[test]
    fn crop_full_frame_is_identity() {
        let cube = ramp_cube(16, 12, &BandSet::new(vec![450, 550]).unwrap());
        assert_eq!(cube.crop(0, 0, 16, 12).unwrap(), cube);
    }

    #[test]
    fn crop_index_mapping() {
        let mut data = vec![0.0; 32 * 32];
        data[3 * 32 + 3] = 777.0;
        let f = Frame::raw(32, 32, data).unwrap();
        let c = f.crop(0, 0, 8, 8).unwrap();
        assert_eq!(c.get(3, 3), 777.0);
    }

    #[test]
    fn crop_out_of_bounds() {
        let cube = ramp_cube(16, 16, &BandSet::new(vec![450]).unwrap());
        assert!(matches!(cube.crop(10, 0, 8, 8), Err(Error::OutOfBounds { .. })));
        assert!(cube.crop(0, 0, 0, 8).is_err());
    }

    #[test]
    fn cube_checks_dimensions() {
        let bands = BandSet::new(vec![450, 550]).unwrap();
        let a = Frame::raw(4, 4, vec![0.0; 16]).unwrap();
        let b = Frame::raw(2, 2, vec![0.0; 4]).unwrap();
        let err = SpectralCube::new(
            bands.clone(),
            Mode::Reflectance,
            Domain::Raw,
            vec![a.clone(), b],
            a.clone(),
        );
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
        let err = SpectralCube::new(bands, Mode::Reflectance, Domain::Raw, vec![a.clone()], a);
        assert!(matches!(err, Err(Error::MissingFrame(550))));
    }

    #[test]
    fn saturation_flag() {
        let f = Frame::raw(2, 1, vec![65535.0, 3.0]).unwrap();
        assert!(f.is_saturated());
        assert!(!f.crop(1, 0, 1, 1).unwrap().is_saturated());
        assert!(Frame::raw(1, 1, vec![70000.0]).is_err());
    }

    #[test]
    fn labels_order_and_serialize() {
        let a = Label::AdulterationPct(5.0);
        assert!(a < Label::AdulterationPct(10.0));
        assert_eq!(serde_json::to_string(&a).unwrap(), r#"{"adulteration_pct":5.0}"#);
        assert_eq!(serde_json::to_string(&Label::ClassId(3)).unwrap(), r#"{"class_id":3}"#);
        assert!(Label::pct(120.0).is_err());
    }

    #[test]
    fn dataset_rejects_duplicate_ids() {
        let cube = ramp_cube(2, 2, &BandSet::new(vec![450]).unwrap());
        let s = Sample::new("a", cube, Label::ClassId(0));
        assert!(Dataset::new(vec![s.clone(), s]).is_err());
    }
}
