//! On-disk sample directories.
//!
//! A sample directory holds `manifest.json`, one P5 frame per band and a
//! dark frame. A dataset directory holds one sample directory per sample.
//! Writing is deterministic: saving the same sample twice produces
//! byte-identical files.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cube::{BandSet, Dataset, Domain, Frame, Label, Sample, SpectralCube, RAW_MAX};
use crate::error::{Error, Result};
use crate::pgm;

pub const MANIFEST: &str = "manifest.json";
pub const PROVENANCE: &str = "provenance.json";
const DARK_FILE: &str = "dark.pgm";

#[derive(Debug, Serialize, Deserialize)]
struct BandEntry {
    wavelength_nm: u32,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    id: String,
    mode: String,
    label: Label,
    width: usize,
    height: usize,
    bit_depth: u32,
    dark: String,
    bands: Vec<BandEntry>,
}

fn to_raw(frame: &Frame, domain: Domain) -> Frame {
    match domain {
        Domain::Raw => frame.clone(),
        Domain::Normalized => {
            let data = frame
                .data()
                .iter()
                .map(|v| (v * RAW_MAX).round().clamp(0.0, RAW_MAX))
                .collect();
            frame.with_data(data, RAW_MAX)
        }
    }
}

/// Writes `sample` into `dir`, creating it if needed.
///
/// Normalized cubes are quantized to 16 bits; they load back in the raw
/// domain.
pub fn save_sample(sample: &Sample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cube = &sample.cube;
    let mut bands = Vec::with_capacity(cube.band_set().len());
    for (nm, frame) in cube.iter() {
        let file = format!("band_{nm}.pgm");
        pgm::write(&dir.join(&file), &to_raw(frame, cube.domain()))?;
        bands.push(BandEntry {
            wavelength_nm: nm,
            file,
        });
    }
    pgm::write(&dir.join(DARK_FILE), &to_raw(cube.dark(), cube.domain()))?;

    let manifest = Manifest {
        id: sample.id.clone(),
        mode: cube.mode().as_str().to_string(),
        label: sample.label,
        width: cube.width(),
        height: cube.height(),
        bit_depth: 16,
        dark: DARK_FILE.to_string(),
        bands,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;

    let prov_path = dir.join(PROVENANCE);
    if sample.provenance.is_empty() {
        if prov_path.exists() {
            fs::remove_file(&prov_path).map_err(|e| Error::io(&prov_path, e))?;
        }
    } else {
        write_json(&prov_path, &sample.provenance)?;
    }
    Ok(())
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Reads a sample directory written by [`save_sample`] (or by hand).
pub fn load_sample(dir: &Path) -> Result<Sample> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    let mode = manifest.mode.parse()?;
    if manifest.bit_depth != 16 {
        return Err(Error::param(format!(
            "bit_depth {} unsupported, expected 16",
            manifest.bit_depth
        )));
    }

    let mut entries = manifest.bands;
    entries.sort_by_key(|b| b.wavelength_nm);
    let mut seen = HashSet::new();
    for e in &entries {
        if !seen.insert(e.wavelength_nm) {
            return Err(Error::DuplicateWavelength(e.wavelength_nm));
        }
    }
    let band_set = BandSet::new(entries.iter().map(|e| e.wavelength_nm).collect())?;
    let expected = (manifest.width, manifest.height);

    let read_checked = |path: &Path| -> Result<Frame> {
        let frame = pgm::read(path)?;
        if frame.dims() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: frame.dims(),
            });
        }
        Ok(frame)
    };

    let mut frames = Vec::with_capacity(entries.len());
    for e in &entries {
        let path = dir.join(&e.file);
        if !path.is_file() {
            return Err(Error::MissingFrame(e.wavelength_nm));
        }
        frames.push(read_checked(&path)?);
    }
    let dark = read_checked(&dir.join(&manifest.dark))?;
    let cube = SpectralCube::new(band_set, mode, Domain::Raw, frames, dark)?;

    let prov_path = dir.join(PROVENANCE);
    let provenance = if prov_path.is_file() {
        read_json(&prov_path)?
    } else {
        Vec::new()
    };
    Ok(Sample {
        id: manifest.id,
        cube,
        label: manifest.label,
        provenance,
    })
}

/// Writes each sample into `dir/<id>/`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in dataset.samples() {
        save_sample(s, &dir.join(&s.id))?;
    }
    Ok(())
}

/// Loads every subdirectory of `dir` that contains a manifest, in
/// lexicographic order of directory name.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut subdirs: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    subdirs.sort();
    let samples = subdirs.iter().map(|p| load_sample(p)).collect::<Result<Vec<_>>>()?;
    Dataset::new(samples)
}
