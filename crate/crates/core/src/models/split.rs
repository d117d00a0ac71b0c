use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cube::Label;
use crate::error::{Error, Result};
use crate::features::DataMatrix;
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Every row of a sample lands on the same side.
    #[default]
    SampleLevel,
    /// Rows are assigned independently; superpixels of one sample leak
    /// across the split.
    RowLevel,
}

/// Train/test partition of a data matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub fraction: f64,
    pub seed: u64,
    pub granularity: Granularity,
}

impl Split {
    pub fn apply(&self, matrix: &DataMatrix) -> (DataMatrix, DataMatrix) {
        (
            matrix.select_rows(&self.train_rows),
            matrix.select_rows(&self.test_rows),
        )
    }
}

/// Number of units sent to training out of `n`: `⌈fraction·n⌉`, but
/// always leaving one for testing.
fn train_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).ceil() as usize).clamp(1, n - 1)
}

/// Per-label random partition. Units are samples or rows depending on
/// `granularity`; each label contributes `⌈fraction·n⌉` units to training.
pub fn stratified_split(matrix: &DataMatrix, fraction: f64, seed: u64, granularity: Granularity) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::param(format!("split fraction {fraction} outside (0, 1)")));
    }
    let meta = matrix.row_meta();
    // label -> unit key -> rows
    let mut groups: BTreeMap<Label, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
    for (i, m) in meta.iter().enumerate() {
        let key = match granularity {
            Granularity::SampleLevel => m.sample_id.clone(),
            Granularity::RowLevel => format!("{i:012}"),
        };
        groups.entry(m.label).or_default().entry(key).or_default().push(i);
    }
    if groups.is_empty() {
        return Err(Error::EmptyData);
    }

    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for (class_index, (label, units)) in groups.iter().enumerate() {
        let n_samples = units
            .values()
            .flat_map(|rows| rows.iter().map(|&r| meta[r].sample_id.as_str()))
            .collect::<BTreeSet<_>>()
            .len();
        if (n_samples < 2 && granularity == Granularity::SampleLevel) || units.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "label {label} has fewer than 2 samples"
            )));
        }
        let mut keys: Vec<&String> = units.keys().collect();
        keys.shuffle(&mut rng::stream(&[seed, 0x5EED_5711, class_index as u64]));
        let n_train = train_count(fraction, keys.len());
        for (j, key) in keys.iter().enumerate() {
            let rows = &units[*key];
            if j < n_train {
                train_rows.extend_from_slice(rows);
            } else {
                test_rows.extend_from_slice(rows);
            }
        }
    }
    train_rows.sort_unstable();
    test_rows.sort_unstable();

    let ids = |rows: &[usize]| -> BTreeSet<String> { rows.iter().map(|&r| meta[r].sample_id.clone()).collect() };
    let train_ids = ids(&train_rows);
    let test_ids = ids(&test_rows);
    if granularity == Granularity::RowLevel {
        let shared = train_ids.intersection(&test_ids).count();
        if shared > 0 {
            log::warn!("row-level split: {shared} samples have rows on both sides");
        }
    }
    Ok(Split {
        train_ids,
        test_ids,
        train_rows,
        test_rows,
        fraction,
        seed,
        granularity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube::Mode;
    use crate::features::{ColumnLabel, RowMeta};
    use ndarray::Array2;

    fn fixture(labels: usize, per_label: usize, rows_per_sample: usize) -> DataMatrix {
        let mut meta = Vec::new();
        for l in 0..labels {
            for s in 0..per_label {
                for _ in 0..rows_per_sample {
                    meta.push(RowMeta {
                        sample_id: format!("s{l}-{s}"),
                        label: Label::AdulterationPct(5.0 * l as f64),
                    });
                }
            }
        }
        let n = meta.len();
        DataMatrix::new(
            Array2::zeros((n, 1)),
            vec![ColumnLabel::Band {
                mode: Mode::Reflectance,
                wavelength_nm: 500,
            }],
            meta,
        )
        .unwrap()
    }

    #[test]
    fn six_two_per_label() {
        let m = fixture(9, 8, 3);
        let s = stratified_split(&m, 0.75, 1, Granularity::SampleLevel).unwrap();
        assert_eq!(s.train_ids.len(), 54);
        assert_eq!(s.test_ids.len(), 18);
        assert!(s.train_ids.is_disjoint(&s.test_ids));
        assert_eq!(s.train_rows.len() + s.test_rows.len(), m.n_rows());
        for l in 0..9 {
            let n = s
                .train_ids
                .iter()
                .filter(|id| id.starts_with(&format!("s{l}-")))
                .count();
            assert_eq!(n, 6);
        }
        assert_eq!(s, stratified_split(&m, 0.75, 1, Granularity::SampleLevel).unwrap());
        assert_ne!(
            s.train_ids,
            stratified_split(&m, 0.75, 2, Granularity::SampleLevel)
                .unwrap()
                .train_ids
        );
    }

    #[test]
    fn too_few_samples() {
        let m = fixture(2, 1, 4);
        assert!(matches!(
            stratified_split(&m, 0.75, 0, Granularity::SampleLevel),
            Err(Error::InsufficientData(_))
        ));
        let s = stratified_split(&m, 0.75, 0, Granularity::RowLevel).unwrap();
        assert!(!s.train_ids.is_disjoint(&s.test_ids));
        assert_eq!(s.train_rows.len(), 6);
    }
}
