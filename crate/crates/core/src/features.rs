//! Data matrices and linear feature extraction.
//!
//! Each capture becomes a block of superpixel rows (one row per 10×10 pixel
//! block, one column per band). Reflectance and transmittance blocks of the
//! same specimen can be joined side by side into a merged matrix with twice
//! the columns. PCA and LDA are fitted on these rows.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::cube::{Label, Mode, Sample, SpectralCube};
use crate::error::{Error, Result};

/// Header of one matrix column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColumnLabel {
    Band { mode: Mode, wavelength_nm: u32 },
    Component { kind: ProjectionKind, index: usize },
}

impl fmt::Display for ColumnLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnLabel::Band { mode, wavelength_nm } => write!(f, "{}:{}", mode.tag(), wavelength_nm),
            ColumnLabel::Component { kind, index } => {
                let prefix = match kind {
                    ProjectionKind::Pca => "PC",
                    ProjectionKind::Lda => "LD",
                };
                write!(f, "{prefix}{}", index + 1)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowMeta {
    pub sample_id: String,
    pub label: Label,
}

/// Observation rows (superpixels) by feature columns, with bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMatrix {
    values: Array2<f64>,
    col_labels: Vec<ColumnLabel>,
    row_meta: Vec<RowMeta>,
}

impl DataMatrix {
    pub fn new(values: Array2<f64>, col_labels: Vec<ColumnLabel>, row_meta: Vec<RowMeta>) -> Result<Self> {
        if values.ncols() != col_labels.len() || values.nrows() != row_meta.len() {
            return Err(Error::param(format!(
                "matrix is {}x{} but has {} row labels and {} column labels",
                values.nrows(),
                values.ncols(),
                row_meta.len(),
                col_labels.len()
            )));
        }
        Ok(DataMatrix {
            values,
            col_labels,
            row_meta,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn col_labels(&self) -> &[ColumnLabel] {
        &self.col_labels
    }

    pub fn row_meta(&self) -> &[RowMeta] {
        &self.row_meta
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.row_meta.iter().map(|m| m.label).collect()
    }

    /// Sample ids in first-appearance order with their row counts.
    pub fn sample_blocks(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for m in &self.row_meta {
            match out.last_mut() {
                Some((id, n)) if *id == m.sample_id => *n += 1,
                _ => out.push((m.sample_id.clone(), 1)),
            }
        }
        out
    }

    pub fn select_rows(&self, rows: &[usize]) -> DataMatrix {
        DataMatrix {
            values: self.values.select(Axis(0), rows),
            col_labels: self.col_labels.clone(),
            row_meta: rows.iter().map(|&r| self.row_meta[r].clone()).collect(),
        }
    }

    /// Same rows, new columns.
    pub fn with_values(&self, values: Array2<f64>, col_labels: Vec<ColumnLabel>) -> Result<DataMatrix> {
        DataMatrix::new(values, col_labels, self.row_meta.clone())
    }

    /// CSV with header `sample_id,label,<columns>`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "sample_id,label")?;
        for c in &self.col_labels {
            write!(out, ",{c}")?;
        }
        writeln!(out)?;
        for (meta, row) in self.row_meta.iter().zip(self.values.rows()) {
            write!(out, "{},{}", meta.sample_id, meta.label)?;
            for v in row {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Block means of every band: one row per `block × block` tile in
/// row-major tile order. Trailing pixels that do not fill a tile are
/// dropped.
pub fn superpixels(cube: &SpectralCube, block: usize) -> Result<Array2<f64>> {
    let (w, h) = (cube.width(), cube.height());
    if block == 0 || block > w || block > h {
        return Err(Error::param(format!(
            "superpixel block {block} does not fit a {w}x{h} frame"
        )));
    }
    if w % block != 0 || h % block != 0 {
        log::warn!(
            "{}x{} frame is not a multiple of {}; dropping {} columns and {} rows",
            w,
            h,
            block,
            w % block,
            h % block
        );
    }
    let (bx, by) = (w / block, h / block);
    let norm = (block * block) as f64;
    let mut out = Array2::zeros((bx * by, cube.bands().len()));
    for (b, frame) in cube.bands().iter().enumerate() {
        let data = frame.data();
        for ty in 0..by {
            for tx in 0..bx {
                let mut acc = 0.0;
                for y in ty * block..(ty + 1) * block {
                    let row = &data[y * w + tx * block..y * w + (tx + 1) * block];
                    acc += row.iter().sum::<f64>();
                }
                out[[ty * bx + tx, b]] = acc / norm;
            }
        }
    }
    Ok(out)
}

/// Every pixel of a cube as a row of band values.
pub fn pixel_rows(cube: &SpectralCube) -> Array2<f64> {
    let n = cube.width() * cube.height();
    let mut out = Array2::zeros((n, cube.bands().len()));
    for (b, f) in cube.bands().iter().enumerate() {
        for (i, &v) in f.data().iter().enumerate() {
            out[[i, b]] = v;
        }
    }
    out
}

/// Stacks the superpixel rows of every sample, in input order.
pub fn build_matrix(samples: &[Sample], mode: Mode, block: usize) -> Result<DataMatrix> {
    let first = samples.first().ok_or(Error::EmptyData)?;
    let band_set = first.cube.band_set();
    let mut blocks = Vec::with_capacity(samples.len());
    let mut row_meta = Vec::new();
    for s in samples {
        if s.mode() != mode {
            return Err(Error::ModeMismatch {
                expected: mode.to_string(),
                found: s.mode().to_string(),
            });
        }
        if s.cube.band_set() != band_set {
            return Err(Error::InvalidBandSet(format!(
                "sample {} has a different band set",
                s.id
            )));
        }
        let m = superpixels(&s.cube, block)?;
        row_meta.extend((0..m.nrows()).map(|_| RowMeta {
            sample_id: s.id.clone(),
            label: s.label,
        }));
        blocks.push(m);
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let values = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Numerical(e.to_string()))?;
    let col_labels = band_set
        .wavelengths()
        .iter()
        .map(|&nm| ColumnLabel::Band {
            mode,
            wavelength_nm: nm,
        })
        .collect();
    DataMatrix::new(values, col_labels, row_meta)
}

/// Joins reflectance and transmittance matrices of the same specimens side
/// by side: row `i` of sample `s` becomes `[R_s,i | T_s,i]`.
pub fn merge(r: &DataMatrix, t: &DataMatrix) -> Result<DataMatrix> {
    let rb = r.sample_blocks();
    let tb = t.sample_blocks();
    for ((rid, rn), (tid, tn)) in rb.iter().zip(&tb) {
        if rid != tid {
            return Err(Error::UnpairedSample(rid.clone()));
        }
        if rn != tn {
            return Err(Error::RowCountMismatch {
                sample: rid.clone(),
                left: *rn,
                right: *tn,
            });
        }
    }
    if rb.len() != tb.len() {
        let extra = if rb.len() > tb.len() {
            &rb[tb.len()]
        } else {
            &tb[rb.len()]
        };
        return Err(Error::UnpairedSample(extra.0.clone()));
    }
    if r.n_cols() != t.n_cols() {
        return Err(Error::InvalidBandSet(format!(
            "{} reflectance bands vs {} transmittance bands",
            r.n_cols(),
            t.n_cols()
        )));
    }
    let values = ndarray::concatenate(Axis(1), &[r.values.view(), t.values.view()])
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let mut cols = r.col_labels.clone();
    cols.extend_from_slice(&t.col_labels);
    DataMatrix::new(values, cols, r.row_meta.clone())
}

/// Per-column min-max scaling fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    pub fn fit(values: &Array2<f64>) -> Result<Normalizer> {
        if values.nrows() == 0 {
            return Err(Error::EmptyData);
        }
        let min = values
            .columns()
            .into_iter()
            .map(|c| c.fold(f64::INFINITY, |a, &b| a.min(b)))
            .collect();
        let max = values
            .columns()
            .into_iter()
            .map(|c| c.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
            .collect();
        Ok(Normalizer { min, max })
    }

    /// `(x − min) / (max − min)` clipped to `[0, 1]`; constant columns map
    /// to 0.5.
    pub fn apply(&self, values: &Array2<f64>) -> Result<Array2<f64>> {
        if values.ncols() != self.min.len() {
            return Err(Error::param(format!(
                "normalizer fitted on {} columns, got {}",
                self.min.len(),
                values.ncols()
            )));
        }
        let mut out = values.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (lo, hi) = (self.min[j], self.max[j]);
            let span = hi - lo;
            col.mapv_inplace(|x| {
                if span > 0.0 {
                    ((x - lo) / span).clamp(0.0, 1.0)
                } else {
                    0.5
                }
            });
        }
        Ok(out)
    }
}

pub fn band_normalize(train: &DataMatrix) -> Result<(Normalizer, DataMatrix)> {
    let n = Normalizer::fit(&train.values)?;
    let values = n.apply(&train.values)?;
    let m = train.with_values(values, train.col_labels.clone())?;
    Ok((n, m))
}

pub fn apply_normalizer(normalizer: &Normalizer, matrix: &DataMatrix) -> Result<DataMatrix> {
    matrix.with_values(normalizer.apply(&matrix.values)?, matrix.col_labels.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignatureRow {
    pub label: Label,
    pub n_rows: usize,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Mean (and population standard deviation) of every column per label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignatureTable {
    pub columns: Vec<String>,
    pub rows: Vec<SignatureRow>,
}

pub fn spectral_signature(matrix: &DataMatrix) -> Result<SignatureTable> {
    if matrix.n_rows() == 0 {
        return Err(Error::EmptyData);
    }
    let mut groups: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, m) in matrix.row_meta.iter().enumerate() {
        groups.entry(m.label).or_default().push(i);
    }
    let rows = groups
        .into_iter()
        .map(|(label, idx)| {
            let sub = matrix.values.select(Axis(0), &idx);
            let mean = sub.mean_axis(Axis(0)).expect("non-empty group");
            let sd = sub.std_axis(Axis(0), 0.0);
            SignatureRow {
                label,
                n_rows: idx.len(),
                mean: mean.to_vec(),
                sd: sd.to_vec(),
            }
        })
        .collect();
    Ok(SignatureTable {
        columns: matrix.col_labels.iter().map(|c| c.to_string()).collect(),
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    Pca,
    Lda,
}

/// Fitted linear basis. `components` is `k × d`; rows are orthonormal for
/// PCA and scaled to unit regularized within-class variance for LDA.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub kind: ProjectionKind,
    pub mean: Array1<f64>,
    pub components: Array2<f64>,
    pub eigenvalues: Vec<f64>,
    /// Eigenvalues of every direction, not only the kept ones.
    pub full_spectrum: Vec<f64>,
    pub input_columns: Vec<String>,
}

impl Projection {
    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    pub fn transform(&self, values: &Array2<f64>) -> Result<Array2<f64>> {
        if values.ncols() != self.mean.len() {
            return Err(Error::param(format!(
                "projection expects {} columns, got {}",
                self.mean.len(),
                values.ncols()
            )));
        }
        let centered = values - &self.mean;
        Ok(centered.dot(&self.components.t()))
    }

    /// Maps component scores back to the input space (exact for PCA with
    /// `k = d`).
    pub fn inverse_transform(&self, scores: &Array2<f64>) -> Array2<f64> {
        scores.dot(&self.components) + &self.mean
    }

    pub fn column_labels(&self) -> Vec<ColumnLabel> {
        (0..self.n_components())
            .map(|index| ColumnLabel::Component { kind: self.kind, index })
            .collect()
    }

    pub fn project(&self, matrix: &DataMatrix) -> Result<DataMatrix> {
        matrix.with_values(self.transform(&matrix.values)?, self.column_labels())
    }

    /// Fraction of total variance carried by each kept component (PCA).
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        let total: f64 = self.full_spectrum.iter().sum();
        self.eigenvalues.iter().map(|e| e / total).collect()
    }
}

/// How many principal components to keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentCount {
    Fixed(usize),
    /// Smallest `k` whose cumulative explained variance reaches the target.
    Variance(f64),
}

impl Default for ComponentCount {
    fn default() -> Self {
        ComponentCount::Variance(0.99)
    }
}

fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Eigenpairs sorted by decreasing eigenvalue; vectors are the columns.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

/// Flips each row so its largest-magnitude entry is positive.
fn fix_signs(components: &mut Array2<f64>) {
    for mut row in components.rows_mut() {
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if v.abs() > row[best].abs() {
                best = j;
            }
        }
        if row[best] < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }
}

fn column_mean(values: &Array2<f64>) -> Array1<f64> {
    values.mean_axis(Axis(0)).expect("rows present")
}

/// Principal components of the sample covariance (divisor `n − 1`).
pub fn pca_fit(values: &Array2<f64>, count: ComponentCount, input_columns: Vec<String>) -> Result<Projection> {
    let (n, d) = values.dim();
    if n < 2 {
        return Err(Error::InsufficientData("PCA needs at least 2 rows".into()));
    }
    let mean = column_mean(values);
    let centered = values - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let (eigenvalues, vectors) = sorted_eigen(to_nalgebra(&cov));
    let spectrum: Vec<f64> = eigenvalues.iter().map(|&e| e.max(0.0)).collect();

    let k = match count {
        ComponentCount::Fixed(k) => {
            if k == 0 || k > d {
                return Err(Error::param(format!("cannot keep {k} of {d} components")));
            }
            k
        }
        ComponentCount::Variance(target) => {
            if !(0.0 < target && target <= 1.0) {
                return Err(Error::param("variance target must be in (0, 1]"));
            }
            let total: f64 = spectrum.iter().sum();
            if total <= 0.0 {
                1
            } else {
                let mut acc = 0.0;
                let mut k = d;
                for (i, e) in spectrum.iter().enumerate() {
                    acc += e;
                    if acc / total >= target - 1e-12 {
                        k = i + 1;
                        break;
                    }
                }
                k
            }
        }
    };

    let mut components = Array2::from_shape_fn((k, d), |(r, c)| vectors[(c, r)]);
    fix_signs(&mut components);
    Ok(Projection {
        kind: ProjectionKind::Pca,
        mean,
        components,
        eigenvalues: spectrum[..k].to_vec(),
        full_spectrum: spectrum,
        input_columns: if input_columns.is_empty() {
            (0..d).map(|j| format!("x{j}")).collect()
        } else {
            input_columns
        },
    })
}

/// Within- and between-class scatter, normalized by `n − C` and `n`.
pub fn scatter_matrices(values: &Array2<f64>, classes: &[usize]) -> (Array2<f64>, Array2<f64>) {
    let (n, d) = values.dim();
    let mean = column_mean(values);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let n_classes = groups.len();
    let mut sw = Array2::<f64>::zeros((d, d));
    let mut sb = Array2::<f64>::zeros((d, d));
    for idx in groups.values() {
        let sub = values.select(Axis(0), idx);
        let mu = column_mean(&sub);
        let centered = &sub - &mu;
        sw = sw + centered.t().dot(&centered);
        let diff = (&mu - &mean).insert_axis(Axis(1));
        sb = sb + diff.dot(&diff.t()) * idx.len() as f64;
    }
    let within_dof = (n - n_classes).max(1) as f64;
    (sw / within_dof, sb / n as f64)
}

/// Ratio of between- to within-class scatter along `direction`.
pub fn fisher_criterion(values: &Array2<f64>, classes: &[usize], direction: &Array1<f64>) -> f64 {
    let (sw, sb) = scatter_matrices(values, classes);
    direction.dot(&sb.dot(direction)) / direction.dot(&sw.dot(direction))
}

/// Regularized Fisher discriminant: eigenvectors of
/// `(S_w + γI)⁻¹ S_b` with `γ = gamma_scale · trace(S_w) / d`.
pub fn lda_fit(
    values: &Array2<f64>,
    classes: &[usize],
    k: Option<usize>,
    gamma_scale: f64,
    input_columns: Vec<String>,
) -> Result<Projection> {
    let (n, d) = values.dim();
    if classes.len() != n {
        return Err(Error::param("one class index per row required"));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in classes {
        *counts.entry(c).or_default() += 1;
    }
    let n_classes = counts.len();
    if n_classes < 2 {
        return Err(Error::InsufficientData("LDA needs at least 2 classes".into()));
    }
    if let Some((c, _)) = counts.iter().find(|(_, &m)| m < 2) {
        return Err(Error::InsufficientData(format!("class {c} has fewer than 2 rows")));
    }
    let max_k = (n_classes - 1).min(d);
    let k = k.unwrap_or(max_k);
    if k == 0 || k > max_k {
        return Err(Error::param(format!(
            "LDA can keep at most {max_k} components ({n_classes} classes, {d} columns), asked for {k}"
        )));
    }

    let (sw, sb) = scatter_matrices(values, classes);
    let gamma = gamma_scale * sw.diag().sum() / d as f64;
    let mut a = to_nalgebra(&sw);
    for i in 0..d {
        a[(i, i)] += gamma.max(f64::MIN_POSITIVE);
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Numerical("regularized within-class scatter is not positive definite".into()))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("Cholesky factor is singular".into()))?;
    let sb_n = to_nalgebra(&sb);
    let mut m = &l_inv * sb_n * l_inv.transpose();
    m = (&m + m.transpose()) * 0.5;
    let (eigenvalues, vectors) = sorted_eigen(m);
    let w = l_inv.transpose() * vectors;

    let mut components = Array2::from_shape_fn((k, d), |(r, c)| w[(c, r)]);
    fix_signs(&mut components);
    let spectrum: Vec<f64> = eigenvalues.iter().map(|&e| e.max(0.0)).collect();
    Ok(Projection {
        kind: ProjectionKind::Lda,
        mean: column_mean(values),
        components,
        eigenvalues: spectrum[..k].to_vec(),
        full_spectrum: spectrum,
        input_columns: if input_columns.is_empty() {
            (0..d).map(|j| format!("x{j}")).collect()
        } else {
            input_columns
        },
    })
}

/// Default LDA shrinkage scale.
pub const LDA_GAMMA_SCALE: f64 = 1e-6;

/// Rescales every column of `scores` to `[0, 1]` using its own range.
pub fn unit_range(scores: &Array2<f64>) -> Array2<f64> {
    let n = Normalizer::fit(scores).expect("non-empty");
    n.apply(scores).expect("same width")
}

/// First `n` columns of a matrix.
pub fn leading_columns(values: &Array2<f64>, n: usize) -> Array2<f64> {
    values.slice(s![.., ..n.min(values.ncols())]).to_owned()
}
