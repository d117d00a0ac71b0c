use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column z-scoring fitted on training rows. Constant columns keep unit
/// scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: &Array2<f64>) -> Standardizer {
        let mean = x.mean_axis(Axis(0)).expect("rows present");
        let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.scale
    }

    pub fn apply_row(&self, x: ArrayView1<f64>) -> Array1<f64> {
        (&x - &self.mean) / &self.scale
    }
}

/// Index of the largest score; scores within 1e-12 of the maximum count as
/// tied and the smallest index wins.
pub(crate) fn argmax(scores: ArrayView1<f64>) -> usize {
    let max = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    scores.iter().position(|&s| s >= max - 1e-12).unwrap_or(0)
}

fn check_fit_input(x: &Array2<f64>, y: &[usize], n_classes: usize) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::EmptyData);
    }
    if y.len() != x.nrows() {
        return Err(Error::param("one label per row required"));
    }
    if n_classes < 2 {
        return Err(Error::InsufficientData("need at least 2 classes".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub l2: f64,
    /// Step as a fraction of `1/L`, `L` the gradient Lipschitz bound.
    pub learning_rate: f64,
    /// Step at epoch `t` is divided by `1 + lr_decay·t`.
    pub lr_decay: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        LogisticParams {
            l2: 1e-4,
            learning_rate: 1.0,
            lr_decay: 0.0,
            momentum: 0.9,
            max_epochs: 5000,
            tolerance: 1e-6,
        }
    }
}

/// Mean cross-entropy of softmax scores `xWᵀ + b` plus `l2/2·‖W‖²`, with
/// its gradient.
pub fn softmax_loss_grad(
    w: &Array2<f64>,
    b: &Array1<f64>,
    x: &Array2<f64>,
    y: &[usize],
    l2: f64,
) -> (f64, Array2<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mut p = x.dot(&w.t()) + b;
    let mut loss = 0.0;
    for (mut row, &yi) in p.rows_mut().into_iter().zip(y) {
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        loss -= (row[yi] / z).ln();
        row /= z;
        row[yi] -= 1.0;
    }
    loss = loss / n + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    let gw = p.t().dot(x) / n + w * l2;
    let gb = p.sum_axis(Axis(0)) / n;
    (loss, gw, gb)
}

/// Largest eigenvalue of `AᵀA/n` by power iteration.
fn gram_spectral_bound(x: &Array2<f64>) -> f64 {
    let n = x.nrows() as f64;
    let mut v = Array1::from_elem(x.ncols(), 1.0 / (x.ncols() as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..100 {
        let u = x.t().dot(&x.dot(&v)) / n;
        let norm = u.dot(&u).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = u / norm;
    }
    lambda
}

/// Multinomial logistic regression on standardized inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Logistic {
    pub standardizer: Standardizer,
    /// `C × d`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub epochs_run: usize,
}

impl Logistic {
    pub fn fit(x: &Array2<f64>, y: &[usize], n_classes: usize, params: &LogisticParams) -> Result<Logistic> {
        check_fit_input(x, y, n_classes)?;
        let standardizer = Standardizer::fit(x);
        let z = standardizer.apply(x);
        let d = z.ncols();
        // softmax Hessian is bounded by ½·(XᵀX/n + 1) plus the ridge term
        let lipschitz = 0.5 * (gram_spectral_bound(&z) + 1.0) + params.l2;
        let step0 = params.learning_rate / lipschitz;

        let mut w = Array2::zeros((n_classes, d));
        let mut b = Array1::zeros(n_classes);
        let mut vw = Array2::<f64>::zeros((n_classes, d));
        let mut vb = Array1::<f64>::zeros(n_classes);
        let mut epochs_run = params.max_epochs;
        for t in 0..params.max_epochs {
            // Nesterov look-ahead
            let la_w = &w + &(&vw * params.momentum);
            let la_b = &b + &(&vb * params.momentum);
            let (_, gw, gb) = softmax_loss_grad(&la_w, &la_b, &z, y, params.l2);
            let gmax = gw.iter().chain(gb.iter()).fold(0.0f64, |a, &g| a.max(g.abs()));
            if gmax < params.tolerance {
                w = la_w;
                b = la_b;
                epochs_run = t;
                break;
            }
            let step = step0 / (1.0 + params.lr_decay * t as f64);
            vw = &vw * params.momentum - &gw * step;
            vb = &vb * params.momentum - &gb * step;
            w += &vw;
            b += &vb;
        }
        Ok(Logistic {
            standardizer,
            weights: w,
            bias: b,
            epochs_run,
        })
    }

    pub fn scores(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weights.dot(&self.standardizer.apply_row(x)) + &self.bias
    }

    pub fn predict_row(&self, x: ArrayView1<f64>) -> usize {
        argmax(self.scores(x).view())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            c: 1.0,
            learning_rate: 0.5,
            epochs: 1000,
        }
    }
}

/// `½‖w‖² + C·Σ max(0, 1 − yᵢ(w·xᵢ + b))`, divided by `C·n`.
fn hinge_objective(w: &Array1<f64>, b: f64, z: &Array2<f64>, sign: &[f64], lambda: f64) -> f64 {
    let margins = z.dot(w) + b;
    let hinge: f64 = margins.iter().zip(sign).map(|(m, s)| (1.0 - s * m).max(0.0)).sum();
    0.5 * lambda * w.dot(w) + hinge / z.nrows() as f64
}

fn fit_binary_svm(z: &Array2<f64>, sign: &[f64], params: &SvmParams) -> (Array1<f64>, f64) {
    let n = z.nrows() as f64;
    let lambda = 1.0 / (params.c * n);
    let mut w = Array1::zeros(z.ncols());
    let mut b = 0.0;
    let mut best = (w.clone(), b, f64::INFINITY);
    for t in 0..params.epochs {
        // one pass yields both the objective of the current iterate and its
        // subgradient
        let margins = z.dot(&w) + b;
        let mut hinge = 0.0;
        let mut gw = &w * lambda;
        let mut gb = 0.0;
        for (i, (&m, &s)) in margins.iter().zip(sign).enumerate() {
            if s * m < 1.0 {
                hinge += 1.0 - s * m;
                gw.scaled_add(-s / n, &z.row(i));
                gb -= s / n;
            }
        }
        let obj = 0.5 * lambda * w.dot(&w) + hinge / n;
        if obj < best.2 {
            best = (w.clone(), b, obj);
        }
        let step = params.learning_rate / ((t + 1) as f64).sqrt();
        w.scaled_add(-step, &gw);
        b -= step * gb;
    }
    if hinge_objective(&w, b, z, sign, lambda) < best.2 {
        best = (w, b, 0.0);
    }
    (best.0, best.1)
}

/// One-vs-rest linear SVM trained by full-batch subgradient descent; the
/// lowest-objective iterate of each binary problem is kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub standardizer: Standardizer,
    /// `C × d`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearSvm {
    pub fn fit(x: &Array2<f64>, y: &[usize], n_classes: usize, params: &SvmParams) -> Result<LinearSvm> {
        check_fit_input(x, y, n_classes)?;
        if !(params.c > 0.0) {
            return Err(Error::param("SVM C must be positive"));
        }
        let standardizer = Standardizer::fit(x);
        let z = standardizer.apply(x);
        let mut weights = Array2::zeros((n_classes, z.ncols()));
        let mut bias = Array1::zeros(n_classes);
        for c in 0..n_classes {
            let sign: Vec<f64> = y.iter().map(|&yi| if yi == c { 1.0 } else { -1.0 }).collect();
            let (w, b) = fit_binary_svm(&z, &sign, params);
            weights.row_mut(c).assign(&w);
            bias[c] = b;
        }
        Ok(LinearSvm {
            standardizer,
            weights,
            bias,
        })
    }

    pub fn margins(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weights.dot(&self.standardizer.apply_row(x)) + &self.bias
    }

    pub fn predict_row(&self, x: ArrayView1<f64>) -> usize {
        argmax(self.margins(x).view())
    }
}
