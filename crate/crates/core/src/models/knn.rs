use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Brute-force k-nearest-neighbour vote in Euclidean distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Knn {
    pub k: usize,
    pub train: Array2<f64>,
    pub classes: Vec<usize>,
    pub n_classes: usize,
}

impl Knn {
    pub fn fit(x: &Array2<f64>, y: &[usize], n_classes: usize, k: usize) -> Result<Knn> {
        if k == 0 || k > x.nrows() {
            return Err(Error::param(format!("k = {k} with {} training rows", x.nrows())));
        }
        Ok(Knn {
            k,
            train: x.clone(),
            classes: y.to_vec(),
            n_classes,
        })
    }

    /// Majority class among the `k` nearest rows. Ties go to the class
    /// with the smaller summed distance, then to the smaller class index.
    pub fn predict_row(&self, x: ArrayView1<f64>) -> usize {
        let mut dist: Vec<(f64, usize)> = self
            .train
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let d2: f64 = r.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2.sqrt(), i)
            })
            .collect();
        let k = self.k;
        dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; self.n_classes];
        let mut sums = vec![0.0f64; self.n_classes];
        for &(d, i) in &dist[..k] {
            votes[self.classes[i]] += 1;
            sums[self.classes[i]] += d;
        }
        (0..self.n_classes)
            .filter(|&c| votes[c] > 0)
            .min_by(|&a, &b| {
                votes[b]
                    .cmp(&votes[a])
                    .then(sums[a].total_cmp(&sums[b]))
                    .then(a.cmp(&b))
            })
            .expect("k >= 1")
    }
}
