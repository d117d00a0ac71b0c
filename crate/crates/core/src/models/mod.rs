//! Train/test splitting, classifiers and evaluation.
//!
//! Classifiers work on class indices internally; [`Model`] carries the
//! sorted label list so predictions come back as [`Label`]s. All fits are
//! deterministic for a given seed and a single fit never spawns threads.
//! Prediction over many rows is parallel but order-preserving.

mod knn;
mod linear;
mod split;
mod tree;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use knn::Knn;
pub use linear::{softmax_loss_grad, LinearSvm, Logistic, LogisticParams, Standardizer, SvmParams};
pub use split::{stratified_split, Granularity, Split};
pub use tree::{DecisionTree, ForestParams, Node, RandomForest, TreeParams};

use crate::cube::Label;
use crate::error::{Error, Result};
use crate::features::DataMatrix;
use crate::sample_io::{read_json, write_json};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Knn,
    DecisionTree,
    RandomForest,
    Logistic,
    LinearSvm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Knn,
        ModelKind::DecisionTree,
        ModelKind::RandomForest,
        ModelKind::Logistic,
        ModelKind::LinearSvm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Knn => "knn",
            ModelKind::DecisionTree => "decision_tree",
            ModelKind::RandomForest => "random_forest",
            ModelKind::Logistic => "logistic",
            ModelKind::LinearSvm => "linear_svm",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::param(format!("unknown classifier {s:?}")))
    }
}

/// Hyperparameters of every classifier; only the relevant block is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub knn_k: usize,
    pub tree: TreeParams,
    pub forest: ForestParams,
    pub logistic: LogisticParams,
    pub svm: SvmParams,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            knn_k: 5,
            tree: TreeParams::default(),
            forest: ForestParams::default(),
            logistic: LogisticParams::default(),
            svm: SvmParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    Knn(Knn),
    DecisionTree(DecisionTree),
    RandomForest(RandomForest),
    Logistic(Logistic),
    LinearSvm(LinearSvm),
}

/// A trained classifier together with its label vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kind: ModelKind,
    pub classes: Vec<Label>,
    pub n_features: usize,
    pub classifier: Classifier,
}

/// Sorted distinct labels and the class index of every entry.
pub fn encode_labels(labels: &[Label]) -> (Vec<Label>, Vec<usize>) {
    let mut classes = labels.to_vec();
    classes.sort();
    classes.dedup();
    let idx = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label present"))
        .collect();
    (classes, idx)
}

pub fn fit(kind: ModelKind, x: &Array2<f64>, labels: &[Label], params: &ModelParams, seed: u64) -> Result<Model> {
    if x.nrows() == 0 {
        return Err(Error::EmptyData);
    }
    if labels.len() != x.nrows() {
        return Err(Error::param(format!("{} labels for {} rows", labels.len(), x.nrows())));
    }
    let (classes, y) = encode_labels(labels);
    let c = classes.len();
    let classifier = match kind {
        ModelKind::Knn => Classifier::Knn(Knn::fit(x, &y, c, params.knn_k)?),
        ModelKind::DecisionTree => Classifier::DecisionTree(DecisionTree::fit(x, &y, c, &params.tree)?),
        ModelKind::RandomForest => Classifier::RandomForest(RandomForest::fit(x, &y, c, &params.forest, seed)?),
        ModelKind::Logistic => Classifier::Logistic(Logistic::fit(x, &y, c, &params.logistic)?),
        ModelKind::LinearSvm => Classifier::LinearSvm(LinearSvm::fit(x, &y, c, &params.svm)?),
    };
    Ok(Model {
        kind,
        classes,
        n_features: x.ncols(),
        classifier,
    })
}

pub fn fit_matrix(kind: ModelKind, train: &DataMatrix, params: &ModelParams, seed: u64) -> Result<Model> {
    fit(kind, train.values(), &train.labels(), params, seed)
}

impl Model {
    pub fn predict_row(&self, x: ArrayView1<f64>) -> Label {
        let c = match &self.classifier {
            Classifier::Knn(m) => m.predict_row(x),
            Classifier::DecisionTree(m) => m.predict_row(x),
            Classifier::RandomForest(m) => m.predict_row(x),
            Classifier::Logistic(m) => m.predict_row(x),
            Classifier::LinearSvm(m) => m.predict_row(x),
        };
        self.classes[c]
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<Label>> {
        if x.ncols() != self.n_features {
            return Err(Error::param(format!(
                "model expects {} features, got {}",
                self.n_features,
                x.ncols()
            )));
        }
        Ok((0..x.nrows())
            .into_par_iter()
            .map(|i| self.predict_row(x.row(i)))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Model> {
        read_json(path)
    }
}

/// Counts indexed `[actual][predicted]` over the sorted union of labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<Label>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(actual: &[Label], predicted: &[Label]) -> Result<ConfusionMatrix> {
        if actual.len() != predicted.len() {
            return Err(Error::param("prediction count differs from label count"));
        }
        let mut all = actual.to_vec();
        all.extend_from_slice(predicted);
        let (labels, _) = encode_labels(&all);
        let n = labels.len();
        let mut counts = vec![vec![0u64; n]; n];
        for (a, p) in actual.iter().zip(predicted) {
            let i = labels.binary_search(a).expect("present");
            let j = labels.binary_search(p).expect("present");
            counts[i][j] += 1;
        }
        Ok(ConfusionMatrix { labels, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: u64 = (0..self.labels.len()).map(|i| self.counts[i][i]).sum();
        trace as f64 / total as f64
    }

    /// Recall per actual label; labels never present in the test set are
    /// skipped.
    pub fn per_class_recall(&self) -> Vec<(Label, f64)> {
        self.labels
            .iter()
            .zip(&self.counts)
            .enumerate()
            .filter_map(|(i, (l, row))| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| (*l, row[i] as f64 / n as f64))
            })
            .collect()
    }

    pub fn report(&self) -> EvaluationReport {
        EvaluationReport {
            accuracy: self.accuracy(),
            confusion: self.clone(),
            per_class_recall: self
                .per_class_recall()
                .into_iter()
                .map(|(label, recall)| ClassRecall { label, recall })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRecall {
    pub label: Label,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub per_class_recall: Vec<ClassRecall>,
}

pub fn evaluate(model: &Model, test: &DataMatrix) -> Result<ConfusionMatrix> {
    let predicted = model.predict(test.values())?;
    ConfusionMatrix::from_predictions(&test.labels(), &predicted)
}
