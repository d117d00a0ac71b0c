use ndarray::{Array2, ArrayView1};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const GAIN_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf {
        class: usize,
    },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: None,
            min_leaf: 1,
        }
    }
}

/// CART classifier with Gini impurity; nodes are stored flat, root first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    pub n_features: usize,
    pub n_classes: usize,
}

struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

fn majority(counts: &[usize]) -> usize {
    // first maximum = smallest class index among ties
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

fn gini_from(sum_sq: f64, n: f64) -> f64 {
    1.0 - sum_sq / (n * n)
}

fn best_split(
    x: &Array2<f64>,
    y: &[usize],
    rows: &[usize],
    features: &[usize],
    counts: &[usize],
    min_leaf: usize,
) -> Option<Candidate> {
    let n = rows.len();
    let parent_sq: f64 = counts.iter().map(|&c| (c * c) as f64).sum();
    let parent = gini_from(parent_sq, n as f64);
    let mut best: Option<Candidate> = None;
    let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut left = vec![0usize; counts.len()];
    for &f in features {
        pairs.clear();
        pairs.extend(rows.iter().map(|&r| (x[[r, f]], y[r])));
        pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        if pairs[0].0 == pairs[n - 1].0 {
            continue;
        }
        left.iter_mut().for_each(|c| *c = 0);
        let (mut left_sq, mut right_sq) = (0.0, parent_sq);
        for i in 0..n - 1 {
            let c = pairs[i].1;
            let l = left[c];
            let r = counts[c] - l;
            left_sq += (2 * l + 1) as f64;
            right_sq -= (2 * r - 1) as f64;
            left[c] += 1;
            let (nl, nr) = (i + 1, n - i - 1);
            if pairs[i].0 == pairs[i + 1].0 || nl < min_leaf || nr < min_leaf {
                continue;
            }
            let weighted =
                (nl as f64 * gini_from(left_sq, nl as f64) + nr as f64 * gini_from(right_sq, nr as f64)) / n as f64;
            let gain = parent - weighted;
            let improves = match &best {
                None => gain > -GAIN_TOLERANCE,
                Some(b) => gain > b.gain + GAIN_TOLERANCE,
            };
            if improves {
                best = Some(Candidate {
                    feature: f,
                    threshold: 0.5 * (pairs[i].0 + pairs[i + 1].0),
                    gain,
                });
            }
        }
    }
    best
}

impl DecisionTree {
    pub fn fit(x: &Array2<f64>, y: &[usize], n_classes: usize, params: &TreeParams) -> Result<DecisionTree> {
        let rows: Vec<usize> = (0..x.nrows()).collect();
        Self::fit_rows(x, y, n_classes, params, rows, x.ncols(), None)
    }

    /// Grows a tree on `rows` (which may repeat), drawing `mtry` candidate
    /// features per node from `rng` when one is given.
    pub(crate) fn fit_rows(
        x: &Array2<f64>,
        y: &[usize],
        n_classes: usize,
        params: &TreeParams,
        rows: Vec<usize>,
        mtry: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<DecisionTree> {
        if rows.is_empty() {
            return Err(Error::EmptyData);
        }
        if params.min_leaf == 0 {
            return Err(Error::param("min_leaf must be at least 1"));
        }
        let d = x.ncols();
        let mtry = mtry.clamp(1, d);
        let mut nodes = vec![Node::Leaf { class: 0 }];
        let mut stack = vec![(0usize, rows, 0usize)];
        let all_features: Vec<usize> = (0..d).collect();
        while let Some((slot, rows, depth)) = stack.pop() {
            let mut counts = vec![0usize; n_classes];
            for &r in &rows {
                counts[y[r]] += 1;
            }
            let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
            let depth_capped = params.max_depth.is_some_and(|m| depth >= m);
            let split = if pure || depth_capped || rows.len() < 2 * params.min_leaf {
                None
            } else {
                let features = match rng.as_deref_mut() {
                    Some(rng) if mtry < d => {
                        let mut f = index::sample(rng, d, mtry).into_vec();
                        f.sort_unstable();
                        f
                    }
                    _ => all_features.clone(),
                };
                best_split(x, y, &rows, &features, &counts, params.min_leaf)
            };
            match split {
                None => {
                    nodes[slot] = Node::Leaf {
                        class: majority(&counts),
                    }
                }
                Some(c) => {
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        rows.iter().partition(|&&i| x[[i, c.feature]] <= c.threshold);
                    let left = nodes.len();
                    nodes.push(Node::Leaf { class: 0 });
                    nodes.push(Node::Leaf { class: 0 });
                    nodes[slot] = Node::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left,
                        right: left + 1,
                    };
                    stack.push((left + 1, r, depth + 1));
                    stack.push((left, l, depth + 1));
                }
            }
        }
        Ok(DecisionTree {
            nodes,
            n_features: d,
            n_classes,
        })
    }

    pub fn predict_row(&self, x: ArrayView1<f64>) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { class } => return class,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Candidate features per node; `None` means `⌈√d⌉`.
    pub mtry: Option<usize>,
    pub bootstrap: bool,
    pub tree: TreeParams,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            mtry: None,
            bootstrap: true,
            tree: TreeParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
    pub tree_seeds: Vec<u64>,
    pub n_classes: usize,
}

impl RandomForest {
    pub fn fit(
        x: &Array2<f64>,
        y: &[usize],
        n_classes: usize,
        params: &ForestParams,
        seed: u64,
    ) -> Result<RandomForest> {
        if params.n_trees == 0 {
            return Err(Error::param("a forest needs at least one tree"));
        }
        let (n, d) = x.dim();
        let mtry = params.mtry.unwrap_or_else(|| (d as f64).sqrt().ceil() as usize);
        let mut trees = Vec::with_capacity(params.n_trees);
        let mut tree_seeds = Vec::with_capacity(params.n_trees);
        for t in 0..params.n_trees {
            let tree_seed = rng::stream_seed(&[seed, 0xF0E5_7000, t as u64]);
            let mut rng = rng::stream(&[tree_seed]);
            let rows: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            trees.push(DecisionTree::fit_rows(
                x,
                y,
                n_classes,
                &params.tree,
                rows,
                mtry,
                Some(&mut rng),
            )?);
            tree_seeds.push(tree_seed);
        }
        Ok(RandomForest {
            trees,
            tree_seeds,
            n_classes,
        })
    }

    pub fn predict_row(&self, x: ArrayView1<f64>) -> usize {
        let mut votes = vec![0usize; self.n_classes];
        for t in &self.trees {
            votes[t.predict_row(x)] += 1;
        }
        majority(&votes)
    }
}
