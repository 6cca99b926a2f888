//! Regression forests: CART trees grown on variance reduction with bootstrap
//! resampling and per-split feature subsampling.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{kfold_split, DatasetError};

pub const FOREST_FORMAT: &str = "forest/1";

const LEAF: u32 = u32::MAX;
const PREDICT_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("no training rows")]
    EmptyData,
    #[error("feature count mismatch: model has {expected}, input has {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("{x_rows} feature rows but {y_len} targets")]
    LengthMismatch { x_rows: usize, y_len: usize },
    #[error("non-finite value in training data")]
    NonFinite,
    #[error("invalid forest config: {0}")]
    InvalidConfig(String),
    #[error("{n} rows cannot be split (min_samples_split = {min})")]
    TooFewRows { n: usize, min: usize },
    #[error("empty tuning grid")]
    EmptyGrid,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, ForestError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaxFeatures {
    Sqrt,
    All,
    Fixed(usize),
}

impl MaxFeatures {
    pub fn resolve(self, p: usize) -> usize {
        match self {
            MaxFeatures::Sqrt => ((p as f64).sqrt().ceil() as usize).clamp(1, p.max(1)),
            MaxFeatures::All => p,
            MaxFeatures::Fixed(m) => m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig::wait_model(0)
    }
}

impl ForestConfig {
    /// Outcome (wait time) learner: 100 trees, split 10, leaf 1.
    pub fn wait_model(seed: u64) -> Self {
        ForestConfig {
            n_trees: 100,
            min_samples_split: 10,
            min_samples_leaf: 1,
            max_features: MaxFeatures::Sqrt,
            max_depth: None,
            bootstrap: true,
            seed,
        }
    }

    /// Policy (density) learner: 200 trees, split 10, leaf 3.
    pub fn density_model(seed: u64) -> Self {
        ForestConfig {
            n_trees: 200,
            min_samples_split: 10,
            min_samples_leaf: 3,
            max_features: MaxFeatures::Sqrt,
            max_depth: None,
            bootstrap: true,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ForestConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees < 1 {
            return Err(ForestError::InvalidConfig("n_trees must be >= 1".into()));
        }
        if self.min_samples_split < 2 {
            return Err(ForestError::InvalidConfig("min_samples_split must be >= 2".into()));
        }
        if self.min_samples_leaf < 1 {
            return Err(ForestError::InvalidConfig("min_samples_leaf must be >= 1".into()));
        }
        if self.max_features == MaxFeatures::Fixed(0) {
            return Err(ForestError::InvalidConfig("max_features must be >= 1".into()));
        }
        Ok(())
    }
}

/// Flat tree node. Leaves have `feature == u32::MAX`; internal nodes send
/// `x[feature] <= threshold` left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub feature: u32,
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    pub value: f64,
    /// Training rows reaching the node, counted with bootstrap multiplicity.
    pub samples: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, x: ArrayView1<f64>) -> f64 {
        let mut i = 0;
        loop {
            let n = &self.nodes[i];
            if n.feature == LEAF {
                return n.value;
            }
            i = if x[n.feature as usize] <= n.threshold {
                n.left as usize
            } else {
                n.right as usize
            };
        }
    }

    pub fn depth(&self) -> usize {
        fn rec(nodes: &[Node], i: usize) -> usize {
            let n = &nodes[i];
            if n.feature == LEAF {
                0
            } else {
                1 + rec(nodes, n.left as usize).max(rec(nodes, n.right as usize))
            }
        }
        rec(&self.nodes, 0)
    }

    pub fn leaves(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.feature == LEAF)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub format: String,
    pub config: ForestConfig,
    pub n_features: usize,
    /// Out-of-bag R², when every training row is out of bag for some tree.
    pub oob_score: Option<f64>,
    pub trees: Vec<Tree>,
}

struct Grower<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [f64],
    cfg: &'a ForestConfig,
    mtry: usize,
    /// rows of the full training set sorted by each feature
    sorted: &'a [Vec<u32>],
}

struct Work {
    order: Vec<Vec<u32>>,
    weight: Vec<u32>,
    goes_left: Vec<bool>,
    buf: Vec<u32>,
    features: Vec<usize>,
}

struct Split {
    feature: usize,
    threshold: f64,
    /// distinct rows on the left
    n_left: usize,
    gain: f64,
}

impl Grower<'_> {
    fn grow(&self, tree_idx: usize) -> (Tree, Vec<u32>) {
        let n = self.y.len();
        let p = self.x.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(tree_idx as u64);
        let mut weight = vec![0u32; n];
        if self.cfg.bootstrap {
            for _ in 0..n {
                weight[rng.random_range(0..n)] += 1;
            }
        } else {
            weight.fill(1);
        }
        let order: Vec<Vec<u32>> = self
            .sorted
            .iter()
            .map(|s| s.iter().copied().filter(|&r| weight[r as usize] > 0).collect())
            .collect();
        let m = order[0].len();
        let mut w = Work {
            order,
            weight,
            goes_left: vec![false; n],
            buf: vec![0; m],
            features: (0..p).collect(),
        };

        let mut nodes: Vec<Node> = Vec::new();
        // (node index, start, end, depth)
        let mut stack = vec![(0usize, 0usize, m, 0usize)];
        nodes.push(self.blank());
        while let Some((id, start, end, depth)) = stack.pop() {
            let (wsum, ysum, ymin, ymax) = self.node_stats(&w, start, end);
            let mean = (ysum / wsum as f64).clamp(ymin, ymax);
            nodes[id].value = mean;
            nodes[id].samples = wsum;
            let splittable = (wsum as usize) >= self.cfg.min_samples_split
                && (wsum as usize) >= 2 * self.cfg.min_samples_leaf
                && ymax > ymin
                && self.cfg.max_depth.is_none_or(|d| depth < d);
            if !splittable {
                continue;
            }
            let Some(split) = self.best_split(&mut w, &mut rng, start, end, mean) else {
                continue;
            };
            self.partition(&mut w, start, end, &split);
            let mid = start + split.n_left;
            let left = nodes.len();
            nodes.push(self.blank());
            nodes.push(self.blank());
            let node = &mut nodes[id];
            node.feature = split.feature as u32;
            node.threshold = split.threshold;
            node.left = left as u32;
            node.right = left as u32 + 1;
            stack.push((left + 1, mid, end, depth + 1));
            stack.push((left, start, mid, depth + 1));
        }
        (Tree { nodes }, w.weight)
    }

    fn blank(&self) -> Node {
        Node {
            feature: LEAF,
            threshold: 0.0,
            left: 0,
            right: 0,
            value: 0.0,
            samples: 0,
        }
    }

    fn node_stats(&self, w: &Work, start: usize, end: usize) -> (u32, f64, f64, f64) {
        let mut wsum = 0u32;
        let mut ysum = 0.0;
        let mut ymin = f64::INFINITY;
        let mut ymax = f64::NEG_INFINITY;
        for &r in &w.order[0][start..end] {
            let r = r as usize;
            let wt = w.weight[r];
            let y = self.y[r];
            wsum += wt;
            ysum += wt as f64 * y;
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        (wsum, ysum, ymin, ymax)
    }

    fn best_split(
        &self,
        w: &mut Work,
        rng: &mut ChaCha8Rng,
        start: usize,
        end: usize,
        mean: f64,
    ) -> Option<Split> {
        let p = self.x.ncols();
        w.features.shuffle(rng);
        let min_leaf = self.cfg.min_samples_leaf as u64;
        let mut best: Option<Split> = None;
        let mut visited = 0;
        for fi in 0..p {
            if visited >= self.mtry {
                break;
            }
            let f = w.features[fi];
            let ord = &w.order[f][start..end];
            let col = self.x.column(f);
            let lo = col[ord[0] as usize];
            let hi = col[ord[ord.len() - 1] as usize];
            if !(hi > lo) {
                continue;
            }
            visited += 1;

            let (mut wt_total, mut s_total) = (0u64, 0.0);
            for &r in ord {
                let wt = w.weight[r as usize] as u64;
                wt_total += wt;
                s_total += wt as f64 * (self.y[r as usize] - mean);
            }
            let (mut wl, mut sl) = (0u64, 0.0);
            for i in 0..ord.len() - 1 {
                let r = ord[i] as usize;
                let wt = w.weight[r] as u64;
                wl += wt;
                sl += wt as f64 * (self.y[r] - mean);
                let xv = col[r];
                let xn = col[ord[i + 1] as usize];
                if xn <= xv {
                    continue;
                }
                let wr = wt_total - wl;
                if wl < min_leaf || wr < min_leaf {
                    continue;
                }
                let sr = s_total - sl;
                let gain = sl * sl / wl as f64 + sr * sr / wr as f64;
                let mut t = 0.5 * (xv + xn);
                if t >= xn {
                    t = xv;
                }
                let better = match &best {
                    None => true,
                    Some(b) => {
                        gain > b.gain
                            || (gain == b.gain
                                && (f < b.feature || (f == b.feature && t < b.threshold)))
                    }
                };
                if better {
                    best = Some(Split {
                        feature: f,
                        threshold: t,
                        n_left: i + 1,
                        gain,
                    });
                }
            }
        }
        best
    }

    fn partition(&self, w: &mut Work, start: usize, end: usize, split: &Split) {
        for (i, &r) in w.order[split.feature][start..end].iter().enumerate() {
            w.goes_left[r as usize] = i < split.n_left;
        }
        for j in 0..self.x.ncols() {
            if j == split.feature {
                continue;
            }
            let seg = &mut w.order[j][start..end];
            let mut li = 0;
            let mut ri = split.n_left;
            for &r in seg.iter() {
                if w.goes_left[r as usize] {
                    w.buf[li] = r;
                    li += 1;
                } else {
                    w.buf[ri] = r;
                    ri += 1;
                }
            }
            seg.copy_from_slice(&w.buf[..end - start]);
        }
    }
}

fn check_xy(x: ArrayView2<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(ForestError::LengthMismatch {
            x_rows: x.nrows(),
            y_len: y.len(),
        });
    }
    if y.is_empty() {
        return Err(ForestError::EmptyData);
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(ForestError::NonFinite);
    }
    Ok(())
}

/// Grows a forest. Trees are built in parallel from independent per-tree
/// random streams, so the result does not depend on the thread count.
pub fn fit_forest(x: ArrayView2<f64>, y: &[f64], config: &ForestConfig) -> Result<ForestModel> {
    fit_forest_with(x, y, config, true)
}

/// As [`fit_forest`], optionally skipping the out-of-bag pass.
pub fn fit_forest_with(
    x: ArrayView2<f64>,
    y: &[f64],
    config: &ForestConfig,
    with_oob: bool,
) -> Result<ForestModel> {
    config.validate()?;
    check_xy(x, y)?;
    let (n, p) = x.dim();
    if n < config.min_samples_split {
        return Err(ForestError::TooFewRows {
            n,
            min: config.min_samples_split,
        });
    }
    if p == 0 {
        return Err(ForestError::InvalidConfig("no features".into()));
    }
    let mtry = config.max_features.resolve(p);
    if mtry > p {
        return Err(ForestError::InvalidConfig(format!(
            "max_features {mtry} exceeds feature count {p}"
        )));
    }
    let sorted: Vec<Vec<u32>> = (0..p)
        .map(|j| {
            let col = x.column(j);
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let grower = Grower {
        x,
        y,
        cfg: config,
        mtry,
        sorted: &sorted,
    };
    let grown: Vec<(Tree, Vec<u32>)> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| grower.grow(t))
        .collect();

    let oob_score = if config.bootstrap && with_oob {
        oob_r2(x, y, &grown)
    } else {
        None
    };
    Ok(ForestModel {
        format: FOREST_FORMAT.to_string(),
        config: config.clone(),
        n_features: p,
        oob_score,
        trees: grown.into_iter().map(|(t, _)| t).collect(),
    })
}

fn oob_r2(x: ArrayView2<f64>, y: &[f64], grown: &[(Tree, Vec<u32>)]) -> Option<f64> {
    let n = y.len();
    let mut sum = vec![0.0; n];
    let mut count = vec![0u32; n];
    for (tree, weight) in grown {
        for i in 0..n {
            if weight[i] == 0 {
                sum[i] += tree.predict_row(x.row(i));
                count[i] += 1;
            }
        }
    }
    if count.contains(&0) {
        return None;
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let mut sse = 0.0;
    let mut sst = 0.0;
    for i in 0..n {
        let e = y[i] - sum[i] / count[i] as f64;
        sse += e * e;
        sst += (y[i] - mean) * (y[i] - mean);
    }
    if sse == 0.0 {
        Some(1.0)
    } else if sst > 0.0 {
        Some(1.0 - sse / sst)
    } else {
        None
    }
}

impl ForestModel {
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.n_features {
            return Err(ForestError::DimMismatch {
                expected: self.n_features,
                got: x.ncols(),
            });
        }
        let n = x.nrows();
        let chunks: Vec<Vec<f64>> = (0..n.div_ceil(PREDICT_CHUNK))
            .into_par_iter()
            .map(|c| {
                (c * PREDICT_CHUNK..((c + 1) * PREDICT_CHUNK).min(n))
                    .map(|i| self.predict_row(x.row(i)))
                    .collect()
            })
            .collect();
        Ok(Array1::from(chunks.concat()))
    }

    pub fn predict_row(&self, x: ArrayView1<f64>) -> f64 {
        let mut sum = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in &self.trees {
            let v = t.predict_row(x);
            sum += v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (sum / self.trees.len() as f64).clamp(lo, hi)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("forest serializes")
    }
}

pub fn predict(model: &ForestModel, x: ArrayView2<f64>) -> Result<Array1<f64>> {
    model.predict(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best_index: usize,
    pub best: ForestConfig,
    /// Mean squared held-out error per grid entry.
    pub scores: Vec<f64>,
}

/// K-fold cross-validated choice among forest configs. Ties go to fewer
/// trees, then the earlier grid entry.
pub fn tune_by_cv(
    x: ArrayView2<f64>,
    y: &[f64],
    grid: &[ForestConfig],
    folds: usize,
    seed: u64,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(ForestError::EmptyGrid);
    }
    check_xy(x, y)?;
    let assignment = kfold_split(y.len(), folds, seed)?;
    let mut scores = Vec::with_capacity(grid.len());
    for cfg in grid {
        let mut sse = 0.0;
        for f in 0..folds {
            let train = assignment.complement(f);
            let test = assignment.members(f);
            let xt = x.select(ndarray::Axis(0), &train);
            let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let model = fit_forest(xt.view(), &yt, cfg)?;
            let xv = x.select(ndarray::Axis(0), &test);
            let pred = model.predict(xv.view())?;
            for (k, &i) in test.iter().enumerate() {
                sse += (y[i] - pred[k]).powi(2);
            }
        }
        scores.push(sse / y.len() as f64);
    }
    let mut best_index = 0;
    for i in 1..grid.len() {
        let (s, b) = (scores[i], scores[best_index]);
        if s < b || (s == b && grid[i].n_trees < grid[best_index].n_trees) {
            best_index = i;
        }
    }
    Ok(CvResult {
        best_index,
        best: grid[best_index].clone(),
        scores,
    })
}
