//! Gradient-boosted regression trees that predict robust accuracy from a
//! training recipe.
//!
//! Trees are grown greedily on squared error. Candidate thresholds are the
//! midpoints between adjacent distinct sorted feature values, every leaf keeps
//! at least `min_samples_leaf` samples, and equal gains resolve to the lowest
//! feature index and then the lowest threshold, so fitting is a pure function
//! of the input order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{count_params, Activation};
use crate::robust_train::{LossKind, RunRecord};

pub const FEATURE_NAMES: [&str; 6] = ["log10_params", "synthetic_data", "activation", "loss", "pgd_steps", "ema"];
pub const N_FEATURES: usize = FEATURE_NAMES.len();

/// Recipe features of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub n_params: u64,
    pub synthetic_data: bool,
    pub activation: Activation,
    pub loss: LossKind,
    /// Attack steps during training; 0 for standard training.
    pub pgd_steps: usize,
    pub ema: bool,
}

impl FeatureVector {
    pub fn from_record(r: &RunRecord) -> Result<FeatureVector> {
        let c = &r.config;
        Ok(FeatureVector {
            n_params: count_params(&c.arch)?,
            synthetic_data: c.extra_data,
            activation: c.arch.activation,
            loss: c.loss,
            pgd_steps: c.attack_steps(),
            ema: c.ema,
        })
    }

    /// Numeric encoding in [`FEATURE_NAMES`] order. Standard training shares
    /// the adversarial-training code and is told apart by zero steps.
    pub fn encode(&self) -> [f64; N_FEATURES] {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        [
            (self.n_params.max(1) as f64).log10(),
            flag(self.synthetic_data),
            flag(self.activation == Activation::Gelu),
            flag(self.loss == LossKind::Trades),
            self.pgd_steps as f64,
            flag(self.ema),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbrParams {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
}

impl Default for GbrParams {
    fn default() -> Self {
        GbrParams { n_estimators: 50, max_depth: 5, learning_rate: 0.1, min_samples_leaf: 2 }
    }
}

impl GbrParams {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::config(format!("learning rate {} outside (0, 1]", self.learning_rate)));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::config("min_samples_leaf must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split { feature: usize, threshold: f64, left: Box<Node>, right: Box<Node> },
    Leaf { leaf_value: f64 },
}

impl Node {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { leaf_value } => return *leaf_value,
                Node::Split { feature, threshold, left, right } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn leaves(&self) -> usize {
        match self {
            Node::Leaf { .. } => 1,
            Node::Split { left, right, .. } => left.leaves() + right.leaves(),
        }
    }
}

/// A fitted ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbrModel {
    pub base_prediction: f64,
    pub learning_rate: f64,
    pub n_features: usize,
    pub trees: Vec<Node>,
    /// Squared-error reduction per feature, normalized to sum to 1.
    pub feature_importances: Vec<f64>,
    /// No tree split anything; importances are all zero.
    pub degenerate: bool,
    /// Training MSE before the first tree and after every tree.
    pub train_mse: Vec<f64>,
}

impl GbrModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::shape("predict", format!("{} features, model has {}", x.len(), self.n_features)));
        }
        Ok(self.base_prediction + self.learning_rate * self.trees.iter().map(|t| t.eval(x)).sum::<f64>())
    }

    pub fn predict_features(&self, f: &FeatureVector) -> Result<f64> {
        self.predict(&f.encode())
    }
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    r: &'a [f64],
    params: &'a GbrParams,
    gains: Vec<f64>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
    left: Vec<usize>,
    right: Vec<usize>,
}

impl Grower<'_> {
    fn leaf(&self, idx: &[usize]) -> Node {
        Node::Leaf { leaf_value: idx.iter().map(|&i| self.r[i]).sum::<f64>() / idx.len() as f64 }
    }

    fn best_split(&self, idx: &[usize]) -> Option<BestSplit> {
        let n = idx.len();
        let m = self.params.min_samples_leaf;
        if n < 2 * m {
            return None;
        }
        let total: f64 = idx.iter().map(|&i| self.r[i]).sum();
        let sumsq: f64 = idx.iter().map(|&i| self.r[i] * self.r[i]).sum();
        let parent = total * total / n as f64;
        // Gains at rounding level are not splits.
        let min_gain = 1e-12 * sumsq;
        let mut best: Option<(usize, f64, f64, usize)> = None;
        let mut order = idx.to_vec();
        for f in 0..self.x[0].len() {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let mut left = 0.0;
            for k in 1..n {
                left += self.r[order[k - 1]];
                let (lo, hi) = (self.x[order[k - 1]][f], self.x[order[k]][f]);
                if k < m || n - k < m || lo == hi {
                    continue;
                }
                let right = total - left;
                let gain = left * left / k as f64 + right * right / (n - k) as f64 - parent;
                if gain > min_gain && best.is_none_or(|b| gain > b.2) {
                    best = Some((f, 0.5 * (lo + hi), gain, k));
                }
            }
        }
        let (feature, threshold, gain, _) = best?;
        let (left, right) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        Some(BestSplit { feature, threshold, gain, left, right })
    }

    fn grow(&mut self, idx: &[usize], depth: usize) -> Node {
        if depth == self.params.max_depth {
            return self.leaf(idx);
        }
        match self.best_split(idx) {
            None => self.leaf(idx),
            Some(s) => {
                self.gains[s.feature] += s.gain;
                let left = Box::new(self.grow(&s.left, depth + 1));
                let right = Box::new(self.grow(&s.right, depth + 1));
                Node::Split { feature: s.feature, threshold: s.threshold, left, right }
            }
        }
    }
}

fn mse(y: &[f64], pred: &[f64]) -> f64 {
    y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
}

/// Stagewise least-squares boosting. Boosting stops early once a tree finds
/// no split, since every later tree would be the same single leaf.
pub fn fit_gbr(x: &[Vec<f64>], y: &[f64], params: &GbrParams) -> Result<GbrModel> {
    params.validate()?;
    if x.len() != y.len() {
        return Err(Error::shape("fit_gbr", format!("{} rows, {} targets", x.len(), y.len())));
    }
    if y.len() < 2 {
        return Err(Error::Data("need at least two samples to fit".into()));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::shape("fit_gbr", "rows must share a positive feature count"));
    }
    if let Some(i) = (0..y.len()).find(|&i| !y[i].is_finite() || x[i].iter().any(|v| !v.is_finite())) {
        return Err(Error::Data(format!("sample {i} is not finite")));
    }

    let base = y.iter().sum::<f64>() / y.len() as f64;
    let mut pred = vec![base; y.len()];
    let mut history = vec![mse(y, &pred)];
    let mut trees = Vec::new();
    let mut gains = vec![0.0; d];
    let all: Vec<usize> = (0..y.len()).collect();
    for _ in 0..params.n_estimators {
        let r: Vec<f64> = y.iter().zip(&pred).map(|(a, b)| a - b).collect();
        let mut grower = Grower { x, r: &r, params, gains: vec![0.0; d] };
        let tree = grower.grow(&all, 0);
        if matches!(tree, Node::Leaf { .. }) {
            break;
        }
        for (g, t) in gains.iter_mut().zip(&grower.gains) {
            *g += t;
        }
        for (p, row) in pred.iter_mut().zip(x) {
            *p += params.learning_rate * tree.eval(row);
        }
        history.push(mse(y, &pred));
        trees.push(tree);
    }

    let total: f64 = gains.iter().sum();
    let degenerate = !(total > 0.0);
    let feature_importances = if degenerate { vec![0.0; d] } else { gains.iter().map(|g| g / total).collect() };
    Ok(GbrModel {
        base_prediction: base,
        learning_rate: params.learning_rate,
        n_features: d,
        trees,
        feature_importances,
        degenerate,
        train_mse: history,
    })
}

/// Estimator wrapper that may not be fitted yet.
#[derive(Clone, Debug, Default)]
pub struct Gbr {
    pub params: GbrParams,
    model: Option<GbrModel>,
}

impl Gbr {
    pub fn new(params: GbrParams) -> Gbr {
        Gbr { params, model: None }
    }

    pub fn fit(&mut self, x: &[Vec<f64>], y: &[f64]) -> Result<&GbrModel> {
        let model = fit_gbr(x, y, &self.params)?;
        Ok(self.model.insert(model))
    }

    pub fn model(&self) -> Result<&GbrModel> {
        self.model.as_ref().ok_or(Error::NotFitted)
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.model()?.predict(x)
    }

    /// Normalized importances and whether the model is degenerate.
    pub fn feature_importance(&self) -> Result<(Vec<f64>, bool)> {
        let m = self.model()?;
        Ok((m.feature_importances.clone(), m.degenerate))
    }
}

/// Seeded shuffle, then the first `round(fraction·n)` items train.
pub fn split_train_test<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 4 {
        return Err(Error::Data(format!("need at least 4 records to split, got {}", items.len())));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("train fraction {fraction} outside (0, 1)")));
    }
    let n = items.len();
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// Features and percent robust accuracy of the successful runs.
pub fn training_table(records: &[RunRecord]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for r in records.iter().filter(|r| !r.failed) {
        x.push(FeatureVector::from_record(r)?.encode().to_vec());
        y.push(100.0 * r.robust_acc_final);
    }
    Ok((x, y))
}
