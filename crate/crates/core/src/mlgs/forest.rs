//! CART random forest with Gini splits, grown to purity.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::seeds;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum Node {
    Leaf {
        neg: u32,
        pos: u32,
    },
    Split {
        feature: usize,
        /// Samples with `x[feature] <= threshold` go left.
        threshold: f64,
        /// Weighted Gini decrease, relative to the tree's root sample count.
        impurity_decrease: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn leaf_fraction(&self, x: &[f64]) -> f64 {
        let mut n = self;
        loop {
            match n {
                Node::Leaf { neg, pos } => return *pos as f64 / (*neg + *pos) as f64,
                Node::Split { feature, threshold, left, right, .. } => {
                    n = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    fn accumulate_importance(&self, out: &mut [f64]) {
        if let Node::Split { feature, impurity_decrease, left, right, .. } = self {
            out[*feature] += impurity_decrease;
            left.accumulate_importance(out);
            right.accumulate_importance(out);
        }
    }

    pub fn n_nodes(&self) -> usize {
        match self {
            Node::Leaf { .. } => 1,
            Node::Split { left, right, .. } => 1 + left.n_nodes() + right.n_nodes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub mtry: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { n_trees: 100, mtry: 6, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub schema_version: String,
    pub feature_names: Vec<String>,
    pub n_trees: usize,
    pub mtry: usize,
    pub seed: u64,
    pub trees: Vec<Node>,
}

fn gini(neg: usize, pos: usize) -> f64 {
    let n = (neg + pos) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p = pos as f64 / n;
    2.0 * p * (1.0 - p)
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    mtry: usize,
    n_root: f64,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    child_impurity: f64,
}

impl Grower<'_> {
    fn grow(&self, idx: &mut [usize], rng: &mut ChaCha8Rng) -> Node {
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        let neg = idx.len() - pos;
        let leaf = Node::Leaf { neg: neg as u32, pos: pos as u32 };
        if pos == 0 || neg == 0 || idx.len() < 2 {
            return leaf;
        }
        let Some(best) = self.best_split(idx, pos, neg, rng) else {
            return leaf;
        };
        let f = best.feature;
        let (mut l, mut r): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| self.x[i][f] <= best.threshold);
        let n = idx.len() as f64;
        let decrease = (n * gini(neg, pos) - best.child_impurity) / self.n_root;
        Node::Split {
            feature: f,
            threshold: best.threshold,
            impurity_decrease: decrease,
            left: Box::new(self.grow(&mut l, rng)),
            right: Box::new(self.grow(&mut r, rng)),
        }
    }

    /// Visits features in random order; stops after `mtry` features once a
    /// valid split exists, otherwise keeps drawing until one is found.
    fn best_split(&self, idx: &[usize], pos: usize, neg: usize, rng: &mut ChaCha8Rng) -> Option<BestSplit> {
        let d = self.x[0].len();
        let mut features: Vec<usize> = (0..d).collect();
        features.shuffle(rng);
        let mut best: Option<BestSplit> = None;
        let mut vals: Vec<(f64, bool)> = Vec::with_capacity(idx.len());
        for (visited, &f) in features.iter().enumerate() {
            if visited >= self.mtry && best.is_some() {
                break;
            }
            vals.clear();
            vals.extend(idx.iter().map(|&i| (self.x[i][f], self.y[i])));
            vals.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut lpos = 0usize;
            for i in 0..vals.len() - 1 {
                lpos += vals[i].1 as usize;
                let (a, b) = (vals[i].0, vals[i + 1].0);
                if a >= b {
                    continue;
                }
                let nl = i + 1;
                let nr = vals.len() - nl;
                let lneg = nl - lpos;
                let rpos = pos - lpos;
                let rneg = neg - lneg;
                let child = nl as f64 * gini(lneg, lpos) + nr as f64 * gini(rneg, rpos);
                if best.as_ref().is_none_or(|bs| child < bs.child_impurity) {
                    let mut t = 0.5 * (a + b);
                    if t >= b {
                        t = a;
                    }
                    best = Some(BestSplit { feature: f, threshold: t, child_impurity: child });
                }
            }
        }
        best
    }
}

fn grow_tree(x: &[Vec<f64>], y: &[bool], mtry: usize, mut rng: ChaCha8Rng) -> Node {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let g = Grower { x, y, mtry, n_root: n as f64 };
    g.grow(&mut idx, &mut rng)
}

/// Trains a forest on rows `x` (all the same width) with labels `y`.
pub fn train_forest(
    x: &[Vec<f64>],
    y: &[bool],
    feature_names: &[String],
    schema_version: &str,
    params: &ForestParams,
) -> Result<ForestModel> {
    if x.is_empty() {
        return Err(Error::invalid("cannot train a forest on an empty dataset"));
    }
    if x.len() != y.len() {
        return Err(Error::invalid(format!("{} rows but {} labels", x.len(), y.len())));
    }
    let d = feature_names.len();
    if let Some(bad) = x.iter().position(|r| r.len() != d) {
        return Err(Error::invalid(format!("row {bad} has {} features, expected {d}", x[bad].len())));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("forest features must be finite"));
    }
    if params.n_trees == 0 {
        return Err(Error::invalid("forest needs at least one tree"));
    }
    if params.mtry == 0 || params.mtry > d {
        return Err(Error::invalid(format!("mtry must lie in [1, {d}], got {}", params.mtry)));
    }
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| grow_tree(x, y, params.mtry, seeds::rng(params.seed, "tree", t as u64)))
        .collect();
    Ok(ForestModel {
        schema_version: schema_version.to_string(),
        feature_names: feature_names.to_vec(),
        n_trees: params.n_trees,
        mtry: params.mtry,
        seed: params.seed,
        trees,
    })
}

impl ForestModel {
    pub fn validate(&self) -> Result<()> {
        if self.trees.is_empty() || self.trees.len() != self.n_trees {
            return Err(Error::invalid(format!(
                "forest declares {} trees but holds {}",
                self.n_trees,
                self.trees.len()
            )));
        }
        if self.mtry == 0 || self.mtry > self.feature_names.len() {
            return Err(Error::invalid(format!("invalid mtry {}", self.mtry)));
        }
        Ok(())
    }

    /// Mean over trees of the positive fraction in the reached leaf.
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let s: f64 = self.trees.iter().map(|t| t.leaf_fraction(x)).sum();
        s / self.trees.len() as f64
    }

    /// [`ForestModel::predict_row`] after checking the caller's schema.
    pub fn predict_checked(&self, schema_version: &str, x: &[f64]) -> Result<f64> {
        if schema_version != self.schema_version || x.len() != self.feature_names.len() {
            return Err(Error::SchemaMismatch {
                expected: self.schema_version.clone(),
                actual: schema_version.to_string(),
            });
        }
        Ok(self.predict_row(x))
    }

    /// Normalised mean Gini decrease per feature, ranked descending
    /// (ties by feature order).
    pub fn feature_importance(&self) -> Vec<(String, f64)> {
        let d = self.feature_names.len();
        let mut acc = vec![0.0; d];
        for t in &self.trees {
            t.accumulate_importance(&mut acc);
        }
        let total: f64 = acc.iter().sum();
        let mut ranked: Vec<(usize, f64)> = acc
            .into_iter()
            .map(|v| if total > 0.0 { v / total } else { 0.0 })
            .enumerate()
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
            .into_iter()
            .map(|(i, v)| (self.feature_names[i].clone(), v))
            .collect()
    }
}
