//! Linear SVM by deterministic subgradient descent and the paired binary
//! content evaluation built on it.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::synthcorpus::LabelIndex;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSvm {
    pub weights: Array1<f64>,
    pub bias: f64,
}

impl LinearSvm {
    pub fn decision(&self, x: ArrayView1<f64>) -> f64 {
        self.weights.dot(&x) + self.bias
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> bool {
        self.decision(x) >= 0.0
    }

    pub fn accuracy(&self, x: ArrayView2<f64>, y: &[bool]) -> f64 {
        let hits = x.rows().into_iter().zip(y).filter(|(r, &t)| self.predict(*r) == t).count();
        hits as f64 / y.len().max(1) as f64
    }

    /// `½‖w‖² + C Σ max(0, 1 - y (w·x + b))`.
    pub fn objective(&self, x: ArrayView2<f64>, y: &[bool], c_reg: f64) -> f64 {
        0.5 * self.weights.dot(&self.weights) + c_reg * hinge_sum(self, x, y)
    }
}

pub fn hinge_sum(svm: &LinearSvm, x: ArrayView2<f64>, y: &[bool]) -> f64 {
    x.rows()
        .into_iter()
        .zip(y)
        .map(|(r, &t)| (1.0 - sign(t) * svm.decision(r)).max(0.0))
        .sum()
}

fn sign(t: bool) -> f64 {
    if t {
        1.0
    } else {
        -1.0
    }
}

/// Minimizes `½‖w‖² + C Σ hinge` with full-batch subgradient steps of size
/// `1/(λ t)`, `λ = 1/(C n)`, and returns the running average of the iterates.
/// The bias is not regularized.
pub fn train_linear_svm(x: ArrayView2<f64>, y: &[bool], c_reg: f64, iterations: usize) -> Result<LinearSvm> {
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!("{} rows but {} labels", x.nrows(), y.len())));
    }
    if !y.iter().any(|&t| t) || y.iter().all(|&t| t) {
        return Err(Error::Config("linear SVM needs examples of both classes".into()));
    }
    if !(c_reg > 0.0) || iterations == 0 {
        return Err(Error::Config("SVM needs C > 0 and at least one iteration".into()));
    }
    let n = y.len() as f64;
    let lambda = 1.0 / (c_reg * n);
    let mut cur = LinearSvm {
        weights: Array1::zeros(x.ncols()),
        bias: 0.0,
    };
    let mut avg = cur.clone();
    for t in 1..=iterations {
        let eta = 1.0 / (lambda * t as f64);
        let mut gw = Array1::<f64>::zeros(x.ncols());
        let mut gb = 0.0;
        for (r, &label) in x.rows().into_iter().zip(y) {
            let s = sign(label);
            if s * cur.decision(r) < 1.0 {
                gw.scaled_add(-s, &r);
                gb -= s;
            }
        }
        // gradient of λ/2‖w‖² + mean hinge
        cur.weights *= 1.0 - eta * lambda;
        cur.weights.scaled_add(-eta / n, &gw);
        cur.bias -= eta * gb / n;
        let k = 1.0 / t as f64;
        avg.weights *= 1.0 - k;
        avg.weights.scaled_add(k, &cur.weights);
        avg.bias += k * (cur.bias - avg.bias);
    }
    Ok(avg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub c_reg: f64,
    pub iterations: usize,
    pub n_folds: usize,
    pub min_per_class: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c_reg: 1.0,
            iterations: 2000,
            n_folds: 5,
            min_per_class: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub label_a: usize,
    pub label_b: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub label_a: usize,
    pub label_b: usize,
    pub count_a: usize,
    pub count_b: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentResult {
    /// Mean over evaluated pairs; NaN-free, 0 when nothing was evaluated.
    pub mean_accuracy: f64,
    pub pairs: Vec<PairResult>,
    pub skipped: Vec<SkippedPair>,
}

impl ContentResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.accuracy).collect()
    }
}

/// Fold index per member. Members sharing a group (a recording) always land
/// in the same fold; groups are shuffled with a per-pair stream and cut into
/// `n_folds` contiguous blocks.
pub fn fold_assignment(groups: &[usize], n_folds: usize, seed: u64, pair: u64) -> Vec<usize> {
    let mut distinct: Vec<usize> = groups.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    distinct.shuffle(&mut rng::stream(seed, "probe/folds", &[pair]));
    let n = distinct.len();
    groups
        .iter()
        .map(|g| {
            let pos = distinct.iter().position(|d| d == g).expect("group present");
            pos * n_folds / n
        })
        .collect()
}

fn standardize(train: &Array2<f64>, test: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mean = train.mean_axis(Axis(0)).expect("non-empty training fold");
    let std = train.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    ((train - &mean) / &std, (test - &mean) / &std)
}

/// Adjacent-label binary classification. `features` has one row per example,
/// `labels[i]` is its content label and `groups[i]` its recording. Pairs where
/// both labels occur but either has fewer than `min_per_class` examples, or
/// that span fewer than `n_folds` recordings, are skipped and reported.
pub fn binary_content_eval(
    features: ArrayView2<f64>,
    labels: &[usize],
    groups: &[usize],
    index: &LabelIndex,
    cfg: &SvmConfig,
    seed: u64,
) -> Result<ContentResult> {
    if features.nrows() != labels.len() || groups.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} rows, {} labels, {} groups",
            features.nrows(),
            labels.len(),
            groups.len()
        )));
    }
    if cfg.n_folds < 2 || cfg.min_per_class < cfg.n_folds {
        return Err(Error::Config("need at least 2 folds and one example per class per fold".into()));
    }
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); index.len()];
    for (i, &l) in labels.iter().enumerate() {
        by_label
            .get_mut(l)
            .ok_or_else(|| Error::Index(format!("label {l} outside the label index")))?
            .push(i);
    }
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (a, b) in index.adjacent_pairs() {
        let (ma, mb) = (&by_label[a], &by_label[b]);
        if ma.is_empty() || mb.is_empty() {
            continue;
        }
        let member_groups: Vec<usize> = ma.iter().chain(mb).map(|&i| groups[i]).collect();
        let n_groups = {
            let mut g = member_groups.clone();
            g.sort_unstable();
            g.dedup();
            g.len()
        };
        if ma.len() < cfg.min_per_class || mb.len() < cfg.min_per_class || n_groups < cfg.n_folds {
            skipped.push(SkippedPair {
                label_a: a,
                label_b: b,
                count_a: ma.len(),
                count_b: mb.len(),
            });
            continue;
        }
        let pair_key = (a as u64) << 32 | b as u64;
        let folds = fold_assignment(&member_groups, cfg.n_folds, seed, pair_key);
        let members: Vec<(usize, bool, usize)> = ma
            .iter()
            .map(|&i| (i, false))
            .chain(mb.iter().map(|&i| (i, true)))
            .zip(folds)
            .map(|((i, y), f)| (i, y, f))
            .collect();
        let mut acc = 0.0;
        for fold in 0..cfg.n_folds {
            let (tr, te): (Vec<_>, Vec<_>) = members.iter().partition(|m| m.2 != fold);
            let rows = |set: &[&(usize, bool, usize)]| features.select(Axis(0), &set.iter().map(|m| m.0).collect::<Vec<_>>());
            let (xtr, xte) = standardize(&rows(&tr), &rows(&te));
            let ytr: Vec<bool> = tr.iter().map(|m| m.1).collect();
            let yte: Vec<bool> = te.iter().map(|m| m.1).collect();
            if !ytr.iter().any(|&y| y) || ytr.iter().all(|&y| y) {
                return Err(Error::Data(format!("fold {fold} of pair ({a}, {b}) lacks a class")));
            }
            let svm = train_linear_svm(xtr.view(), &ytr, cfg.c_reg, cfg.iterations)?;
            acc += svm.accuracy(xte.view(), &yte);
        }
        pairs.push(PairResult {
            label_a: a,
            label_b: b,
            accuracy: acc / cfg.n_folds as f64,
        });
    }
    let mean_accuracy = if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().map(|p| p.accuracy).sum::<f64>() / pairs.len() as f64
    };
    Ok(ContentResult {
        mean_accuracy,
        pairs,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcorpus::LabelInfo;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_pair() {
        let x = array![[1.0, 0.0], [-1.0, 0.0]];
        let svm = train_linear_svm(x.view(), &[true, false], 1.0, 200).unwrap();
        assert_eq!(svm.accuracy(x.view(), &[true, false]), 1.0);
    }

    #[test]
    fn one_class_is_rejected() {
        let x = array![[1.0], [2.0]];
        assert!(matches!(train_linear_svm(x.view(), &[true, true], 1.0, 10), Err(Error::Config(_))));
    }

    fn blobs(n: usize, seed: u64) -> (Array2<f64>, Vec<bool>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((2 * n, 2));
        let mut y = Vec::new();
        for i in 0..2 * n {
            let pos = i < n;
            let c = if pos { 2.0 } else { -2.0 };
            x[[i, 0]] = c + r.gen_range(-0.5..0.5);
            x[[i, 1]] = r.gen_range(-1.0..1.0);
            y.push(pos);
        }
        (x, y)
    }

    #[test]
    fn separable_blobs_reach_zero_hinge() {
        let (x, y) = blobs(20, 3);
        let svm = train_linear_svm(x.view(), &y, 1.0, 20000).unwrap();
        assert!(hinge_sum(&svm, x.view(), &y) < 1e-2, "hinge {}", hinge_sum(&svm, x.view(), &y));
        assert_eq!(svm.accuracy(x.view(), &y), 1.0);
    }

    #[test]
    fn objective_does_not_increase_over_checkpoints() {
        let (x, y) = blobs(15, 5);
        let mut prev = f64::INFINITY;
        for it in [50, 200, 800, 3200] {
            let o = train_linear_svm(x.view(), &y, 1.0, it).unwrap().objective(x.view(), &y, 1.0);
            assert!(o <= prev + 1e-9, "{o} > {prev}");
            prev = o;
        }
    }

    fn index(n: usize) -> LabelIndex {
        LabelIndex {
            labels: (0..n).map(|o| LabelInfo { stimulus_id: 0, offset: o, count: 10 }).collect(),
        }
    }

    #[test]
    fn content_eval_extremes() {
        let idx = index(3);
        let labels: Vec<usize> = (0..30).map(|i| i / 10).collect();
        let onehot = Array2::from_shape_fn((30, 3), |(i, j)| if labels[i] == j { 1.0 } else { 0.0 });
        let groups: Vec<usize> = (0..30).map(|i| i % 10).collect();
        let r = binary_content_eval(onehot.view(), &labels, &groups, &idx, &SvmConfig::default(), 1).unwrap();
        assert_eq!(r.pairs.len(), 2);
        assert_eq!(r.mean_accuracy, 1.0);

        let same = Array2::from_elem((30, 3), 0.5);
        let r = binary_content_eval(same.view(), &labels, &groups, &idx, &SvmConfig::default(), 1).unwrap();
        assert!((r.mean_accuracy - 0.5).abs() < 0.15, "{}", r.mean_accuracy);
    }

    #[test]
    fn sparse_pairs_are_skipped() {
        let idx = index(3);
        let labels = vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 2, 2];
        let x = Array2::from_shape_fn((15, 2), |(i, j)| (i * 3 + j) as f64);
        let groups: Vec<usize> = (0..15).collect();
        let r = binary_content_eval(x.view(), &labels, &groups, &idx, &SvmConfig::default(), 0).unwrap();
        assert!(r.pairs.is_empty());
        assert_eq!(r.skipped.len(), 2);
        assert_eq!(r.skipped[0].count_b, 3);
    }

    #[test]
    fn folds_keep_groups_together() {
        let groups = vec![0, 1, 2, 3, 4, 5, 6, 7, 0, 1, 2, 3, 4, 5, 6, 7];
        let f = fold_assignment(&groups, 5, 4, 7);
        for i in 0..8 {
            assert_eq!(f[i], f[i + 8]);
        }
        let mut counts = [0; 5];
        for &k in &f[..8] {
            counts[k] += 1;
        }
        assert!(counts.iter().all(|&c| c == 1 || c == 2));
        assert_eq!(f, fold_assignment(&groups, 5, 4, 7));
    }

    #[test]
    fn twin_leakage_is_avoided() {
        // Each recording contributes one example per class with identical
        // features, so nothing separates the classes.
        let idx = index(2);
        let labels: Vec<usize> = (0..16).map(|i| i / 8).collect();
        let groups: Vec<usize> = (0..16).map(|i| i % 8).collect();
        let x = Array2::from_shape_fn((16, 3), |(i, j)| ((i % 8) * 7 + j * 3) as f64 % 5.0);
        let r = binary_content_eval(x.view(), &labels, &groups, &idx, &SvmConfig::default(), 3).unwrap();
        assert!((r.mean_accuracy - 0.5).abs() < 1e-12, "{}", r.mean_accuracy);
    }
}
