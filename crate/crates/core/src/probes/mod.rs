//! Probes on frozen latents: subject classification, adjacent-label content
//! classification, a raw-signal baseline, significance tests and CSV export.

pub mod svm;
pub mod wilcoxon;

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use svm::{binary_content_eval, train_linear_svm, ContentResult, LinearSvm, SvmConfig};
pub use wilcoxon::{wilcoxon_signed_rank, wilcoxon_signed_rank_corrected, WilcoxonResult};

use crate::error::{Error, Result};
use crate::fsio;
use crate::model::Fhvae;
use crate::rng;
use crate::seqnet::ParamStore;
use crate::synthcorpus::{Dataset, LabelIndex, Segment, Split};
use crate::trainer::{adam_step, AdamState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Z1,
    Z2,
}

/// Posterior-mean latents, one row per segment.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    pub segment_id: Vec<usize>,
    pub sequence_id: Vec<usize>,
    pub subject_id: Vec<usize>,
    pub content_label: Vec<usize>,
    pub z1: Array2<f32>,
    pub z2: Array2<f32>,
}

impl LatentTable {
    pub fn len(&self) -> usize {
        self.segment_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_id.is_empty()
    }

    pub fn space(&self, space: Space) -> &Array2<f32> {
        match space {
            Space::Z1 => &self.z1,
            Space::Z2 => &self.z2,
        }
    }

    /// Rows at the given positions, in that order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let pick = |v: &[usize]| rows.iter().map(|&r| v[r]).collect();
        Self {
            segment_id: pick(&self.segment_id),
            sequence_id: pick(&self.sequence_id),
            subject_id: pick(&self.subject_id),
            content_label: pick(&self.content_label),
            z1: self.z1.select(Axis(0), rows),
            z2: self.z2.select(Axis(0), rows),
        }
    }
}

/// `z2` is the posterior mean of the z2 encoder; `z1` is the posterior mean
/// of the z1 encoder conditioned on that mean.
pub fn infer_latents(net: &Fhvae<f32>, segments: &[(usize, &Segment)]) -> Result<LatentTable> {
    let d = net.arch.latent_dim;
    let mut z1 = Array2::zeros((segments.len(), d));
    let mut z2 = Array2::zeros((segments.len(), d));
    for (c, chunk) in segments.chunks(512).enumerate() {
        let xs: Vec<_> = chunk.iter().map(|(_, s)| s.data.view()).collect();
        let q2 = net.encode_z2_batch(&xs)?;
        let q1 = net.encode_z1_batch(&xs, q2.mean.view())?;
        let at = c * 512;
        z2.slice_mut(s![at..at + chunk.len(), ..]).assign(&q2.mean);
        z1.slice_mut(s![at..at + chunk.len(), ..]).assign(&q1.mean);
    }
    if z1.iter().chain(z2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite latent".into()));
    }
    Ok(LatentTable {
        segment_id: segments.iter().map(|(i, _)| *i).collect(),
        sequence_id: segments.iter().map(|(_, s)| s.sequence_id).collect(),
        subject_id: segments.iter().map(|(_, s)| s.subject_id).collect(),
        content_label: segments.iter().map(|(_, s)| s.content_label).collect(),
        z1,
        z2,
    })
}

/// Latents for every segment of the dataset, in dataset order.
pub fn infer_dataset_latents(net: &Fhvae<f32>, dataset: &Dataset) -> Result<LatentTable> {
    let all: Vec<(usize, &Segment)> = dataset.segments.iter().enumerate().collect();
    infer_latents(net, &all)
}

// ---------------------------------------------------------------------------
// Subject probe

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub svm: SvmConfig,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 20,
            batch_size: 64,
            svm: SvmConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub n_classes: usize,
    pub chance: f64,
    pub n_test: usize,
    pub best_epoch: usize,
}

/// Labelled features for one split.
#[derive(Clone, Copy, Debug)]
pub struct ProbeData<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: &'a [usize],
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn predict(w: &Array2<f64>, b: &Array2<f64>, x: ArrayView2<f64>) -> Vec<usize> {
    let logits = x.dot(w) + b;
    logits
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect()
}

fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len().max(1) as f64
}

/// Standardizes all three splits with the training mean and deviation.
fn standardized(train: ArrayView2<f64>, others: &[ArrayView2<f64>]) -> (Array2<f64>, Vec<Array2<f64>>) {
    let mean = train.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(train.ncols()));
    let std = train.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let f = |x: ArrayView2<f64>| (&x - &mean) / &std;
    (f(train), others.iter().map(|x| f(*x)).collect())
}

/// One affine layer with softmax and cross-entropy, trained by ADAM on
/// shuffled minibatches; early stopping on held-out accuracy restores the
/// best weights before scoring `test`.
pub fn train_softmax_probe<'a>(
    train: ProbeData<'a>,
    val: ProbeData<'a>,
    test: ProbeData<'a>,
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let distinct = {
        let mut v = train.y.to_vec();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    if n_classes < 2 || distinct < 2 {
        return Err(Error::Config("a probe needs at least two classes".into()));
    }
    for d in [(train.x, train.y), (val.x, val.y), (test.x, test.y)] {
        if d.0.nrows() != d.1.len() || d.0.ncols() != train.x.ncols() {
            return Err(Error::Dimension("probe features and labels disagree".into()));
        }
        if let Some(&bad) = d.1.iter().find(|&&c| c >= n_classes) {
            return Err(Error::Index(format!("class {bad} of {n_classes}")));
        }
    }
    if val.y.is_empty() || test.y.is_empty() {
        return Err(Error::Data("probe needs non-empty held-out and test sets".into()));
    }
    let (xtr, rest) = standardized(train.x, &[val.x, test.x]);
    let (xva, xte) = (&rest[0], &rest[1]);
    let dim = xtr.ncols();

    let mut params = ParamStore::<f64>::new();
    params.insert("w", Array2::zeros((dim, n_classes)))?;
    params.insert("b", Array2::zeros((1, n_classes)))?;
    let mut adam = AdamState::new(&params, 0.9, 0.999);
    let mut best = (accuracy(&predict(params.require("w")?, params.require("b")?, xva.view()), val.y), 0);
    let mut best_params = params.clone();
    let mut order: Vec<usize> = (0..train.y.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng::stream(cfg.seed, "probe/shuffle", &[epoch as u64]));
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let xb = xtr.select(Axis(0), batch);
            let mut p = xb.dot(params.require("w")?) + params.require("b")?;
            softmax_rows(&mut p);
            for (r, &i) in batch.iter().enumerate() {
                p[[r, train.y[i]]] -= 1.0;
            }
            p /= batch.len() as f64;
            let mut grads = ParamStore::new();
            grads.insert("w", xb.t().dot(&p))?;
            grads.insert("b", p.sum_axis(Axis(0)).insert_axis(Axis(0)))?;
            adam_step(&mut params, &grads, &mut adam, cfg.learning_rate)?;
        }
        let acc = accuracy(&predict(params.require("w")?, params.require("b")?, xva.view()), val.y);
        if acc > best.0 {
            best = (acc, epoch);
            best_params = params.clone();
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }

    let pred = predict(best_params.require("w")?, best_params.require("b")?, xte.view());
    let mut hits = vec![0usize; n_classes];
    let mut totals = vec![0usize; n_classes];
    for (p, &t) in pred.iter().zip(test.y) {
        totals[t] += 1;
        hits[t] += usize::from(*p == t);
    }
    Ok(ProbeResult {
        accuracy: accuracy(&pred, test.y),
        per_class_accuracy: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect(),
        n_classes,
        chance: 1.0 / n_classes as f64,
        n_test: test.y.len(),
        best_epoch: best.1,
    })
}

fn to_f64(x: &Array2<f32>) -> Array2<f64> {
    x.mapv(f64::from)
}

/// Subject classification from one latent space using the dataset's
/// train, validation and test splits.
pub fn train_subject_probe(
    latents: &LatentTable,
    space: Space,
    dataset: &Dataset,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let feats = to_f64(latents.space(space));
    let rows = |split: Split| -> Vec<usize> {
        (0..latents.len())
            .filter(|&r| dataset.split_of.get(latents.segment_id[r]) == Some(&split))
            .collect()
    };
    let parts: Vec<(Array2<f64>, Vec<usize>)> = [Split::Train, Split::Val, Split::Test]
        .into_iter()
        .map(|s| {
            let r = rows(s);
            (feats.select(Axis(0), &r), r.iter().map(|&i| latents.subject_id[i]).collect())
        })
        .collect();
    let data = |k: usize| ProbeData {
        x: parts[k].0.view(),
        y: &parts[k].1,
    };
    train_softmax_probe(data(0), data(1), data(2), dataset.n_subjects, cfg)
}

// ---------------------------------------------------------------------------
// Content evaluation

/// Adjacent-label content accuracy of one latent space over the rows of
/// `latents`.
pub fn content_eval(latents: &LatentTable, space: Space, index: &LabelIndex, cfg: &ProbeConfig) -> Result<ContentResult> {
    binary_content_eval(
        to_f64(latents.space(space)).view(),
        &latents.content_label,
        &latents.sequence_id,
        index,
        &cfg.svm,
        cfg.seed,
    )
}

/// Flattened segments, `seg_len * C` features each.
pub fn flatten_segments(segments: &[&Segment]) -> Array2<f64> {
    let width = segments.first().map_or(0, |s| s.data.len());
    let mut out = Array2::zeros((segments.len(), width));
    for (mut row, s) in out.rows_mut().into_iter().zip(segments) {
        row.assign(&Array1::from_iter(s.data.iter().map(|&v| f64::from(v))));
    }
    out
}

/// The content protocol applied to flattened raw segments. Uses the same
/// fold streams as [`content_eval`] for the same seed.
pub fn raw_baseline(segments: &[&Segment], index: &LabelIndex, cfg: &ProbeConfig) -> Result<ContentResult> {
    let labels: Vec<usize> = segments.iter().map(|s| s.content_label).collect();
    let groups: Vec<usize> = segments.iter().map(|s| s.sequence_id).collect();
    binary_content_eval(flatten_segments(segments).view(), &labels, &groups, index, &cfg.svm, cfg.seed)
}

// ---------------------------------------------------------------------------
// Report and export

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpacePair<T> {
    pub z1: T,
    pub z2: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub n_pairs: usize,
    pub plain: Option<WilcoxonResult>,
    pub corrected: Option<WilcoxonResult>,
    pub note: Option<String>,
}

fn compare(a: &str, b: &str, xa: &ContentResult, xb: &ContentResult) -> Result<Comparison> {
    let (va, vb) = (xa.accuracies(), xb.accuracies());
    let mut cmp = Comparison {
        a: a.into(),
        b: b.into(),
        n_pairs: va.len(),
        plain: None,
        corrected: None,
        note: None,
    };
    match (wilcoxon_signed_rank(&va, &vb), wilcoxon_signed_rank_corrected(&va, &vb)) {
        (Ok(p), Ok(c)) => {
            cmp.plain = Some(p);
            cmp.corrected = Some(c);
        }
        (Err(Error::UndefinedTest(msg)), _) => cmp.note = Some(msg),
        (Err(e), _) | (_, Err(e)) => return Err(e),
    }
    Ok(cmp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub n_test_segments: usize,
    pub subject: SpacePair<ProbeResult>,
    pub content: SpacePair<ContentResult>,
    pub raw_content: ContentResult,
    pub wilcoxon: Vec<Comparison>,
}

/// Subject probes on both spaces, content and raw-baseline evaluation on the
/// test split, and paired Wilcoxon comparisons of per-pair content accuracy.
pub fn evaluate(net: &Fhvae<f32>, dataset: &Dataset, cfg: &ProbeConfig) -> Result<EvalReport> {
    if net.arch.n_channels != dataset.n_channels {
        return Err(Error::Config(format!(
            "model expects {} channels, corpus has {}",
            net.arch.n_channels, dataset.n_channels
        )));
    }
    let latents = infer_dataset_latents(net, dataset)?;
    let subject = SpacePair {
        z1: train_subject_probe(&latents, Space::Z1, dataset, cfg)?,
        z2: train_subject_probe(&latents, Space::Z2, dataset, cfg)?,
    };
    let test_rows = dataset.indices(Split::Test);
    let test = latents.select(&test_rows);
    let content = SpacePair {
        z1: content_eval(&test, Space::Z1, &dataset.labels, cfg)?,
        z2: content_eval(&test, Space::Z2, &dataset.labels, cfg)?,
    };
    let raw_content = raw_baseline(&dataset.select(Split::Test), &dataset.labels, cfg)?;
    let wilcoxon = vec![
        compare("z1", "z2", &content.z1, &content.z2)?,
        compare("z1", "raw", &content.z1, &raw_content)?,
        compare("z2", "raw", &content.z2, &raw_content)?,
    ];
    Ok(EvalReport {
        seed: cfg.seed,
        n_test_segments: test.len(),
        subject,
        content,
        raw_content,
        wilcoxon,
    })
}

pub fn latents_csv(table: &LatentTable) -> Result<Vec<u8>> {
    if table.is_empty() {
        return Err(Error::Data("latent table is empty".into()));
    }
    let d1 = table.z1.ncols();
    let d2 = table.z2.ncols();
    let mut header: Vec<String> = ["segment_id", "sequence_id", "subject_id", "content_label"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..d1).map(|k| format!("z1_{k}")));
    header.extend((0..d2).map(|k| format!("z2_{k}")));
    let to_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(to_err)?;
    for r in 0..table.len() {
        let mut rec = vec![
            table.segment_id[r].to_string(),
            table.sequence_id[r].to_string(),
            table.subject_id[r].to_string(),
            table.content_label[r].to_string(),
        ];
        rec.extend(table.z1.row(r).iter().map(|v| v.to_string()));
        rec.extend(table.z2.row(r).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(to_err)?;
    }
    w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))
}

pub fn export_latents(table: &LatentTable, path: &Path) -> Result<()> {
    fsio::write_atomic(path, &latents_csv(table)?)
}
