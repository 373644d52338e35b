//! Hierarchical-sampling batches, ADAM, the two-stage schedule with early
//! stopping on the validation bound, and training artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::model::{self, ArchConfig, Fhvae, TableSizes, MU1_TABLE};
use crate::objective::{build_objective, Alphas, BatchInput, HyperConfig, LossBreakdown, Stage};
use crate::rng;
use crate::seqnet::{init_params, save_checkpoint, Graph, ParamStore, Real};
use crate::synthcorpus::{Dataset, Split};

pub const CHECKPOINT_FILE: &str = "best.fhvz";
pub const MODEL_SIDECAR: &str = "model.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const BEST_FILE: &str = "best.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub stage: Stage,
    pub alpha_z1: f64,
    pub alpha_z2: f64,
    /// Unique content labels per super-batch.
    #[serde(rename = "K")]
    pub k: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Validation quantity that drives early stopping.
    pub monitor: Monitor,
}

/// Validation score used for model selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    /// Variational lower bound without discriminative terms.
    #[default]
    Bound,
    /// Full training objective, discriminative terms included.
    Objective,
}

impl Monitor {
    pub fn score(self, b: &LossBreakdown) -> f64 {
        match self {
            Monitor::Bound => b.bound,
            Monitor::Objective => b.total,
        }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            stage: Stage::Plain,
            alpha_z1: 0.0,
            alpha_z2: 100.0,
            k: 64,
            minibatch_size: 256,
            learning_rate: 1e-3,
            max_epochs: 500,
            patience: 50,
            beta1: 0.95,
            beta2: 0.999,
            seed: 0,
            monitor: Monitor::Bound,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: Stage::Extended,
            alpha_z1: 10000.0,
            monitor: Monitor::Objective,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.minibatch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("K, minibatch_size and max_epochs must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) || self.alpha_z1 < 0.0 || self.alpha_z2 < 0.0 {
            return Err(Error::Config("learning rate and alphas must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("ADAM betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Stage 1 has no z1 discriminative term whatever the config says.
    pub fn alphas(&self) -> Alphas {
        Alphas {
            z1: if self.stage == Stage::Plain { 0.0 } else { self.alpha_z1 },
            z2: self.alpha_z2,
        }
    }
}

// ---------------------------------------------------------------------------
// ADAM

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub m: ParamStore<F>,
    pub v: ParamStore<F>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamStore<F>, beta1: f64, beta2: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected ADAM update. Non-finite gradients reject the step and
/// leave parameters and state untouched.
pub fn adam_step<F: Real>(params: &mut ParamStore<F>, grads: &ParamStore<F>, state: &mut AdamState<F>, lr: f64) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::Dimension("gradient store does not match parameters".into()));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient, step rejected".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let f = |v: f64| F::from_f64(v).expect("representable");
    let (fb1, fb2, f1b1, f1b2) = (f(b1), f(b2), f(1.0 - b1), f(1.0 - b2));
    let (fc1, fc2, flr, feps) = (f(c1), f(c2), f(lr), f(state.eps));
    for id in 0..params.len() {
        let g = grads.array(id);
        let m = state.m.array_mut(id);
        ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = fb1 * *m + f1b1 * g);
        let v = state.v.array_mut(id);
        ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = fb2 * *v + f1b2 * g * g);
        let (m, v) = (state.m.array(id), state.v.array(id));
        ndarray::Zip::from(params.array_mut(id))
            .and(m)
            .and(v)
            .for_each(|p, &m, &v| *p -= flr * (m / fc1) / ((v / fc2).sqrt() + feps));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Hierarchical sampling

/// Training segments grouped by content label.
#[derive(Clone, Debug)]
pub struct LabelGroups {
    groups: BTreeMap<usize, Vec<usize>>,
}

impl LabelGroups {
    pub fn new(dataset: &Dataset, split: Split) -> Self {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in dataset.indices(split) {
            groups.entry(dataset.segments[i].content_label).or_default().push(i);
        }
        Self { groups }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (segment, label) in pairs {
            groups.entry(label).or_default().push(segment);
        }
        Self { groups }
    }

    pub fn n_labels(&self) -> usize {
        self.groups.len()
    }

    pub fn n_segments(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.groups.keys().copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierarchicalBatch {
    /// Segment indices of every member of the drawn labels.
    pub segments: Vec<usize>,
    /// The drawn labels, used as the z1 softmax candidates.
    pub labels: Vec<usize>,
}

/// Draws `min(K, n_labels)` distinct labels uniformly without replacement and
/// returns every segment carrying one of them.
pub fn hierarchical_sample_batch<R: Rng>(groups: &LabelGroups, k: usize, rng: &mut R) -> Result<HierarchicalBatch> {
    if groups.n_labels() == 0 {
        return Err(Error::Data("no training segments to sample from".into()));
    }
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let keys: Vec<usize> = groups.labels().collect();
    let mut picks = index::sample(rng, keys.len(), k.min(keys.len())).into_vec();
    picks.sort_unstable();
    let labels: Vec<usize> = picks.into_iter().map(|i| keys[i]).collect();
    let segments = labels.iter().flat_map(|l| groups.groups[l].iter().copied()).collect();
    Ok(HierarchicalBatch { segments, labels })
}

// ---------------------------------------------------------------------------
// Batches and evaluation

fn normal_matrix<F: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<F> {
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = rng.sample(StandardNormal);
        F::from_f64(v).expect("representable")
    })
}

/// Assembles a minibatch from dataset segment indices with noise drawn from `rng`.
pub fn make_batch<F: Real, R: Rng>(
    dataset: &Dataset,
    arch: &ArchConfig,
    members: &[usize],
    candidates: &[usize],
    rng: &mut R,
) -> BatchInput<F> {
    let segs: Vec<ArrayView2<f32>> = members.iter().map(|&i| dataset.segments[i].data.view()).collect();
    let b = members.len();
    BatchInput {
        x: model::time_major(&segs),
        batch: b,
        sequences: members.iter().map(|&i| dataset.segments[i].sequence_id).collect(),
        labels: members.iter().map(|&i| dataset.segments[i].content_label).collect(),
        seq_counts: members
            .iter()
            .map(|&i| dataset.train_counts[dataset.segments[i].sequence_id].max(1))
            .collect(),
        label_counts: members
            .iter()
            .map(|&i| dataset.labels.count(dataset.segments[i].content_label).max(1))
            .collect(),
        candidates: candidates.to_vec(),
        eps_z2: normal_matrix(rng, b, arch.latent_dim),
        eps_z1: normal_matrix(rng, b, arch.latent_dim),
    }
}

pub fn table_sizes(dataset: &Dataset) -> TableSizes {
    TableSizes {
        n_sequences: dataset.n_sequences,
        n_labels: dataset.labels.len(),
    }
}

/// Copy of `params` in which μ1 rows of labels without training segments are
/// replaced by their closed-form MAP estimate from the posterior means of the
/// given segments, `Σ E[z1] / (S(l) + σ²_z1 / σ²_μ1)`.
fn with_estimated_mu1(
    arch: &ArchConfig,
    hyper: &HyperConfig,
    params: &ParamStore<f32>,
    dataset: &Dataset,
    members: &[usize],
) -> Result<ParamStore<f32>> {
    let mut trained = vec![false; dataset.labels.len()];
    for i in dataset.indices(Split::Train) {
        trained[dataset.segments[i].content_label] = true;
    }
    let todo: Vec<usize> = members
        .iter()
        .copied()
        .filter(|&i| !trained[dataset.segments[i].content_label])
        .collect();
    let mut out = params.clone();
    if todo.is_empty() {
        return Ok(out);
    }
    let net = Fhvae::from_store(arch, params)?;
    let mut sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for chunk in todo.chunks(512) {
        let xs: Vec<_> = chunk.iter().map(|&i| dataset.segments[i].data.view()).collect();
        let q2 = net.encode_z2_batch(&xs)?;
        let q1 = net.encode_z1_batch(&xs, q2.mean.view())?;
        for (r, &i) in chunk.iter().enumerate() {
            let acc = sums
                .entry(dataset.segments[i].content_label)
                .or_insert_with(|| vec![0.0; arch.latent_dim]);
            for (a, v) in acc.iter_mut().zip(q1.mean.row(r)) {
                *a += f64::from(*v);
            }
        }
    }
    let ratio = hyper.sigma2_z1 / hyper.sigma2_mu1;
    let table = out
        .get_mut(MU1_TABLE)
        .ok_or_else(|| Error::Index("missing mu1 table".into()))?;
    for (l, acc) in sums {
        let denom = dataset.labels.count(l) as f64 + ratio;
        for (d, a) in acc.iter().enumerate() {
            table[[l, d]] = (a / denom) as f32;
        }
    }
    Ok(out)
}

/// Mean per-segment objective over `members` with one reparameterization
/// sample per segment drawn from a fixed evaluation stream.
pub fn evaluate_breakdown(
    arch: &ArchConfig,
    hyper: &HyperConfig,
    cfg: &StageConfig,
    params: &ParamStore<f32>,
    dataset: &Dataset,
    members: &[usize],
    eval_seed: u64,
) -> Result<LossBreakdown> {
    if members.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let params = match cfg.stage {
        Stage::Extended => with_estimated_mu1(arch, hyper, params, dataset, members)?,
        Stage::Plain => params.clone(),
    };
    let mut labels: Vec<usize> = members.iter().map(|&i| dataset.segments[i].content_label).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut total = LossBreakdown::default();
    for (chunk_id, chunk) in members.chunks(cfg.minibatch_size.max(1)).enumerate() {
        let mut rng = rng::stream(eval_seed, "eval/eps", &[chunk_id as u64]);
        let input: BatchInput<f32> = make_batch(dataset, arch, chunk, &labels, &mut rng);
        let mut g = Graph::with_params(&params);
        let vars = build_objective(&mut g, arch, hyper, cfg.stage, cfg.alphas(), &input)?;
        total = total.add(&vars.breakdown(&g).scaled(chunk.len() as f64));
    }
    let mean = total.scaled(1.0 / members.len() as f64);
    if !mean.bound.is_finite() {
        return Err(Error::Numeric(format!("non-finite evaluation bound {}", mean.bound)));
    }
    Ok(mean)
}

/// Mean per-segment variational lower bound on the validation split, without
/// discriminative terms.
pub fn evaluate_validation_bound(
    arch: &ArchConfig,
    hyper: &HyperConfig,
    cfg: &StageConfig,
    params: &ParamStore<f32>,
    dataset: &Dataset,
    eval_seed: u64,
) -> Result<f64> {
    let val = dataset.indices(Split::Val);
    if val.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    Ok(evaluate_breakdown(arch, hyper, cfg, params, dataset, &val, eval_seed)?.bound)
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub stage: Stage,
    pub monitor: Monitor,
    pub best_epoch: usize,
    pub best_val_score: f64,
    pub epochs_run: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation epoch (the initial parameters if no
    /// epoch improved on them).
    pub params: ParamStore<f32>,
    /// Parameters after the final epoch.
    pub last_params: ParamStore<f32>,
    pub log: Vec<EpochLog>,
    pub best: BestRecord,
}

/// Trains one stage. Stage 1 starts from `init` or from fresh parameters;
/// stage 2 requires the stage-1 parameters as `init`.
pub fn train_stage(
    arch: &ArchConfig,
    hyper: &HyperConfig,
    dataset: &Dataset,
    cfg: &StageConfig,
    init: Option<ParamStore<f32>>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    hyper.validate()?;
    arch.validate()?;
    if arch.n_channels != dataset.n_channels || arch.seg_len != dataset.seg_len {
        return Err(Error::Config(format!(
            "model expects {} channels x {} frames, corpus has {} x {}",
            arch.n_channels, arch.seg_len, dataset.n_channels, dataset.seg_len
        )));
    }
    let shapes = model::param_shapes(arch, table_sizes(dataset));
    let mut params = match (cfg.stage, init) {
        (_, Some(p)) => p,
        (Stage::Plain, None) => init_params(&shapes, rng::derive_seed(cfg.seed, "init"))?,
        (Stage::Extended, None) => {
            return Err(Error::Config("stage 2 requires a stage-1 checkpoint to start from".into()))
        }
    };
    let expected: ParamStore<f32> = init_params(&shapes, 0)?;
    if !params.same_layout(&expected) {
        return Err(Error::Config("initial parameters do not match the model and corpus".into()));
    }
    let groups = LabelGroups::new(dataset, Split::Train);
    if groups.n_labels() == 0 {
        return Err(Error::Data("training split is empty".into()));
    }
    let eval_seed = rng::derive_seed(cfg.seed, "eval");
    let mut adam = AdamState::new(&params, cfg.beta1, cfg.beta2);
    let alphas = cfg.alphas();
    let super_batches = groups.n_labels().div_ceil(cfg.k);

    let val_idx = dataset.indices(Split::Val);
    let initial = evaluate_breakdown(arch, hyper, cfg, &params, dataset, &val_idx, eval_seed)?;
    let mut best = BestRecord {
        stage: cfg.stage,
        monitor: cfg.monitor,
        best_epoch: 0,
        best_val_score: cfg.monitor.score(&initial),
        epochs_run: 0,
    };
    let mut best_params = params.clone();
    let mut log = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let mut batch_rng = rng::stream(cfg.seed, "train/batches", &[epoch as u64]);
        let mut train_sum = LossBreakdown::default();
        let mut seen = 0usize;
        let mut step = 0u64;
        for _ in 0..super_batches {
            let mut hb = hierarchical_sample_batch(&groups, cfg.k, &mut batch_rng)?;
            hb.segments.shuffle(&mut batch_rng);
            for chunk in hb.segments.chunks(cfg.minibatch_size) {
                let mut eps_rng = rng::stream(cfg.seed, "train/eps", &[epoch as u64, step]);
                step += 1;
                let input: BatchInput<f32> = make_batch(dataset, arch, chunk, &hb.labels, &mut eps_rng);
                let mut g = Graph::with_params(&params);
                let vars = build_objective(&mut g, arch, hyper, cfg.stage, alphas, &input)?;
                let grads = g.backward(vars.loss)?;
                train_sum = train_sum.add(&vars.breakdown(&g).scaled(chunk.len() as f64));
                seen += chunk.len();
                drop(g);
                adam_step(&mut params, &grads, &mut adam, cfg.learning_rate)?;
            }
        }
        let train = train_sum.scaled(1.0 / seen.max(1) as f64);
        let val = evaluate_breakdown(arch, hyper, cfg, &params, dataset, &val_idx, eval_seed)?;
        let entry = EpochLog { epoch, train, val };
        on_epoch(&entry);
        log.push(entry);
        best.epochs_run = epoch;
        let score = cfg.monitor.score(&val);
        if score > best.best_val_score {
            best.best_val_score = score;
            best.best_epoch = epoch;
            best_params = params.clone();
        } else if epoch - best.best_epoch >= cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best_params,
        last_params: params,
        log,
        best,
    })
}

// ---------------------------------------------------------------------------
// Artifacts

/// Architecture and training context stored next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub arch: ArchConfig,
    pub hyper: HyperConfig,
    pub tables: TableSizes,
    pub stage: Stage,
}

pub fn train_log_csv(log: &[EpochLog]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record(["epoch", "split", "recon", "kl_z1", "kl_z2", "disc_z1", "disc_z2", "bound", "total"])
        .map_err(to_err)?;
    for entry in log {
        for (split, b) in [("train", &entry.train), ("val", &entry.val)] {
            w.write_record([
                entry.epoch.to_string(),
                split.to_string(),
                b.recon.to_string(),
                b.kl_z1.to_string(),
                b.kl_z2.to_string(),
                b.disc_z1.to_string(),
                b.disc_z2.to_string(),
                b.bound.to_string(),
                b.total.to_string(),
            ])
            .map_err(to_err)?;
        }
    }
    w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))
}

/// Writes `best.fhvz`, `model.json`, `train_log.csv` and `best.json` into `dir`.
pub fn write_stage_artifacts(dir: &Path, sidecar: &ModelSidecar, outcome: &TrainOutcome) -> Result<()> {
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &outcome.params)?;
    fsio::write_json(&dir.join(MODEL_SIDECAR), sidecar)?;
    fsio::write_atomic(&dir.join(TRAIN_LOG), &train_log_csv(&outcome.log)?)?;
    fsio::write_json(&dir.join(BEST_FILE), &outcome.best)
}

/// Reads the sidecar that sits next to a checkpoint file.
pub fn read_sidecar(checkpoint: &Path) -> Result<ModelSidecar> {
    let dir = checkpoint.parent().unwrap_or_else(|| Path::new("."));
    fsio::read_json(&dir.join(MODEL_SIDECAR))
}
