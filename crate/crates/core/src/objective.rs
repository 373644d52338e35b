//! Terms of the discriminative segment variational lower bound.
//!
//! Plain FHVAE (stage 1): z1 has the zero-mean prior `N(0, σ²_z1 I)`;
//! z2 has the sequence prior `N(μ2_i, σ²_z2 I)`, with `μ2_i ~ N(0, σ²_μ2 I)`
//! spread over the `N(i)` segments of the sequence.
//!
//! Extended FHVAE (stage 2): z1 gets the content prior `N(μ1_l, σ²_z1 I)`,
//! `μ1_l ~ N(0, σ²_μ1 I)` spread over the `S(l)` occurrences of the label, and
//! an extra discriminative term recovers the label from z1.
//!
//! The objective is maximized; the trainer minimizes its negated batch mean.

use std::collections::HashMap;
use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ArchConfig, GaussianParams, GaussianVars, MU1_TABLE, MU2_TABLE};
use crate::seqnet::{Graph, Real, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperConfig {
    pub sigma2_z1: f64,
    pub sigma2_z2: f64,
    pub sigma2_mu1: f64,
    pub sigma2_mu2: f64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            sigma2_z1: 0.25,
            sigma2_z2: 0.25,
            sigma2_mu1: 1.0,
            sigma2_mu2: 1.0,
        }
    }
}

impl HyperConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma2_z1", self.sigma2_z1),
            ("sigma2_z2", self.sigma2_z2),
            ("sigma2_mu1", self.sigma2_mu1),
            ("sigma2_mu2", self.sigma2_mu2),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which bound is optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    /// Plain FHVAE: zero-mean z1 prior, no μ1 terms.
    Plain,
    /// Extended FHVAE with the content-dependent z1 prior.
    Extended,
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::Plain),
            2 => Ok(Stage::Extended),
            _ => Err(format!("stage must be 1 or 2, got {v}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::Plain => 1,
            Stage::Extended => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Alphas {
    pub z1: f64,
    pub z2: f64,
}

/// Named components of the objective. `log_p_mu1` and `log_p_mu2` hold the
/// weighted contributions `log p(μ1_l) / S(l)` and `log p(μ2_i) / N(i)`, so
/// `bound = recon - kl_z1 - kl_z2 + log_p_mu2 + log_p_mu1` and
/// `total = bound + α_z1 disc_z1 + α_z2 disc_z2`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_z1: f64,
    pub kl_z2: f64,
    pub log_p_mu1: f64,
    pub log_p_mu2: f64,
    pub disc_z1: f64,
    pub disc_z2: f64,
    pub bound: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            recon: self.recon * k,
            kl_z1: self.kl_z1 * k,
            kl_z2: self.kl_z2 * k,
            log_p_mu1: self.log_p_mu1 * k,
            log_p_mu2: self.log_p_mu2 * k,
            disc_z1: self.disc_z1 * k,
            disc_z2: self.disc_z2 * k,
            bound: self.bound * k,
            total: self.total * k,
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        Self {
            recon: self.recon + o.recon,
            kl_z1: self.kl_z1 + o.kl_z1,
            kl_z2: self.kl_z2 + o.kl_z2,
            log_p_mu1: self.log_p_mu1 + o.log_p_mu1,
            log_p_mu2: self.log_p_mu2 + o.log_p_mu2,
            disc_z1: self.disc_z1 + o.disc_z1,
            disc_z2: self.disc_z2 + o.disc_z2,
            bound: self.bound + o.bound,
            total: self.total + o.total,
        }
    }
}

// ---------------------------------------------------------------------------
// Closed forms

/// `KL(q || N(p_mean, p_var I))` for a diagonal Gaussian `q`.
pub fn kl_diag_gaussian(q: &GaussianParams<f64>, p_mean: ArrayView1<f64>, p_var: f64) -> Result<f64> {
    if !(p_var > 0.0) {
        return Err(Error::Domain(format!("prior variance must be positive, got {p_var}")));
    }
    if q.mean.len() != p_mean.len() || q.logvar.len() != p_mean.len() {
        return Err(Error::Dimension(format!(
            "kl: q has {} / {} dims, prior mean {}",
            q.mean.len(),
            q.logvar.len(),
            p_mean.len()
        )));
    }
    let half_log_p = 0.5 * p_var.ln();
    Ok(q.mean
        .iter()
        .zip(&q.logvar)
        .zip(p_mean.iter())
        .map(|((&m, &lv), &pm)| half_log_p - 0.5 * lv + (lv.exp() + (m - pm).powi(2)) / (2.0 * p_var) - 0.5)
        .sum())
}

/// `log N(mu; 0, sigma2 I)`.
pub fn log_gaussian_prior(mu: ArrayView1<f64>, sigma2: f64) -> f64 {
    let d = mu.len() as f64;
    -0.5 * d * (2.0 * PI * sigma2).ln() - mu.dot(&mu) / (2.0 * sigma2)
}

/// Log-softmax over `candidates` of `-‖z - table_j‖² / (2 sigma2)`, read at
/// `row`.
pub fn discriminative_log_prob(
    z: ArrayView1<f64>,
    table: ArrayView2<f64>,
    row: usize,
    sigma2: f64,
    candidates: &[usize],
) -> Result<f64> {
    if !candidates.contains(&row) {
        return Err(Error::Index(format!("row {row} is not among the candidates")));
    }
    if let Some(&bad) = candidates.iter().find(|&&c| c >= table.nrows()) {
        return Err(Error::Index(format!("candidate {bad} of a {}-row table", table.nrows())));
    }
    if table.ncols() != z.len() {
        return Err(Error::Dimension(format!("z has {} dims, table rows {}", z.len(), table.ncols())));
    }
    let logit = |j: usize| -> f64 {
        let d = &z - &table.row(j);
        -d.dot(&d) / (2.0 * sigma2)
    };
    let logits: Vec<f64> = candidates.iter().map(|&j| logit(j)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(logit(row) - lse)
}

/// Segment variational lower bound from its components. `mu1_row` is
/// ignored in [`Stage::Plain`], where the μ1 term does not exist.
#[allow(clippy::too_many_arguments)]
pub fn segment_bound(
    recon: f64,
    kl_z1: f64,
    kl_z2: f64,
    mu1_row: ArrayView1<f64>,
    mu2_row: ArrayView1<f64>,
    n_i: usize,
    s_l: usize,
    h: &HyperConfig,
    stage: Stage,
) -> f64 {
    let mut bound = recon - kl_z1 - kl_z2 + log_gaussian_prior(mu2_row, h.sigma2_mu2) / n_i as f64;
    if stage == Stage::Extended {
        bound += log_gaussian_prior(mu1_row, h.sigma2_mu1) / s_l as f64;
    }
    bound
}

pub fn discriminative_bound(bound: f64, disc_z1: f64, disc_z2: f64, alphas: Alphas) -> f64 {
    bound + alphas.z1 * disc_z1 + alphas.z2 * disc_z2
}

// ---------------------------------------------------------------------------
// Differentiable batch objective

/// One minibatch with its fixed reparameterization noise.
#[derive(Clone, Debug)]
pub struct BatchInput<F> {
    /// Time-major frames, `T * B x C`.
    pub x: Array2<F>,
    pub batch: usize,
    /// Row of the mu2 table (training sequence) per segment.
    pub sequences: Vec<usize>,
    /// Content label per segment.
    pub labels: Vec<usize>,
    /// N(i) per segment.
    pub seq_counts: Vec<usize>,
    /// S(l) per segment.
    pub label_counts: Vec<usize>,
    /// Labels competing in the z1 discriminative softmax; must contain every
    /// label of the batch.
    pub candidates: Vec<usize>,
    pub eps_z2: Array2<F>,
    pub eps_z1: Array2<F>,
}

/// Nodes of a built objective. Every component node is a `1 x 1` batch sum.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub recon: Var,
    pub kl_z1: Var,
    pub kl_z2: Var,
    pub log_p_mu1: Option<Var>,
    pub log_p_mu2: Var,
    pub disc_z1: Option<Var>,
    pub disc_z2: Var,
    pub q_z1: GaussianVars,
    pub q_z2: GaussianVars,
    /// Negated mean discriminative objective, the quantity to minimize.
    pub loss: Var,
    pub batch: usize,
    pub alphas: Alphas,
}

impl ObjectiveVars {
    /// Per-segment means of every component.
    pub fn breakdown<F: Real>(&self, g: &Graph<'_, F>) -> LossBreakdown {
        let v = |x: Var| g.scalar(x).to_f64().unwrap_or(f64::NAN) / self.batch as f64;
        let opt = |x: Option<Var>| x.map_or(0.0, v);
        let recon = v(self.recon);
        let kl_z1 = v(self.kl_z1);
        let kl_z2 = v(self.kl_z2);
        let log_p_mu1 = opt(self.log_p_mu1);
        let log_p_mu2 = v(self.log_p_mu2);
        let disc_z1 = opt(self.disc_z1);
        let disc_z2 = v(self.disc_z2);
        let bound = recon - kl_z1 - kl_z2 + log_p_mu2 + log_p_mu1;
        LossBreakdown {
            recon,
            kl_z1,
            kl_z2,
            log_p_mu1,
            log_p_mu2,
            disc_z1,
            disc_z2,
            bound,
            total: discriminative_bound(bound, disc_z1, disc_z2, self.alphas),
        }
    }
}

fn c<F: Real>(v: f64) -> F {
    F::from_f64(v).expect("representable constant")
}

/// Σ KL(q || N(prior_mean, prior_var I)) over the batch; `prior_mean` of
/// `None` is the zero mean.
fn kl_graph<F: Real>(g: &mut Graph<'_, F>, q: GaussianVars, prior_mean: Option<Var>, prior_var: f64) -> Result<Var> {
    let (b, d) = g.shape(q.mean);
    let var = g.exp(q.logvar);
    let diff = match prior_mean {
        Some(pm) => g.sub(q.mean, pm)?,
        None => q.mean,
    };
    let sq = g.square(diff);
    let spread = g.add(var, sq)?;
    let spread = g.scale(spread, c(1.0 / (2.0 * prior_var)));
    let half_lv = g.scale(q.logvar, c(0.5));
    let terms = g.sub(spread, half_lv)?;
    let total = g.sum(terms);
    Ok(g.offset(total, c((b * d) as f64 * (0.5 * prior_var.ln() - 0.5))))
}

/// Σ over rows of `log N(table_row; 0, sigma2 I) / count`.
fn weighted_prior_graph<F: Real>(
    g: &mut Graph<'_, F>,
    table: Var,
    rows: &[usize],
    counts: &[usize],
    sigma2: f64,
) -> Result<Var> {
    let d = g.shape(table).1 as f64;
    let picked = g.gather_rows(table, rows)?;
    let sq = g.square(picked);
    let norms = g.sum_rows(sq);
    let w: Vec<F> = counts.iter().map(|&n| c(-1.0 / (2.0 * sigma2 * n as f64))).collect();
    let weighted = g.scale_rows(norms, &w)?;
    let total = g.sum(weighted);
    let constant: f64 = counts.iter().map(|&n| -0.5 * d * (2.0 * PI * sigma2).ln() / n as f64).sum();
    Ok(g.offset(total, c(constant)))
}

/// Σ over rows of the log-softmax over `table` rows of `-‖z - row‖² / (2σ²)`
/// evaluated at `targets`. The `‖z‖²` part is common to all logits of a row
/// and cancels, leaving `z·row / σ² - ‖row‖² / (2σ²)`.
fn discriminative_graph<F: Real>(
    g: &mut Graph<'_, F>,
    z: Var,
    table: Var,
    targets: &[usize],
    sigma2: f64,
) -> Result<Var> {
    let cross = g.matmul_bt(z, table)?;
    let cross = g.scale(cross, c(1.0 / sigma2));
    let sq = g.square(table);
    let norms = g.sum_rows(sq);
    let norms = g.transpose(norms);
    let norms = g.scale(norms, c(-1.0 / (2.0 * sigma2)));
    let logits = g.add_row(cross, norms)?;
    let picked = g.log_softmax_pick(logits, targets)?;
    Ok(g.sum(picked))
}

/// Builds the full discriminative objective for one minibatch.
pub fn build_objective<F: Real>(
    g: &mut Graph<'_, F>,
    arch: &ArchConfig,
    h: &HyperConfig,
    stage: Stage,
    alphas: Alphas,
    input: &BatchInput<F>,
) -> Result<ObjectiveVars> {
    let b = input.batch;
    let n = [input.sequences.len(), input.labels.len(), input.seq_counts.len(), input.label_counts.len()];
    if b == 0 || n.iter().any(|&k| k != b) || input.x.nrows() % b != 0 {
        return Err(Error::Dimension(format!("inconsistent batch description for {b} segments")));
    }
    let steps = input.x.nrows() / b;
    let alphas = match stage {
        Stage::Plain => Alphas { z1: 0.0, ..alphas },
        Stage::Extended => alphas,
    };

    let x = g.input(input.x.clone());
    let q_z2 = model::encode_z2_graph(g, arch, x, b)?;
    let z2 = model::sample_graph(g, q_z2, input.eps_z2.clone())?;
    let q_z1 = model::encode_z1_graph(g, arch, x, z2, b)?;
    let z1 = model::sample_graph(g, q_z1, input.eps_z1.clone())?;
    let px = model::decode_graph(g, arch, z1, z2, steps)?;

    // E_q[log p(x | z1, z2)] with one sample
    let diff = g.sub(px.mean, x)?;
    let sq = g.square(diff);
    let neg_lv = g.scale(px.logvar, c(-1.0));
    let inv_var = g.exp(neg_lv);
    let scaled = g.mul(sq, inv_var)?;
    let quad = g.add(scaled, px.logvar)?;
    let quad = g.sum(quad);
    let recon = g.scale(quad, c(-0.5));
    let recon = g.offset(recon, c(-0.5 * (input.x.len() as f64) * (2.0 * PI).ln()));

    let mu2 = g.param(MU2_TABLE)?;
    let mu2_rows = g.gather_rows(mu2, &input.sequences)?;
    let kl_z2 = kl_graph(g, q_z2, Some(mu2_rows), h.sigma2_z2)?;
    let log_p_mu2 = weighted_prior_graph(g, mu2, &input.sequences, &input.seq_counts, h.sigma2_mu2)?;
    let disc_z2 = discriminative_graph(g, z2, mu2, &input.sequences, h.sigma2_z2)?;

    let (kl_z1, log_p_mu1, disc_z1) = match stage {
        Stage::Plain => (kl_graph(g, q_z1, None, h.sigma2_z1)?, None, None),
        Stage::Extended => {
            let mu1 = g.param(MU1_TABLE)?;
            let mu1_rows = g.gather_rows(mu1, &input.labels)?;
            let kl = kl_graph(g, q_z1, Some(mu1_rows), h.sigma2_z1)?;
            let prior = weighted_prior_graph(g, mu1, &input.labels, &input.label_counts, h.sigma2_mu1)?;
            let position: HashMap<usize, usize> =
                input.candidates.iter().enumerate().map(|(k, &l)| (l, k)).collect();
            let targets = input
                .labels
                .iter()
                .map(|l| {
                    position
                        .get(l)
                        .copied()
                        .ok_or_else(|| Error::Index(format!("label {l} is not among the candidates")))
                })
                .collect::<Result<Vec<_>>>()?;
            let cand = g.gather_rows(mu1, &input.candidates)?;
            let disc = discriminative_graph(g, z1, cand, &targets, h.sigma2_z1)?;
            (kl, Some(prior), Some(disc))
        }
    };

    // total = recon - kl1 - kl2 + prior2 + prior1 + α1 disc1 + α2 disc2
    let mut total = g.sub(recon, kl_z1)?;
    total = g.sub(total, kl_z2)?;
    total = g.add(total, log_p_mu2)?;
    if let Some(p) = log_p_mu1 {
        total = g.add(total, p)?;
    }
    if let Some(d) = disc_z1 {
        if alphas.z1 != 0.0 {
            let w = g.scale(d, c(alphas.z1));
            total = g.add(total, w)?;
        }
    }
    if alphas.z2 != 0.0 {
        let w = g.scale(disc_z2, c(alphas.z2));
        total = g.add(total, w)?;
    }
    let loss = g.scale(total, c(-1.0 / b as f64));

    Ok(ObjectiveVars {
        recon,
        kl_z1,
        kl_z2,
        log_p_mu1,
        log_p_mu2,
        disc_z1,
        disc_z2,
        q_z1,
        q_z2,
        loss,
        batch: b,
        alphas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    fn gauss(mean: Vec<f64>, var: Vec<f64>) -> GaussianParams<f64> {
        GaussianParams {
            mean: Array1::from(mean),
            logvar: Array1::from(var).mapv(f64::ln),
        }
    }

    #[test]
    fn kl_examples() {
        let q = gauss(vec![0.0; 5], vec![0.25; 5]);
        assert!(kl_diag_gaussian(&q, Array1::zeros(5).view(), 0.25).unwrap().abs() < 1e-15);

        let q = gauss(vec![0.5], vec![0.25]);
        assert!((kl_diag_gaussian(&q, Array1::zeros(1).view(), 0.25).unwrap() - 0.5).abs() < 1e-14);

        let q = gauss(vec![0.0; 32], vec![1.0; 32]);
        let expected = 32.0 * (0.5 * 0.25f64.ln() + 1.0 / 0.5 - 0.5);
        let kl = kl_diag_gaussian(&q, Array1::zeros(32).view(), 0.25).unwrap();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 25.82).abs() < 5e-3);

        assert!(matches!(kl_diag_gaussian(&q, Array1::zeros(32).view(), 0.0), Err(Error::Domain(_))));
        assert!(matches!(kl_diag_gaussian(&q, Array1::zeros(31).view(), 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn log_prior_examples() {
        let zero = Array1::<f64>::zeros(32);
        let v = log_gaussian_prior(zero.view(), 1.0);
        assert!((v + 16.0 * (2.0 * PI).ln()).abs() < 1e-12);
        assert!((v - (-29.4060)).abs() < 1e-4);
        let mut mu = Array1::<f64>::zeros(32);
        mu[0] = 2.0;
        assert!((log_gaussian_prior(mu.view(), 1.0) - (-31.4060)).abs() < 1e-4);
    }

    #[test]
    fn discriminative_examples() {
        let table = array![[1.0, 0.0], [-1.0, 0.0]];
        let z = array![0.0, 3.0];
        let v = discriminative_log_prob(z.view(), table.view(), 0, 0.25, &[0, 1]).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-12);

        let table = array![[0.0, 0.0], [10f64.sqrt(), 0.0]];
        let v = discriminative_log_prob(array![0.0, 0.0].view(), table.view(), 0, 0.25, &[0, 1]).unwrap();
        assert!((v + (1.0 + (-20.0f64).exp()).ln()).abs() < 1e-15);
        assert!((v - (-2.061e-9)).abs() < 1e-11);

        assert_eq!(discriminative_log_prob(z.view(), table.view(), 1, 0.25, &[1]).unwrap(), 0.0);
        assert!(matches!(
            discriminative_log_prob(z.view(), table.view(), 1, 0.25, &[0]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn bound_examples() {
        let h = HyperConfig::default();
        let zero = Array1::<f64>::zeros(32);
        let b = segment_bound(-1881.967, 0.0, 0.0, zero.view(), zero.view(), 128, 4, &h, Stage::Extended);
        assert!((b - (-1881.967 - 29.4060 / 128.0 - 29.4060 / 4.0)).abs() < 1e-3);
        assert!((b - (-1889.55)).abs() < 5e-3);
        let b1 = segment_bound(-1881.967, 0.0, 0.0, zero.view(), zero.view(), 128, 4, &h, Stage::Plain);
        assert!((b1 - (-1882.197)).abs() < 1e-3);
        let shifted = segment_bound(-1881.967 + 2.5, 0.0, 0.0, zero.view(), zero.view(), 128, 4, &h, Stage::Extended);
        assert!((shifted - b - 2.5).abs() < 1e-9);

        assert_eq!(discriminative_bound(b, -3.0, -4.0, Alphas::default()), b);
        let t = discriminative_bound(-1889.55, -0.6931, -0.6931, Alphas { z1: 10000.0, z2: 100.0 });
        assert!((t - (-1889.55 - 0.6931 * 10100.0)).abs() < 1e-6);
        assert!((t - (-8889.9)).abs() < 0.05);
    }

    #[test]
    fn stage_serializes_as_number() {
        assert_eq!(serde_json::to_string(&Stage::Extended).unwrap(), "2");
        assert_eq!(serde_json::from_str::<Stage>("1").unwrap(), Stage::Plain);
        assert!(serde_json::from_str::<Stage>("3").is_err());
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(
            m in proptest::collection::vec(-3.0f64..3.0, 4),
            lv in proptest::collection::vec(-3.0f64..3.0, 4),
            pm in proptest::collection::vec(-3.0f64..3.0, 4),
            pv in 0.05f64..4.0,
        ) {
            let q = GaussianParams { mean: Array1::from(m.clone()), logvar: Array1::from(lv) };
            prop_assert!(kl_diag_gaussian(&q, Array1::from(pm).view(), pv).unwrap() >= -1e-12);
            let q = GaussianParams { mean: Array1::from(m.clone()), logvar: Array1::from_elem(4, pv.ln()) };
            prop_assert!(kl_diag_gaussian(&q, Array1::from(m).view(), pv).unwrap().abs() < 1e-12);
        }

        #[test]
        fn softmax_normalizes_and_is_translation_invariant(
            rows in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 3), 2..6),
            z in proptest::collection::vec(-2.0f64..2.0, 3),
            shift in proptest::collection::vec(-5.0f64..5.0, 3),
        ) {
            let k = rows.len();
            let table = Array2::from_shape_fn((k, 3), |(r, c)| rows[r][c]);
            let z = Array1::from(z);
            let cands: Vec<usize> = (0..k).collect();
            let total: f64 = (0..k)
                .map(|r| discriminative_log_prob(z.view(), table.view(), r, 0.25, &cands).unwrap().exp())
                .sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            let shift = Array1::from(shift);
            let moved = &table + &shift;
            let zm = &z + &shift;
            for r in 0..k {
                let a = discriminative_log_prob(z.view(), table.view(), r, 0.25, &cands).unwrap();
                let b = discriminative_log_prob(zm.view(), moved.view(), r, 0.25, &cands).unwrap();
                prop_assert!((a - b).abs() < 1e-8);
            }
        }
    }
}
