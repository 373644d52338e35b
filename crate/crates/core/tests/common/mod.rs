//! Tiny model fixture shared by the gradient tests.

#![allow(dead_code)]

use fhvae::model::{self, ArchConfig, TableSizes};
use fhvae::objective::{build_objective, Alphas, BatchInput, HyperConfig, Stage};
use fhvae::seqnet::{init_params, Graph, ParamStore};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const T: usize = 4;
pub const B: usize = 3;

pub fn tiny() -> (ArchConfig, TableSizes) {
    let arch = ArchConfig {
        n_channels: 2,
        seg_len: T,
        hidden_size: 4,
        n_layers: 2,
        latent_dim: 4,
    };
    (arch, TableSizes { n_sequences: 2, n_labels: 3 })
}

pub fn normal(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| s * rng.sample::<f64, _>(StandardNormal))
}

pub struct Fixture {
    pub arch: ArchConfig,
    pub params: ParamStore<f64>,
    pub segments: Vec<Array2<f32>>,
    pub input: BatchInput<f64>,
}

pub fn fixture(seed: u64) -> Fixture {
    let (arch, tables) = tiny();
    let mut params: ParamStore<f64> = init_params(&model::param_shapes(&arch, tables), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    // non-zero biases and tables so every path carries signal
    let names: Vec<String> = params.names().to_vec();
    for name in names {
        let a = params.get_mut(&name).unwrap();
        let noise = normal(&mut rng, a.nrows(), a.ncols(), 0.3);
        *a += &noise;
    }
    let segments: Vec<Array2<f32>> = (0..B)
        .map(|_| normal(&mut rng, T, arch.n_channels, 1.0).mapv(|v| v as f32))
        .collect();
    let views: Vec<ArrayView2<f32>> = segments.iter().map(|s| s.view()).collect();
    let input = BatchInput {
        x: model::time_major(&views),
        batch: B,
        sequences: vec![0, 1, 1],
        labels: vec![0, 2, 1],
        seq_counts: vec![5, 7, 7],
        label_counts: vec![2, 3, 4],
        candidates: vec![0, 1, 2],
        eps_z2: normal(&mut rng, B, arch.latent_dim, 1.0),
        eps_z1: normal(&mut rng, B, arch.latent_dim, 1.0),
    };
    Fixture { arch, params, segments, input }
}

pub fn hyper() -> HyperConfig {
    HyperConfig {
        sigma2_z1: 0.5,
        sigma2_z2: 0.25,
        sigma2_mu1: 1.5,
        sigma2_mu2: 0.8,
    }
}

pub const ALPHAS: Alphas = Alphas { z1: 3.0, z2: 2.0 };

pub fn graph_loss(f: &Fixture, params: &ParamStore<f64>, stage: Stage) -> f64 {
    let mut g = Graph::with_params(params);
    let vars = build_objective(&mut g, &f.arch, &hyper(), stage, ALPHAS, &f.input).unwrap();
    g.scalar(vars.loss)
}

/// Largest relative error between the analytic gradient and central finite
/// differences over every parameter scalar, with the offending entry.
pub fn worst_gradient_error(f: &Fixture, stage: Stage, step: f64) -> (f64, String) {
    let mut g = Graph::with_params(&f.params);
    let vars = build_objective(&mut g, &f.arch, &hyper(), stage, ALPHAS, &f.input).unwrap();
    let grads = g.backward(vars.loss).unwrap();
    drop(g);
    let mut worst = (0.0f64, String::new());
    for (id, name) in f.params.names().iter().enumerate() {
        let shape = f.params.array(id).dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let mut p = f.params.clone();
                p.array_mut(id)[[r, c]] += step;
                let up = graph_loss(f, &p, stage);
                p.array_mut(id)[[r, c]] -= 2.0 * step;
                let down = graph_loss(f, &p, stage);
                let numeric = (up - down) / (2.0 * step);
                let analytic = grads.array(id)[[r, c]];
                let err = (numeric - analytic).abs() / (1.0 + numeric.abs().max(analytic.abs()));
                if err > worst.0 {
                    worst = (err, format!("{name}[{r},{c}]: analytic {analytic} numeric {numeric}"));
                }
            }
        }
    }
    worst
}
