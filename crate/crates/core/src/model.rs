//! FHVAE encoders, reparameterized sampling, decoder and the Gaussian
//! reconstruction likelihood.
//!
//! Two separate encoder stacks are used. The z2 stack reads the raw frames;
//! the z1 stack reads every frame concatenated with z2. Both map the
//! concatenated last-step hidden states of all their layers through a mean
//! head and a log-variance head. The decoder receives `[z1 z2]` at every step
//! and predicts a diagonal Gaussian per frame.
//!
//! Two code paths exist: graph builders for training (batched, time-major,
//! differentiable) and [`Fhvae`], a tape-free forward used for inference.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqnet::{
    affine_batch, stacked_forward_batch, AffineParams, Graph, LstmParams, ParamKind, ParamShape, ParamStore, Real,
    Var,
};

pub const ENC_Z2: &str = "enc_z2";
pub const ENC_Z1: &str = "enc_z1";
pub const DECODER: &str = "dec";
pub const MU1_TABLE: &str = "mu1";
pub const MU2_TABLE: &str = "mu2";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub n_channels: usize,
    pub seg_len: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    /// Dimension of both z1 and z2.
    pub latent_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::paper(64)
    }
}

impl ArchConfig {
    /// Full-size network: two layers of 128 cells, 32-dimensional latents.
    pub fn paper(n_channels: usize) -> Self {
        Self {
            n_channels,
            seg_len: 32,
            hidden_size: 128,
            n_layers: 2,
            latent_dim: 32,
        }
    }

    /// Reduced width for single-core CPU runs.
    pub fn desk(n_channels: usize) -> Self {
        Self {
            hidden_size: 32,
            ..Self::paper(n_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 || self.seg_len == 0 || self.hidden_size == 0 || self.n_layers == 0 || self.latent_dim == 0 {
            return Err(Error::Config(format!("architecture sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Width of the vector the encoder heads read.
    pub fn head_input(&self) -> usize {
        self.n_layers * self.hidden_size
    }

    fn stack_input(&self, stack: &str) -> usize {
        match stack {
            ENC_Z2 => self.n_channels,
            ENC_Z1 => self.n_channels + self.latent_dim,
            _ => 2 * self.latent_dim,
        }
    }
}

/// Sizes of the trainable prior-mean tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSizes {
    /// Rows of the mu2 table, one per training sequence.
    pub n_sequences: usize,
    /// Rows of the mu1 table, one per content label.
    pub n_labels: usize,
}

fn lstm_shapes(arch: &ArchConfig, stack: &str, out: &mut Vec<ParamShape>) {
    let h = arch.hidden_size;
    for k in 0..arch.n_layers {
        let input = if k == 0 { arch.stack_input(stack) } else { h };
        out.push(ParamShape::new(format!("{stack}.l{k}.w_ih"), input, 4 * h, ParamKind::Weight));
        out.push(ParamShape::new(format!("{stack}.l{k}.w_hh"), h, 4 * h, ParamKind::Weight));
        out.push(ParamShape::new(format!("{stack}.l{k}.b"), 1, 4 * h, ParamKind::Bias));
    }
}

fn head_shapes(name: &str, input: usize, output: usize, out: &mut Vec<ParamShape>) {
    out.push(ParamShape::new(format!("{name}.w"), input, output, ParamKind::Weight));
    out.push(ParamShape::new(format!("{name}.b"), 1, output, ParamKind::Bias));
}

/// Every trainable array of the model, in a fixed order.
pub fn param_shapes(arch: &ArchConfig, tables: TableSizes) -> Vec<ParamShape> {
    let mut out = Vec::new();
    for enc in [ENC_Z2, ENC_Z1] {
        lstm_shapes(arch, enc, &mut out);
        head_shapes(&format!("{enc}.mean"), arch.head_input(), arch.latent_dim, &mut out);
        head_shapes(&format!("{enc}.logvar"), arch.head_input(), arch.latent_dim, &mut out);
    }
    lstm_shapes(arch, DECODER, &mut out);
    head_shapes(&format!("{DECODER}.mean"), arch.hidden_size, arch.n_channels, &mut out);
    head_shapes(&format!("{DECODER}.logvar"), arch.hidden_size, arch.n_channels, &mut out);
    out.push(ParamShape::new(MU2_TABLE, tables.n_sequences, arch.latent_dim, ParamKind::Table));
    out.push(ParamShape::new(MU1_TABLE, tables.n_labels, arch.latent_dim, ParamKind::Table));
    out
}

/// Diagonal Gaussian given by mean and log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams<F> {
    pub mean: Array1<F>,
    pub logvar: Array1<F>,
}

/// Row-wise batch of diagonal Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBatch<F> {
    pub mean: Array2<F>,
    pub logvar: Array2<F>,
}

impl<F: Real> GaussianBatch<F> {
    pub fn row(&self, r: usize) -> GaussianParams<F> {
        GaussianParams {
            mean: self.mean.row(r).to_owned(),
            logvar: self.logvar.row(r).to_owned(),
        }
    }
}

/// `mean + exp(logvar / 2) * eps`.
pub fn sample_latent<F: Real>(g: &GaussianParams<F>, eps: ArrayView1<F>) -> Result<Array1<F>> {
    if g.mean.len() != eps.len() || g.logvar.len() != eps.len() {
        return Err(Error::Dimension(format!(
            "sample_latent: mean {}, logvar {}, eps {}",
            g.mean.len(),
            g.logvar.len(),
            eps.len()
        )));
    }
    let half = F::from_f64(0.5).unwrap();
    Ok(ndarray::Zip::from(&g.mean)
        .and(&g.logvar)
        .and(&eps)
        .map_collect(|&m, &lv, &e| m + (lv * half).exp() * e))
}

/// Σ over frames and channels of `-½log 2π - ½logvar - (x - mean)² / (2 exp(logvar))`.
pub fn reconstruction_log_likelihood<F: Real>(x: ArrayView2<F>, pred: &[GaussianParams<F>]) -> Result<F> {
    if x.nrows() != pred.len() {
        return Err(Error::Dimension(format!("{} frames but {} predictions", x.nrows(), pred.len())));
    }
    let half = F::from_f64(0.5).unwrap();
    let log2pi = F::from_f64((2.0 * std::f64::consts::PI).ln()).unwrap();
    let mut total = F::zero();
    for (frame, p) in x.rows().into_iter().zip(pred) {
        if frame.len() != p.mean.len() || frame.len() != p.logvar.len() {
            return Err(Error::Dimension("prediction width differs from frame width".into()));
        }
        for ((&v, &m), &lv) in frame.iter().zip(&p.mean).zip(&p.logvar) {
            let d = v - m;
            total += -half * (log2pi + lv) - half * d * d / lv.exp();
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Tape-free inference

/// Network weights unpacked from a store for inference.
#[derive(Clone, Debug)]
pub struct Fhvae<F> {
    pub arch: ArchConfig,
    enc_z2: Stack<F>,
    enc_z1: Stack<F>,
    dec: Vec<LstmParams<F>>,
    dec_mean: AffineParams<F>,
    dec_logvar: AffineParams<F>,
}

#[derive(Clone, Debug)]
struct Stack<F> {
    layers: Vec<LstmParams<F>>,
    mean: AffineParams<F>,
    logvar: AffineParams<F>,
}

fn read_layers<F: Real>(store: &ParamStore<F>, prefix: &str, n: usize) -> Result<Vec<LstmParams<F>>> {
    (0..n).map(|k| LstmParams::from_store(store, &format!("{prefix}.l{k}"))).collect()
}

impl<F: Real> Stack<F> {
    fn from_store(store: &ParamStore<F>, prefix: &str, arch: &ArchConfig) -> Result<Self> {
        Ok(Self {
            layers: read_layers(store, prefix, arch.n_layers)?,
            mean: AffineParams::from_store(store, &format!("{prefix}.mean"))?,
            logvar: AffineParams::from_store(store, &format!("{prefix}.logvar"))?,
        })
    }

    fn run(&self, steps: usize, batch: usize, input: impl Fn(usize) -> Array2<F>) -> Result<GaussianBatch<F>> {
        let out = stacked_forward_batch(&self.layers, steps, batch, input)?;
        Ok(GaussianBatch {
            mean: affine_batch(&self.mean, out.last.view())?,
            logvar: affine_batch(&self.logvar, out.last.view())?,
        })
    }
}

fn check_segments<F: Real>(arch: &ArchConfig, xs: &[ArrayView2<F>]) -> Result<usize> {
    let steps = xs.first().map(|x| x.nrows()).unwrap_or(0);
    if steps == 0 {
        return Err(Error::Dimension("empty segment batch".into()));
    }
    if let Some(bad) = xs.iter().find(|x| x.dim() != (steps, arch.n_channels)) {
        return Err(Error::Dimension(format!(
            "segment of shape {:?}, expected {steps} x {}",
            bad.shape(),
            arch.n_channels
        )));
    }
    Ok(steps)
}

impl<F: Real> Fhvae<F> {
    pub fn from_store(arch: &ArchConfig, store: &ParamStore<F>) -> Result<Self> {
        arch.validate()?;
        let model = Self {
            arch: arch.clone(),
            enc_z2: Stack::from_store(store, ENC_Z2, arch)?,
            enc_z1: Stack::from_store(store, ENC_Z1, arch)?,
            dec: read_layers(store, DECODER, arch.n_layers)?,
            dec_mean: AffineParams::from_store(store, &format!("{DECODER}.mean"))?,
            dec_logvar: AffineParams::from_store(store, &format!("{DECODER}.logvar"))?,
        };
        let expected = [
            (model.enc_z2.layers[0].input_size(), arch.n_channels),
            (model.enc_z1.layers[0].input_size(), arch.n_channels + arch.latent_dim),
            (model.dec[0].input_size(), 2 * arch.latent_dim),
            (model.enc_z2.mean.weight.ncols(), arch.latent_dim),
            (model.dec_mean.weight.ncols(), arch.n_channels),
        ];
        if expected.iter().any(|(a, b)| a != b) {
            return Err(Error::Dimension("parameter store does not match the architecture".into()));
        }
        Ok(model)
    }

    /// Posterior q(z2 | x) for each segment of a batch.
    pub fn encode_z2_batch(&self, xs: &[ArrayView2<F>]) -> Result<GaussianBatch<F>> {
        let steps = check_segments(&self.arch, xs)?;
        self.enc_z2.run(steps, xs.len(), |t| {
            Array2::from_shape_fn((xs.len(), self.arch.n_channels), |(b, c)| xs[b][[t, c]])
        })
    }

    /// Posterior q(z1 | x, z2); row `b` of `z2` conditions segment `b`.
    pub fn encode_z1_batch(&self, xs: &[ArrayView2<F>], z2: ArrayView2<F>) -> Result<GaussianBatch<F>> {
        let steps = check_segments(&self.arch, xs)?;
        if z2.dim() != (xs.len(), self.arch.latent_dim) {
            return Err(Error::Dimension(format!(
                "z2 of shape {:?} for {} segments of latent dim {}",
                z2.shape(),
                xs.len(),
                self.arch.latent_dim
            )));
        }
        let c = self.arch.n_channels;
        self.enc_z1.run(steps, xs.len(), |t| {
            Array2::from_shape_fn((xs.len(), c + self.arch.latent_dim), |(b, k)| {
                if k < c {
                    xs[b][[t, k]]
                } else {
                    z2[[b, k - c]]
                }
            })
        })
    }

    /// Per-frame Gaussians for each row of `(z1, z2)`, `steps` frames each,
    /// returned as `steps` batches of `B x C`.
    pub fn decode_batch(&self, z1: ArrayView2<F>, z2: ArrayView2<F>, steps: usize) -> Result<Vec<GaussianBatch<F>>> {
        let d = self.arch.latent_dim;
        if z1.ncols() != d || z2.ncols() != d || z1.nrows() != z2.nrows() {
            return Err(Error::Dimension(format!(
                "decode: z1 {:?}, z2 {:?}, latent dim {d}",
                z1.shape(),
                z2.shape()
            )));
        }
        let input = ndarray::concatenate(Axis(1), &[z1.view(), z2.view()]).expect("same rows");
        let out = stacked_forward_batch(&self.dec, steps, z1.nrows(), |_| input.clone())?;
        out.top
            .iter()
            .map(|h| {
                Ok(GaussianBatch {
                    mean: affine_batch(&self.dec_mean, h.view())?,
                    logvar: affine_batch(&self.dec_logvar, h.view())?,
                })
            })
            .collect()
    }

    pub fn encode_z2(&self, x: ArrayView2<F>) -> Result<GaussianParams<F>> {
        Ok(self.encode_z2_batch(&[x])?.row(0))
    }

    pub fn encode_z1(&self, x: ArrayView2<F>, z2: ArrayView1<F>) -> Result<GaussianParams<F>> {
        Ok(self.encode_z1_batch(&[x], z2.insert_axis(Axis(0)))?.row(0))
    }

    pub fn decode(&self, z1: ArrayView1<F>, z2: ArrayView1<F>, steps: usize) -> Result<Vec<GaussianParams<F>>> {
        let frames = self.decode_batch(z1.insert_axis(Axis(0)), z2.insert_axis(Axis(0)), steps)?;
        Ok(frames.iter().map(|g| g.row(0)).collect())
    }
}

// ---------------------------------------------------------------------------
// Differentiable graph builders

/// Mean and log-variance nodes of a batch of Gaussians.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub logvar: Var,
}

enum StackInput {
    /// `T * B` rows, time-major.
    Sequence(Var),
    /// `T * B` rows, time-major, with a `B`-row block appended to every frame.
    SequenceWith(Var, Var),
    /// `B` rows fed at every step.
    Repeated(Var),
}

struct StackVars {
    /// Top-layer hidden states, `T * B x H`, time-major.
    top: Var,
    /// Last-step hidden states of all layers, `B x n_layers * H`.
    last: Var,
}

/// Input projection of one layer: a per-step part (`T * B` rows) and a part
/// shared by every step (`B` rows). The bias lands in exactly one of them.
fn project<F: Real>(g: &mut Graph<'_, F>, input: StackInput, w_ih: Var, bias: Var) -> Result<(Option<Var>, Option<Var>)> {
    match input {
        StackInput::Sequence(x) => {
            let p = g.matmul(x, w_ih)?;
            Ok((Some(g.add_row(p, bias)?), None))
        }
        StackInput::SequenceWith(x, extra) => {
            let d = g.shape(x).1;
            let de = g.shape(extra).1;
            let w_x = g.row_slice(w_ih, 0, d)?;
            let w_e = g.row_slice(w_ih, d, de)?;
            let p = g.matmul(x, w_x)?;
            let e = g.matmul(extra, w_e)?;
            Ok((Some(p), Some(g.add_row(e, bias)?)))
        }
        StackInput::Repeated(x) => {
            let p = g.matmul(x, w_ih)?;
            Ok((None, Some(g.add_row(p, bias)?)))
        }
    }
}

fn stack_graph<F: Real>(
    g: &mut Graph<'_, F>,
    prefix: &str,
    arch: &ArchConfig,
    input: StackInput,
    steps: usize,
    batch: usize,
) -> Result<StackVars> {
    let mut input = input;
    let mut lasts = Vec::with_capacity(arch.n_layers);
    let mut top = None;
    for k in 0..arch.n_layers {
        let w_ih = g.param(&format!("{prefix}.l{k}.w_ih"))?;
        let w_hh = g.param(&format!("{prefix}.l{k}.w_hh"))?;
        let bias = g.param(&format!("{prefix}.l{k}.b"))?;
        let (per_step, shared) = project(g, input, w_ih, bias)?;
        let all = g.lstm_sequence(per_step, shared, w_hh, steps, batch)?;
        lasts.push(g.row_slice(all, (steps - 1) * batch, batch)?);
        top = Some(all);
        input = StackInput::Sequence(all);
    }
    let last = if lasts.len() == 1 { lasts[0] } else { g.concat_cols(lasts)? };
    Ok(StackVars {
        top: top.expect("n_layers >= 1"),
        last,
    })
}

fn head_graph<F: Real>(g: &mut Graph<'_, F>, name: &str, input: Var) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    let y = g.matmul(input, w)?;
    g.add_row(y, b)
}

fn gaussian_heads<F: Real>(g: &mut Graph<'_, F>, prefix: &str, input: Var) -> Result<GaussianVars> {
    Ok(GaussianVars {
        mean: head_graph(g, &format!("{prefix}.mean"), input)?,
        logvar: head_graph(g, &format!("{prefix}.logvar"), input)?,
    })
}

/// Time-major stacking of a segment batch: row `t * B + b` is frame `t` of
/// segment `b`.
pub fn time_major<F: Real>(segments: &[ArrayView2<f32>]) -> Array2<F> {
    let b = segments.len();
    let (t, c) = segments[0].dim();
    let mut out = Array2::zeros((t * b, c));
    for (i, seg) in segments.iter().enumerate() {
        for step in 0..t {
            out.row_mut(step * b + i)
                .assign(&seg.row(step).mapv(|v| F::from_f32(v).expect("finite")));
        }
    }
    out
}

/// q(z2 | x) for a time-major batch `x_all` of `batch` segments.
pub fn encode_z2_graph<F: Real>(g: &mut Graph<'_, F>, arch: &ArchConfig, x_all: Var, batch: usize) -> Result<GaussianVars> {
    let steps = g.shape(x_all).0 / batch;
    let stack = stack_graph(g, ENC_Z2, arch, StackInput::Sequence(x_all), steps, batch)?;
    gaussian_heads(g, ENC_Z2, stack.last)
}

/// q(z1 | x, z2); `z2` is `B x D` and is appended to every frame.
pub fn encode_z1_graph<F: Real>(
    g: &mut Graph<'_, F>,
    arch: &ArchConfig,
    x_all: Var,
    z2: Var,
    batch: usize,
) -> Result<GaussianVars> {
    let steps = g.shape(x_all).0 / batch;
    let stack = stack_graph(g, ENC_Z1, arch, StackInput::SequenceWith(x_all, z2), steps, batch)?;
    gaussian_heads(g, ENC_Z1, stack.last)
}

/// p(x_t | z1, z2) for every step; outputs are `T * B x C`, time-major.
pub fn decode_graph<F: Real>(
    g: &mut Graph<'_, F>,
    arch: &ArchConfig,
    z1: Var,
    z2: Var,
    steps: usize,
) -> Result<GaussianVars> {
    let batch = g.shape(z1).0;
    let input = g.concat_cols(vec![z1, z2])?;
    let stack = stack_graph(g, DECODER, arch, StackInput::Repeated(input), steps, batch)?;
    gaussian_heads(g, DECODER, stack.top)
}

/// Reparameterized sample `mean + exp(logvar / 2) * eps` with `eps` fixed.
pub fn sample_graph<F: Real>(g: &mut Graph<'_, F>, q: GaussianVars, eps: Array2<F>) -> Result<Var> {
    let half = F::from_f64(0.5).unwrap();
    let e = g.input(eps);
    let hl = g.scale(q.logvar, half);
    let std = g.exp(hl);
    let noise = g.mul(std, e)?;
    g.add(q.mean, noise)
}

/// Selects rows `start..start+len` of every time block of a time-major array.
pub fn time_major_rows<F: Real>(x: &Array2<F>, batch: usize, rows: std::ops::Range<usize>) -> Array2<F> {
    let steps = x.nrows() / batch;
    let views: Vec<_> = (0..steps)
        .map(|t| x.slice(s![t * batch + rows.start..t * batch + rows.end, ..]))
        .collect();
    ndarray::concatenate(Axis(0), &views).expect("consistent widths")
}
