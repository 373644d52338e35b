//! Tape-free LSTM and affine forwards, used for inference.
//!
//! Weight matrices are stored input-major (`in x out`), so a batch of row
//! vectors `X` maps to `X W + b`. LSTM pre-activations are laid out in gate
//! order input, forget, output, candidate.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::params::ParamStore;
use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<F> {
    /// `input_size x 4H`
    pub w_ih: Array2<F>,
    /// `H x 4H`
    pub w_hh: Array2<F>,
    /// `4H`
    pub bias: Array1<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams<F> {
    /// `in x out`
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

fn logistic<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Real> LstmParams<F> {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        Self {
            w_ih: Array2::zeros((input_size, 4 * hidden_size)),
            w_hh: Array2::zeros((hidden_size, 4 * hidden_size)),
            bias: Array1::zeros(4 * hidden_size),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.nrows()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.nrows()
    }

    /// Reads `{prefix}.w_ih`, `{prefix}.w_hh` and `{prefix}.b` from a store.
    pub fn from_store(store: &ParamStore<F>, prefix: &str) -> Result<Self> {
        let p = Self {
            w_ih: store.require(&format!("{prefix}.w_ih"))?.clone(),
            w_hh: store.require(&format!("{prefix}.w_hh"))?.clone(),
            bias: store.require(&format!("{prefix}.b"))?.row(0).to_owned(),
        };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden_size();
        if self.w_hh.ncols() != 4 * h || self.w_ih.ncols() != 4 * h || self.bias.len() != 4 * h {
            return Err(Error::Dimension(format!(
                "inconsistent LSTM shapes: w_ih {:?}, w_hh {:?}, bias {}",
                self.w_ih.shape(),
                self.w_hh.shape(),
                self.bias.len()
            )));
        }
        Ok(())
    }
}

impl<F: Real> AffineParams<F> {
    pub fn from_store(store: &ParamStore<F>, prefix: &str) -> Result<Self> {
        let p = Self {
            weight: store.require(&format!("{prefix}.w"))?.clone(),
            bias: store.require(&format!("{prefix}.b"))?.row(0).to_owned(),
        };
        if p.weight.ncols() != p.bias.len() {
            return Err(Error::Dimension(format!(
                "affine weight {:?} with bias of length {}",
                p.weight.shape(),
                p.bias.len()
            )));
        }
        Ok(p)
    }
}

/// One LSTM step over a batch of rows. Returns `(h, c)`, each `B x H`.
pub fn lstm_step_batch<F: Real>(
    p: &LstmParams<F>,
    x: ArrayView2<F>,
    h_prev: ArrayView2<F>,
    c_prev: ArrayView2<F>,
) -> Result<(Array2<F>, Array2<F>)> {
    p.check()?;
    let hs = p.hidden_size();
    let b = x.nrows();
    if x.ncols() != p.input_size() || h_prev.dim() != (b, hs) || c_prev.dim() != (b, hs) {
        return Err(Error::Dimension(format!(
            "lstm_step: x {:?}, h {:?}, c {:?} for input {} hidden {hs}",
            x.shape(),
            h_prev.shape(),
            c_prev.shape(),
            p.input_size()
        )));
    }
    let mut pre = x.dot(&p.w_ih) + h_prev.dot(&p.w_hh);
    pre += &p.bias;
    let i = pre.slice(s![.., ..hs]).mapv(logistic);
    let f = pre.slice(s![.., hs..2 * hs]).mapv(logistic);
    let o = pre.slice(s![.., 2 * hs..3 * hs]).mapv(logistic);
    let g = pre.slice(s![.., 3 * hs..]).mapv(F::tanh);
    let mut c = Array2::zeros((b, hs));
    Zip::from(&mut c)
        .and(&f)
        .and(&c_prev)
        .and(&i)
        .and(&g)
        .for_each(|c, &f, &cp, &i, &g| *c = f * cp + i * g);
    let h = &o * &c.mapv(F::tanh);
    Ok((h, c))
}

pub fn lstm_step<F: Real>(
    p: &LstmParams<F>,
    x: ArrayView1<F>,
    h_prev: ArrayView1<F>,
    c_prev: ArrayView1<F>,
) -> Result<(Array1<F>, Array1<F>)> {
    let (h, c) = lstm_step_batch(
        p,
        x.insert_axis(Axis(0)),
        h_prev.insert_axis(Axis(0)),
        c_prev.insert_axis(Axis(0)),
    )?;
    Ok((h.row(0).to_owned(), c.row(0).to_owned()))
}

/// Output of a stacked LSTM run over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StackOutput<F> {
    /// Top-layer hidden state per step, `T` arrays of `B x H_top`.
    pub top: Vec<Array2<F>>,
    /// Last-step hidden states of all layers concatenated, `B x sum(H)`.
    pub last: Array2<F>,
}

/// Runs a layer stack over time. `step_input(t)` yields the `B x D` input
/// of step `t`; layer `k` consumes layer `k-1`'s hidden states.
pub fn stacked_forward_batch<F: Real>(
    layers: &[LstmParams<F>],
    steps: usize,
    batch: usize,
    step_input: impl Fn(usize) -> Array2<F>,
) -> Result<StackOutput<F>> {
    if steps == 0 {
        return Err(Error::Dimension("stacked_forward: empty sequence".into()));
    }
    if layers.is_empty() {
        return Err(Error::Dimension("stacked_forward: no layers".into()));
    }
    let mut inputs: Vec<Array2<F>> = (0..steps).map(step_input).collect();
    let mut lasts = Vec::with_capacity(layers.len());
    for layer in layers {
        let hs = layer.hidden_size();
        let mut h = Array2::zeros((batch, hs));
        let mut c = Array2::zeros((batch, hs));
        let mut outputs = Vec::with_capacity(steps);
        for x in &inputs {
            let (h2, c2) = lstm_step_batch(layer, x.view(), h.view(), c.view())?;
            h = h2;
            c = c2;
            outputs.push(h.clone());
        }
        lasts.push(h);
        inputs = outputs;
    }
    let views: Vec<_> = lasts.iter().map(|a| a.view()).collect();
    let last = ndarray::concatenate(Axis(1), &views).expect("same batch size");
    Ok(StackOutput { top: inputs, last })
}

/// Single-sequence form: `x` is `T x D`. Returns the `T x H_top` top-layer
/// outputs and the concatenated last-step states of every layer.
pub fn stacked_forward<F: Real>(layers: &[LstmParams<F>], x: ArrayView2<F>) -> Result<(Array2<F>, Array1<F>)> {
    let out = stacked_forward_batch(layers, x.nrows(), 1, |t| x.row(t).to_owned().insert_axis(Axis(0)))?;
    let views: Vec<_> = out.top.iter().map(|a| a.view()).collect();
    let top = ndarray::concatenate(Axis(0), &views).expect("one row per step");
    Ok((top, out.last.row(0).to_owned()))
}

pub fn affine_batch<F: Real>(p: &AffineParams<F>, v: ArrayView2<F>) -> Result<Array2<F>> {
    if v.ncols() != p.weight.nrows() || p.weight.ncols() != p.bias.len() {
        return Err(Error::Dimension(format!(
            "affine: input width {} for weight {:?}",
            v.ncols(),
            p.weight.shape()
        )));
    }
    Ok(v.dot(&p.weight) + &p.bias)
}

pub fn affine<F: Real>(p: &AffineParams<F>, v: ArrayView1<F>) -> Result<Array1<F>> {
    Ok(affine_batch(p, v.insert_axis(Axis(0)))?.row(0).to_owned())
}
