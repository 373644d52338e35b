use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{Error, Result};
use crate::fsio;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Xavier-uniform initialized.
    Weight,
    /// Zero initialized.
    Bias,
    /// Trainable prior-mean table, zero initialized.
    Table,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: ParamKind,
}

impl ParamShape {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, kind: ParamKind) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            kind,
        }
    }
}

/// Named collection of trainable arrays. Every array is 2-D; vectors are
/// stored as single rows. Iteration follows insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    arrays: Vec<Array2<F>>,
    index: BTreeMap<String, usize>,
}

impl<F> Default for ParamStore<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            arrays: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array2<F>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.arrays.len());
        self.names.push(name);
        self.arrays.push(array);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn array(&self, id: usize) -> &Array2<F> {
        &self.arrays[id]
    }

    pub fn array_mut(&mut self, id: usize) -> &mut Array2<F> {
        &mut self.arrays[id]
    }

    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.id(name).map(|i| &self.arrays[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<F>> {
        self.id(name).map(move |i| &mut self.arrays[i])
    }

    /// Like [`ParamStore::get`] but reports a missing name as an error.
    pub fn require(&self, name: &str) -> Result<&Array2<F>> {
        self.get(name)
            .ok_or_else(|| Error::Index(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<F>)> {
        self.names.iter().map(String::as_str).zip(self.arrays.iter())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            arrays: self.arrays.iter().map(|a| Array2::zeros(a.dim())).collect(),
            index: self.index.clone(),
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.arrays.iter().map(Array2::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    pub fn same_layout<G>(&self, other: &ParamStore<G>) -> bool {
        self.names == other.names
            && self
                .arrays
                .iter()
                .zip(&other.arrays)
                .all(|(a, b)| a.dim() == b.dim())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| a.mapv(|v| G::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(G::nan)))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Initializes every listed array: weights uniform in `[-s, s]` with
/// `s = sqrt(6 / (rows + cols))`, biases and tables zero. Each array draws
/// from its own stream keyed by its name.
pub fn init_params<F: Real>(shapes: &[ParamShape], seed: u64) -> Result<ParamStore<F>> {
    let mut store = ParamStore::new();
    for shape in shapes {
        let array = match shape.kind {
            ParamKind::Bias | ParamKind::Table => Array2::zeros((shape.rows, shape.cols)),
            ParamKind::Weight => {
                let bound = (6.0 / (shape.rows + shape.cols) as f64).sqrt();
                let mut rng = rng::stream(seed, &format!("init/{}", shape.name), &[]);
                Array2::from_shape_fn((shape.rows, shape.cols), |_| {
                    F::from_f64(rng.gen_range(-bound..=bound)).expect("representable")
                })
            }
        };
        store.insert(shape.name.clone(), array)?;
    }
    Ok(store)
}

// ---------------------------------------------------------------------------
// Checkpoint file

const CHECKPOINT_MAGIC: &[u8; 4] = b"FHVZ";
const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode_checkpoint(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * store.n_scalars() + 32 * store.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, array) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(2);
        out.extend_from_slice(&(array.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(array.ncols() as u32).to_le_bytes());
        for v in array.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let out = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ParamStore<f32>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic, expected FHVZ"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
            .to_owned();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(path, format!("unsupported dtype tag {dtype}")));
        }
        let ndim = r.u8()? as usize;
        let dims: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(Error::format(path, format!("{name}: {ndim}-d arrays are not supported"))),
        };
        let values = r
            .take(4 * rows * cols)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let array = Array2::from_shape_vec((rows, cols), values).expect("shape matches payload");
        store
            .insert(name, array)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last array"));
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    fsio::write_atomic(path, &encode_checkpoint(store))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
