//! Named parameter arrays, forward sessions, and the checkpoint format.
//!
//! All model weights live in a [`ParamStore`] keyed by hierarchical names
//! ("g_theta.vit.block0.attn.wq"). The name prefixes are what the EM
//! scheduler freezes. A [`Session`] binds a store to a fresh tape for one
//! forward pass: the first use of a parameter clones its value onto the tape
//! as a leaf, frozen parameters as constants.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

use crate::rng::Stream;
use crate::tape::{Grads, Tape, Tx};

pub type ParamId = usize;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("unsupported dtype code {0}")]
    Dtype(u8),
    #[error("checkpoint is missing parameter {0}")]
    Missing(String),
    #[error("parameter {name}: checkpoint shape {got:?}, model shape {want:?}")]
    Shape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f32>>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f32>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name}"
        );
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f32> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.values[id]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.values.len()
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Copies every matching parameter value from `other` into `self`.
    /// Returns an error naming the first missing or mis-shaped parameter.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<(), CheckpointError> {
        for id in self.ids() {
            let name = self.names[id].clone();
            let src = other
                .id(&name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if other.value(src).shape() != self.values[id].shape() {
                return Err(CheckpointError::Shape {
                    name,
                    got: other.value(src).shape().to_vec(),
                    want: self.values[id].shape().to_vec(),
                });
            }
            self.values[id] = other.value(src).clone();
        }
        Ok(())
    }
}

/// Weight initialization helpers around a parameter store.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Stream,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Stream) -> Self {
        Self { store, rng }
    }

    /// Xavier-uniform with the given fan-in/fan-out.
    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut *self.rng;
        let value =
            ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.uniform_in(-limit, limit) as f32);
        self.store.insert(name, value)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let rng = &mut *self.rng;
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || (rng.normal() * std) as f32);
        self.store.insert(name, value)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], c: f32) -> ParamId {
        self.store.insert(name, ArrayD::from_elem(IxDyn(shape), c))
    }

    /// Sinusoidal position table, rows = positions, cols = dim.
    pub fn sinusoidal(&mut self, name: &str, positions: usize, dim: usize) -> ParamId {
        let mut value = ArrayD::<f32>::zeros(IxDyn(&[positions, dim]));
        for p in 0..positions {
            for i in 0..dim {
                let angle = p as f64 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
                value[[p, i]] = if i % 2 == 0 {
                    angle.sin() as f32
                } else {
                    angle.cos() as f32
                };
            }
        }
        self.store.insert(name, value)
    }

    /// Unit-variance normal rows, then each row normalized to unit length.
    pub fn unit_rows(&mut self, name: &str, rows: usize, dim: usize) -> ParamId {
        let rng = &mut *self.rng;
        let mut value = ArrayD::from_shape_simple_fn(IxDyn(&[rows, dim]), || rng.normal() as f32);
        for mut row in value.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            row.mapv_inplace(|v| v / norm);
        }
        self.store.insert(name, value)
    }
}

/// One forward pass: a tape bound to a parameter store plus a trainability
/// mask. Parameters are materialized as tape leaves on first use.
pub struct Session<'a> {
    pub tape: Tape<f32>,
    store: &'a ParamStore,
    trainable: Vec<bool>,
    leaves: Vec<Option<Tx>>,
}

impl<'a> Session<'a> {
    /// `trainable` decides per parameter name whether gradients flow this
    /// step; pass `|_| false` for inference.
    pub fn new(store: &'a ParamStore, trainable: impl Fn(&str) -> bool) -> Self {
        let mask = store
            .ids()
            .map(|id| trainable(store.name(id)))
            .collect();
        Self {
            tape: Tape::new(),
            store,
            trainable: mask,
            leaves: vec![None; store.len()],
        }
    }

    pub fn inference(store: &'a ParamStore) -> Self {
        Self::new(store, |_| false)
    }

    pub fn param(&mut self, id: ParamId) -> Tx {
        if let Some(tx) = self.leaves[id] {
            return tx;
        }
        let tx = self
            .tape
            .leaf(self.store.value(id).clone(), self.trainable[id]);
        self.leaves[id] = Some(tx);
        tx
    }

    pub fn input(&mut self, value: ArrayD<f32>) -> Tx {
        self.tape.leaf(value, false)
    }

    /// Runs backward from the given seeds and returns per-parameter
    /// gradients (dense over the store, `None` where nothing flowed).
    pub fn param_grads(&self, seeds: Vec<(Tx, ArrayD<f32>)>) -> Vec<Option<ArrayD<f32>>> {
        let mut grads: Grads<f32> = self.tape.backward(seeds);
        let mut out = vec![None; self.store.len()];
        for (id, leaf) in self.leaves.iter().enumerate() {
            if let Some(tx) = leaf {
                out[id] = grads.take(*tx);
            }
        }
        out
    }
}

const DTYPE_F32: u8 = 0;

/// Writes named arrays: count, then per array a length-prefixed UTF-8 name,
/// a dtype code, the rank, the dims, and the raw little-endian payload.
pub fn write_params(path: &Path, entries: &[(String, &ArrayD<f32>)]) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, value) in entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(DTYPE_F32);
        buf.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
        for &d in value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads back everything [`write_params`] wrote, in file order.
pub fn read_params(path: &Path) -> Result<Vec<(String, ArrayD<f32>)>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = 0usize;
    let mut take = |n: usize, what: &'static str| -> Result<&[u8], CheckpointError> {
        if cursor + n > bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &bytes[cursor..cursor + n];
        cursor += n;
        Ok(s)
    };
    let count = u32::from_le_bytes(take(4, "count")?.try_into().expect("4 bytes")) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len =
            u32::from_le_bytes(take(4, "name length")?.try_into().expect("4 bytes")) as usize;
        let name = String::from_utf8(take(name_len, "name")?.to_vec())
            .map_err(|_| CheckpointError::Truncated("name utf-8"))?;
        let dtype = take(1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::Dtype(dtype));
        }
        let rank = u32::from_le_bytes(take(4, "rank")?.try_into().expect("4 bytes")) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(4, "dim")?.try_into().expect("4 bytes")) as usize);
        }
        let n: usize = dims.iter().product();
        let raw = take(n * 4, "payload")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((
            name,
            ArrayD::from_shape_vec(IxDyn(&dims), data).expect("shape matches payload"),
        ));
    }
    Ok(out)
}
