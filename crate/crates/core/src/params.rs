//! Named parameter storage, freeze flags, graph binding and the checkpoint format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Ordered collection of named parameters. Insertion order is the canonical parameter
/// order for gradient flattening and checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            frozen,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn freeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.frozen = true);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect()
    }

    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.value(*id).len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Names of parameters whose values differ bitwise from `other`, plus names present
    /// in only one of the two stores.
    pub fn bitwise_diff(&self, other: &ParamStore) -> Vec<String> {
        let mut changed = Vec::new();
        for p in &self.params {
            match other.id(&p.name) {
                Some(id) => {
                    let q = other.value(id);
                    let same = q.shape() == p.value.shape()
                        && q.data()
                            .iter()
                            .zip(p.value.data())
                            .all(|(a, b)| a.to_bits() == b.to_bits());
                    if !same {
                        changed.push(p.name.clone());
                    }
                }
                None => changed.push(p.name.clone()),
            }
        }
        for q in &other.params {
            if self.id(&q.name).is_none() {
                changed.push(q.name.clone());
            }
        }
        changed
    }

    /// Flattens per-parameter vectors over `ids`, in the given order.
    pub fn flatten(&self, ids: &[ParamId], per_param: &HashMap<ParamId, Tensor>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count(ids));
        for id in ids {
            match per_param.get(id) {
                Some(t) => out.extend_from_slice(t.data()),
                None => out.extend(std::iter::repeat_n(0.0, self.value(*id).len())),
            }
        }
        out
    }
}

/// Lazily places parameters on a graph as leaves. Trainable parameters require
/// gradients unless the session is in no-grad mode.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    grad: bool,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, grad: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            vars: vec![None; store.len()],
            grad,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.graph.leaf(p.value.clone(), self.grad && !p.frozen);
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter after `graph.backward`.
    pub fn grads(&self) -> HashMap<ParamId, Tensor> {
        let mut out = HashMap::new();
        for (i, v) in self.vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = self.graph.grad(*v) {
                    out.insert(ParamId(i), g);
                }
            }
        }
        out
    }
}

const MAGIC: &[u8; 8] = b"VCILCKPT";
const VERSION: u32 = 1;

/// Serialized size in bytes of `store` in the checkpoint format.
pub fn checkpoint_size(store: &ParamStore) -> usize {
    checkpoint_size_of(store.params.iter())
}

pub(crate) fn checkpoint_size_of<'p>(params: impl Iterator<Item = &'p Param>) -> usize {
    let mut n = MAGIC.len() + 4 + 4;
    for p in params {
        n += 4 + p.name.len() + 1 + 4 + 8 * p.value.shape().len() + 8 * p.value.len();
    }
    n
}

/// Writes a versioned manifest of named arrays: for each parameter its name, freeze
/// flag, shape and little-endian `f64` values in row-major order.
pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    write_params(store.params.iter(), store.len(), &mut w)
}

pub(crate) fn write_params<'p, W: Write>(
    params: impl Iterator<Item = &'p Param>,
    count: usize,
    w: &mut W,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(count as u32).to_le_bytes())?;
    for p in params {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[p.frozen as u8])?;
        w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for d in p.value.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let bad = |reason: &str| Error::Format {
        path: "<checkpoint>".into(),
        reason: reason.into(),
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        r.read_exact(&mut b4)?;
        let mut name = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not utf-8"))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        r.read_exact(&mut b4)?;
        let ndim = u32::from_le_bytes(b4) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut b8)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        store.add(name, Tensor::new(shape, data)?, flag[0] != 0)?;
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f)).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format {
            path: path.display().to_string(),
            reason,
        },
        other => other,
    })
}
