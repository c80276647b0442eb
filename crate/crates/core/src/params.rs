//! Named parameters, their optimizer state, and the checkpoint file.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "EORS" | version u32 | count u32 | count × entry | meta_len u32 | meta JSON
//! entry = name_len u32 | name (UTF-8) | rank u32 | rank × extent u64 | f64 payload
//! ```
//!
//! Optimizer state is stored as ordinary entries under `opt/m/<name>`,
//! `opt/v/<name>` and `opt/step/<name>` (a rank-0 entry holding the step
//! count). The trailing JSON carries the model configuration and run
//! bookkeeping so a checkpoint is self-describing.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EORS";
pub const CHECKPOINT_VERSION: u32 = 1;
const OPT_PREFIX: &str = "opt/";

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    state: BTreeMap<String, AdamState>,
}

pub type GradMap = BTreeMap<String, Tensor>;

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if name.starts_with(OPT_PREFIX) {
            return Err(Error::Config(format!("parameter name {name} uses reserved prefix")));
        }
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.state.get(name)
    }

    pub(crate) fn param_and_state_mut(&mut self, name: &str) -> Option<(&mut Tensor, &mut AdamState)> {
        let p = self.params.get_mut(name)?;
        let s = self.state.entry(name.to_string()).or_insert_with(|| AdamState {
            m: Tensor::zeros(p.shape()),
            v: Tensor::zeros(p.shape()),
            step: 0,
        });
        Some((p, s))
    }

    /// Serializes parameters, optimizer state and `meta` to checkpoint bytes.
    pub fn to_bytes(&self, meta: &str) -> Vec<u8> {
        let mut entries: Vec<(String, &[usize], Vec<f64>)> = Vec::new();
        for (name, t) in &self.params {
            entries.push((name.clone(), t.shape(), t.data().to_vec()));
        }
        for (name, s) in &self.state {
            entries.push((format!("{OPT_PREFIX}m/{name}"), s.m.shape(), s.m.data().to_vec()));
            entries.push((format!("{OPT_PREFIX}v/{name}"), s.v.shape(), s.v.data().to_vec()));
            entries.push((format!("{OPT_PREFIX}step/{name}"), &[], vec![s.step as f64]));
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, shape, data) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out
    }

    /// Parses checkpoint bytes, returning the store and its metadata JSON.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, String)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut raw: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Data("checkpoint entry name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(&shape, data).map_err(|_| Error::Data(format!("bad extents for {name}")))?;
            if raw.insert(name.clone(), t).is_some() {
                return Err(Error::Data(format!("duplicate checkpoint entry {name}")));
            }
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::Data("checkpoint metadata is not UTF-8".into()))?;
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint".into()));
        }

        let mut store = ParameterStore::new();
        let mut opt = BTreeMap::new();
        for (name, t) in raw {
            match name.strip_prefix(OPT_PREFIX) {
                Some(rest) => {
                    opt.insert(rest.to_string(), t);
                }
                None => {
                    store.params.insert(name, t);
                }
            }
        }
        for name in store.params.keys() {
            let (m, v, step) = (
                opt.remove(&format!("m/{name}")),
                opt.remove(&format!("v/{name}")),
                opt.remove(&format!("step/{name}")),
            );
            match (m, v, step) {
                (Some(m), Some(v), Some(step)) => {
                    let s = AdamState { m, v, step: step.item() as u64 };
                    store.state.insert(name.clone(), s);
                }
                (None, None, None) => {}
                _ => return Err(Error::Data(format!("incomplete optimizer state for {name}"))),
            }
        }
        if let Some(orphan) = opt.keys().next() {
            return Err(Error::Data(format!("optimizer state without parameter: {orphan}")));
        }
        Ok((store, meta))
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        std::fs::write(path, self.to_bytes(meta)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parameters of a store bound as leaves of one tape. A parameter used
/// several times in a forward pass maps to a single leaf, so its gradient
/// accumulates over every use.
pub struct Bound<'s, 't> {
    store: &'s ParameterStore,
    tape: &'t Tape,
    vars: RefCell<BTreeMap<String, Var<'t>>>,
    frozen: bool,
}

impl<'s, 't> Bound<'s, 't> {
    pub fn new(store: &'s ParameterStore, tape: &'t Tape) -> Self {
        Self {
            store,
            tape,
            vars: RefCell::new(BTreeMap::new()),
            frozen: false,
        }
    }

    /// Binds parameters as constants: inference only, nothing is recorded
    /// for the backward pass.
    pub fn frozen(store: &'s ParameterStore, tape: &'t Tape) -> Self {
        Self { frozen: true, ..Self::new(store, tape) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let v = if self.frozen {
            self.tape.constant(t.clone())
        } else {
            self.tape.leaf(t.clone())
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of parameters touched by the forward pass so far.
    pub fn used(&self) -> Vec<String> {
        self.vars.borrow().keys().cloned().collect()
    }

    /// Moves the gradient of every bound parameter out of `grads`.
    pub fn collect(&self, mut grads: Gradients) -> GradMap {
        self.vars
            .borrow()
            .iter()
            .map(|(name, v)| {
                let g = grads.take(v.id()).unwrap_or_else(|| Tensor::zeros(&v.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Sums gradient maps in iteration order (deterministic reduction).
pub fn sum_gradients(maps: impl IntoIterator<Item = GradMap>) -> GradMap {
    let mut total = GradMap::new();
    for map in maps {
        for (name, g) in map {
            match total.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("a.weight", Tensor::new(&[2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap())
            .unwrap();
        s.insert("b", Tensor::scalar(0.1)).unwrap();
        s
    }

    #[test]
    fn duplicate_and_reserved_names_rejected() {
        let mut s = sample_store();
        assert!(s.insert("b", Tensor::scalar(1.0)).is_err());
        assert!(s.insert("opt/x", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let mut s = sample_store();
        {
            let (_, st) = s.param_and_state_mut("b").unwrap();
            st.step = 3;
            st.m = Tensor::scalar(0.5);
        }
        let bytes = s.to_bytes("{\"k\":1}");
        assert_eq!(&bytes[..4], b"EORS");
        let (back, meta) = ParameterStore::from_bytes(&bytes).unwrap();
        assert_eq!(meta, "{\"k\":1}");
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(&meta), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_data_errors() {
        let bytes = sample_store().to_bytes("");
        assert!(matches!(ParameterStore::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Data(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ParameterStore::from_bytes(&bad), Err(Error::Data(_))));
    }

    #[test]
    fn shared_parameter_accumulates() {
        let s = sample_store();
        let tape = Tape::new();
        let bound = Bound::new(&s, &tape);
        let b1 = bound.param("b").unwrap();
        let b2 = bound.param("b").unwrap();
        let y = b1.mul(b2).unwrap();
        let grads = bound.collect(tape.backward(y).unwrap());
        assert!((grads["b"].item() - 0.2).abs() < 1e-15);
    }
}
