//! Named parameter storage and the binary checkpoint format.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DSSH";
const FORMAT_VERSION: u32 = 1;

struct ParamEntry {
    name: String,
    value: Tensor,
    grad: Option<Vec<f64>>,
}

/// An ordered map from parameter path (e.g. `"gen.z_mu.layer0.weight"`) to
/// tensor. Iteration order is always sorted by name, so every walk over the
/// store is deterministic.
#[derive(Default)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
}

impl std::fmt::Debug for ParameterStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.entries.iter().map(|e| (&e.name, e.value.shape())))
            .finish()
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore::default()
    }

    fn position(&self, name: &str) -> std::result::Result<usize, usize> {
        self.entries.binary_search_by(|e| e.name.as_str().cmp(name))
    }

    /// Inserts a new parameter; duplicate names are an error.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        match self.position(&name) {
            Ok(_) => Err(Error::Config(format!("duplicate parameter '{name}'"))),
            Err(pos) => {
                self.entries.insert(
                    pos,
                    ParamEntry {
                        name,
                        value,
                        grad: None,
                    },
                );
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).ok().map(|i| &self.entries[i].value)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.position(name) {
            Ok(i) => {
                self.entries[i].value = value;
                Ok(())
            }
            Err(_) => Err(Error::MissingParam(name.into())),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Sorted (name, value) pairs.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Adds `delta` into the gradient slot of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &[f64]) -> Result<()> {
        let i = self
            .position(name)
            .map_err(|_| Error::MissingParam(name.into()))?;
        let e = &mut self.entries[i];
        debug_assert_eq!(e.value.numel(), delta.len());
        let g = e.grad.get_or_insert_with(|| vec![0.0; e.value.numel()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
        Ok(())
    }

    /// Scales every populated gradient by `c`.
    pub fn scale_grads(&mut self, c: f64) {
        for e in self.entries.iter_mut() {
            if let Some(g) = e.grad.as_mut() {
                for gi in g.iter_mut() {
                    *gi *= c;
                }
            }
        }
    }

    /// Global L2 norm over all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| e.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.position(name)
            .ok()
            .and_then(|i| self.entries[i].grad.as_deref())
    }

    pub fn clear_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grad = None;
        }
    }

    pub(crate) fn grads_mut(&mut self) -> impl Iterator<Item = (&str, &Tensor, &mut Option<Vec<f64>>)> {
        self.entries
            .iter_mut()
            .map(|e| (e.name.as_str(), &e.value, &mut e.grad))
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &mut Option<Vec<f64>>)> {
        self.entries
            .iter_mut()
            .map(|e| (e.name.as_str(), &mut e.value, &mut e.grad))
    }

    /// Deep copy of the values (gradients are not copied).
    pub fn clone_values(&self) -> ParameterStore {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.clone(),
                    grad: None,
                })
                .collect(),
        }
    }

    /// Writes the checkpoint: magic `DSSH`, version, entry count, then per
    /// entry name/rank/dims/raw little-endian f64 data. Optimizer state, when
    /// given, is appended in the same framing under `.adam.m` / `.adam.v`
    /// suffixed names plus a scalar `.adam.t`.
    pub fn save(&self, path: &Path, opt: Option<&super::AdamState>) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let opt_entries = opt.map_or(0, |o| 2 * o.slots.len() + 1);
        let count = (self.entries.len() + opt_entries) as u32;
        buf.extend_from_slice(&count.to_le_bytes());
        for e in &self.entries {
            write_entry(&mut buf, &e.name, e.value.shape(), e.value.data());
        }
        if let Some(opt) = opt {
            for slot in &opt.slots {
                let dims = [slot.m.len()];
                write_entry(&mut buf, &format!("{}.adam.m", slot.name), &dims, &slot.m);
                write_entry(&mut buf, &format!("{}.adam.v", slot.name), &dims, &slot.v);
            }
            write_entry(&mut buf, ".adam.t", &[], &[opt.t as f64]);
        }
        std::fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Reads a checkpoint written by [`ParameterStore::save`].
    pub fn load(path: &Path) -> Result<(ParameterStore, Option<super::AdamState>)> {
        let mut file = std::fs::File::open(path).map_err(|_| {
            Error::MissingArtifact(format!("checkpoint {}", path.display()))
        })?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cur = &buf[..];
        let mut magic = [0u8; 4];
        read_exact(&mut cur, &mut magic, path)?;
        if &magic != MAGIC {
            return Err(Error::Data(format!(
                "{}: bad checkpoint magic {magic:?}",
                path.display()
            )));
        }
        let version = read_u32(&mut cur, path)?;
        if version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }
        let count = read_u32(&mut cur, path)? as usize;
        let mut store = ParameterStore::new();
        let mut adam_m: HashMap<String, Vec<f64>> = HashMap::new();
        let mut adam_v: HashMap<String, Vec<f64>> = HashMap::new();
        let mut adam_t: Option<u64> = None;
        for _ in 0..count {
            let (name, shape, data) = read_entry(&mut cur, path)?;
            if let Some(base) = name.strip_suffix(".adam.m") {
                adam_m.insert(base.to_string(), data);
            } else if let Some(base) = name.strip_suffix(".adam.v") {
                adam_v.insert(base.to_string(), data);
            } else if name == ".adam.t" {
                adam_t = Some(data[0] as u64);
            } else {
                store.insert(name, Tensor::new(shape, data)?)?;
            }
        }
        let opt = match adam_t {
            None => None,
            Some(t) => Some(super::AdamState::from_parts(&store, adam_m, adam_v, t)?),
        };
        Ok((store, opt))
    }
}

fn write_entry(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for d in shape {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_exact(cur: &mut &[u8], out: &mut [u8], path: &Path) -> Result<()> {
    cur.read_exact(out)
        .map_err(|_| Error::Data(format!("{}: truncated checkpoint", path.display())))
}

fn read_u32(cur: &mut &[u8], path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_entry(cur: &mut &[u8], path: &Path) -> Result<(String, Vec<usize>, Vec<f64>)> {
    let name_len = read_u32(cur, path)? as usize;
    let mut name_bytes = vec![0u8; name_len];
    read_exact(cur, &mut name_bytes, path)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::Data(format!("{}: non-UTF8 parameter name", path.display())))?;
    let rank = read_u32(cur, path)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(cur, path)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut b = [0u8; 8];
    for _ in 0..numel {
        read_exact(cur, &mut b, path)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok((name, shape, data))
}

/// Parameters materialized as tape leaves for one forward pass.
pub struct TapeBinding<'t> {
    vars: HashMap<String, Var<'t>>,
}

impl<'t> TapeBinding<'t> {
    /// Loads every parameter onto `tape`. With `trainable` the leaves track
    /// gradients; without, they are plain constants (evaluation/forecasting).
    pub fn load(tape: &'t Tape, store: &ParameterStore, trainable: bool) -> Self {
        let mut vars = HashMap::with_capacity(store.len());
        for (name, value) in store.iter() {
            let var = if trainable {
                tape.param(value.clone())
            } else {
                tape.constant(value.clone())
            };
            vars.insert(name.to_string(), var);
        }
        TapeBinding { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.into()))
    }

    /// Replaces one binding (used by the finite-difference suite to probe a
    /// single parameter).
    pub fn with_override(mut self, name: &str, var: Var<'t>) -> Self {
        self.vars.insert(name.to_string(), var);
        self
    }

    /// Copies tape gradients back into the store (fixed, sorted order).
    pub fn harvest_grads(&self, store: &mut ParameterStore) -> Result<()> {
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let var = self.var(&name)?;
            if let Some(g) = var.grad() {
                store.accumulate_grad(&name, g.data())?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn names_are_unique_and_sorted() {
        let mut s = ParameterStore::new();
        s.insert("b", Tensor::scalar(1.0)).unwrap();
        s.insert("a", Tensor::scalar(2.0)).unwrap();
        assert!(s.insert("a", Tensor::scalar(3.0)).is_err());
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, ["a", "b"]);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.dssh");
        let mut s = ParameterStore::new();
        // Values picked to stress the representation.
        s.insert("w", Tensor::vector(&[0.1, -1.0 / 3.0, 1e-300, f64::MIN_POSITIVE]))
            .unwrap();
        s.insert("b", Tensor::new(vec![2, 2], vec![std::f64::consts::PI, -0.0, 1e300, 7.0]).unwrap())
            .unwrap();
        s.save(&path, None).unwrap();
        let (loaded, opt) = ParameterStore::load(&path).unwrap();
        assert!(opt.is_none());
        for ((n1, v1), (n2, v2)) in s.iter().zip(loaded.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1.shape(), v2.shape());
            for (a, b) in v1.iter().zip(v2.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn missing_checkpoint_is_missing_artifact() {
        let err = ParameterStore::load(Path::new("/nonexistent/x.dssh")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }

    #[test]
    fn harvest_accumulates_grads() {
        let mut store = ParameterStore::new();
        store.insert("x", Tensor::scalar(2.0)).unwrap();
        let tape = Tape::new();
        let binding = TapeBinding::load(&tape, &store, true);
        let x = binding.var("x").unwrap();
        let loss = x.square().sum();
        tape.backward(loss).unwrap();
        binding.harvest_grads(&mut store).unwrap();
        assert_eq!(store.grad("x").unwrap(), &[4.0]);
    }
}
