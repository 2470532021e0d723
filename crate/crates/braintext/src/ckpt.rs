//! Named parameter storage, trainability flags, and on-disk checkpoints.
//!
//! All model weights live in one [`ParamSet`] keyed by dotted names
//! (`lm.emb`, `mapper.q`, ...). Components address their weights by prefix,
//! the optimizer walks only trainable entries, and a checkpoint is the set
//! serialized as a JSON manifest plus a little-endian f64 blob.

use crate::tensor::tape::{Tape, Var};
use crate::tensor::Mat;
use crate::{Error, Result};
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a trainable parameter. Names must be unique.
    pub fn register(&mut self, name: impl Into<String>, value: Mat) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter {name:?}")));
        }
        let i = self.names.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(true);
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn idx(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Validation(format!("unknown parameter {name:?}")))
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Mat {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.values[i]
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        Ok(&self.values[self.idx(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Mat> {
        let i = self.idx(name)?;
        Ok(&mut self.values[i])
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    /// Mark every parameter whose name starts with `prefix` (un)trainable.
    /// Frozen parameters are skipped by the optimizer entirely, so neither
    /// gradients nor weight decay can move them.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (i, n) in self.names.iter().enumerate() {
            if n.starts_with(prefix) {
                self.trainable[i] = trainable;
            }
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    pub fn n_trainable_scalars(&self) -> usize {
        self.values
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(m, _)| m.len())
            .sum()
    }

    /// Bit-exact checksum over parameters with the given prefix; used to
    /// assert freeze contracts across a training run.
    pub fn checksum_prefix(&self, prefix: &str) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for (n, v) in self.names.iter().zip(&self.values) {
            if n.starts_with(prefix) {
                h ^= crate::util::hash_str(n).wrapping_add(crate::util::mat_checksum(v));
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    /// Put every parameter on a tape as a leaf. Returned binding resolves
    /// names to tape variables for this pass.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> Bound<'a> {
        let vars = self.values.iter().map(|v| tape.leaf(v.clone())).collect();
        Bound { params: self, vars }
    }
}

/// One forward pass's view of a [`ParamSet`]: parameter name -> tape var.
pub struct Bound<'a> {
    params: &'a ParamSet,
    pub vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .params
            .idx(name)
            .unwrap_or_else(|e| panic!("{e}"));
        self.vars[i]
    }
}

/// Central finite difference of a scalar function of the parameters with
/// respect to entry (r, c) of `name`. Verification utility for the test
/// suite: compares tape gradients against an independent numerical slope.
pub fn fd_param_grad(
    params: &ParamSet,
    name: &str,
    r: usize,
    c: usize,
    eps: f64,
    f: &mut dyn FnMut(&ParamSet) -> f64,
) -> f64 {
    let mut plus = params.clone();
    *plus.get_mut(name).unwrap().at_mut(r, c) += eps;
    let mut minus = params.clone();
    *minus.get_mut(name).unwrap().at_mut(r, c) -= eps;
    (f(&plus) - f(&minus)) / (2.0 * eps)
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct CheckpointManifest {
    version: u32,
    names: Vec<String>,
    shapes: Vec<[usize; 2]>,
    trainable: Vec<bool>,
    meta: serde_json::Value,
}

/// Write `manifest.json` + `params.bin` into `dir`.
pub fn save_checkpoint(dir: &Path, params: &ParamSet, meta: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        version: 1,
        names: params.names.clone(),
        shapes: params.values.iter().map(|m| [m.rows, m.cols]).collect(),
        trainable: params.trainable.clone(),
        meta: meta.clone(),
    };
    crate::util::write_json(&dir.join("manifest.json"), &manifest)?;
    let mut bytes = Vec::with_capacity(params.n_scalars() * 8);
    for v in &params.values {
        for x in &v.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(dir.join("params.bin"), bytes)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`], returning the
/// parameters and the free-form metadata value.
pub fn load_checkpoint(dir: &Path) -> Result<(ParamSet, serde_json::Value)> {
    let manifest: CheckpointManifest = crate::util::read_json(&dir.join("manifest.json"))?;
    if manifest.version != 1 {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let bytes = std::fs::read(dir.join("params.bin"))
        .map_err(|e| Error::Data(format!("cannot read params.bin in {}: {e}", dir.display())))?;
    let expected: usize = manifest.shapes.iter().map(|[r, c]| r * c * 8).sum();
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "params.bin has {} bytes, manifest implies {expected}",
            bytes.len()
        )));
    }
    let mut params = ParamSet::new();
    let mut off = 0usize;
    for ((name, [r, c]), trainable) in manifest
        .names
        .iter()
        .zip(&manifest.shapes)
        .zip(&manifest.trainable)
    {
        let n = r * c * 8;
        let data: Vec<f64> = bytes[off..off + n]
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
            .collect();
        off += n;
        let i = params.register(name.clone(), Mat::from_vec(*r, *c, data))?;
        params.trainable[i] = *trainable;
    }
    Ok((params, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.register("lm.emb", Mat::from_fn(3, 2, |r, c| (r + 2 * c) as f64))
            .unwrap();
        p.register("lm.out", Mat::filled(2, 3, -0.5)).unwrap();
        p.register("mapper.q", Mat::filled(1, 2, 0.25)).unwrap();
        p
    }

    #[test]
    fn register_rejects_duplicates() {
        let mut p = sample();
        assert!(p.register("lm.emb", Mat::zeros(1, 1)).is_err());
    }

    #[test]
    fn freeze_by_prefix() {
        let mut p = sample();
        p.set_trainable_prefix("lm.", false);
        assert!(!p.is_trainable(p.idx("lm.emb").unwrap()));
        assert!(!p.is_trainable(p.idx("lm.out").unwrap()));
        assert!(p.is_trainable(p.idx("mapper.q").unwrap()));
        assert_eq!(p.n_trainable_scalars(), 2);
    }

    #[test]
    fn checksum_tracks_any_bit_change() {
        let mut p = sample();
        let before = p.checksum_prefix("lm.");
        assert_eq!(before, p.checksum_prefix("lm."));
        *p.get_mut("mapper.q").unwrap() = Mat::filled(1, 2, 0.3);
        assert_eq!(before, p.checksum_prefix("lm."), "other prefix must not affect lm.");
        p.get_mut("lm.emb").unwrap().data[0] += 1e-12;
        assert_ne!(before, p.checksum_prefix("lm."));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = sample();
        p.set_trainable_prefix("mapper.", false);
        let meta = serde_json::json!({"stage": "t2t", "epoch": 7});
        save_checkpoint(dir.path(), &p, &meta).unwrap();
        let (q, m) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(q.len(), p.len());
        for i in 0..p.len() {
            assert_eq!(q.name(i), p.name(i));
            assert_eq!(q.value(i), p.value(i));
            assert_eq!(q.is_trainable(i), p.is_trainable(i));
        }
        assert_eq!(m["epoch"], 7);
    }

    #[test]
    fn bind_exposes_vars_by_name() {
        let p = sample();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        assert_eq!(tape.value(b.var("lm.out")), p.get("lm.out").unwrap());
    }
}
