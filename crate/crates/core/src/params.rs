//! Named parameter storage, initialization and the AdamW optimizer.
//!
//! Parameters live in a `BTreeMap` keyed by a stable path string, so iteration
//! order (and therefore every accumulation, checksum and serialization) is
//! deterministic. Frozen/trainable status is a property of the store, not the
//! tensors: the optimizer only ever touches paths in the trainable set.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{c, Element, Grads, Tape, Var};

/// A parameter store bound to a tape: trainable entries become leaves
/// (tracked for gradients), frozen entries become constants.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

pub fn bind<E: Element>(tape: &mut Tape<E>, store: &ParamStore<E>) -> Bound {
    let mut vars = BTreeMap::new();
    let paths: Vec<String> = store.paths().map(str::to_string).collect();
    for p in paths {
        let value = store.get(&p).clone();
        let var = if store.is_trainable(&p) {
            tape.leaf(value)
        } else {
            tape.constant(value)
        };
        vars.insert(p, var);
    }
    Bound { vars }
}

impl Bound {
    pub fn var(&self, path: &str) -> Var {
        *self
            .vars
            .get(path)
            .unwrap_or_else(|| panic!("unbound parameter {path}"))
    }

    /// Collect gradients for every trainable path that received one.
    pub fn grads<E: Element>(
        &self,
        store: &ParamStore<E>,
        grads: &Grads<E>,
    ) -> BTreeMap<String, ArrayD<E>> {
        let mut out = BTreeMap::new();
        for p in store.trainable_paths() {
            if let Some(g) = grads.get(self.vars[p]) {
                out.insert(p.to_string(), g.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ParamStore<E: Element> {
    map: BTreeMap<String, ArrayD<E>>,
    trainable: BTreeSet<String>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
            trainable: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, path: &str, value: ArrayD<E>, trainable: bool) {
        assert!(
            self.map.insert(path.to_string(), value).is_none(),
            "duplicate parameter path {path}"
        );
        if trainable {
            self.trainable.insert(path.to_string());
        }
    }

    pub fn get(&self, path: &str) -> &ArrayD<E> {
        self.map
            .get(path)
            .unwrap_or_else(|| panic!("missing parameter {path}"))
    }

    pub fn get_mut(&mut self, path: &str) -> &mut ArrayD<E> {
        self.map
            .get_mut(path)
            .unwrap_or_else(|| panic!("missing parameter {path}"))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn is_trainable(&self, path: &str) -> bool {
        self.trainable.contains(path)
    }

    pub fn set_trainable(&mut self, path: &str, trainable: bool) {
        assert!(self.map.contains_key(path), "missing parameter {path}");
        if trainable {
            self.trainable.insert(path.to_string());
        } else {
            self.trainable.remove(path);
        }
    }

    /// Freeze every parameter currently in the store.
    pub fn freeze_all(&mut self) {
        self.trainable.clear();
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn trainable_paths(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<E>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self, paths: impl Iterator<Item = impl AsRef<str>>) -> usize {
        paths.map(|p| self.get(p.as_ref()).len()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable.iter().map(|p| self.map[p].len()).sum()
    }

    /// SHA-256 over the little-endian f32 encoding of the named parameters, in
    /// path order. Used for the frozen-weight contracts.
    pub fn checksum_of<'a>(&self, paths: impl Iterator<Item = &'a str>) -> String {
        let mut hasher = Sha256::new();
        for p in paths {
            hasher.update(p.as_bytes());
            for v in self.get(p).iter() {
                let f: f32 = num_cast_f32(*v);
                hasher.update(f.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    pub fn checksum_all(&self) -> String {
        let paths: Vec<&str> = self.paths().collect();
        self.checksum_of(paths.into_iter())
    }

    /// Cast every parameter to another element type.
    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for (k, v) in &self.map {
            out.insert(
                k,
                v.mapv(|x| F::from(x).unwrap()),
                self.trainable.contains(k),
            );
        }
        out
    }
}

fn num_cast_f32<E: Element>(v: E) -> f32 {
    <f32 as num_traits::NumCast>::from(v).unwrap_or(f32::NAN)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Gaussian init with the given standard deviation.
pub fn randn_init<E: Element, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<E> {
    let normal = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| c(normal.sample(rng)))
}

pub fn zeros<E: Element>(shape: &[usize]) -> ArrayD<E> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<E: Element>(shape: &[usize]) -> ArrayD<E> {
    ArrayD::ones(IxDyn(shape))
}

/// AdamW with decoupled weight decay. With `weight_decay = 0` this is plain
/// Adam, which is what the router training uses.
pub struct AdamW<E: Element> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: BTreeMap<String, ArrayD<E>>,
    v: BTreeMap<String, ArrayD<E>>,
}

impl<E: Element> AdamW<E> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over the trainable parameters. `grads` maps parameter path
    /// to gradient; paths without a gradient are skipped.
    pub fn step(
        &mut self,
        params: &mut ParamStore<E>,
        grads: &BTreeMap<String, ArrayD<E>>,
        lr: f64,
    ) {
        self.t += 1;
        let b1: E = c(self.beta1);
        let b2: E = c(self.beta2);
        let one: E = c(1.0);
        let eps: E = c(self.eps);
        let bc1: E = c(1.0 - self.beta1.powi(self.t as i32));
        let bc2: E = c(1.0 - self.beta2.powi(self.t as i32));
        let lr_e: E = c(lr);
        let wd: E = c(lr * self.weight_decay);
        let trainable: Vec<String> = params.trainable_paths().map(str::to_string).collect();
        for path in trainable {
            let Some(g) = grads.get(&path) else { continue };
            let m = self
                .m
                .entry(path.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(path.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = b1 * *m + (one - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = b2 * *v + (one - b2) * g * g;
            });
            let p = params.get_mut(&path);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *p = *p - lr_e * mh / (vh.sqrt() + eps) - wd * *p;
                });
        }
    }

    /// Flatten optimizer state for checkpointing, keyed as `m/<path>` and
    /// `v/<path>`.
    pub fn state(&self) -> BTreeMap<String, ArrayD<E>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.m {
            out.insert(format!("m/{k}"), v.clone());
        }
        for (k, v) in &self.v {
            out.insert(format!("v/{k}"), v.clone());
        }
        out
    }

    pub fn restore(&mut self, t: u64, state: BTreeMap<String, ArrayD<E>>) {
        self.t = t;
        self.m.clear();
        self.v.clear();
        for (k, v) in state {
            if let Some(p) = k.strip_prefix("m/") {
                self.m.insert(p.to_string(), v);
            } else if let Some(p) = k.strip_prefix("v/") {
                self.v.insert(p.to_string(), v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimizer_skips_frozen() {
        let mut params = ParamStore::<f32>::new();
        params.insert("a", ones::<f32>(&[2]), true);
        params.insert("b", ones::<f32>(&[2]), false);
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), ones::<f32>(&[2]));
        grads.insert("b".to_string(), ones::<f32>(&[2]));
        let mut opt = AdamW::new(0.0);
        opt.step(&mut params, &grads, 0.1);
        assert!(params.get("a")[0] < 1.0);
        assert_eq!(params.get("b")[0], 1.0);
    }

    #[test]
    fn checksum_changes_with_values() {
        let mut params = ParamStore::<f32>::new();
        params.insert("a", ones::<f32>(&[3]), true);
        let c1 = params.checksum_all();
        params.get_mut("a")[0] = 2.0;
        assert_ne!(c1, params.checksum_all());
    }
}
