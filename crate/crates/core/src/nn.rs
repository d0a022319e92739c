//! Named parameter storage, initializers, graph binding and the checkpoint
//! format.

use std::collections::BTreeMap;
use std::path::Path;

use mtv_autograd::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::volume::write_atomic;

pub const LN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;
const LINEAR_STD: f64 = 0.02;

/// Parameters keyed by dotted path, e.g. `level1.group.block0.layer1.attn.q.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), t);
        assert!(prev.is_none(), "parameter '{name}' defined twice");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `g`; as differentiable leaves when
    /// `trainable`, else as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Checkpoint bytes: header, metadata lines, tensor manifest, then raw
    /// little-endian `f64` payloads in manifest order.
    pub fn to_checkpoint(&self, meta: &BTreeMap<String, String>) -> Vec<u8> {
        let mut head = String::from("MTVCKPT1\n");
        for (k, v) in meta {
            head.push_str(&format!("meta {k} {v}\n"));
        }
        for (k, t) in &self.map {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("tensor {k} {}\n", dims.join(" ")));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for t in self.map.values() {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8], path: &Path) -> Result<(ParamStore, BTreeMap<String, String>)> {
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::format(path, "truncated checkpoint header"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| Error::format(path, "checkpoint header is not UTF-8"))?;
            pos += end + 1;
            if line == "end" {
                break;
            }
            lines.push(line);
        }
        if lines.first() != Some(&"MTVCKPT1") {
            return Err(Error::format(path, "missing MTVCKPT1 magic"));
        }
        let mut meta = BTreeMap::new();
        let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
        for line in &lines[1..] {
            let mut parts = line.split(' ');
            match parts.next() {
                Some("meta") => {
                    let k = parts.next().ok_or_else(|| Error::format(path, "bad meta line"))?;
                    meta.insert(k.to_string(), parts.collect::<Vec<_>>().join(" "));
                }
                Some("tensor") => {
                    let k = parts.next().ok_or_else(|| Error::format(path, "bad tensor line"))?;
                    let dims = parts
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::format(path, format!("bad shape for {k}")))?;
                    manifest.push((k.to_string(), dims));
                }
                _ => return Err(Error::format(path, format!("unexpected header line '{line}'"))),
            }
        }
        let mut store = ParamStore::new();
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(pos..pos + n * 8)
                .ok_or_else(|| Error::format(path, format!("payload of {name} truncated")))?;
            pos += n * 8;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            store.insert(name, Tensor::new(&shape, data));
        }
        if pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint payload"));
        }
        Ok((store, meta))
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        write_atomic(path, &self.to_checkpoint(meta))
    }

    pub fn load(path: &Path) -> Result<(ParamStore, BTreeMap<String, String>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&bytes, path)
    }

    /// Keeps only entries whose name starts with `prefix`, stripping it.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            map: self
                .map
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds names to vars already on a graph (used when the caller owns the
    /// leaves, as in gradient checks).
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' is not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// `x @ W + b` with parameters `<name>.weight`, `<name>.bias`.
    pub fn linear(&self, g: &mut Graph, name: &str, x: Var) -> Var {
        let w = self.var(&format!("{name}.weight"));
        let b = self.try_var(&format!("{name}.bias"));
        g.linear(x, w, b)
    }

    pub fn layer_norm(&self, g: &mut Graph, name: &str, x: Var) -> Var {
        let w = self.var(&format!("{name}.weight"));
        let b = self.var(&format!("{name}.bias"));
        g.layer_norm(x, w, b, LN_EPS)
    }

    pub fn conv(&self, g: &mut Graph, name: &str, x: Var) -> Var {
        let w = self.var(&format!("{name}.weight"));
        let b = self.try_var(&format!("{name}.bias"));
        g.conv3d(x, w, b)
    }

    /// Two-layer perceptron `fc2(GELU(fc1(x)))`.
    pub fn mlp(&self, g: &mut Graph, name: &str, x: Var) -> Var {
        let h = self.linear(g, &format!("{name}.fc1"), x);
        let h = g.gelu(h);
        self.linear(g, &format!("{name}.fc2"), h)
    }
}

pub fn normal_tensor<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

pub fn uniform_tensor<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

/// Parameter initializers writing into a store.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self { store, rng }
    }

    /// Weight `[inp, out]` ~ N(0, 0.02^2), zero bias.
    pub fn linear(&mut self, name: &str, inp: usize, out: usize) {
        let w = normal_tensor(&[inp, out], LINEAR_STD, self.rng);
        self.store.insert(format!("{name}.weight"), w);
        self.store.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) {
        self.store.insert(format!("{name}.weight"), Tensor::ones(&[dim]));
        self.store.insert(format!("{name}.bias"), Tensor::zeros(&[dim]));
    }

    /// Conv weight uniform in `+-1/sqrt(fan_in)`, zero bias.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let bound = 1.0 / ((cin * k * k * k) as f64).sqrt();
        let w = uniform_tensor(&[cout, cin, k, k, k], bound, self.rng);
        self.store.insert(format!("{name}.weight"), w);
        self.store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }

    pub fn mlp(&mut self, name: &str, inp: usize, hidden: usize, out: usize) {
        self.linear(&format!("{name}.fc1"), inp, hidden);
        self.linear(&format!("{name}.fc2"), hidden, out);
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.store.insert(name.to_string(), Tensor::full(shape, value));
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let t = normal_tensor(shape, std, self.rng);
        self.store.insert(name.to_string(), t);
    }
}

/// Scalar count of a linear layer with bias.
pub fn linear_count(inp: usize, out: usize) -> usize {
    inp * out + out
}

pub fn conv_count(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k * k + cout
}

pub fn mlp_count(inp: usize, hidden: usize, out: usize) -> usize {
    linear_count(inp, hidden) + linear_count(hidden, out)
}
