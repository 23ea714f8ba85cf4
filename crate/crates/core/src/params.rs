//! Named parameter tensors, binding onto a graph, and the checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use autodiff::{Gradients, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Encoder, collaboration encoder, compressor, decoder and heads.
    Pipeline,
    /// Projection and the global/local discriminators.
    Discriminator,
}

pub const DISCRIMINATOR_PREFIX: &str = "mi.";

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with(DISCRIMINATOR_PREFIX) {
            ParamGroup::Discriminator
        } else {
            ParamGroup::Pipeline
        }
    }
}

/// Ordered map from parameter name to value.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), g.param(v.clone())))
            .collect()
    }

    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("checkpoint: bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint: unsupported format version {version}"
            )));
        }
        let count = read_u32(&mut r)?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("checkpoint: tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_bits(u64::from_le_bytes(b)));
            }
            set.insert(name, Tensor::new(shape, data)?);
        }
        Ok(set)
    }

    /// Checks that `other` holds exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => {
                    return Err(Error::Format(format!(
                        "parameter `{name}`: expected shape {:?}, found {:?}",
                        t.shape(),
                        o.shape()
                    )))
                }
                None => return Err(Error::Format(format!("parameter `{name}` missing"))),
            }
        }
        if let Some(extra) = other.tensors.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(Error::Format(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Graph handles of a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn new(params: &ParamSet, g: &mut Graph) -> Self {
        Self {
            vars: params.bind(g),
        }
    }

    /// Binds only the parameters whose names satisfy `keep`.
    pub fn filtered(params: &ParamSet, g: &mut Graph, keep: impl Fn(&str) -> bool) -> Self {
        let vars = params
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(k, v)| (k.to_string(), g.param(v.clone())))
            .collect();
        Self { vars }
    }

    /// Everything except the discriminators, for inference.
    pub fn pipeline(params: &ParamSet, g: &mut Graph) -> Self {
        Self::filtered(params, g, |k| ParamGroup::of(k) == ParamGroup::Pipeline)
    }

    /// Replaces the handle of `name`, e.g. with a leaf under test.
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` is not bound")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Collects per-parameter gradients after a backward pass.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get(v).expect("bound params are trainable").clone()))
            .collect()
    }
}

/// Deterministic initializer: He-normal weights, zero biases.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        if std == 0.0 {
            return Tensor::zeros(shape.to_vec());
        }
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape.to_vec(), |_| dist.sample(&mut self.rng))
    }

    /// `[k, k, cin, cout]` kernel and `[cout]` bias.
    pub fn conv(&mut self, set: &mut ParamSet, name: &str, k: usize, cin: usize, cout: usize, gain: f64) {
        let std = gain * (2.0 / (k * k * cin) as f64).sqrt();
        set.insert(format!("{name}.w"), self.normal(&[k, k, cin, cout], std));
        set.insert(format!("{name}.b"), Tensor::zeros([cout]));
    }

    /// `[n, m]` weight and `[m]` bias.
    pub fn linear(&mut self, set: &mut ParamSet, name: &str, n: usize, m: usize, gain: f64) {
        let std = gain * (2.0 / n as f64).sqrt();
        set.insert(format!("{name}.w"), self.normal(&[n, m], std));
        set.insert(format!("{name}.b"), Tensor::zeros([m]));
    }
}
