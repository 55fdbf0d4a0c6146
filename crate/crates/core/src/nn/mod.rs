//! Parameter storage and the handful of layer types the networks are built from.

pub mod ops;

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Named, trainable parameters of one network, keyed by dotted hierarchical names.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Builder rooted at `prefix`, drawing initial values from a stream seeded by `seed`.
    pub fn builder(&mut self, prefix: &str, seed: u64) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: prefix.to_string(),
        }
    }

    fn insert(&mut self, name: String, value: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        let tensor = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(tensor)
    }

    /// Snapshot of every parameter (shares storage; copy before mutating).
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter from `source`. Names and shapes must match exactly.
    pub fn assign(&self, source: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let value = source
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if value.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored shape {:?}, expected {:?}",
                    value.dims(),
                    var.dims()
                )));
            }
            var.set(&value.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// FNV-1a hash over names and raw parameter bytes.
    pub fn fingerprint(&self) -> Result<u64> {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                hash ^= *b as u64;
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, var) in &self.vars {
            feed(name.as_bytes());
            let flat = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?;
            for v in flat.to_vec1::<f64>()? {
                feed(&v.to_le_bytes());
            }
        }
        Ok(hash)
    }
}

pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: String,
}

impl ParamBuilder<'_> {
    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    /// Sub-builder whose names are prefixed with `name`. It continues this builder's random stream.
    pub fn pp(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_> {
        let prefix = self.name(&name.to_string());
        let rng = ChaCha8Rng::from_rng(&mut self.rng);
        ParamBuilder {
            store: self.store,
            rng,
            prefix,
        }
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    fn constant(&self, shape: &[usize], value: f64) -> Result<Tensor> {
        Ok(Tensor::full(value, shape, &Device::Cpu)?)
    }

    pub fn tensor(&mut self, leaf: &str, value: Tensor) -> Result<Tensor> {
        let name = self.name(leaf);
        self.store.insert(name, value)
    }

    /// Conv layer with fan-in (He) normal weights scaled by `gain`, zero bias.
    pub fn conv2d(
        &mut self,
        leaf: &str,
        spec: ConvSpec,
        gain: f64,
        bias: bool,
    ) -> Result<Conv2d> {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let mut sub = self.pp(leaf);
        let w = sub.normal(
            &[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
            std,
        )?;
        let weight = sub.tensor("weight", w)?;
        let bias = if bias {
            let b = sub.constant(&[spec.out_channels], 0.0)?;
            Some(sub.tensor("bias", b)?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, spec })
    }

    pub fn linear(&mut self, leaf: &str, inputs: usize, outputs: usize, gain: f64) -> Result<Linear> {
        let std = gain * (2.0 / inputs as f64).sqrt();
        let mut sub = self.pp(leaf);
        let w = sub.normal(&[outputs, inputs], std)?;
        let weight = sub.tensor("weight", w)?;
        let b = sub.constant(&[outputs], 0.0)?;
        let bias = sub.tensor("bias", b)?;
        Ok(Linear { weight, bias })
    }

    pub fn batch_norm(&mut self, leaf: &str, channels: usize) -> Result<BatchNorm> {
        let mut sub = self.pp(leaf);
        let g = sub.constant(&[channels], 1.0)?;
        let gamma = sub.tensor("weight", g)?;
        let b = sub.constant(&[channels], 0.0)?;
        let beta = sub.tensor("bias", b)?;
        Ok(BatchNorm { gamma, beta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// `kernel`x`kernel`, stride 1, "same" padding.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::same(in_channels, out_channels, 1)
    }

    pub fn strided(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
}

/// Whether a forward pass should record gradients for the layer's own parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    /// Parameters are detached; gradients still flow to the input.
    Frozen,
}

fn param(t: &Tensor, mode: Mode) -> Tensor {
    match mode {
        Mode::Train => t.clone(),
        Mode::Frozen => t.detach(),
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    spec: ConvSpec,
}

impl Conv2d {
    /// Wraps fixed (non-trainable) weights, e.g. a loaded feature network.
    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        let (o, i, k, _) = weight.dims4()?;
        Ok(Self {
            weight,
            bias,
            spec: ConvSpec {
                in_channels: i,
                out_channels: o,
                kernel: k,
                stride,
                padding,
            },
        })
    }

    pub fn spec(&self) -> ConvSpec {
        self.spec
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = param(&self.weight, mode);
        let b = self.bias.as_ref().map(|b| param(b, mode));
        Ok(ops::conv2d(
            x,
            &w,
            b.as_ref(),
            self.spec.stride,
            self.spec.padding,
        )?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = param(&self.weight, mode);
        let b = param(&self.bias, mode);
        Ok(x.matmul(&w.t()?)?.broadcast_add(&b)?)
    }
}

/// Batch normalization using the statistics of the current batch.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl BatchNorm {
    const EPS: f64 = 1e-5;

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = x.dim(1)?;
        let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered
            .sqr()?
            .mean_keepdim(0)?
            .mean_keepdim(2)?
            .mean_keepdim(3)?;
        let normed = centered.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        let g = param(&self.gamma, mode).reshape((1, c, 1, 1))?;
        let b = param(&self.beta, mode).reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&g)?.broadcast_add(&b)?)
    }
}
