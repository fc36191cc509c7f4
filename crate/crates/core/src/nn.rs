//! Minimal layer toolkit over candle: a named parameter store plus the
//! convolution, normalisation and activation pieces the networks need.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated.
    Train,
    /// Frozen running averages; samples are independent.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    /// Running statistics; saved and restored but never optimised.
    Buffer,
}

/// Flat, name-addressed collection of variables. Layers hold clones of the
/// same `Var`s, so updating a store entry updates the layer.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    entries: BTreeMap<String, (Var, ParamKind)>,
    init_rng: ChaCha8Rng,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("entries", &self.entries.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self { dtype, device: Device::Cpu, entries: BTreeMap::new(), init_rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize], kind: ParamKind) -> Result<Var> {
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.entries.insert(name, (var.clone(), kind));
        Ok(var)
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| self.init_rng.random_range(-bound..=bound)).collect();
        self.insert(name, values, shape, ParamKind::Weight)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64, kind: ParamKind) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape, kind)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|(v, _)| v)
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|(_, k)| *k)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().filter(|(_, (_, k))| *k == ParamKind::Weight).map(|(n, (v, _))| (n.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().filter(|(_, (_, k))| *k == ParamKind::Buffer).map(|(n, (v, _))| (n.as_str(), v))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var, ParamKind)> {
        self.entries.iter().map(|(n, (v, k))| (n.as_str(), v, *k))
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.trainable().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.entries.iter().map(|(n, (v, _))| (n.clone(), v.dims().to_vec())).collect()
    }

    /// Detached copies of every entry.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.entries.iter().map(|(n, (v, _))| Ok((n.clone(), v.as_tensor().copy()?.detach()))).collect()
    }

    /// Overwrites every entry from `values`, which must contain exactly the
    /// store's names with matching shapes.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, (var, _)) in &self.entries {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = values.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter '{extra}'")));
        }
        Ok(())
    }

    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        self.load(&other.snapshot()?)
    }

    pub fn conv2d(&mut self, name: &str, cfg: ConvSpec) -> Result<Conv2d> {
        let fan_in = cfg.in_channels * cfg.kernel * cfg.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = self.uniform(
            format!("{name}.weight"),
            &[cfg.out_channels, cfg.in_channels, cfg.kernel, cfg.kernel],
            bound,
        )?;
        let bias = if cfg.bias { Some(self.uniform(format!("{name}.bias"), &[cfg.out_channels], bound)?) } else { None };
        Ok(Conv2d { weight, bias, stride: cfg.stride, padding: cfg.padding })
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize, affine: bool) -> Result<BatchNorm> {
        let affine = if affine {
            Some((
                self.constant(format!("{name}.weight"), &[channels], 1.0, ParamKind::Weight)?,
                self.constant(format!("{name}.bias"), &[channels], 0.0, ParamKind::Weight)?,
            ))
        } else {
            None
        };
        let running_mean = self.constant(format!("{name}.running_mean"), &[channels], 0.0, ParamKind::Buffer)?;
        let running_var = self.constant(format!("{name}.running_var"), &[channels], 1.0, ParamKind::Buffer)?;
        Ok(BatchNorm { affine, running_mean, running_var, momentum: 0.1, eps: 1e-5 })
    }

    pub fn linear(&mut self, name: &str, in_features: usize, out_features: usize) -> Result<Linear> {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = self.uniform(format!("{name}.weight"), &[out_features, in_features], bound)?;
        let bias = self.uniform(format!("{name}.bias"), &[out_features], bound)?;
        Ok(Linear { weight, bias })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Kernel 3, padding 1: keeps spatial size.
    pub fn same3(in_channels: usize, out_channels: usize, bias: bool) -> Self {
        Self { in_channels, out_channels, kernel: 3, stride: 1, padding: 1, bias }
    }

    /// Kernel 4, stride 2, padding 1: halves spatial size.
    pub fn down4(in_channels: usize, out_channels: usize, bias: bool) -> Self {
        Self { in_channels, out_channels, kernel: 4, stride: 2, padding: 1, bias }
    }

    /// Unpadded square kernel collapsing a `kernel x kernel` map to 1x1.
    pub fn collapse(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self { in_channels, out_channels, kernel, stride: 1, padding: 0, bias: true }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize, bias: bool) -> Self {
        Self { in_channels, out_channels, kernel: 1, stride: 1, padding: 0, bias }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Per-channel normalisation over batch and spatial dimensions.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    affine: Option<(Var, Var)>,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = x.dim(1)?;
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = x.mean_keepdim((0, 2, 3))?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
                let n = x.elem_count() / c;
                let unbiased = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
                let m = self.momentum;
                let new_mean =
                    (self.running_mean.as_tensor() * (1.0 - m))?.add(&(mean.detach().flatten_all()? * m)?)?;
                let new_var = (self.running_var.as_tensor() * (1.0 - m))?
                    .add(&(var.detach().flatten_all()? * (m * unbiased))?)?;
                self.running_mean.set(&new_mean)?;
                self.running_var.set(&new_var)?;
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            ),
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        match &self.affine {
            Some((w, b)) => Ok(normed
                .broadcast_mul(&w.as_tensor().reshape((1, c, 1, 1))?)?
                .broadcast_add(&b.as_tensor().reshape((1, c, 1, 1))?)?),
            None => Ok(normed),
        }
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    let positive = x.ge(0.0)?;
    Ok(positive.where_cond(x, &(x * slope)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Gated linear unit over channels: first half times sigmoid of second half.
pub fn glu(x: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    if c % 2 != 0 {
        return Err(Error::Shape(format!("GLU needs an even channel count, got {c}")));
    }
    let a = x.narrow(1, 0, c / 2)?;
    let b = x.narrow(1, c / 2, c / 2)?;
    Ok(a.mul(&sigmoid(&b)?)?)
}

/// `max(0, x)` whose gradient is exactly zero wherever `x <= 0`.
pub fn hinge(x: &Tensor) -> Result<Tensor> {
    let active = x.gt(0.0)?.to_dtype(x.dtype())?;
    Ok(x.mul(&active)?)
}

/// Average pooling to a fixed `size x size` grid; input side must be a
/// multiple of `size`.
pub fn adaptive_avg_pool(x: &Tensor, size: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % size != 0 || w % size != 0 || h != w {
        return Err(Error::Shape(format!("cannot pool {h}x{w} to {size}x{size}")));
    }
    let k = h / size;
    if k == 1 {
        Ok(x.clone())
    } else {
        Ok(x.avg_pool2d(k)?)
    }
}

/// Nearest-neighbour upsampling by an integer `factor`, built from
/// broadcasting so its gradient sums over each replicated block.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, factor, w, factor))?
        .reshape((b, c, h * factor, w * factor))?)
}

/// Global L2 norm over a set of gradient tensors.
pub fn global_norm<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Result<f64> {
    let mut acc = 0.0;
    for t in tensors {
        acc += t.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(acc.sqrt())
}

/// Flattens a tensor of any rank to `f64` values.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
