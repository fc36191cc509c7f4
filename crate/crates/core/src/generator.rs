//! Decorating generator `G(X, L)`.
//!
//! A cascade of upsampling blocks. Each block modulates its input with the
//! layout through a SPADE residual block, doubles the resolution, appends
//! the background image at the new resolution and fuses everything with a
//! conv + batch norm + GLU. Skip-layer excitation lets the early blocks gate
//! the channels of the late ones.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, adaptive_avg_pool, BatchNorm, Conv2d, ConvSpec, Linear, Mode, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenBlockSpec {
    pub index: usize,
    pub in_res: usize,
    pub out_res: usize,
    pub sle_source: Option<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
}

const fn block(index: usize, in_res: usize, sle_source: Option<usize>, vi: usize, vo: usize) -> GenBlockSpec {
    GenBlockSpec { index, in_res, out_res: in_res * 2, sle_source, in_channels: vi, out_channels: vo }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub blocks: Vec<GenBlockSpec>,
    pub num_classes: usize,
    pub latent_dim: usize,
    pub output_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            blocks: vec![
                block(2, 4, None, 12, 512),
                block(3, 8, None, 512, 512),
                block(4, 16, None, 512, 256),
                block(5, 32, None, 256, 128),
                block(6, 64, Some(2), 128, 64),
                block(7, 128, Some(3), 64, 32),
            ],
            num_classes: 12,
            latent_dim: 256,
            output_channels: 3,
        }
    }
}

impl GeneratorConfig {
    /// 64x64 generator with the same block structure: four blocks, the last
    /// two excited by the first two.
    pub fn reduced_64(num_classes: usize, width: usize) -> Self {
        let w = width;
        Self {
            blocks: vec![
                block(2, 4, None, num_classes, 2 * w),
                block(3, 8, None, 2 * w, 2 * w),
                block(4, 16, Some(2), 2 * w, w),
                block(5, 32, Some(3), w, w / 2),
            ],
            num_classes,
            latent_dim: 32,
            output_channels: 3,
        }
    }

    /// 64x64 generator with a handful of channels, for fast numerical
    /// checks.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            blocks: vec![
                block(2, 4, None, num_classes, 8),
                block(3, 8, None, 8, 8),
                block(4, 16, Some(2), 8, 4),
                block(5, 32, Some(3), 4, 4),
            ],
            num_classes,
            latent_dim: 8,
            output_channels: 3,
        }
    }

    pub fn image_size(&self) -> usize {
        self.blocks.last().map(|b| b.out_res).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.blocks.first().ok_or_else(|| Error::Config("generator has no blocks".into()))?;
        if first.in_res != 4 {
            return Err(Error::Config(format!("first block must start at 4x4, got {}", first.in_res)));
        }
        if first.in_channels != self.num_classes {
            return Err(Error::Config(format!(
                "first block consumes {} channels but the layout has {}",
                first.in_channels, self.num_classes
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_res != 2 * b.in_res {
                return Err(Error::Config(format!("block {} must double resolution", b.index)));
            }
            if b.in_channels < 2 || b.out_channels == 0 {
                return Err(Error::Config(format!("block {} has too few channels", b.index)));
            }
            if i > 0 {
                let prev = &self.blocks[i - 1];
                if prev.out_res != b.in_res || prev.out_channels != b.in_channels {
                    return Err(Error::Config(format!("block {} does not chain from block {}", b.index, prev.index)));
                }
            }
            if let Some(src) = b.sle_source {
                let source = self.blocks[..i]
                    .iter()
                    .find(|s| s.index == src)
                    .ok_or_else(|| Error::Config(format!("block {} excited by unknown/later block {src}", b.index)))?;
                if source.out_res < 4 {
                    return Err(Error::Config(format!("SLE source block {src} is smaller than 4x4")));
                }
            }
        }
        if self.latent_dim == 0 || self.output_channels == 0 {
            return Err(Error::Config("latent and output widths must be positive".into()));
        }
        Ok(())
    }
}

/// One SPADE layer: parameter-free normalisation, then per-pixel scale and
/// shift predicted from the layout.
#[derive(Debug, Clone)]
pub struct Spade {
    norm: BatchNorm,
    shared: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
}

impl Spade {
    fn new(store: &mut ParamStore, name: &str, channels: usize, layout_channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm: store.batch_norm(&format!("{name}.norm"), channels, false)?,
            shared: store.conv2d(&format!("{name}.shared"), ConvSpec::same3(layout_channels, hidden, true))?,
            gamma: store.conv2d(&format!("{name}.gamma"), ConvSpec::same3(hidden, channels, true))?,
            beta: store.conv2d(&format!("{name}.beta"), ConvSpec::same3(hidden, channels, true))?,
        })
    }

    pub fn forward(&self, x: &Tensor, layout: &Tensor, mode: Mode) -> Result<Tensor> {
        let normed = self.norm.forward(x, mode)?;
        let h = self.shared.forward(layout)?.relu()?;
        let gamma = self.gamma.forward(&h)?;
        let beta = self.beta.forward(&h)?;
        Ok(normed.mul(&(gamma + 1.0)?)?.add(&beta)?)
    }

    pub fn gamma_conv(&self) -> &Conv2d {
        &self.gamma
    }

    pub fn beta_conv(&self) -> &Conv2d {
        &self.beta
    }
}

/// `x + SPADE2(relu(SPADE1(x)))`, channel count unchanged.
#[derive(Debug, Clone)]
pub struct SpadeResidual {
    pub first: Spade,
    pub second: Spade,
}

impl SpadeResidual {
    fn new(store: &mut ParamStore, name: &str, channels: usize, layout_channels: usize) -> Result<Self> {
        let hidden = (channels / 2).max(1);
        Ok(Self {
            first: Spade::new(store, &format!("{name}.spade1"), channels, layout_channels, hidden)?,
            second: Spade::new(store, &format!("{name}.spade2"), channels, layout_channels, hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor, layout: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let (_, _, lh, lw) = layout.dims4()?;
        if (h, w) != (lh, lw) {
            return Err(Error::Shape(format!("feature is {h}x{w} but layout is {lh}x{lw}")));
        }
        let y = self.first.forward(x, layout, mode)?.relu()?;
        let y = self.second.forward(&y, layout, mode)?;
        Ok(x.add(&y)?)
    }
}

/// Skip-layer excitation: squeezes a source feature map into a per-channel
/// gate in `(0, 1)` for a later block.
#[derive(Debug, Clone)]
pub struct SkipExcitation {
    pub squeeze: Conv2d,
    pub expand: Conv2d,
}

impl SkipExcitation {
    fn new(store: &mut ParamStore, name: &str, source_channels: usize, out_channels: usize) -> Result<Self> {
        Ok(Self {
            squeeze: store.conv2d(&format!("{name}.squeeze"), ConvSpec::collapse(source_channels, out_channels, 4))?,
            expand: store.conv2d(&format!("{name}.expand"), ConvSpec::pointwise(out_channels, out_channels, true))?,
        })
    }

    /// Returns a `B x v_o x 1 x 1` gate.
    pub fn forward(&self, source: &Tensor) -> Result<Tensor> {
        let pooled = adaptive_avg_pool(source, 4)?;
        let squeezed = nn::leaky_relu(&self.squeeze.forward(&pooled)?, 0.1)?;
        nn::sigmoid(&self.expand.forward(&squeezed)?)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorBlock {
    pub spec: GenBlockSpec,
    pub spade: SpadeResidual,
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub sle: Option<SkipExcitation>,
}

impl GeneratorBlock {
    /// `feature`: `B x v_i x R x R`; `layout`: `B x K x R x R`;
    /// `background`: `B x 3 x 2R x 2R`; `gate`: optional `B x v_o x 1 x 1`.
    pub fn forward(
        &self,
        feature: &Tensor,
        layout: &Tensor,
        background: &Tensor,
        gate: Option<&Tensor>,
        mode: Mode,
    ) -> Result<Tensor> {
        let (b, c, r, _) = feature.dims4()?;
        if c != self.spec.in_channels || r != self.spec.in_res {
            return Err(Error::Shape(format!(
                "block {} expects {}x{r0}x{r0} input, got {c}x{r}x{r}",
                self.spec.index,
                self.spec.in_channels,
                r0 = self.spec.in_res
            )));
        }
        let (bb, bc, bh, bw) = background.dims4()?;
        if bb != b || bc != 3 || bh != 2 * r || bw != 2 * r {
            return Err(Error::Shape(format!(
                "block {} expects a 3x{o}x{o} background, got {bc}x{bh}x{bw}",
                self.spec.index,
                o = 2 * r
            )));
        }
        let x = self.spade.forward(feature, layout, mode)?;
        let x = nn::upsample_nearest(&x, 2)?;
        let x = Tensor::cat(&[&x, background], 1)?;
        let x = self.bn.forward(&self.conv.forward(&x)?, mode)?;
        let x = nn::glu(&x)?;
        match gate {
            Some(g) => Ok(x.broadcast_mul(g)?),
            None => Ok(x),
        }
    }
}

/// Intermediate block outputs, in block order.
#[derive(Debug, Clone)]
pub struct GeneratorTrace {
    pub block_outputs: Vec<(usize, Tensor)>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    dtype: DType,
    latent_proj: Linear,
    blocks: Vec<GeneratorBlock>,
    to_rgb: Conv2d,
}

impl Generator {
    /// Registers every parameter under `g.` in `store`.
    pub fn new(config: &GeneratorConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let k = config.num_classes;
        let latent_proj = store.linear("g.latent_proj", config.latent_dim, k)?;
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for spec in &config.blocks {
            let name = format!("g.block{}", spec.index);
            let spade = SpadeResidual::new(store, &format!("{name}.spade"), spec.in_channels, k)?;
            let conv = store.conv2d(
                &format!("{name}.conv"),
                ConvSpec::same3(spec.in_channels + 3, 2 * spec.out_channels, false),
            )?;
            let bn = store.batch_norm(&format!("{name}.bn"), 2 * spec.out_channels, true)?;
            let sle = match spec.sle_source {
                Some(src) => {
                    let source = config.blocks.iter().find(|b| b.index == src).expect("validated");
                    Some(SkipExcitation::new(store, &format!("{name}.sle"), source.out_channels, spec.out_channels)?)
                }
                None => None,
            };
            blocks.push(GeneratorBlock { spec: *spec, spade, conv, bn, sle });
        }
        let last = config.blocks.last().expect("validated");
        let to_rgb = store.conv2d("g.to_rgb", ConvSpec::same3(last.out_channels, config.output_channels, true))?;
        Ok(Self { config: config.clone(), dtype: store.dtype(), latent_proj, blocks, to_rgb })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[GeneratorBlock] {
        &self.blocks
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// `Y_hat` in `[-1, 1]` from background `B x 3 x S x S`, layout
    /// `B x K x S x S` and latent `B x latent_dim`.
    pub fn forward(&self, background: &Tensor, layout: &Tensor, latent: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_traced(background, layout, latent, mode)?.0)
    }

    pub fn forward_traced(
        &self,
        background: &Tensor,
        layout: &Tensor,
        latent: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, GeneratorTrace)> {
        let size = self.config.image_size();
        let (b, bc, bh, bw) = background.dims4()?;
        let (lb, lk, lh, lw) = layout.dims4()?;
        if lk != self.config.num_classes {
            return Err(Error::Config(format!(
                "layout has {lk} channels, generator expects {}",
                self.config.num_classes
            )));
        }
        if bc != 3 || (bh, bw) != (size, size) || (lh, lw) != (size, size) || lb != b {
            return Err(Error::Shape(format!(
                "expected batch of 3x{size}x{size} backgrounds and Kx{size}x{size} layouts, got {bc}x{bh}x{bw} / {lk}x{lh}x{lw}"
            )));
        }
        if latent.dims2()? != (b, self.config.latent_dim) {
            return Err(Error::Shape(format!(
                "latent must be {b}x{}, got {:?}",
                self.config.latent_dim,
                latent.dims()
            )));
        }

        let layouts = pyramid(layout, self.blocks.iter().map(|b| b.spec.in_res))?;
        let backgrounds = pyramid(background, self.blocks.iter().map(|b| b.spec.out_res))?;

        let k = self.config.num_classes;
        let z = self.latent_proj.forward(latent)?.reshape((b, k, 1, 1))?;
        let mut x = layouts[&4].broadcast_add(&z)?;

        let mut outputs: Vec<(usize, Tensor)> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let gate = match (&block.sle, block.spec.sle_source) {
                (Some(sle), Some(src)) => {
                    let source = &outputs.iter().find(|(i, _)| *i == src).expect("validated").1;
                    Some(sle.forward(source)?)
                }
                _ => None,
            };
            x = block.forward(
                &x,
                &layouts[&block.spec.in_res],
                &backgrounds[&block.spec.out_res],
                gate.as_ref(),
                mode,
            )?;
            outputs.push((block.spec.index, x.clone()));
        }
        let y = self.to_rgb.forward(&x)?.tanh()?;
        Ok((y, GeneratorTrace { block_outputs: outputs }))
    }
}

/// Repeated 2x2 mean pooling of a square batch down to each requested size.
pub fn pyramid(x: &Tensor, sizes: impl IntoIterator<Item = usize>) -> Result<BTreeMap<usize, Tensor>> {
    let (_, _, h, w) = x.dims4()?;
    if h != w {
        return Err(Error::Shape(format!("pyramid needs square input, got {h}x{w}")));
    }
    let mut wanted: Vec<usize> = sizes.into_iter().collect();
    wanted.sort_unstable_by(|a, b| b.cmp(a));
    wanted.dedup();
    let mut out = BTreeMap::new();
    let mut current = x.clone();
    let mut res = h;
    for r in wanted {
        if r == 0 || r > h || h % r != 0 || !(h / r).is_power_of_two() {
            return Err(Error::Shape(format!("cannot pool {h}x{h} to {r}x{r}")));
        }
        while res > r {
            current = current.avg_pool2d(2)?;
            res /= 2;
        }
        out.insert(r, current.clone());
    }
    Ok(out)
}
