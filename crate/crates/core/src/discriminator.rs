//! Dual discriminator: a global realism head `D_adv(Y)` and a layout head
//! `D_obj(Y, L)` that branches off `D_adv` at a fixed resolution and sees
//! the layout at every scale below it.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::pyramid;
use crate::nn::{leaky_relu, BatchNorm, Conv2d, ConvSpec, Mode, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DBlockSpec {
    pub index: usize,
    pub in_res: usize,
    pub out_res: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

const fn dblock(index: usize, in_res: usize, vi: usize, vo: usize) -> DBlockSpec {
    DBlockSpec { index, in_res, out_res: in_res / 2, in_channels: vi, out_channels: vo }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub adv_blocks: Vec<DBlockSpec>,
    /// Width entering the first `D_obj` layer; the branch feature is
    /// projected to this many channels.
    pub obj_projection: usize,
    pub obj_blocks: Vec<DBlockSpec>,
    pub branch_resolution: usize,
    pub num_classes: usize,
    /// Concatenate the background image with the input (ablation variant).
    pub condition_on_background: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            adv_blocks: vec![
                dblock(7, 256, 3, 32),
                dblock(6, 128, 32, 64),
                dblock(5, 64, 64, 128),
                dblock(4, 32, 128, 256),
                dblock(3, 16, 256, 512),
            ],
            obj_projection: 64,
            obj_blocks: vec![
                dblock(4, 32, 64, 128),
                dblock(3, 16, 128, 256),
                dblock(2, 8, 256, 256),
                dblock(1, 4, 256, 256),
            ],
            branch_resolution: 32,
            num_classes: 12,
            condition_on_background: false,
        }
    }
}

impl DiscriminatorConfig {
    pub fn reduced_64(num_classes: usize, width: usize) -> Self {
        let w = width;
        Self {
            adv_blocks: vec![dblock(5, 64, 3, w), dblock(4, 32, w, 2 * w), dblock(3, 16, 2 * w, 4 * w)],
            obj_projection: w,
            obj_blocks: vec![
                dblock(4, 32, w, 2 * w),
                dblock(3, 16, 2 * w, 2 * w),
                dblock(2, 8, 2 * w, 2 * w),
                dblock(1, 4, 2 * w, 2 * w),
            ],
            branch_resolution: 32,
            num_classes,
            condition_on_background: false,
        }
    }

    pub fn tiny(num_classes: usize) -> Self {
        Self {
            adv_blocks: vec![dblock(5, 64, 3, 4), dblock(4, 32, 4, 8), dblock(3, 16, 8, 8)],
            obj_projection: 4,
            obj_blocks: vec![dblock(4, 32, 4, 4), dblock(3, 16, 4, 4), dblock(2, 8, 4, 4), dblock(1, 4, 4, 4)],
            branch_resolution: 32,
            num_classes,
            condition_on_background: false,
        }
    }

    pub fn image_size(&self) -> usize {
        self.adv_blocks.first().map(|b| b.in_res).unwrap_or(0)
    }

    /// Layout resolutions concatenated inside `D_obj`.
    pub fn layout_scales(&self) -> Vec<usize> {
        self.obj_blocks.iter().map(|b| b.in_res).collect()
    }

    /// Channels of the `D_adv` feature map handed to `D_obj`.
    pub fn branch_channels(&self) -> Option<usize> {
        self.adv_blocks.iter().find(|b| b.out_res == self.branch_resolution).map(|b| b.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let chain = |blocks: &[DBlockSpec], what: &str| -> Result<()> {
            for (i, b) in blocks.iter().enumerate() {
                if b.in_res != 2 * b.out_res || b.out_res == 0 {
                    return Err(Error::Config(format!("{what} block {} must halve resolution", b.index)));
                }
                if i > 0 {
                    let p = &blocks[i - 1];
                    if p.out_res != b.in_res || p.out_channels != b.in_channels {
                        return Err(Error::Config(format!("{what} block {} does not chain", b.index)));
                    }
                }
            }
            Ok(())
        };
        if self.adv_blocks.is_empty() || self.obj_blocks.is_empty() {
            return Err(Error::Config("discriminator needs adversarial and layout blocks".into()));
        }
        chain(&self.adv_blocks, "D_adv")?;
        chain(&self.obj_blocks, "D_obj")?;
        if self.adv_blocks[0].in_channels != 3 {
            return Err(Error::Config("first D_adv block must take 3 image channels".into()));
        }
        let last = self.adv_blocks.last().unwrap();
        if last.out_res < 4 || !last.out_res.is_power_of_two() {
            return Err(Error::Config(format!("D_adv must end at a power of two >= 4, got {}", last.out_res)));
        }
        if self.branch_channels().is_none() {
            return Err(Error::Config(format!("no D_adv block outputs {0}x{0}", self.branch_resolution)));
        }
        let first_obj = &self.obj_blocks[0];
        if first_obj.in_res != self.branch_resolution || first_obj.in_channels != self.obj_projection {
            return Err(Error::Config("first D_obj block must start at the branch point".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("layout must have at least one class".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvBnAct {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBnAct {
    fn new(store: &mut ParamStore, name: &str, spec: ConvSpec) -> Result<Self> {
        Ok(Self { conv: store.conv2d(&format!("{name}.conv"), spec)?, bn: store.batch_norm(&format!("{name}.bn"), spec.out_channels, true)? })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        leaky_relu(&self.bn.forward(&self.conv.forward(x)?, mode)?, 0.1)
    }
}

#[derive(Debug, Clone)]
struct AdvBlock {
    spec: DBlockSpec,
    down: ConvBnAct,
    mix: ConvBnAct,
}

#[derive(Debug, Clone)]
struct ObjBlock {
    spec: DBlockSpec,
    down: ConvBnAct,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    adv: Vec<AdvBlock>,
    adv_out_down: Vec<ConvBnAct>,
    adv_logit: Conv2d,
    obj_proj: ConvBnAct,
    obj: Vec<ObjBlock>,
    obj_logit: Conv2d,
}

/// Output of `D_adv`: one logit per sample plus the branch feature map.
#[derive(Debug, Clone)]
pub struct AdvOutput {
    pub logits: Tensor,
    pub branch: Tensor,
    pub block_outputs: Vec<(usize, Tensor)>,
}

impl Discriminator {
    /// Registers every parameter under `d.` in `store`.
    pub fn new(config: &DiscriminatorConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let k = config.num_classes;
        let mut adv = Vec::new();
        for (i, spec) in config.adv_blocks.iter().enumerate() {
            let name = format!("d.adv.block{}", spec.index);
            let vin = if i == 0 && config.condition_on_background { 6 } else { spec.in_channels };
            adv.push(AdvBlock {
                spec: *spec,
                down: ConvBnAct::new(store, &format!("{name}.down"), ConvSpec::down4(vin, vin, false))?,
                mix: ConvBnAct::new(store, &format!("{name}.mix"), ConvSpec::same3(vin, spec.out_channels, false))?,
            });
        }
        let last = config.adv_blocks.last().unwrap();
        let mut adv_out_down = Vec::new();
        let mut res = last.out_res;
        let mut i = 0;
        while res > 4 {
            adv_out_down.push(ConvBnAct::new(
                store,
                &format!("d.adv.out.down{i}"),
                ConvSpec::down4(last.out_channels, last.out_channels, false),
            )?);
            res /= 2;
            i += 1;
        }
        let adv_logit = store.conv2d("d.adv.out.logit", ConvSpec::collapse(last.out_channels, 1, 4))?;

        let branch = config.branch_channels().unwrap();
        let obj_proj = ConvBnAct::new(store, "d.obj.proj", ConvSpec::pointwise(branch, config.obj_projection, false))?;
        let mut obj = Vec::new();
        for spec in &config.obj_blocks {
            obj.push(ObjBlock {
                spec: *spec,
                down: ConvBnAct::new(
                    store,
                    &format!("d.obj.block{}", spec.index),
                    ConvSpec::down4(spec.in_channels + k, spec.out_channels, false),
                )?,
            });
        }
        let obj_last = config.obj_blocks.last().unwrap();
        let obj_logit =
            store.conv2d("d.obj.out.logit", ConvSpec::collapse(obj_last.out_channels, 1, obj_last.out_res))?;
        Ok(Self { config: config.clone(), adv, adv_out_down, adv_logit, obj_proj, obj, obj_logit })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// Realism logits (`B`) and the branch feature for `D_obj`.
    pub fn adv_forward(&self, image: &Tensor, background: Option<&Tensor>, mode: Mode) -> Result<AdvOutput> {
        let size = self.config.image_size();
        let (_, c, h, w) = image.dims4()?;
        if c != 3 || h != size || w != size {
            return Err(Error::Shape(format!("D_adv expects 3x{size}x{size} images, got {c}x{h}x{w}")));
        }
        let mut x = match (self.config.condition_on_background, background) {
            (true, Some(bg)) => Tensor::cat(&[image, bg], 1)?,
            (true, None) => return Err(Error::Config("background-conditioned discriminator needs X".into())),
            (false, _) => image.clone(),
        };
        let mut branch = None;
        let mut block_outputs = Vec::with_capacity(self.adv.len());
        for block in &self.adv {
            x = block.mix.forward(&block.down.forward(&x, mode)?, mode)?;
            if block.spec.out_res == self.config.branch_resolution {
                branch = Some(x.clone());
            }
            block_outputs.push((block.spec.index, x.clone()));
        }
        for down in &self.adv_out_down {
            x = down.forward(&x, mode)?;
        }
        let logits = self.adv_logit.forward(&x)?.flatten_all()?;
        Ok(AdvOutput { logits, branch: branch.expect("validated"), block_outputs })
    }

    /// Layout logits (`B`) from the branch feature and layout pyramid levels
    /// keyed by resolution.
    pub fn obj_forward(&self, branch: &Tensor, layouts: &BTreeMap<usize, Tensor>, mode: Mode) -> Result<Tensor> {
        let mut x = self.obj_proj.forward(branch, mode)?;
        for block in &self.obj {
            let l = layouts.get(&block.spec.in_res).ok_or_else(|| {
                Error::Config(format!("layout pyramid lacks the {0}x{0} level", block.spec.in_res))
            })?;
            if l.dim(1)? != self.config.num_classes {
                return Err(Error::Config(format!(
                    "layout has {} channels, discriminator expects {}",
                    l.dim(1)?,
                    self.config.num_classes
                )));
            }
            x = block.down.forward(&Tensor::cat(&[&x, l], 1)?, mode)?;
        }
        Ok(self.obj_logit.forward(&x)?.flatten_all()?)
    }

    /// Both heads on a full-resolution batch: `(adv_logits, obj_logits)`.
    pub fn forward(
        &self,
        image: &Tensor,
        layout: &Tensor,
        background: Option<&Tensor>,
        mode: Mode,
    ) -> Result<(Tensor, Tensor)> {
        let adv = self.adv_forward(image, background, mode)?;
        let levels = pyramid(layout, self.config.layout_scales())?;
        let obj = self.obj_forward(&adv.branch, &levels, mode)?;
        Ok((adv.logits, obj))
    }
}
