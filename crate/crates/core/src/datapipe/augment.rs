use candle_core::Tensor;
use nsd_layout::GridTransform;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Paired flip/translation augmentation applied to real and generated
/// images together with their layouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub translate_prob: f64,
    pub hflip_prob: f64,
    pub max_translate_fraction: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { translate_prob: 0.3, hflip_prob: 0.5, max_translate_fraction: 0.125 }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self { translate_prob: 0.0, hflip_prob: 0.0, max_translate_fraction: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("translate_prob", self.translate_prob), ("hflip_prob", self.hflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(0.0..=1.0).contains(&self.max_translate_fraction) {
            return Err(Error::Config(format!(
                "augment.max_translate_fraction must lie in [0, 1], got {}",
                self.max_translate_fraction
            )));
        }
        Ok(())
    }

    /// Draws one transform. The RNG is consumed identically whatever the
    /// outcome so that streams stay aligned across configurations.
    pub fn sample<R: Rng + ?Sized>(&self, width: usize, height: usize, rng: &mut R) -> GridTransform {
        let flip_draw: f64 = rng.random();
        let shift_draw: f64 = rng.random();
        let ux: f64 = rng.random();
        let uy: f64 = rng.random();
        let mut t = GridTransform { hflip: flip_draw < self.hflip_prob, ..GridTransform::default() };
        if shift_draw < self.translate_prob {
            let mx = (self.max_translate_fraction * width as f64).round() as i32;
            let my = (self.max_translate_fraction * height as f64).round() as i32;
            t.dx = uniform_offset(ux, mx);
            t.dy = uniform_offset(uy, my);
        }
        t
    }
}

fn uniform_offset(u: f64, max: i32) -> i32 {
    let span = (2 * max + 1) as f64;
    ((u * span).floor() as i32).min(2 * max) - max
}

fn shift(x: &Tensor, dim: usize, by: i32) -> Result<Tensor> {
    let n = x.dim(dim)?;
    let s = by.unsigned_abs() as usize;
    if by == 0 {
        return Ok(x.clone());
    }
    if s >= n {
        return Ok(x.zeros_like()?);
    }
    Ok(if by > 0 {
        x.narrow(dim, 0, n - s)?.pad_with_zeros(dim, s, 0)?
    } else {
        x.narrow(dim, s, n - s)?.pad_with_zeros(dim, 0, s)?
    })
}

/// Applies a grid transform to the last two dimensions of a tensor. The
/// operation only permutes and zeroes entries, so gradients pass through.
pub fn apply_transform(x: &Tensor, t: &GridTransform) -> Result<Tensor> {
    let rank = x.rank();
    if rank < 2 {
        return Err(Error::Shape(format!("augmentation needs at least 2 dims, got {:?}", x.dims())));
    }
    let (hd, wd) = (rank - 2, rank - 1);
    let mut y = if t.hflip { x.flip(&[wd])? } else { x.clone() };
    y = shift(&y, wd, t.dx)?;
    y = shift(&y, hd, t.dy)?;
    Ok(y)
}

/// Transforms an image and its layout with one shared sampled transform.
pub fn augment_pair<R: Rng + ?Sized>(
    image: &Tensor,
    layout: &Tensor,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(Tensor, Tensor, GridTransform)> {
    let (ih, iw) = spatial(image)?;
    if spatial(layout)? != (ih, iw) {
        return Err(Error::Shape(format!(
            "image {:?} and layout {:?} differ spatially",
            image.dims(),
            layout.dims()
        )));
    }
    let t = policy.sample(iw, ih, rng);
    Ok((apply_transform(image, &t)?, apply_transform(layout, &t)?, t))
}

/// Augments each sample of a batch independently. Every tensor in `group`
/// has the batch as its first dimension and receives the same per-sample
/// transform.
pub fn augment_batch<R: Rng + ?Sized>(
    group: &[&Tensor],
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(Vec<Tensor>, Vec<GridTransform>)> {
    let first = group.first().ok_or_else(|| Error::Shape("empty augmentation group".into()))?;
    let b = first.dim(0)?;
    let (h, w) = spatial(first)?;
    for t in group {
        if t.dim(0)? != b || spatial(t)? != (h, w) {
            return Err(Error::Shape(format!("augmentation group mismatch: {:?} vs {:?}", first.dims(), t.dims())));
        }
    }
    let transforms: Vec<GridTransform> = (0..b).map(|_| policy.sample(w, h, rng)).collect();
    if transforms.iter().all(GridTransform::is_identity) {
        return Ok((group.iter().map(|t| (*t).clone()).collect(), transforms));
    }
    let out = group
        .iter()
        .map(|x| {
            let parts = transforms
                .iter()
                .enumerate()
                .map(|(i, t)| apply_transform(&x.narrow(0, i, 1)?, t))
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::cat(&parts, 0)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, transforms))
}

fn spatial(x: &Tensor) -> Result<(usize, usize)> {
    let d = x.dims();
    if d.len() < 2 {
        return Err(Error::Shape(format!("expected spatial dims, got {d:?}")));
    }
    Ok((d[d.len() - 2], d[d.len() - 1]))
}
