//! PatchGAN critic with an auxiliary multi-label category head.

use defectgan_autograd::Var;
use serde::{Deserialize, Serialize};

use crate::datamodel::NUM_CATEGORIES;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::seed;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    pub conv_dim: usize,
    pub stages: usize,
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.conv_dim == 0 {
            return Err(Error::Invalid("discriminator needs at least one stage and positive width".into()));
        }
        if self.image_size < (1 << self.stages) || self.image_size % (1 << self.stages) != 0 {
            return Err(Error::Invalid(format!(
                "discriminator input {} is not a multiple of 2^{}",
                self.image_size, self.stages
            )));
        }
        Ok(())
    }

    /// Side length of the patch score map.
    pub fn patch_size(&self) -> usize {
        self.image_size >> self.stages
    }
}

/// Patch scores `[N, 1, h, w]` and category logits `[N, C]`.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    pub src: Var,
    pub cls: Var,
}

/// Anything that assigns patch critic scores to an image batch.
pub trait Critic {
    /// `[N, 1, h, w]` unbounded scores.
    fn score(&self, x: &Var) -> Var;
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamStore,
    stages: Vec<Conv2d>,
    src_head: Conv2d,
    cls_head: Conv2d,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(init_seed, &[seed::STREAM_INIT_D]);
        let mut p = ParamStore::new();
        let mut stages = Vec::new();
        let mut cin = 3;
        for i in 0..config.stages {
            let cout = config.conv_dim << i;
            stages.push(Conv2d::new(&mut p, &mut rng, &format!("stage{i}"), cin, cout, 4, 2, 1, true));
            cin = cout;
        }
        let k = config.patch_size();
        let src_head = Conv2d::new(&mut p, &mut rng, "head.src", cin, 1, 3, 1, 1, false);
        let cls_head = Conv2d::new(&mut p, &mut rng, "head.cls", cin, NUM_CATEGORIES, k, 1, 0, false);
        Ok(Discriminator { config, params: p, stages, src_head, cls_head })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, trainable: bool) -> Bound {
        self.params.bind(trainable)
    }

    pub fn forward(&self, b: &Bound, x: &Var) -> Result<DiscriminatorOutput> {
        let s = self.config.image_size;
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != 3 || xs[2] != s || xs[3] != s {
            return Err(Error::Shape(format!("discriminator expects [N, 3, {s}, {s}], got {xs:?}")));
        }
        Ok(self.forward_unchecked(b, x))
    }

    fn forward_unchecked(&self, b: &Bound, x: &Var) -> DiscriminatorOutput {
        let h = self.features(b, x);
        let src = self.src_head.forward(b, &h);
        let cls = self.cls_head.forward(b, &h).reshape(&[x.shape()[0], NUM_CATEGORIES]);
        DiscriminatorOutput { src, cls }
    }

    fn features(&self, b: &Bound, x: &Var) -> Var {
        self.stages
            .iter()
            .fold(x.clone(), |h, conv| conv.forward(b, &h).leaky_relu(LEAKY_SLOPE))
    }

    /// Pairs the network with bound parameters for use as a [`Critic`].
    pub fn critic<'a>(&'a self, b: &'a Bound) -> BoundDiscriminator<'a> {
        BoundDiscriminator { d: self, b }
    }
}

pub struct BoundDiscriminator<'a> {
    d: &'a Discriminator,
    b: &'a Bound,
}

impl BoundDiscriminator<'_> {
    pub fn forward(&self, x: &Var) -> DiscriminatorOutput {
        self.d.forward_unchecked(self.b, x)
    }
}

impl Critic for BoundDiscriminator<'_> {
    fn score(&self, x: &Var) -> Var {
        self.d.src_head.forward(self.b, &self.d.features(self.b, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use defectgan_autograd::Tensor;

    #[test]
    fn full_size_geometry() {
        let d = Discriminator::new(DiscriminatorConfig { image_size: 128, conv_dim: 2, stages: 6 }, 0).unwrap();
        let x = Var::constant(Tensor::zeros(&[1, 3, 128, 128]));
        let out = d.forward(&d.bind(false), &x).unwrap();
        assert_eq!(out.src.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.cls.shape(), &[1, 6]);
    }

    #[test]
    fn rejects_wrong_size() {
        let d = Discriminator::new(DiscriminatorConfig { image_size: 16, conv_dim: 2, stages: 2 }, 0).unwrap();
        let x = Var::constant(Tensor::zeros(&[1, 3, 8, 8]));
        assert!(d.forward(&d.bind(false), &x).is_err());
        assert!(DiscriminatorConfig { image_size: 8, conv_dim: 2, stages: 4 }.validate().is_err());
    }
}
