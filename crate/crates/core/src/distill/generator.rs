use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DistillError;
use crate::nn::model::BN_EPS;
use crate::scalar::Scalar;
use crate::tensor::{BnMode, Graph, Tensor, Var};

pub const LATENT_DIM: usize = 256;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    /// Channels of the feature map produced by the input projection.
    pub base_channels: usize,
    /// Side of that feature map; the output side is twice this.
    pub base_size: usize,
    pub out_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: LATENT_DIM,
            base_channels: 64,
            base_size: 16,
            out_channels: 3,
        }
    }
}

impl GeneratorConfig {
    /// Generator whose output matches a model input `[C, H, W]` (square, even side).
    pub fn for_input(input: [usize; 3], base_channels: usize) -> Result<Self, DistillError> {
        let [c, h, w] = input;
        if h != w || h % 2 != 0 {
            return Err(DistillError::Invalid(format!(
                "generator needs a square even-sided input, got {}x{}",
                h, w
            )));
        }
        Ok(Self {
            latent_dim: LATENT_DIM,
            base_channels,
            base_size: h / 2,
            out_channels: c,
        })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_channels, 2 * self.base_size, 2 * self.base_size]
    }
}

/// Latent projection, one upsampling block (nearest 2x, 3x3 conv, batch
/// norm, leaky ReLU), a 3x3 conv to image channels, tanh and a final affine
/// batch norm. Both batch norms use batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Self {
        let GeneratorConfig {
            latent_dim: d,
            base_channels: c,
            base_size: s,
            out_channels: o,
        } = config;
        let mut params = BTreeMap::new();
        let lin_bound = (1.0 / d as f64).sqrt();
        params.insert("proj.weight".into(), Tensor::uniform(&[c * s * s, d], lin_bound, rng));
        params.insert("proj.bias".into(), Tensor::uniform(&[c * s * s], lin_bound, rng));
        let conv_bound = (6.0 / (c * 9) as f64).sqrt();
        params.insert("up.conv.weight".into(), Tensor::uniform(&[c, c, 3, 3], conv_bound, rng));
        params.insert("up.bn.weight".into(), Tensor::full(&[c], T::one()));
        params.insert("up.bn.bias".into(), Tensor::zeros(&[c]));
        params.insert("out.conv.weight".into(), Tensor::uniform(&[o, c, 3, 3], conv_bound, rng));
        params.insert("out.conv.bias".into(), Tensor::zeros(&[o]));
        params.insert("out.bn.weight".into(), Tensor::full(&[o], T::one()));
        params.insert("out.bn.bias".into(), Tensor::zeros(&[o]));
        Self { config, params }
    }

    /// Puts the parameters on `g`, trainable or constant, in name order.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, t)| (k.clone(), if trainable { g.param(t) } else { g.constant(t) }))
            .collect()
    }

    /// Images `[B, C, H, W]` from latents `z` of shape `[B, latent_dim]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &BTreeMap<String, Var>, z: Var) -> Result<Var, DistillError> {
        let zs = g.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.config.latent_dim {
            return Err(DistillError::Invalid(format!(
                "latents must be [B, {}], got {:?}",
                self.config.latent_dim, zs
            )));
        }
        let (c, s) = (self.config.base_channels, self.config.base_size);
        let eps = T::lit(BN_EPS);
        let h = g.linear(z, p["proj.weight"], Some(p["proj.bias"]))?;
        let h = g.reshape(h, &[zs[0], c, s, s])?;
        let h = g.upsample_nearest2x(h)?;
        let h = g.conv2d(h, p["up.conv.weight"], None, 1, 1)?;
        let h = g.batchnorm2d(h, p["up.bn.weight"], p["up.bn.bias"], BnMode::Train, eps)?.out;
        let h = g.leaky_relu(h, T::lit(LEAKY_SLOPE))?;
        let h = g.conv2d(h, p["out.conv.weight"], Some(p["out.conv.bias"]), 1, 1)?;
        let h = g.tanh(h)?;
        Ok(g.batchnorm2d(h, p["out.bn.weight"], p["out.bn.bias"], BnMode::Train, eps)?.out)
    }

    /// Detached images for concrete latents.
    pub fn generate(&self, z: &Tensor<T>) -> Result<Tensor<T>, DistillError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let zv = g.constant(z);
        let out = self.forward(&mut g, &p, zv)?;
        Ok(g.tensor(out))
    }

    pub fn collect_grads(&mut self, g: &Graph<T>, bound: &BTreeMap<String, Var>) {
        for (name, t) in self.params.iter_mut() {
            let grad = g
                .grad(bound[name])
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![T::zero(); t.numel()]);
            t.set_grad(grad).expect("gradient shape matches parameter");
        }
    }
}
