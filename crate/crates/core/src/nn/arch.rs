use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tensor::conv_out_dim;

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// Declarative layer description, deserialized from arch JSON files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bias: bool,
    },
    Bn,
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Linear {
        out: usize,
    },
    AvgPool {
        kernel: usize,
    },
    GlobalAvgPool,
    Upsample,
    /// `act(body(x) + shortcut(x))`; an empty shortcut is the identity.
    Residual {
        body: Vec<LayerSpec>,
        #[serde(default)]
        shortcut: Vec<LayerSpec>,
        #[serde(default = "yes")]
        relu: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub name: String,
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub num_classes: usize,
    #[serde(default)]
    pub seed: u64,
    pub layers: Vec<LayerSpec>,
}

const PLAIN_CNN_6: &str = include_str!("../../../../configs/arch/plain-cnn-6.json");
const RESNET_TINY: &str = include_str!("../../../../configs/arch/resnet-tiny.json");

pub const BUILTIN_ARCHS: &[&str] = &["plain-cnn-6", "resnet-tiny"];

impl ArchConfig {
    pub fn builtin(name: &str) -> Result<Self, ModelError> {
        let src = match name {
            "plain-cnn-6" => PLAIN_CNN_6,
            "resnet-tiny" => RESNET_TINY,
            other => return Err(ModelError::UnknownArch(other.to_string())),
        };
        Self::from_json(src)
    }

    pub fn from_json(src: &str) -> Result<Self, ModelError> {
        let cfg: ArchConfig = serde_json::from_str(src).map_err(|e| ModelError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Checks channel chaining, spatial fit, and that every conv is followed
    /// by batch norm. Returns the output feature width.
    pub fn validate(&self) -> Result<usize, ModelError> {
        let [c, h, w] = self.input;
        let shape = walk(&self.layers, Shape::Map(c, h, w), "layers")?;
        match shape {
            Shape::Flat(d) if d == self.num_classes => Ok(d),
            other => Err(ModelError::Config(format!(
                "model ends with {:?}, expected {} logits",
                other, self.num_classes
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Map(usize, usize, usize),
    Flat(usize),
}

fn walk(layers: &[LayerSpec], mut shape: Shape, path: &str) -> Result<Shape, ModelError> {
    for (i, layer) in layers.iter().enumerate() {
        let here = format!("{}.{}", path, i);
        if let LayerSpec::Conv { .. } = layer {
            if !matches!(layers.get(i + 1), Some(LayerSpec::Bn)) {
                return Err(ModelError::Config(format!("conv at {} is not followed by bn", here)));
            }
        }
        shape = match (layer, shape) {
            (LayerSpec::Conv { out, kernel, stride, padding, .. }, Shape::Map(_, h, w)) => {
                if *out == 0 || *kernel == 0 || *stride == 0 {
                    return Err(ModelError::Config(format!("degenerate conv at {}", here)));
                }
                match (
                    conv_out_dim(h, *kernel, *stride, *padding),
                    conv_out_dim(w, *kernel, *stride, *padding),
                ) {
                    (Some(oh), Some(ow)) => Shape::Map(*out, oh, ow),
                    _ => return Err(ModelError::Config(format!("kernel does not fit at {}", here))),
                }
            }
            (LayerSpec::Bn | LayerSpec::Relu | LayerSpec::LeakyRelu { .. }, s) => s,
            (LayerSpec::Linear { out }, Shape::Flat(_)) => Shape::Flat(*out),
            (LayerSpec::AvgPool { kernel }, Shape::Map(c, h, w)) => {
                if *kernel == 0 || h % kernel != 0 || w % kernel != 0 {
                    return Err(ModelError::Config(format!("avg pool does not tile at {}", here)));
                }
                Shape::Map(c, h / kernel, w / kernel)
            }
            (LayerSpec::GlobalAvgPool, Shape::Map(c, _, _)) => Shape::Flat(c),
            (LayerSpec::Upsample, Shape::Map(c, h, w)) => Shape::Map(c, 2 * h, 2 * w),
            (LayerSpec::Residual { body, shortcut, .. }, s @ Shape::Map(..)) => {
                let a = walk(body, s, &format!("{}.body", here))?;
                let b = walk(shortcut, s, &format!("{}.shortcut", here))?;
                if a != b {
                    return Err(ModelError::Config(format!(
                        "residual branches disagree at {}: {:?} vs {:?}",
                        here, a, b
                    )));
                }
                a
            }
            (layer, s) => {
                return Err(ModelError::Config(format!(
                    "{:?} cannot consume {:?} at {}",
                    layer, s, here
                )))
            }
        };
    }
    Ok(shape)
}
