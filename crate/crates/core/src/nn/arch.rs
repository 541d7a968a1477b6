//! Architecture builders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layer::{Activation, Conv2d, Dense, Layer, Pool2d};
use super::model::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Architectures addressable from configuration files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Conv(6,5,same)-tanh-AP, Conv(16,5)-tanh-AP, Conv(120,5)-tanh, FC(84)-tanh, FC(K).
    LeNet5,
    /// Flatten then dense layers of the given widths with tanh between them.
    Mlp(Vec<usize>),
    /// Flatten then a single dense layer.
    Linear,
}

impl Architecture {
    pub fn parse(id: &str) -> Result<Self> {
        match id {
            "lenet5" => Ok(Architecture::LeNet5),
            "linear" => Ok(Architecture::Linear),
            _ => {
                let widths = id
                    .strip_prefix("mlp:")
                    .ok_or_else(|| Error::Config(format!("unknown architecture `{id}`")))?;
                let widths = widths
                    .split(',')
                    .map(|w| w.trim().parse::<usize>().ok().filter(|&w| w > 0))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| Error::Config(format!("bad mlp widths in `{id}`")))?;
                Ok(Architecture::Mlp(widths))
            }
        }
    }

    pub fn id(&self) -> String {
        match self {
            Architecture::LeNet5 => "lenet5".into(),
            Architecture::Linear => "linear".into(),
            Architecture::Mlp(w) => {
                format!("mlp:{}", w.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
            }
        }
    }

    pub fn build(&self, input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat: usize = input_shape.iter().product();
        let layers = match self {
            Architecture::LeNet5 => {
                let [_, _, c] = *input_shape else {
                    return Err(Error::Shape(format!("lenet5 needs (H, W, C) input, got {input_shape:?}")));
                };
                let pool = Pool2d { size: 2, stride: 2 };
                let mut layers = vec![
                    Layer::Conv2d(glorot_conv(&mut rng, 5, c, 6, 1, 2)?),
                    Layer::Activation(Activation::Tanh),
                    Layer::AvgPool2d(pool),
                    Layer::Conv2d(glorot_conv(&mut rng, 5, 6, 16, 1, 0)?),
                    Layer::Activation(Activation::Tanh),
                    Layer::AvgPool2d(pool),
                    Layer::Conv2d(glorot_conv(&mut rng, 5, 16, 120, 1, 0)?),
                    Layer::Activation(Activation::Tanh),
                    Layer::Flatten,
                ];
                // conv3 collapses 28×28 inputs to 1×1; other sizes keep a spatial extent
                let probe = Model::new(input_shape.to_vec(), layers.clone())?;
                let width: usize = probe.output_shape(layers.len() - 1).iter().product();
                layers.extend([
                    Layer::Dense(glorot_dense(&mut rng, width, 84)?),
                    Layer::Activation(Activation::Tanh),
                    Layer::Dense(glorot_dense(&mut rng, 84, num_classes)?),
                    Layer::Activation(Activation::Softmax),
                ]);
                layers
            }
            Architecture::Mlp(widths) => {
                let mut layers = vec![Layer::Flatten];
                let mut fan_in = flat;
                for &w in widths {
                    layers.push(Layer::Dense(glorot_dense(&mut rng, fan_in, w)?));
                    layers.push(Layer::Activation(Activation::Tanh));
                    fan_in = w;
                }
                layers.push(Layer::Dense(glorot_dense(&mut rng, fan_in, num_classes)?));
                layers.push(Layer::Activation(Activation::Softmax));
                layers
            }
            Architecture::Linear => vec![
                Layer::Flatten,
                Layer::Dense(glorot_dense(&mut rng, flat, num_classes)?),
                Layer::Activation(Activation::Softmax),
            ],
        };
        Model::new(input_shape.to_vec(), layers)
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, limit: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

pub(crate) fn glorot_dense(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Result<Dense> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Dense::new(
        Tensor::new(vec![fan_in, fan_out], uniform(rng, fan_in * fan_out, limit))?,
        Tensor::zeros(&[fan_out]),
    )
}

fn glorot_conv(
    rng: &mut ChaCha8Rng,
    k: usize,
    in_c: usize,
    out_c: usize,
    stride: usize,
    pad: usize,
) -> Result<Conv2d> {
    let limit = (6.0 / (k * k * (in_c + out_c)) as f64).sqrt();
    Conv2d::new(
        Tensor::new(vec![k, k, in_c, out_c], uniform(rng, k * k * in_c * out_c, limit))?,
        Tensor::zeros(&[out_c]),
        stride,
        pad,
    )
}
