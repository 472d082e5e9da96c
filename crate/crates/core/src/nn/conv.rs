//! Strided convolution stacks shared by the encoder and the critic.

use rand::Rng;

use super::{Mode, NetworkConfig};
use crate::autodiff::{Activation, ParamId, ParamStore, RunningStats, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub batch_norm: bool,
    pub activation: Activation,
}

impl ConvSpec {
    pub fn out_size(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    pub fn param_count(&self) -> usize {
        let conv = self.c_out * self.c_in * self.kernel * self.kernel + self.c_out;
        conv + if self.batch_norm { 2 * self.c_out } else { 0 }
    }
}

/// First-layer geometry per input size; every size lands on 30x30.
fn first_layer(image_size: usize) -> Result<(usize, usize)> {
    match image_size {
        128 => Ok((11, 4)),
        64 => Ok((5, 2)),
        32 => Ok((3, 1)),
        s => Err(Error::InvalidConfig(format!("unsupported image_size {s}"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn spec(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize, bn: bool, act: Activation) -> ConvSpec {
    ConvSpec {
        c_in,
        c_out,
        kernel,
        stride,
        pad,
        batch_norm: bn,
        activation: act,
    }
}

/// Encoder: 30 -> 14 -> 7 -> 4 -> 1 spatially, batch norm on every layer,
/// ReLU on all but the last.
pub fn encoder_layers(cfg: &NetworkConfig) -> Result<Vec<ConvSpec>> {
    let (k1, s1) = first_layer(cfg.image_size)?;
    let ch = |c| cfg.channels(c);
    let relu = Activation::Relu;
    Ok(vec![
        spec(3, ch(64), k1, s1, 0, true, relu),
        spec(ch(64), ch(192), 5, 2, 1, true, relu),
        spec(ch(192), ch(384), 3, 2, 1, true, relu),
        spec(ch(384), ch(256), 3, 2, 1, true, relu),
        spec(ch(256), cfg.latent_dim, 3, 2, 0, true, Activation::Linear),
    ])
}

/// Critic: 30 -> 7 -> 4 -> 2 -> 1 spatially, leaky ReLU with batch norm on
/// the hidden layers and a single output channel. The final sigmoid is
/// applied by the loss.
pub fn critic_layers(cfg: &NetworkConfig) -> Result<Vec<ConvSpec>> {
    let (k1, s1) = first_layer(cfg.image_size)?;
    let ch = |c| cfg.channels(c);
    let leaky = Activation::LeakyRelu;
    Ok(vec![
        spec(3, ch(64), k1, s1, 0, true, leaky),
        spec(ch(64), ch(192), 5, 4, 1, true, leaky),
        spec(ch(192), ch(384), 3, 2, 1, true, leaky),
        spec(ch(384), ch(256), 3, 2, 1, true, leaky),
        spec(ch(256), 1, 3, 2, 1, false, Activation::Linear),
    ])
}

#[derive(Clone, Debug)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Debug)]
struct ConvIds {
    spec: ConvSpec,
    w: ParamId,
    b: ParamId,
    bn: Option<BnIds>,
}

/// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`).
pub(crate) fn kaiming<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

#[derive(Clone, Debug)]
pub struct ConvStack {
    layers: Vec<ConvIds>,
}

impl ConvStack {
    pub fn build<R: Rng>(specs: &[ConvSpec], prefix: &str, store: &mut ParamStore, rng: &mut R) -> Self {
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let name = |p: &str| format!("{prefix}.conv{}.{p}", i + 1);
                let fan_in = s.c_in * s.kernel * s.kernel;
                let w = store.add(name("weight"), kaiming(rng, vec![s.c_out, s.c_in, s.kernel, s.kernel], fan_in));
                let b = store.add(name("bias"), Tensor::zeros(vec![s.c_out]));
                let bn = s.batch_norm.then(|| BnIds {
                    gamma: store.add(name("bn.gamma"), Tensor::full(vec![s.c_out], 1.0)),
                    beta: store.add(name("bn.beta"), Tensor::zeros(vec![s.c_out])),
                    mean: store.add_buffer(name("bn.running_mean"), Tensor::zeros(vec![s.c_out])),
                    var: store.add_buffer(name("bn.running_var"), Tensor::full(vec![s.c_out], 1.0)),
                });
                ConvIds { spec: *s, w, b, bn }
            })
            .collect();
        Self { layers }
    }

    pub fn specs(&self) -> Vec<ConvSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// `[C, H, W]` after each layer for a square input of side `size`.
    pub fn layer_shapes(&self, size: usize) -> Vec<[usize; 3]> {
        let mut s = size;
        self.layers
            .iter()
            .map(|l| {
                s = l.spec.out_size(s).unwrap_or(0);
                [l.spec.c_out, s, s]
            })
            .collect()
    }

    /// Trainable scalars (running statistics excluded).
    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let mut n = store.value(l.w).len() + store.value(l.b).len();
                if let Some(bn) = &l.bn {
                    n += store.value(bn.gamma).len() + store.value(bn.beta).len();
                }
                n
            })
            .sum()
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for l in &self.layers {
            let w = tape.param(store, l.w);
            let b = tape.param(store, l.b);
            h = tape.conv2d(h, w, Some(b), l.spec.stride, l.spec.pad)?;
            if let Some(bn) = &l.bn {
                let gamma = tape.param(store, bn.gamma);
                let beta = tape.param(store, bn.beta);
                let mut stats = RunningStats {
                    mean: store.value(bn.mean).data().to_vec(),
                    var: store.value(bn.var).data().to_vec(),
                };
                h = tape.batch_norm(h, gamma, beta, &mut stats, mode != Mode::Eval)?;
                if mode == Mode::Train {
                    store.value_mut(bn.mean).data_mut().copy_from_slice(&stats.mean);
                    store.value_mut(bn.var).data_mut().copy_from_slice(&stats.var);
                }
            }
            if l.spec.activation != Activation::Linear {
                h = tape.activation(l.spec.activation, h)?;
            }
        }
        Ok(h)
    }
}
