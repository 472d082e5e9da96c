//! Parameter heads: latent vector to per-proposal scene attributes.
//!
//! A shared trunk maps the latent to `n * 64` features, viewed as one
//! 64-vector per proposal. Each enabled attribute group then has its own
//! two-layer branch applied to every proposal. The light branch reads the
//! proposal features averaged over proposals, since it is global.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;

use super::conv::kaiming;
use super::NetworkConfig;
use crate::autodiff::{Activation, CustomOp, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::scene::{Group, SceneCode, SceneObject};

const FEATURES: usize = 64;

/// Lowest elevation the light head can emit.
pub const LIGHT_ELEVATION_MIN: f64 = 1e-3;

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn build<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, out: usize) -> Self {
        Self {
            w: store.add(format!("{name}.weight"), kaiming(rng, vec![fan_in, out], fan_in)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(vec![out])),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, act: Activation) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        let y = tape.add_bias(y, b)?;
        if act == Activation::Linear {
            Ok(y)
        } else {
            tape.activation(act, y)
        }
    }

    fn count(&self, store: &ParamStore) -> usize {
        store.value(self.w).len() + store.value(self.b).len()
    }
}

#[derive(Clone, Debug)]
struct Branch {
    group: Group,
    hidden: Dense,
    out: Dense,
    activation: Activation,
}

#[derive(Clone, Debug)]
pub struct Heads {
    n: usize,
    center_dims: usize,
    trunk: Dense,
    branches: Vec<Branch>,
    light: Option<(Dense, Dense)>,
}

/// Tape handles for every enabled attribute group.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `[B, n, dims]`
    pub centers: Var,
    /// `[B, n, 3]` in `(0, 1)`.
    pub colors: Option<Var>,
    /// `[B, n, 2]` direction pairs in `(-1, 1)`.
    pub rotations: Option<Var>,
    /// `[B, n]` in `(0, 1)`.
    pub confidences: Option<Var>,
    /// `[B, 2]` as `(azimuth, elevation)`.
    pub light: Option<Var>,
}

fn branch_shape(group: Group, center_dims: usize) -> (usize, Activation) {
    match group {
        Group::Position => (center_dims, Activation::Linear),
        Group::Color => (3, Activation::Sigmoid),
        Group::Rotation => (2, Activation::Tanh),
        Group::Confidence => (1, Activation::Sigmoid),
        Group::Light => unreachable!("light has its own branch"),
    }
}

impl Heads {
    pub fn build<R: Rng>(cfg: &NetworkConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let n = cfg.n_proposals;
        let trunk = Dense::build(store, rng, "heads.trunk", cfg.latent_dim, n * FEATURES);
        let branches = cfg
            .heads
            .iter()
            .filter(|g| *g != Group::Light)
            .map(|group| {
                let (k, activation) = branch_shape(group, cfg.center_dims);
                let name = format!("heads.{}", group.name());
                Branch {
                    group,
                    hidden: Dense::build(store, rng, &format!("{name}.fc1"), FEATURES, FEATURES),
                    out: Dense::build(store, rng, &format!("{name}.fc2"), FEATURES, k),
                    activation,
                }
            })
            .collect();
        let light = cfg.heads.contains(Group::Light).then(|| {
            let hidden = Dense::build(store, rng, "heads.light.fc1", FEATURES, FEATURES);
            let out = Dense::build(store, rng, "heads.light.fc2", FEATURES, 2);
            // Start at the middle of the valid elevation band.
            store.value_mut(out.b).data_mut()[1] = FRAC_PI_2 / 2.0;
            (hidden, out)
        });
        Self {
            n,
            center_dims: cfg.center_dims,
            trunk,
            branches,
            light,
        }
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        let mut total = self.trunk.count(store);
        for b in &self.branches {
            total += b.hidden.count(store) + b.out.count(store);
        }
        if let Some((h, o)) = &self.light {
            total += h.count(store) + o.count(store);
        }
        total
    }

    /// Heads applied to latent codes `[B, latent_dim]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<HeadOutputs> {
        let bsz = tape.value(z).shape()[0];
        let t = self.trunk.forward(tape, store, z, Activation::Relu)?;
        let per = tape.reshape(t, &[bsz * self.n, FEATURES])?;
        let mut out = HeadOutputs {
            centers: per,
            colors: None,
            rotations: None,
            confidences: None,
            light: None,
        };
        for br in &self.branches {
            let h = br.hidden.forward(tape, store, per, Activation::Relu)?;
            let y = br.out.forward(tape, store, h, br.activation)?;
            match br.group {
                Group::Position => out.centers = tape.reshape(y, &[bsz, self.n, self.center_dims])?,
                Group::Color => out.colors = Some(tape.reshape(y, &[bsz, self.n, 3])?),
                Group::Rotation => out.rotations = Some(tape.reshape(y, &[bsz, self.n, 2])?),
                Group::Confidence => out.confidences = Some(tape.reshape(y, &[bsz, self.n])?),
                Group::Light => unreachable!(),
            }
        }
        if let Some((hidden, o)) = &self.light {
            let grouped = tape.reshape(per, &[bsz, self.n, FEATURES])?;
            let pooled = tape.mean_axis1(grouped)?;
            let h = hidden.forward(tape, store, pooled, Activation::Relu)?;
            let raw = o.forward(tape, store, h, Activation::Linear)?;
            out.light = Some(light_map(tape, raw)?);
        }
        Ok(out)
    }
}

/// Azimuth passes through; elevation is clamped into the upper hemisphere.
struct LightMap;

impl CustomOp for LightMap {
    fn name(&self) -> &'static str {
        "light_map"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let raw = inputs[0].data();
        let g: Vec<f64> = grad_out
            .data()
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let inside = i % 2 == 0 || (LIGHT_ELEVATION_MIN..=FRAC_PI_2).contains(&raw[i]);
                if inside {
                    *g
                } else {
                    0.0
                }
            })
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), g)?)])
    }
}

fn light_map(tape: &mut Tape, raw: Var) -> Result<Var> {
    let v = tape.value(raw);
    let data = v
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| if i % 2 == 0 { *x } else { x.clamp(LIGHT_ELEVATION_MIN, FRAC_PI_2) })
        .collect();
    let out = Tensor::new(v.shape().to_vec(), data)?;
    tape.custom(&[raw], out, Box::new(LightMap))
}

impl HeadOutputs {
    /// Read scene codes off the tape. Rotation pairs `(i, j)` decode to
    /// `atan2(j, i)`.
    pub fn decode(&self, tape: &Tape) -> Vec<SceneCode> {
        let c = tape.value(self.centers);
        let (bsz, n, d) = (c.shape()[0], c.shape()[1], c.shape()[2]);
        let col = self.colors.map(|v| tape.value(v).data());
        let rot = self.rotations.map(|v| tape.value(v).data());
        let conf = self.confidences.map(|v| tape.value(v).data());
        let light = self.light.map(|v| tape.value(v).data());
        (0..bsz)
            .map(|b| {
                let objects = (0..n)
                    .map(|i| {
                        let o = b * n + i;
                        SceneObject {
                            center: c.data()[o * d..(o + 1) * d].to_vec(),
                            rgb: col.map(|x| [x[o * 3], x[o * 3 + 1], x[o * 3 + 2]]),
                            rotation: rot.map(|x| x[o * 2 + 1].atan2(x[o * 2])),
                            confidence: conf.map(|x| x[o]),
                        }
                    })
                    .collect();
                SceneCode {
                    objects,
                    light: light.map(|x| [x[b * 2], x[b * 2 + 1]]),
                }
            })
            .collect()
    }
}
