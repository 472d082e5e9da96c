//! Encoder, parameter heads and critic.
//!
//! The encoder is a five-layer strided CNN that reduces an `S x S` image to a
//! latent vector; the heads turn that vector into per-proposal scene
//! attributes; the critic is a fully convolutional classifier ending in a
//! single sigmoid unit.

mod conv;
mod heads;

pub use conv::{critic_layers, encoder_layers, ConvSpec, ConvStack};
pub use heads::{HeadOutputs, Heads, LIGHT_ELEVATION_MIN};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::{Group, GroupSet, SceneCode};
use crate::worlds::WorldSpec;

pub const IMAGE_SIZES: [usize; 3] = [32, 64, 128];

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub image_size: usize,
    /// Multiplier on every hidden channel count; results are rounded up and
    /// never drop below 8.
    pub width_scale: f64,
    pub latent_dim: usize,
    /// Number of object proposals the heads emit.
    pub n_proposals: usize,
    /// 2 for planar worlds, 3 otherwise.
    pub center_dims: usize,
    pub heads: GroupSet,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            width_scale: 0.5,
            latent_dim: 64,
            n_proposals: 1,
            center_dims: 3,
            heads: GroupSet::of(&[Group::Position]),
        }
    }
}

impl NetworkConfig {
    /// Heads and proposal count matching `world`.
    pub fn for_world(world: &WorldSpec, width_scale: f64) -> Self {
        Self {
            image_size: world.image_size,
            width_scale,
            latent_dim: 64,
            n_proposals: world.max_objects(),
            center_dims: world.dims,
            heads: world.groups,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !IMAGE_SIZES.contains(&self.image_size) {
            return Err(Error::InvalidConfig(format!(
                "image_size {} not in {IMAGE_SIZES:?}",
                self.image_size
            )));
        }
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("width_scale {} must be positive", self.width_scale)));
        }
        if self.latent_dim < 8 {
            return Err(Error::InvalidConfig(format!("latent_dim {} is below 8", self.latent_dim)));
        }
        if self.n_proposals < 1 {
            return Err(Error::InvalidConfig("n_proposals must be at least 1".into()));
        }
        if self.center_dims != 2 && self.center_dims != 3 {
            return Err(Error::InvalidConfig(format!("center_dims {} must be 2 or 3", self.center_dims)));
        }
        if !self.heads.contains(Group::Position) {
            return Err(Error::InvalidConfig("the center head is always required".into()));
        }
        Ok(())
    }

    /// Scaled hidden channel count.
    pub fn channels(&self, full: usize) -> usize {
        ((full as f64 * self.width_scale).ceil() as usize).max(8)
    }

    pub fn to_kv(&self, kv: &mut KvFile, section: &str) {
        kv.set(section, "image_size", self.image_size);
        kv.set(section, "width_scale", format!("{:?}", self.width_scale));
        kv.set(section, "latent_dim", self.latent_dim);
        kv.set(section, "n_proposals", self.n_proposals);
        kv.set(section, "center_dims", self.center_dims);
        kv.set(section, "heads", self.heads.to_list());
    }

    pub fn from_kv(kv: &KvFile, section: &str) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            image_size: kv.parse_opt(section, "image_size")?.unwrap_or(d.image_size),
            width_scale: kv.parse_opt(section, "width_scale")?.unwrap_or(d.width_scale),
            latent_dim: kv.parse_opt(section, "latent_dim")?.unwrap_or(d.latent_dim),
            n_proposals: kv.parse_opt(section, "n_proposals")?.unwrap_or(d.n_proposals),
            center_dims: kv.parse_opt(section, "center_dims")?.unwrap_or(d.center_dims),
            heads: match kv.get(section, "heads") {
                Some(h) => GroupSet::parse_list(h)?,
                None => d.heads,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Output of the encoder for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub values: Vec<f64>,
}

/// How batch normalization treats statistics in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize by batch statistics and update the running averages.
    Train,
    /// Normalize by batch statistics, leave the running averages alone.
    TrainNoUpdate,
    /// Normalize by the running averages.
    Eval,
}

/// Encoder plus heads: image in, scene attributes out.
#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: NetworkConfig,
    pub store: ParamStore,
    pub encoder: ConvStack,
    pub heads: Heads,
}

impl Generator {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = ConvStack::build(&encoder_layers(cfg)?, "enc", &mut store, &mut rng);
        let heads = Heads::build(cfg, &mut store, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            heads,
        })
    }

    /// Latent codes `[B, latent_dim]` for images `[B, 3, S, S]`.
    pub fn encode_latent(&mut self, tape: &mut Tape, images: Var, mode: Mode) -> Result<Var> {
        let z = self.encoder.forward(tape, &mut self.store, images, mode)?;
        let b = tape.value(z).shape()[0];
        tape.reshape(z, &[b, self.cfg.latent_dim])
    }

    pub fn forward(&mut self, tape: &mut Tape, images: Var, mode: Mode) -> Result<HeadOutputs> {
        let z = self.encode_latent(tape, images, mode)?;
        self.heads.forward(tape, &self.store, z)
    }

    /// Scene codes for a batch of images, in evaluation mode.
    pub fn encode(&mut self, images: &[&Image]) -> Result<Vec<SceneCode>> {
        for im in images {
            if im.height() != self.cfg.image_size || im.width() != self.cfg.image_size {
                return Err(Error::ShapeMismatch(format!(
                    "network expects {0}x{0} images, got {1}x{2}",
                    self.cfg.image_size,
                    im.height(),
                    im.width()
                )));
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(Image::batch_tensor(images)?);
        let out = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(out.decode(&tape))
    }

    pub fn latent(&mut self, image: &Image) -> Result<LatentCode> {
        let mut tape = Tape::new();
        let x = tape.constant(Image::batch_tensor(&[image])?);
        let z = self.encode_latent(&mut tape, x, Mode::Eval)?;
        Ok(LatentCode {
            values: tape.value(z).data().to_vec(),
        })
    }

    pub fn encoder_param_count(&self) -> usize {
        self.encoder.param_count(&self.store)
    }

    pub fn heads_param_count(&self) -> usize {
        self.heads.param_count(&self.store)
    }
}

/// Fully convolutional real/fake classifier.
#[derive(Clone, Debug)]
pub struct Critic {
    pub cfg: NetworkConfig,
    pub store: ParamStore,
    pub net: ConvStack,
}

impl Critic {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = ConvStack::build(&critic_layers(cfg)?, "critic", &mut store, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            net,
        })
    }

    /// Pre-sigmoid scores `[B]`.
    pub fn logits(&mut self, tape: &mut Tape, images: Var, mode: Mode) -> Result<Var> {
        let y = self.net.forward(tape, &mut self.store, images, mode)?;
        let b = tape.value(y).shape()[0];
        tape.reshape(y, &[b])
    }

    /// Probability that each image is real, in evaluation mode.
    pub fn probabilities(&mut self, images: &[&Image]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(Image::batch_tensor(images)?);
        let l = self.logits(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(l).data().iter().map(|&z| crate::autodiff::sigmoid(z)).collect())
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count(&self.store)
    }
}

/// Stack a batch of images as a constant on `tape`.
pub fn image_batch(tape: &mut Tape, images: &[&Image]) -> Result<Var> {
    Ok(tape.constant(Image::batch_tensor(images)?))
}

/// Constant tensor of the right shape for tests and tools.
pub fn zero_images(cfg: &NetworkConfig, batch: usize) -> Tensor {
    Tensor::zeros(vec![batch, 3, cfg.image_size, cfg.image_size])
}
