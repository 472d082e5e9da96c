//! Training hyperparameters and their `key = value` form.

use std::fmt;

use crate::config::KvFile;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Parameter loss on a labeled fraction of the training images.
    Supervised,
    /// Image loss only.
    NonCurious,
    /// Image loss plus the critic term.
    Curious,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Supervised => "supervised",
            TrainMode::NonCurious => "noncur",
            TrainMode::Curious => "curious",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(TrainMode::Supervised),
            "noncur" => Ok(TrainMode::NonCurious),
            "curious" => Ok(TrainMode::Curious),
            other => Err(Error::InvalidConfig(format!(
                "unknown mode '{other}'; expected supervised, noncur or curious"
            ))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the image loss reduces over pixels and channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub supervision_frac: f64,
    pub batch_size: usize,
    /// Micro-batch size; gradients are accumulated over `batch_size / virtual_batch` passes.
    pub virtual_batch: usize,
    pub gen_lr: f64,
    pub critic_lr: f64,
    pub image_loss_weight: f64,
    pub critic_loss_weight: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<u64>,
    /// Stop once validation image loss improved by less than this fraction
    /// over `convergence_window` epochs.
    pub convergence_threshold: f64,
    pub convergence_window: usize,
    /// Validation images scored per epoch.
    pub val_images: usize,
    pub checkpoint_every: usize,
    pub reduction: Reduction,
    /// Gaussian blur sigma applied to renders and inputs before the image loss.
    pub blur_sigma: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Curious,
            supervision_frac: 1.0,
            batch_size: 128,
            virtual_batch: 128,
            gen_lr: 1e-4,
            critic_lr: 1e-6,
            image_loss_weight: 0.01,
            critic_loss_weight: 10.0,
            grad_clip: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            max_epochs: 100,
            max_steps: None,
            convergence_threshold: 0.01,
            convergence_window: 20,
            val_images: 100,
            checkpoint_every: 10,
            reduction: Reduction::Mean,
            blur_sigma: None,
            seed: 0,
        }
    }
}

pub const TRAIN_KEYS: [&str; 20] = [
    "mode",
    "supervision_frac",
    "batch_size",
    "virtual_batch",
    "gen_lr",
    "critic_lr",
    "image_loss_weight",
    "critic_loss_weight",
    "grad_clip",
    "beta1",
    "beta2",
    "max_epochs",
    "max_steps",
    "convergence_threshold",
    "convergence_window",
    "val_images",
    "checkpoint_every",
    "reduction",
    "blur_sigma",
    "seed",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.supervision_frac > 0.0 && self.supervision_frac <= 1.0) {
            return bad(format!("supervision_frac must be in (0, 1], got {}", self.supervision_frac));
        }
        if self.batch_size == 0 || self.virtual_batch == 0 || self.batch_size % self.virtual_batch != 0 {
            return bad(format!(
                "virtual_batch {} must divide batch_size {}",
                self.virtual_batch, self.batch_size
            ));
        }
        for (name, v) in [
            ("gen_lr", self.gen_lr),
            ("critic_lr", self.critic_lr),
            ("image_loss_weight", self.image_loss_weight),
            ("critic_loss_weight", self.critic_loss_weight),
            ("convergence_threshold", self.convergence_threshold),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if let Some(s) = self.blur_sigma {
            if !(s > 0.0) {
                return bad("blur_sigma must be positive".into());
            }
        }
        Ok(())
    }

    pub fn micro_batches(&self) -> usize {
        self.batch_size / self.virtual_batch
    }

    pub fn to_kv(&self, kv: &mut KvFile, section: &str) {
        let f = |v: f64| format!("{v:?}");
        kv.set(section, "mode", self.mode);
        kv.set(section, "supervision_frac", f(self.supervision_frac));
        kv.set(section, "batch_size", self.batch_size);
        kv.set(section, "virtual_batch", self.virtual_batch);
        kv.set(section, "gen_lr", f(self.gen_lr));
        kv.set(section, "critic_lr", f(self.critic_lr));
        kv.set(section, "image_loss_weight", f(self.image_loss_weight));
        kv.set(section, "critic_loss_weight", f(self.critic_loss_weight));
        kv.set(section, "grad_clip", f(self.grad_clip));
        kv.set(section, "beta1", f(self.beta1));
        kv.set(section, "beta2", f(self.beta2));
        kv.set(section, "max_epochs", self.max_epochs);
        if let Some(s) = self.max_steps {
            kv.set(section, "max_steps", s);
        }
        kv.set(section, "convergence_threshold", f(self.convergence_threshold));
        kv.set(section, "convergence_window", self.convergence_window);
        kv.set(section, "val_images", self.val_images);
        kv.set(section, "checkpoint_every", self.checkpoint_every);
        kv.set(
            section,
            "reduction",
            match self.reduction {
                Reduction::Mean => "mean",
                Reduction::Sum => "sum",
            },
        );
        if let Some(s) = self.blur_sigma {
            kv.set(section, "blur_sigma", f(s));
        }
        kv.set(section, "seed", self.seed);
    }

    /// Read `[section]`, starting from the defaults.
    pub fn from_kv(kv: &KvFile, section: &str) -> Result<Self> {
        kv.check_keys(section, &TRAIN_KEYS)?;
        let mut c = Self::default();
        if let Some(m) = kv.get(section, "mode") {
            c.mode = TrainMode::parse(m)?;
        }
        macro_rules! read {
            ($field:ident) => {
                if let Some(v) = kv.parse_opt(section, stringify!($field))? {
                    c.$field = v;
                }
            };
        }
        read!(supervision_frac);
        read!(batch_size);
        read!(virtual_batch);
        read!(gen_lr);
        read!(critic_lr);
        read!(image_loss_weight);
        read!(critic_loss_weight);
        read!(grad_clip);
        read!(beta1);
        read!(beta2);
        read!(max_epochs);
        read!(convergence_threshold);
        read!(convergence_window);
        read!(val_images);
        read!(checkpoint_every);
        read!(seed);
        c.max_steps = kv.parse_opt(section, "max_steps")?;
        c.blur_sigma = kv.parse_opt(section, "blur_sigma")?;
        if let Some(r) = kv.get(section, "reduction") {
            c.reduction = match r {
                "mean" => Reduction::Mean,
                "sum" => Reduction::Sum,
                other => return Err(Error::InvalidConfig(format!("reduction must be mean or sum, got '{other}'"))),
            };
        }
        c.validate()?;
        Ok(c)
    }
}
