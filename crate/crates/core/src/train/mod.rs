//! Supervised, image-only and curious training of the generator, with an
//! adversarial critic in the curious regime.

pub mod blur;
pub mod checkpoint;
pub mod config;
pub mod losses;

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use blur::{gaussian_blur, DEFAULT_KERNEL};
pub use config::{Reduction, TrainConfig, TrainMode};
pub use losses::{critic_d_loss, critic_g_loss, image_mse, l2_image_loss, supervised_loss};

use crate::autodiff::{adam_step_store, clip_grad_l2, AdamConfig, AdamState, GradStore, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{scene_metrics, MetricWeights};
use crate::image::Image;
use crate::nn::{image_batch, Critic, Generator, Mode, NetworkConfig};
use crate::render::{render_batch, scene_primitives, BatchInputs, Renderer};
use crate::scene::SceneCode;
use crate::worlds::{Dataset, WorldSpec};

/// Losses of one optimizer step, averaged over its micro-batches.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub image_mse: Option<f64>,
    pub d_loss: Option<f64>,
    pub g_loss: Option<f64>,
    pub supervised: Option<f64>,
    /// Generator gradient norm before clipping.
    pub grad_norm: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: &'static str,
    pub image_mse: Option<f64>,
    pub d_loss: Option<f64>,
    pub g_loss: Option<f64>,
    pub eq1_error: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,split,image_mse,d_loss,g_loss,eq1_error";

impl LogRow {
    pub fn csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.split,
            f(self.image_mse),
            f(self.d_loss),
            f(self.g_loss),
            f(self.eq1_error)
        )
    }
}

/// Everything that changes while training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub world: WorldSpec,
    pub net: NetworkConfig,
    pub cfg: TrainConfig,
    pub generator: Generator,
    /// Only built in the curious regime.
    pub critic: Option<Critic>,
    pub gen_opt: AdamState,
    pub critic_opt: Option<AdamState>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    /// Validation image loss after each epoch.
    pub val_history: Vec<f64>,
    /// Normalize by running statistics in every pass. Makes the result
    /// independent of how a batch is split into micro-batches.
    pub freeze_norm: bool,
    renderer: Renderer,
}

/// Result of [`Trainer::run`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub rows: Vec<LogRow>,
    pub converged: bool,
    pub final_val_mse: f64,
}

const CRITIC_SEED_SALT: u64 = 0x5bd1_e995;
const ORDER_SEED_SALT: u64 = 0x2545_f491;

impl Trainer {
    pub fn new(world: &WorldSpec, net: &NetworkConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        world.validate()?;
        if net.image_size != world.image_size || net.center_dims != world.dims {
            return Err(Error::InvalidConfig(format!(
                "network expects {}px images with {}-D centers, world has {}px and {}-D",
                net.image_size, net.center_dims, world.image_size, world.dims
            )));
        }
        let generator = Generator::new(net, cfg.seed)?;
        let critic = match cfg.mode {
            TrainMode::Curious => Some(Critic::new(net, cfg.seed ^ CRITIC_SEED_SALT)?),
            _ => None,
        };
        let mut renderer = world.renderer();
        renderer.cull_behind = true;
        Ok(Self {
            world: world.clone(),
            net: net.clone(),
            cfg: cfg.clone(),
            gen_opt: AdamState::for_store(&generator.store),
            critic_opt: critic.as_ref().map(|c| AdamState::for_store(&c.store)),
            generator,
            critic,
            epoch: 0,
            step: 0,
            val_history: Vec::new(),
            freeze_norm: false,
            renderer,
        })
    }

    /// The dataset as the training code is allowed to see it: no labels in
    /// the unsupervised regimes, the configured fraction otherwise.
    pub fn training_view(&self, d: &Dataset) -> Result<Dataset> {
        match self.cfg.mode {
            TrainMode::Supervised => d.with_label_fraction(self.cfg.supervision_frac),
            _ => Ok(d.without_labels()),
        }
    }

    /// Training indices batches are drawn from.
    pub fn batch_pool(&self, view: &Dataset) -> Vec<usize> {
        let train = view.split.train.clone();
        match self.cfg.mode {
            TrainMode::Supervised => train.filter(|&i| view.label_visible(i)).collect(),
            _ => train.collect(),
        }
    }

    /// Indices of the batch for `step`: consecutive slices of an endless
    /// sequence of seeded shuffles of `pool`.
    pub fn batch_indices(&self, pool: &[usize], step: u64) -> Vec<usize> {
        let n = pool.len() as u64;
        let b = self.cfg.batch_size as u64;
        let mut out = Vec::with_capacity(b as usize);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for k in 0..b {
            let pos = step * b + k;
            let (round, off) = (pos / n, (pos % n) as usize);
            if cached.as_ref().is_none_or(|c| c.0 != round) {
                let mut perm = pool.to_vec();
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ ORDER_SEED_SALT);
                rng.set_stream(round);
                perm.shuffle(&mut rng);
                cached = Some((round, perm));
            }
            out.push(cached.as_ref().unwrap().1[off]);
        }
        out
    }

    pub fn steps_per_epoch(&self, d: &Dataset) -> u64 {
        (d.split.train.len().div_ceil(self.cfg.batch_size)).max(1) as u64
    }

    fn render(&self, tape: &mut Tape, out: &crate::nn::HeadOutputs) -> Result<Var> {
        render_batch(
            tape,
            &self.renderer,
            &self.world,
            BatchInputs {
                centers: out.centers,
                colors: out.colors,
                confidences: out.confidences,
                light: out.light,
            },
        )
    }

    fn maybe_blur(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.cfg.blur_sigma {
            Some(s) => blur::blur_var(tape, x, DEFAULT_KERNEL, s),
            None => Ok(x),
        }
    }

    /// One critic update (curious regime) followed by one generator update,
    /// each accumulating gradients over the micro-batches.
    pub fn train_step(&mut self, view: &Dataset, idx: &[usize]) -> Result<StepMetrics> {
        if idx.len() != self.cfg.batch_size {
            return Err(Error::ShapeMismatch(format!(
                "batch of {} images, configured batch_size {}",
                idx.len(),
                self.cfg.batch_size
            )));
        }
        let step = self.step;
        let tag = |e: Error| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
            other => other,
        };
        let r = self.train_step_inner(view, idx).map_err(tag)?;
        self.step += 1;
        Ok(r)
    }

    fn train_step_inner(&mut self, view: &Dataset, idx: &[usize]) -> Result<StepMetrics> {
        let (update, no_update) = match self.freeze_norm {
            true => (Mode::Eval, Mode::Eval),
            false => (Mode::Train, Mode::TrainNoUpdate),
        };
        let micro = self.cfg.virtual_batch;
        let share = micro as f64 / self.cfg.batch_size as f64;
        let mut m = StepMetrics::default();

        if self.critic.is_some() {
            let critic_store = &self.critic.as_ref().unwrap().store;
            let mut grads = GradStore::zeros_like(critic_store);
            let mut d_total = 0.0;
            for chunk in idx.chunks(micro) {
                let imgs: Vec<&Image> = chunk.iter().map(|&i| &view.images[i]).collect();
                let mut tape = Tape::new();
                let real = image_batch(&mut tape, &imgs)?;
                tape.set_params_frozen(true);
                let out = self.generator.forward(&mut tape, real, no_update)?;
                let fake = self.render(&mut tape, &out)?;
                let fake = tape.constant(tape.value(fake).clone());
                tape.set_params_frozen(false);
                let critic = self.critic.as_mut().unwrap();
                let d = critic_d_loss(&mut tape, critic, real, fake, update)?;
                d_total += tape.value(d).item() * share;
                let root = tape.scale(d, share)?;
                tape.backward(root)?.accumulate_params(&tape, &mut grads);
            }
            let critic = self.critic.as_mut().unwrap();
            let opt = AdamConfig {
                lr: self.cfg.critic_lr,
                beta1: self.cfg.beta1,
                beta2: self.cfg.beta2,
                ..AdamConfig::default()
            };
            adam_step_store(&mut critic.store, &grads, self.critic_opt.as_mut().unwrap(), &opt)?;
            m.d_loss = Some(d_total);
        }

        let mut grads = GradStore::zeros_like(&self.generator.store);
        let (mut img_total, mut g_total, mut sup_total) = (0.0, 0.0, 0.0);
        for chunk in idx.chunks(micro) {
            let imgs: Vec<&Image> = chunk.iter().map(|&i| &view.images[i]).collect();
            let mut tape = Tape::new();
            let real = image_batch(&mut tape, &imgs)?;
            let out = self.generator.forward(&mut tape, real, update)?;
            let loss = if self.cfg.mode == TrainMode::Supervised {
                let gts: Vec<&SceneCode> = chunk.iter().map(|&i| view.label(i)).collect::<Result<_>>()?;
                let l = supervised_loss(&mut tape, &out, &gts, &MetricWeights::default(), &self.world)?;
                sup_total += tape.value(l).item() * share;
                l
            } else {
                let fake = self.render(&mut tape, &out)?;
                let fb = self.maybe_blur(&mut tape, fake)?;
                let rb = self.maybe_blur(&mut tape, real)?;
                let l2 = l2_image_loss(&mut tape, fb, rb, self.cfg.reduction)?;
                let mse = {
                    let d = tape.sub(fake, real)?;
                    let s = tape.square(d)?;
                    tape.value(s).sum() / tape.value(s).len() as f64
                };
                img_total += mse * share;
                let mut total = tape.scale(l2, self.cfg.image_loss_weight)?;
                if let Some(critic) = self.critic.as_mut() {
                    tape.set_params_frozen(true);
                    let g = critic_g_loss(&mut tape, critic, fake, no_update)?;
                    tape.set_params_frozen(false);
                    g_total += tape.value(g).item() * share;
                    let gw = tape.scale(g, self.cfg.critic_loss_weight)?;
                    total = tape.add(total, gw)?;
                }
                total
            };
            let root = tape.scale(loss, share)?;
            tape.backward(root)?.accumulate_params(&tape, &mut grads);
        }
        m.grad_norm = clip_grad_l2(grads.tensors_mut(), self.cfg.grad_clip);
        let opt = AdamConfig {
            lr: self.cfg.gen_lr,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            ..AdamConfig::default()
        };
        adam_step_store(&mut self.generator.store, &grads, &mut self.gen_opt, &opt)?;
        match self.cfg.mode {
            TrainMode::Supervised => m.supervised = Some(sup_total),
            TrainMode::NonCurious => m.image_mse = Some(img_total),
            TrainMode::Curious => {
                m.image_mse = Some(img_total);
                m.g_loss = Some(g_total);
            }
        }
        Ok(m)
    }

    /// Re-render predictions for `indices` in evaluation mode.
    pub fn predict(&mut self, images: &[&Image]) -> Result<(Vec<SceneCode>, Vec<Image>)> {
        let mut codes = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            codes.extend(self.generator.encode(chunk)?);
        }
        let renders = codes
            .iter()
            .map(|c| {
                let (prims, light) = scene_primitives(c, &self.world);
                self.renderer.render(&prims, light)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((codes, renders))
    }

    /// Validation image MSE over the first `val_images` validation scenes,
    /// and their mean assignment error when `labels` can read ground truth.
    pub fn validate(&mut self, d: &Dataset, labels: Option<&Dataset>) -> Result<(f64, Option<f64>)> {
        let idx: Vec<usize> = d.split.val.clone().take(self.cfg.val_images.max(1)).collect();
        if idx.is_empty() {
            return Err(Error::InvalidConfig("dataset has no validation images".into()));
        }
        let imgs: Vec<&Image> = idx.iter().map(|&i| &d.images[i]).collect();
        let (codes, renders) = self.predict(&imgs)?;
        let mut mse = 0.0;
        for (r, im) in renders.iter().zip(&imgs) {
            mse += image_mse(r, im)?;
        }
        mse /= idx.len() as f64;
        let eq1 = match labels {
            Some(l) if idx.iter().all(|&i| l.label_visible(i)) => {
                let mut acc = 0.0;
                for (c, &i) in codes.iter().zip(&idx) {
                    let m = scene_metrics(c, l.label(i)?, &MetricWeights::default(), &self.world)?;
                    acc += m.param.unwrap_or(0.0);
                }
                Some(acc / idx.len() as f64)
            }
            _ => None,
        };
        Ok((mse, eq1))
    }

    pub fn converged(&self) -> bool {
        let w = self.cfg.convergence_window;
        let h = &self.val_history;
        if w == 0 || h.len() <= w {
            return false;
        }
        let (old, new) = (h[h.len() - 1 - w], h[h.len() - 1]);
        old - new < self.cfg.convergence_threshold * old
    }

    /// Train until convergence, `max_epochs` or `max_steps`. `labels` is the
    /// evaluation capability used only for the logged assignment error. With
    /// `out_dir`, log rows are appended to `train_log.csv` and checkpoints
    /// written every `checkpoint_every` epochs and at the end.
    pub fn run(&mut self, d: &Dataset, labels: Option<&Dataset>, out_dir: Option<&Path>) -> Result<TrainOutcome> {
        self.run_with(d, labels, out_dir, &mut |_| {})
    }

    /// [`Trainer::run`] with a callback after every log row.
    pub fn run_with(
        &mut self,
        d: &Dataset,
        labels: Option<&Dataset>,
        out_dir: Option<&Path>,
        on_row: &mut dyn FnMut(&LogRow),
    ) -> Result<TrainOutcome> {
        if d.world.name != self.world.name || d.world.image_size != self.world.image_size {
            return Err(Error::InvalidConfig(format!(
                "dataset world {} ({}px) does not match training world {} ({}px)",
                d.world.name, d.world.image_size, self.world.name, self.world.image_size
            )));
        }
        let view = self.training_view(d)?;
        let pool = self.batch_pool(&view);
        if pool.is_empty() {
            return Err(Error::InvalidConfig("no training images available for this mode".into()));
        }
        let spe = self.steps_per_epoch(d);
        let log_path = out_dir.map(|p| p.join("train_log.csv"));
        if let (Some(dir), Some(lp)) = (out_dir, &log_path) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            if !lp.exists() {
                fs::write(lp, format!("{LOG_HEADER}\n")).map_err(|e| Error::io(lp, e))?;
            }
        }
        let mut rows = Vec::new();
        let mut converged = self.converged();
        let mut final_val = self.val_history.last().copied().unwrap_or(f64::NAN);
        let step_cap = self.cfg.max_steps.unwrap_or(u64::MAX);
        while !converged && self.epoch < self.cfg.max_epochs && self.step < step_cap {
            if self.cfg.mode != TrainMode::Supervised && view.visible_label_count() != 0 {
                return Err(Error::Capability);
            }
            let epoch = self.epoch + 1;
            let mut acc = [0.0; 3];
            let mut seen = [0usize; 3];
            for _ in 0..spe {
                if self.step >= step_cap {
                    break;
                }
                let idx = self.batch_indices(&pool, self.step);
                let m = self.train_step(&view, &idx)?;
                for (k, v) in [m.image_mse.or(m.supervised), m.d_loss, m.g_loss].into_iter().enumerate() {
                    if let Some(v) = v {
                        acc[k] += v;
                        seen[k] += 1;
                    }
                }
            }
            let mean = |k: usize| (seen[k] > 0).then(|| acc[k] / seen[k] as f64);
            let (val, eq1) = self.validate(d, labels)?;
            self.epoch = epoch;
            self.val_history.push(val);
            final_val = val;
            let train_row = LogRow {
                epoch,
                split: "train",
                image_mse: if self.cfg.mode == TrainMode::Supervised { None } else { mean(0) },
                d_loss: mean(1),
                g_loss: mean(2),
                eq1_error: if self.cfg.mode == TrainMode::Supervised { mean(0) } else { None },
            };
            let val_row = LogRow {
                epoch,
                split: "val",
                image_mse: Some(val),
                d_loss: None,
                g_loss: None,
                eq1_error: eq1,
            };
            converged = self.converged();
            if let Some(lp) = &log_path {
                let mut f = OpenOptions::new().append(true).open(lp).map_err(|e| Error::io(lp, e))?;
                let mut s = String::new();
                let _ = writeln!(s, "{}", train_row.csv());
                let _ = writeln!(s, "{}", val_row.csv());
                f.write_all(s.as_bytes()).map_err(|e| Error::io(lp, e))?;
            }
            on_row(&train_row);
            on_row(&val_row);
            rows.push(train_row);
            rows.push(val_row);
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0 && epoch % self.cfg.checkpoint_every == 0 {
                    checkpoint::save(self, &dir.join(format!("epoch_{epoch:04}.ckpt")))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            checkpoint::save(self, &dir.join("final.ckpt"))?;
        }
        Ok(TrainOutcome {
            rows,
            converged,
            final_val_mse: final_val,
        })
    }
}

#[cfg(test)]
mod tests;
