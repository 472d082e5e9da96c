//! Jointly fitting many 1D blob images, with and without a closed-form
//! distribution term standing in for a perfect critic.
//!
//! Each problem has a target `(t*, l*)`: a Gaussian blob of luminance `l*`
//! centred at `t*` on a black strip. Fitting every problem alone with an L2
//! image loss mostly drives `l` to zero once the blobs stop overlapping. The
//! discrepancy term pulls the whole set of predictions toward a uniform
//! distribution over the unit square.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub n_problems: usize,
    pub steps: usize,
    pub lr: f64,
    pub use_curiosity: bool,
    /// Weight of the discrepancy term.
    pub lambda: f64,
    /// KDE bandwidth `h`.
    pub bandwidth: f64,
    /// Blob width in strip units.
    pub blob_width: f64,
    /// Strip pixels.
    pub width: usize,
    /// Strip coordinates covered by the pixels, left and right edge.
    pub strip: [f64; 2],
    pub n_samples: usize,
    pub clamp: [f64; 2],
    pub seed: u64,
    /// Steps between trajectory rows; the first and last step are always kept.
    pub log_every: usize,
    /// Steps between frame dumps; 0 disables frames.
    pub frame_every: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            n_problems: 64,
            steps: 2000,
            lr: 0.01,
            use_curiosity: true,
            lambda: 10.0,
            bandwidth: 0.05,
            blob_width: 0.05,
            width: 128,
            strip: [-0.25, 1.25],
            n_samples: 300,
            clamp: [-0.1, 1.1],
            seed: 0,
            log_every: 10,
            frame_every: 500,
        }
    }
}

/// Luminance below which a prediction counts as collapsed.
pub const COLLAPSE_LUMINANCE: f64 = 0.1;
/// Per-parameter tolerance for a solved problem.
pub const SUCCESS_TOLERANCE: f64 = 0.05;

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_problems == 0 {
            return bad("at least one problem is required");
        }
        if self.use_curiosity && self.n_problems < 16 {
            return bad("the distribution term needs at least 16 problems");
        }
        if self.width < 16 {
            return bad("strip width must be at least 16 pixels");
        }
        if !(self.lr > 0.0 && self.bandwidth > 0.0 && self.blob_width > 0.0 && self.lambda >= 0.0) {
            return bad("lr, bandwidth and blob width must be positive and lambda non-negative");
        }
        if !(self.strip[1] > self.strip[0] && self.clamp[1] > self.clamp[0]) {
            return bad("strip and clamp intervals must be increasing");
        }
        if self.n_samples < 2 {
            return bad("at least two reference samples are required");
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KvFile, section: &str) {
        kv.set(section, "n_problems", self.n_problems);
        kv.set(section, "steps", self.steps);
        kv.set(section, "lr", format!("{:?}", self.lr));
        kv.set(section, "curiosity", if self.use_curiosity { "on" } else { "off" });
        kv.set(section, "lambda", format!("{:?}", self.lambda));
        kv.set(section, "bandwidth", format!("{:?}", self.bandwidth));
        kv.set(section, "blob_width", format!("{:?}", self.blob_width));
        kv.set(section, "width", self.width);
        kv.set(section, "strip", crate::config::format_floats(&self.strip));
        kv.set(section, "n_samples", self.n_samples);
        kv.set(section, "clamp", crate::config::format_floats(&self.clamp));
        kv.set(section, "seed", self.seed);
        kv.set(section, "log_every", self.log_every);
        kv.set(section, "frame_every", self.frame_every);
    }
}

fn pixel_x(k: usize, cfg: &OracleConfig) -> f64 {
    cfg.strip[0] + (k as f64 + 0.5) / cfg.width as f64 * (cfg.strip[1] - cfg.strip[0])
}

/// The strip for one `(t, l)`: `l * exp(-((x - t) / w)^2)` per pixel.
pub fn render_analytic(t: f64, l: f64, cfg: &OracleConfig) -> Vec<f64> {
    (0..cfg.width)
        .map(|k| l * (-((pixel_x(k, cfg) - t) / cfg.blob_width).powi(2)).exp())
        .collect()
}

/// Summed squared error of one problem and its gradient in `(t, l)`.
pub fn l2_loss(p: [f64; 2], target: &[f64], cfg: &OracleConfig) -> (f64, [f64; 2]) {
    let (t, l) = (p[0], p[1]);
    let w = cfg.blob_width;
    let (mut loss, mut gt, mut gl) = (0.0, 0.0, 0.0);
    for (k, y) in target.iter().enumerate() {
        let u = (pixel_x(k, cfg) - t) / w;
        let g = (-u * u).exp();
        let r = l * g - y;
        loss += r * r;
        gl += 2.0 * r * g;
        gt += 2.0 * r * l * g * 2.0 * u / w;
    }
    (loss, [gt, gl])
}

/// Per-axis kernel responses `e[j][a] = mean_i exp(-((p[i][a] - s[j][a]) / h)^2)`.
pub fn kde_kernel(p: &[[f64; 2]], s: &[[f64; 2]], h: f64) -> Vec<[f64; 2]> {
    let n = p.len() as f64;
    s.iter()
        .map(|sj| {
            let mut e = [0.0; 2];
            for pi in p {
                for a in 0..2 {
                    e[a] += (-((pi[a] - sj[a]) / h).powi(2)).exp();
                }
            }
            [e[0] / n, e[1] / n]
        })
        .collect()
}

/// Sample variance of `E_j = (e_t + e_l) / 2` over the reference samples.
pub fn discrepancy(k: &[[f64; 2]]) -> f64 {
    let e: Vec<f64> = k.iter().map(|v| 0.5 * (v[0] + v[1])).collect();
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (e.len() as f64 - 1.0)
}

/// Discrepancy of `p` against `s` and its gradient with respect to `p`.
pub fn discrepancy_grad(p: &[[f64; 2]], s: &[[f64; 2]], h: f64) -> (f64, Vec<[f64; 2]>) {
    let k = kde_kernel(p, s, h);
    let d = discrepancy(&k);
    let e: Vec<f64> = k.iter().map(|v| 0.5 * (v[0] + v[1])).collect();
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    let ns1 = s.len() as f64 - 1.0;
    let n = p.len() as f64;
    let mut grad = vec![[0.0; 2]; p.len()];
    for (j, sj) in s.iter().enumerate() {
        // dD/dE_j; the mean's own dependence cancels because deviations sum to zero.
        let de = 2.0 * (e[j] - mean) / ns1;
        let c = de * 0.5 / n;
        for (pi, gi) in p.iter().zip(grad.iter_mut()) {
            for a in 0..2 {
                let u = (pi[a] - sj[a]) / h;
                gi[a] += c * (-u * u).exp() * (-2.0 * u / h);
            }
        }
    }
    (d, grad)
}

/// State after a step: predictions, per-problem image losses and `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub predictions: Vec<[f64; 2]>,
    pub losses: Vec<f64>,
    pub discrepancy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleRun {
    pub targets: Vec<[f64; 2]>,
    pub samples: Vec<[f64; 2]>,
    pub history: Vec<Snapshot>,
    pub frames: Vec<Snapshot>,
    pub last: Snapshot,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub collapse_fraction: f64,
    pub success_fraction: f64,
    pub mean_abs_t_error: f64,
    pub mean_abs_l_error: f64,
}

impl OracleRun {
    pub fn collapsed(&self) -> Vec<bool> {
        self.last.predictions.iter().map(|p| p[1] < COLLAPSE_LUMINANCE).collect()
    }

    pub fn solved(&self) -> Vec<bool> {
        self.last
            .predictions
            .iter()
            .zip(&self.targets)
            .map(|(p, t)| (p[0] - t[0]).abs() < SUCCESS_TOLERANCE && (p[1] - t[1]).abs() < SUCCESS_TOLERANCE)
            .collect()
    }

    pub fn outcome(&self) -> Outcome {
        let n = self.targets.len() as f64;
        let frac = |v: Vec<bool>| v.iter().filter(|b| **b).count() as f64 / n;
        let err = |a: usize| {
            self.last
                .predictions
                .iter()
                .zip(&self.targets)
                .map(|(p, t)| (p[a] - t[a]).abs())
                .sum::<f64>()
                / n
        };
        Outcome {
            collapse_fraction: frac(self.collapsed()),
            success_fraction: frac(self.solved()),
            mean_abs_t_error: err(0),
            mean_abs_l_error: err(1),
        }
    }

    /// `step,problem_id,t,l,loss,D` rows for every logged step.
    pub fn trajectory_csv(&self) -> String {
        let mut s = String::from("step,problem_id,t,l,loss,D\n");
        for snap in &self.history {
            for (i, (p, loss)) in snap.predictions.iter().zip(&snap.losses).enumerate() {
                let _ = writeln!(s, "{},{i},{:?},{:?},{:?},{:?}", snap.step, p[0], p[1], loss, snap.discrepancy);
            }
        }
        s
    }

    /// Write `trajectory.csv` and `frames/step_NNNNN.png` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("trajectory.csv");
        fs::write(&path, self.trajectory_csv()).map_err(|e| Error::io(&path, e))?;
        if !self.frames.is_empty() {
            let fdir = dir.join("frames");
            fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
            for f in &self.frames {
                plot_frame(&self.targets, &f.predictions, 128).save_png(&fdir.join(format!("step_{:05}.png", f.step)))?;
            }
        }
        Ok(())
    }
}

/// Scatter plot of the `(t, l)` plane over `[-0.1, 1.1]^2`: targets in grey,
/// predictions in red, luminance pointing up.
pub fn plot_frame(targets: &[[f64; 2]], preds: &[[f64; 2]], size: usize) -> Image {
    let mut im = Image::filled(size, size, [0.0; 3]);
    let to_px = |v: f64| ((v + 0.1) / 1.2 * (size - 1) as f64).round().clamp(0.0, (size - 1) as f64) as usize;
    let mut dot = |p: [f64; 2], rgb: [f64; 3]| {
        let (cx, cy) = (to_px(p[0]), size - 1 - to_px(p[1]));
        for y in cy.saturating_sub(1)..=(cy + 1).min(size - 1) {
            for x in cx.saturating_sub(1)..=(cx + 1).min(size - 1) {
                let i = (y * size + x) * 3;
                im.data_mut()[i..i + 3].copy_from_slice(&rgb);
            }
        }
    };
    for &t in targets {
        dot(t, [0.5, 0.5, 0.5]);
    }
    for &p in preds {
        dot(p, [1.0, 0.1, 0.1]);
    }
    im
}

/// Targets, initial predictions and reference samples, all uniform on the
/// unit square and drawn in that order from one seeded stream.
pub fn sample_problems(cfg: &OracleConfig) -> (Vec<[f64; 2]>, Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |n: usize| -> Vec<[f64; 2]> { (0..n).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect() };
    let targets = draw(cfg.n_problems);
    let init = draw(cfg.n_problems);
    let samples = draw(cfg.n_samples);
    (targets, init, samples)
}

pub fn optimize_joint(cfg: &OracleConfig) -> Result<OracleRun> {
    cfg.validate()?;
    let (targets, init, samples) = sample_problems(cfg);
    optimize_from(cfg, targets, init, samples)
}

/// Plain gradient descent on the summed image losses plus, with curiosity,
/// `lambda * D`; predictions are clamped after every step.
pub fn optimize_from(
    cfg: &OracleConfig,
    targets: Vec<[f64; 2]>,
    init: Vec<[f64; 2]>,
    samples: Vec<[f64; 2]>,
) -> Result<OracleRun> {
    if targets.len() != init.len() {
        return Err(Error::CountMismatch(targets.len(), init.len()));
    }
    let images: Vec<Vec<f64>> = targets.iter().map(|t| render_analytic(t[0], t[1], cfg)).collect();
    let mut p = init;
    let mut history = Vec::new();
    let mut frames = Vec::new();
    let mut step = 0;
    loop {
        let mut losses = Vec::with_capacity(p.len());
        let mut grads = Vec::with_capacity(p.len());
        for (pi, img) in p.iter().zip(&images) {
            let (l, g) = l2_loss(*pi, img, cfg);
            losses.push(l);
            grads.push(g);
        }
        let (d, dgrad) = discrepancy_grad(&p, &samples, cfg.bandwidth);
        let snap = Snapshot {
            step,
            predictions: p.clone(),
            losses,
            discrepancy: d,
        };
        let last = step == cfg.steps;
        if last || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            history.push(snap.clone());
        }
        if cfg.frame_every > 0 && (step % cfg.frame_every == 0 || last) {
            frames.push(snap.clone());
        }
        if last {
            return Ok(OracleRun {
                targets,
                samples,
                history,
                frames,
                last: snap,
            });
        }
        for (i, pi) in p.iter_mut().enumerate() {
            for a in 0..2 {
                let mut g = grads[i][a];
                if cfg.use_curiosity {
                    g += cfg.lambda * dgrad[i][a];
                }
                let v = pi[a] - cfg.lr * g;
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("oracle step {step}: non-finite prediction")));
                }
                pi[a] = v.clamp(cfg.clamp[0], cfg.clamp[1]);
            }
        }
        step += 1;
    }
}
