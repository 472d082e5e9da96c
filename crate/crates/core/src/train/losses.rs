//! Image, critic and supervised parameter losses on the tape.

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::metric::{match_scenes, norm_diff, wrap_angle, MetricWeights};
use crate::nn::{Critic, HeadOutputs, Mode};
use crate::render::light_vector;
use crate::scene::{Group, SceneCode};
use crate::worlds::WorldSpec;

use super::config::Reduction;

/// Squared image error between two equally shaped tensors; `Mean` divides by
/// the number of values.
pub fn l2_image_loss(tape: &mut Tape, rendered: Var, input: Var, reduction: Reduction) -> Result<Var> {
    let (a, b) = (tape.value(rendered).shape(), tape.value(input).shape());
    if a != b {
        return Err(Error::ShapeMismatch(format!("image loss of {a:?} and {b:?}")));
    }
    let d = tape.sub(rendered, input)?;
    let sq = tape.square(d)?;
    match reduction {
        Reduction::Mean => tape.mean(sq),
        Reduction::Sum => tape.sum(sq),
    }
}

/// Mean squared error of two images, off the tape.
pub fn image_mse(a: &crate::image::Image, b: &crate::image::Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch("image mse of differently sized images".into()));
    }
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

/// Critic update loss: real images labelled 1, detached fakes labelled 0.
pub fn critic_d_loss(tape: &mut Tape, critic: &mut Critic, real: Var, fake: Var, mode: Mode) -> Result<Var> {
    let lr = critic.logits(tape, real, mode)?;
    let lf = critic.logits(tape, fake, mode)?;
    let a = tape.bce_with_logits(lr, 1.0)?;
    let b = tape.bce_with_logits(lf, 0.0)?;
    tape.add(a, b)
}

/// Generator curiosity term: fakes labelled real. Use a mode that leaves the
/// critic's running statistics alone.
pub fn critic_g_loss(tape: &mut Tape, critic: &mut Critic, fake: Var, mode: Mode) -> Result<Var> {
    let lf = critic.logits(tape, fake, mode)?;
    tape.bce_with_logits(lf, 1.0)
}

/// The assignment metric averaged over a batch, with gradients to the head
/// outputs. The forward value is exactly the mean of [`match_scenes`]
/// totals.
pub fn supervised_loss(
    tape: &mut Tape,
    out: &HeadOutputs,
    gts: &[&SceneCode],
    w: &MetricWeights,
    world: &WorldSpec,
) -> Result<Var> {
    let preds = out.decode(tape);
    if preds.len() != gts.len() {
        return Err(Error::CountMismatch(preds.len(), gts.len()));
    }
    let mut total = 0.0;
    let mut pairs = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts) {
        let m = match_scenes(p, g, w, world)?;
        total += m.total;
        pairs.push(m.pairs);
    }
    let value = total / preds.len() as f64;
    let mut inputs = vec![out.centers];
    let slots = [out.colors, out.rotations, out.confidences, out.light];
    inputs.extend(slots.iter().flatten());
    let rot_pairs = out.rotations.map(|r| tape.value(r).data().to_vec());
    let op = SupervisedLossOp {
        preds,
        gts: gts.iter().map(|g| (*g).clone()).collect(),
        pairs,
        weights: *w,
        world: world.clone(),
        present: slots.map(|s| s.is_some()),
        rot_pairs,
    };
    tape.custom(&inputs, Tensor::scalar(value), Box::new(op))
}

struct SupervisedLossOp {
    preds: Vec<SceneCode>,
    gts: Vec<SceneCode>,
    pairs: Vec<Vec<(usize, usize)>>,
    weights: MetricWeights,
    world: WorldSpec,
    /// colors, rotations, confidences, light
    present: [bool; 4],
    rot_pairs: Option<Vec<f64>>,
}

/// Gradient of `|a - b|` with respect to `a`, zero at coincidence.
fn unit_diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = norm_diff(a, b);
    if n == 0.0 {
        vec![0.0; a.len()]
    } else {
        a.iter().zip(b).map(|(x, y)| (x - y) / n).collect()
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the angle between two light directions with respect to the
/// first one's `(azimuth, elevation)`.
fn light_angle_grad(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let (la, lb) = (light_vector(a), light_vector(b));
    let c = la[0] * lb[0] + la[1] * lb[1] + la[2] * lb[2];
    let s2 = 1.0 - c * c;
    if !(s2 > 1e-24) || c.abs() >= 1.0 {
        return [0.0; 2];
    }
    let dtheta_dc = -1.0 / s2.sqrt();
    let (az, el) = (a[0], a[1]);
    let d_az = [-el.cos() * az.sin(), 0.0, el.cos() * az.cos()];
    let d_el = [-el.sin() * az.cos(), el.cos(), -el.sin() * az.sin()];
    let dot = |v: [f64; 3]| v[0] * lb[0] + v[1] * lb[1] + v[2] * lb[2];
    [dtheta_dc * dot(d_az), dtheta_dc * dot(d_el)]
}

impl CustomOp for SupervisedLossOp {
    fn name(&self) -> &'static str {
        "supervised_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g0 = grad_out.item() / self.preds.len() as f64;
        let w = &self.weights;
        let groups = self.world.groups;
        let n = self.preds.first().map_or(0, SceneCode::len);
        let dims = self.world.dims;
        let mut gc = vec![0.0; self.preds.len() * n * dims];
        let mut gcol = vec![0.0; self.preds.len() * n * 3];
        let mut grot = vec![0.0; self.preds.len() * n * 2];
        let mut gconf = vec![0.0; self.preds.len() * n];
        let mut glight = vec![0.0; self.preds.len() * 2];
        for (b, (pred, gt)) in self.preds.iter().zip(&self.gts).enumerate() {
            let mut partner = vec![None; pred.len()];
            for &(i, j) in &self.pairs[b] {
                partner[i] = Some(j);
                let (p, q) = (&pred.objects[i], &gt.objects[j]);
                let o = b * n + i;
                for (k, v) in unit_diff(&p.center, &q.center).into_iter().enumerate() {
                    gc[o * dims + k] += g0 * w.position * v;
                }
                if groups.contains(Group::Color) {
                    if let (Some(pc), Some(qc)) = (p.rgb, q.rgb) {
                        for (k, v) in unit_diff(&pc, &qc).into_iter().enumerate() {
                            gcol[o * 3 + k] += g0 * w.color * v;
                        }
                    }
                }
                if groups.contains(Group::Rotation) {
                    if let (Some(pr), Some(qr), Some(raw)) = (p.rotation, q.rotation, &self.rot_pairs) {
                        let s = sign(wrap_angle(pr - qr));
                        let (x, y) = (raw[o * 2], raw[o * 2 + 1]);
                        let r2 = x * x + y * y;
                        if r2 > 0.0 {
                            grot[o * 2] += g0 * w.rotation * s * (-y / r2);
                            grot[o * 2 + 1] += g0 * w.rotation * s * (x / r2);
                        }
                    }
                }
            }
            if groups.contains(Group::Confidence) {
                for (i, p) in pred.objects.iter().enumerate() {
                    let target = match partner[i] {
                        Some(j) => gt.objects[j].confidence.unwrap_or(1.0),
                        None => 0.0,
                    };
                    gconf[b * n + i] += g0 * w.confidence * sign(p.confidence.unwrap_or(0.0) - target);
                }
            }
            if groups.contains(Group::Light) {
                if let (Some(pl), Some(ql)) = (pred.light, gt.light) {
                    let g = light_angle_grad(pl, ql);
                    glight[b * 2] += g0 * w.light * g[0];
                    glight[b * 2 + 1] += g0 * w.light * g[1];
                }
            }
        }
        let mut out = vec![Some(Tensor::new(inputs[0].shape().to_vec(), gc)?)];
        let mut k = 1;
        for (present, data) in self.present.iter().zip([gcol, grot, gconf, glight]) {
            if *present {
                out.push(Some(Tensor::new(inputs[k].shape().to_vec(), data)?));
                k += 1;
            }
        }
        Ok(out)
    }
}
