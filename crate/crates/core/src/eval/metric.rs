//! Assignment-based scene parameter distance.
//!
//! Objects are matched by position only; every enabled attribute group then
//! contributes a weighted norm per matched pair, and the light direction
//! adds its angular distance.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::assignment::{match_subsets, optimal_assignment};
use crate::error::{Error, Result};
use crate::render::light_vector;
use crate::scene::{Group, SceneCode, SceneObject};
use crate::worlds::WorldSpec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights {
    pub position: f64,
    pub color: f64,
    pub rotation: f64,
    pub confidence: f64,
    pub light: f64,
}

impl Default for MetricWeights {
    fn default() -> Self {
        Self {
            position: 1.0,
            color: 1.0,
            rotation: 1.0,
            confidence: 1.0,
            light: 1.0,
        }
    }
}

impl MetricWeights {
    pub fn get(&self, g: Group) -> f64 {
        match g {
            Group::Position => self.position,
            Group::Color => self.color,
            Group::Rotation => self.rotation,
            Group::Confidence => self.confidence,
            Group::Light => self.light,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for g in Group::ALL {
            if !(self.get(g) >= 0.0) {
                return Err(Error::InvalidConfig(format!("weight for {g} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Unweighted per-group sums over matched objects; light in radians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub position: f64,
    pub color: f64,
    pub rotation: f64,
    pub confidence: f64,
    pub light: f64,
    pub matched: usize,
}

impl Breakdown {
    pub fn get(&self, g: Group) -> f64 {
        match g {
            Group::Position => self.position,
            Group::Color => self.color,
            Group::Rotation => self.rotation,
            Group::Confidence => self.confidence,
            Group::Light => self.light,
        }
    }

    pub fn weighted_total(&self, w: &MetricWeights) -> f64 {
        w.position * self.position
            + w.color * self.color
            + w.rotation * self.rotation
            + w.confidence * self.confidence
            + w.light * self.light
    }
}

/// Wrap an angle difference into `(-pi, pi]`.
pub fn wrap_angle(d: f64) -> f64 {
    let r = d.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Angle between two light directions given as `(azimuth, elevation)`.
pub fn light_angle(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (la, lb) = (light_vector(a), light_vector(b));
    let c = la[0] * lb[0] + la[1] * lb[1] + la[2] * lb[2];
    c.clamp(-1.0, 1.0).acos()
}

pub(crate) fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn require<T: Copy>(v: Option<T>, g: Group) -> Result<T> {
    v.ok_or_else(|| Error::ShapeMismatch(format!("scene code lacks the {g} group")))
}

/// Per-pair terms of the enabled per-object groups except confidence.
fn pair_terms(a: &SceneObject, b: &SceneObject, world: &WorldSpec, out: &mut Breakdown) -> Result<()> {
    if a.center.len() != world.dims || b.center.len() != world.dims {
        return Err(Error::ShapeMismatch(format!("centers must have {} coordinates", world.dims)));
    }
    out.position += norm_diff(&a.center, &b.center);
    if world.groups.contains(Group::Color) {
        out.color += norm_diff(&require(a.rgb, Group::Color)?, &require(b.rgb, Group::Color)?);
    }
    if world.groups.contains(Group::Rotation) {
        let d = require(a.rotation, Group::Rotation)? - require(b.rotation, Group::Rotation)?;
        out.rotation += wrap_angle(d).abs();
    }
    out.matched += 1;
    Ok(())
}

fn light_term(a: &SceneCode, b: &SceneCode, world: &WorldSpec) -> Result<f64> {
    if world.groups.contains(Group::Light) {
        Ok(light_angle(require(a.light, Group::Light)?, require(b.light, Group::Light)?))
    } else {
        Ok(0.0)
    }
}

fn positions(s: &SceneCode) -> Vec<Vec<f64>> {
    s.objects.iter().map(|o| o.center.clone()).collect()
}

/// Distance between two scenes with equal object counts; returns the
/// weighted total and the per-group sums.
pub fn param_metric(a: &SceneCode, b: &SceneCode, w: &MetricWeights, world: &WorldSpec) -> Result<(f64, Breakdown)> {
    let m = match_scenes(a, b, w, world)?;
    if a.len() != b.len() {
        return Err(Error::CountMismatch(a.len(), b.len()));
    }
    Ok((m.total, m.groups))
}

/// A matching of `a`'s objects to `b`'s with its cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub total: f64,
    pub groups: Breakdown,
    /// `(index in a, index in b)` for each matched pair.
    pub pairs: Vec<(usize, usize)>,
}

/// Match `a` to `b` by position and score the matched attributes.
///
/// Equal counts use the exact assignment. Unequal counts are only allowed
/// when the world carries confidences: the smaller set is matched into the
/// larger one, and every object of `a` contributes `|c - c_matched|` with
/// `c_matched = 0` when it has no partner.
pub fn match_scenes(a: &SceneCode, b: &SceneCode, w: &MetricWeights, world: &WorldSpec) -> Result<Matching> {
    let has_conf = world.groups.contains(Group::Confidence);
    let pairs: Vec<(usize, usize)> = if a.len() == b.len() {
        optimal_assignment(&positions(a), &positions(b))?
            .into_iter()
            .enumerate()
            .collect()
    } else if has_conf {
        let mut p = match_subsets(&positions(a), &positions(b));
        p.sort_unstable();
        p
    } else {
        return Err(Error::CountMismatch(a.len(), b.len()));
    };
    let mut groups = Breakdown::default();
    for &(i, j) in &pairs {
        pair_terms(&a.objects[i], &b.objects[j], world, &mut groups)?;
    }
    if has_conf {
        let mut partner = vec![None; a.len()];
        for &(i, j) in &pairs {
            partner[i] = Some(j);
        }
        for (i, o) in a.objects.iter().enumerate() {
            let target = match partner[i] {
                Some(j) => require(b.objects[j].confidence, Group::Confidence)?,
                None => 0.0,
            };
            groups.confidence += (require(o.confidence, Group::Confidence)? - target).abs();
        }
    }
    groups.light = light_term(a, b, world)?;
    Ok(Matching {
        total: groups.weighted_total(w),
        groups,
        pairs,
    })
}

/// Proposals with confidence at least `threshold`, in their original order.
pub fn select_confident(s: &SceneCode, threshold: f64) -> SceneCode {
    SceneCode {
        objects: s
            .objects
            .iter()
            .filter(|o| o.confidence.is_none_or(|c| c >= threshold))
            .cloned()
            .collect(),
        light: s.light,
    }
}
