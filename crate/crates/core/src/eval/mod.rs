//! Scene-parameter and image metrics, evaluation reports and ratios
//! against a reference run.

pub mod assignment;
pub mod dssim;
pub mod metric;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use assignment::{match_subsets, optimal_assignment};
pub use dssim::dssim;
pub use metric::{light_angle, match_scenes, param_metric, select_confident, wrap_angle, Breakdown, MetricWeights};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::render::{scene_primitives, Renderer};
use crate::scene::{Group, SceneCode};
use crate::worlds::WorldSpec;

pub const CONFIDENCE_THRESHOLD: f64 = 0.5;

/// One row of an evaluation: the weighted total, the per-group columns and
/// the image error. Columns a world does not use are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub param: Option<f64>,
    pub position: Option<f64>,
    pub color: Option<f64>,
    pub rotation: Option<f64>,
    /// Mean squared error against the 0/1 existence indicator.
    pub confidence: Option<f64>,
    pub direction_deg: Option<f64>,
    /// `|kept proposals - true objects|`.
    pub count_error: Option<f64>,
    pub dssim: Option<f64>,
}

pub const COLUMNS: [&str; 8] = [
    "param",
    "position",
    "color",
    "rotation",
    "confidence",
    "direction_deg",
    "count_error",
    "dssim",
];

impl Metrics {
    pub fn values(&self) -> [Option<f64>; 8] {
        [
            self.param,
            self.position,
            self.color,
            self.rotation,
            self.confidence,
            self.direction_deg,
            self.count_error,
            self.dssim,
        ]
    }

    pub fn from_values(v: [Option<f64>; 8]) -> Self {
        Self {
            param: v[0],
            position: v[1],
            color: v[2],
            rotation: v[3],
            confidence: v[4],
            direction_deg: v[5],
            count_error: v[6],
            dssim: v[7],
        }
    }

    /// Column-wise mean; a column is kept only if every row has it.
    pub fn mean(rows: &[Metrics]) -> Metrics {
        let mut out = [None; 8];
        if rows.is_empty() {
            return Metrics::default();
        }
        for (c, slot) in out.iter_mut().enumerate() {
            let vals: Option<Vec<f64>> = rows.iter().map(|r| r.values()[c]).collect();
            *slot = vals.map(|v| v.iter().sum::<f64>() / v.len() as f64);
        }
        Metrics::from_values(out)
    }
}

/// Parameter metrics of one predicted scene against its ground truth.
///
/// Known-count worlds use the full assignment. Variable-count worlds keep
/// proposals with confidence at least 0.5, report the count error, score the
/// matched subset and compare all confidences with the existence indicator.
pub fn scene_metrics(pred: &SceneCode, gt: &SceneCode, w: &MetricWeights, world: &WorldSpec) -> Result<Metrics> {
    let groups = world.groups;
    let mut m = Metrics::default();
    let breakdown = if groups.contains(Group::Confidence) && !world.known_count() {
        let kept = select_confident(pred, CONFIDENCE_THRESHOLD);
        m.count_error = Some((kept.len() as f64 - gt.len() as f64).abs());
        let pairs = match_subsets(&centers(&kept), &centers(gt));
        let sub = |s: &SceneCode, pick: &dyn Fn(&(usize, usize)) -> usize| SceneCode {
            objects: pairs.iter().map(|p| s.objects[pick(p)].clone()).collect(),
            light: s.light,
        };
        let (total, b) = param_metric(&sub(&kept, &|p| p.0), &sub(gt, &|p| p.1), w, world)?;
        m.param = Some(total);

        let mut exists = vec![0.0; pred.len()];
        for (i, _) in match_subsets(&centers(pred), &centers(gt)) {
            exists[i] = 1.0;
        }
        let mut se = 0.0;
        for (o, e) in pred.objects.iter().zip(&exists) {
            let c = o
                .confidence
                .ok_or_else(|| Error::ShapeMismatch("prediction lacks confidences".into()))?;
            se += (c - e).powi(2);
        }
        m.confidence = Some(if pred.is_empty() { 0.0 } else { se / pred.len() as f64 });
        b
    } else {
        let (total, b) = param_metric(pred, gt, w, world)?;
        m.param = Some(total);
        b
    };
    m.position = Some(breakdown.position);
    if groups.contains(Group::Color) {
        m.color = Some(breakdown.color);
    }
    if groups.contains(Group::Rotation) {
        m.rotation = Some(breakdown.rotation);
    }
    if groups.contains(Group::Light) {
        m.direction_deg = Some(breakdown.light.to_degrees());
    }
    Ok(m)
}

fn centers(s: &SceneCode) -> Vec<Vec<f64>> {
    s.objects.iter().map(|o| o.center.clone()).collect()
}

/// Render a scene from the world's held-out view. Predicted objects behind
/// the novel camera are skipped rather than failing the evaluation.
pub fn render_novel(s: &SceneCode, world: &WorldSpec) -> Result<Image> {
    let mut r = Renderer::new(world.novel_view(), world.settings());
    r.cull_behind = true;
    let (prims, light) = scene_primitives(s, world);
    r.render(&prims, light)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub index: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub world: String,
    pub scenes: Vec<SceneEval>,
    pub aggregate: Metrics,
}

impl EvalReport {
    pub fn from_scenes(world: &str, scenes: Vec<SceneEval>) -> Self {
        let rows: Vec<Metrics> = scenes.iter().map(|s| s.metrics).collect();
        Self {
            world: world.to_string(),
            aggregate: Metrics::mean(&rows),
            scenes,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s)
            .map_err(|e| Error::format("report json", 0, format!("line {} column {}: {e}", e.line(), e.column())))
    }

    /// Aligned text table of the aggregate, with a ratio row when given.
    pub fn table(&self, ratios: Option<&Metrics>) -> String {
        let vals = self.aggregate.values();
        let cols: Vec<usize> = (0..COLUMNS.len()).filter(|&c| vals[c].is_some()).collect();
        let mut s = String::new();
        let _ = write!(s, "{:<10}", "world");
        for &c in &cols {
            let _ = write!(s, " {:>14}", COLUMNS[c]);
        }
        s.push('\n');
        let _ = write!(s, "{:<10}", self.world);
        for &c in &cols {
            let _ = write!(s, " {:>14.6}", vals[c].unwrap());
        }
        s.push('\n');
        if let Some(r) = ratios {
            let rv = r.values();
            let _ = write!(s, "{:<10}", "ratio");
            for &c in &cols {
                match rv[c] {
                    Some(v) => {
                        let _ = write!(s, " {v:>14.2}");
                    }
                    None => {
                        let _ = write!(s, " {:>14}", "undefined");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Evaluate predictions against ground truth: parameter metrics plus DSSIM
/// between both codes rendered from the novel view.
pub fn evaluate(
    preds: &[SceneCode],
    gts: &[SceneCode],
    indices: &[usize],
    w: &MetricWeights,
    world: &WorldSpec,
) -> Result<EvalReport> {
    use rayon::prelude::*;
    if preds.len() != gts.len() || preds.len() != indices.len() {
        return Err(Error::CountMismatch(preds.len(), gts.len()));
    }
    let scenes = (0..preds.len())
        .into_par_iter()
        .map(|k| {
            let mut m = scene_metrics(&preds[k], &gts[k], w, world)?;
            m.dssim = Some(dssim(&render_novel(&preds[k], world)?, &render_novel(&gts[k], world)?)?);
            Ok(SceneEval {
                index: indices[k],
                metrics: m,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_scenes(&world.name, scenes))
}

/// Encode every test image and evaluate the predictions from the novel view.
pub fn novel_view_eval(
    generator: &mut crate::nn::Generator,
    dataset: &crate::worlds::Dataset,
    w: &MetricWeights,
) -> Result<EvalReport> {
    let world = &dataset.world;
    let idx: Vec<usize> = dataset.split.test.clone().collect();
    let mut preds = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(32) {
        let imgs: Vec<&Image> = chunk.iter().map(|&i| &dataset.images[i]).collect();
        preds.extend(generator.encode(&imgs)?);
    }
    let gts: Vec<SceneCode> = idx.iter().map(|&i| dataset.label(i).cloned()).collect::<Result<_>>()?;
    evaluate(&preds, &gts, &idx, w, world)
}

/// Column-wise `report / reference`; undefined where the reference is not
/// positive or either side lacks the column.
pub fn ratio_report(report: &EvalReport, reference: &EvalReport) -> Metrics {
    let (a, b) = (report.aggregate.values(), reference.aggregate.values());
    let mut out = [None; 8];
    for c in 0..out.len() {
        out[c] = match (a[c], b[c]) {
            (Some(x), Some(r)) if r > 0.0 => Some(x / r),
            _ => None,
        };
    }
    Metrics::from_values(out)
}
