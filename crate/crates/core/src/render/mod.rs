//! Differentiable soft renderer for circles and spheres.
//!
//! Every object is drawn into its own layer (rgb plane plus a sigmoid
//! silhouette alpha), then layers are composited back-to-front with
//! `confidence * alpha` as opacity. Gradients are written by hand for each
//! stage and exposed to the tape through [`render_batch`].

mod camera;
mod primitives;

pub use camera::{Camera, Projection, Vec3, NEAR};
pub use primitives::{
    circle2d_backward, light_vector, planar_pixel, render_circle2d, render_sphere, sphere_backward, SphereGrad,
    AMBIENT,
};

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::scene::SceneCode;
use crate::worlds::WorldSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    /// Silhouette sharpness per pixel of the output image.
    pub softness: f64,
    pub background: [f64; 3],
    pub depth_sort: bool,
}

impl RenderSettings {
    /// Default sharpness of `50 / image_size` per pixel: the image spans 50
    /// logistic units whatever its resolution.
    pub fn for_size(image_size: usize, background: [f64; 3]) -> Self {
        Self {
            softness: 50.0 / image_size as f64,
            background,
            depth_sort: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.softness > 0.0 && self.softness.is_finite()) {
            return Err(Error::InvalidConfig(format!("softness must be positive, got {}", self.softness)));
        }
        Ok(())
    }
}

/// How world coordinates reach the image plane.
#[derive(Clone, Debug, PartialEq)]
pub enum View {
    /// Orthographic top-down view of a square of side `extent` centred on
    /// the origin, for 2D worlds.
    Planar { size: usize, extent: f64 },
    Perspective(Camera),
}

impl View {
    pub fn size(&self) -> usize {
        match self {
            View::Planar { size, .. } => *size,
            View::Perspective(c) => c.image_size,
        }
    }
}

/// One object rendered in isolation.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub size: usize,
    /// HWC color plane.
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Distance of the object center to the camera.
    pub depth: f64,
}

/// Back-to-front drawing order: farthest first, ties by index.
pub fn draw_order(depths: &[f64], depth_sort: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..depths.len()).collect();
    if depth_sort {
        order.sort_by(|&a, &b| depths[b].total_cmp(&depths[a]).then(a.cmp(&b)));
    }
    order
}

struct Composited {
    image: Vec<f64>,
    /// Canvas before each drawn layer, in drawing order.
    before: Vec<Vec<f64>>,
}

fn composite_in_order(layers: &[&Layer], confidences: &[f64], order: &[usize], size: usize, bg: [f64; 3]) -> Composited {
    let mut canvas: Vec<f64> = (0..size * size).flat_map(|_| bg).collect();
    let mut before = Vec::with_capacity(order.len());
    for &i in order {
        before.push(canvas.clone());
        let (l, conf) = (layers[i], confidences[i]);
        for p in 0..size * size {
            let a = conf * l.alpha[p];
            for c in 0..CHANNELS {
                let j = p * CHANNELS + c;
                canvas[j] = a * l.rgb[j] + (1.0 - a) * canvas[j];
            }
        }
    }
    Composited { image: canvas, before }
}

/// Gradients of a composite with respect to each layer's alpha and rgb
/// planes and each confidence.
struct CompositeGrads {
    alpha: Vec<Vec<f64>>,
    rgb: Vec<Vec<f64>>,
    confidence: Vec<f64>,
}

fn composite_backward(
    layers: &[&Layer],
    confidences: &[f64],
    order: &[usize],
    before: &[Vec<f64>],
    grad: &[f64],
) -> CompositeGrads {
    let n = layers.len();
    let npix = grad.len() / CHANNELS;
    let mut out = CompositeGrads {
        alpha: vec![vec![0.0; npix]; n],
        rgb: vec![vec![0.0; npix * CHANNELS]; n],
        confidence: vec![0.0; n],
    };
    let mut g = grad.to_vec();
    for (k, &i) in order.iter().enumerate().rev() {
        let (l, conf, prev) = (layers[i], confidences[i], &before[k]);
        let mut g_conf = 0.0;
        for p in 0..npix {
            let a = conf * l.alpha[p];
            let mut g_a = 0.0;
            for c in 0..CHANNELS {
                let j = p * CHANNELS + c;
                g_a += g[j] * (l.rgb[j] - prev[j]);
                out.rgb[i][j] = a * g[j];
                g[j] *= 1.0 - a;
            }
            out.alpha[i][p] = g_a * conf;
            g_conf += g_a * l.alpha[p];
        }
        out.confidence[i] = g_conf;
    }
    out
}

/// Composite layers over a solid background, back-to-front by depth.
pub fn composite(layers: &[Layer], confidences: &[f64], background: [f64; 3], depth_sort: bool) -> Result<Image> {
    if layers.len() != confidences.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} layers but {} confidences",
            layers.len(),
            confidences.len()
        )));
    }
    let Some(size) = layers.first().map(|l| l.size) else {
        return Err(Error::ShapeMismatch("composite needs at least one layer; use a background image".into()));
    };
    for l in layers {
        if l.size != size || l.alpha.len() != size * size || l.rgb.len() != size * size * CHANNELS {
            return Err(Error::ShapeMismatch("layers differ in size".into()));
        }
    }
    let refs: Vec<&Layer> = layers.iter().collect();
    let depths: Vec<f64> = layers.iter().map(|l| l.depth).collect();
    let order = draw_order(&depths, depth_sort);
    let out = composite_in_order(&refs, confidences, &order, size, background);
    Image::new(size, size, out.image)
}

/// Differentiable attributes of one drawn object. Planar views ignore the
/// third center coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub center: [f64; 3],
    pub radius: f64,
    pub rgb: [f64; 3],
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PrimitiveGrad {
    pub center: [f64; 3],
    pub radius: f64,
    pub rgb: [f64; 3],
    pub confidence: f64,
}

/// Forward state of one scene render, kept for the backward pass.
pub struct RenderTrace {
    pub image: Image,
    layers: Vec<Option<Layer>>,
    order: Vec<usize>,
    before: Vec<Vec<f64>>,
}

/// Everything that turns a set of primitives into an image.
#[derive(Clone, Debug, PartialEq)]
pub struct Renderer {
    pub view: View,
    pub settings: RenderSettings,
    /// Skip objects behind the camera instead of failing; used while
    /// training, where predictions can wander anywhere.
    pub cull_behind: bool,
}

impl Renderer {
    pub fn new(view: View, settings: RenderSettings) -> Self {
        Self {
            view,
            settings,
            cull_behind: false,
        }
    }

    pub fn size(&self) -> usize {
        self.view.size()
    }

    fn layer(&self, p: &Primitive, light: [f64; 2]) -> Result<Option<Layer>> {
        match &self.view {
            View::Planar { size, extent } => {
                render_circle2d([p.center[0], p.center[1]], p.radius, p.rgb, *size, *extent, &self.settings).map(Some)
            }
            View::Perspective(cam) => match render_sphere(p.center, p.radius, p.rgb, light, cam, &self.settings) {
                Err(Error::BehindCamera(_)) if self.cull_behind => Ok(None),
                other => other.map(Some),
            },
        }
    }

    pub fn trace(&self, prims: &[Primitive], light: [f64; 2]) -> Result<RenderTrace> {
        self.settings.validate()?;
        let size = self.size();
        let layers: Vec<Option<Layer>> = prims.iter().map(|p| self.layer(p, light)).collect::<Result<_>>()?;
        let drawn: Vec<usize> = (0..prims.len()).filter(|&i| layers[i].is_some()).collect();
        let refs: Vec<&Layer> = drawn.iter().map(|&i| layers[i].as_ref().unwrap()).collect();
        let conf: Vec<f64> = drawn.iter().map(|&i| prims[i].confidence).collect();
        let depths: Vec<f64> = refs.iter().map(|l| l.depth).collect();
        let local = draw_order(&depths, self.settings.depth_sort);
        let out = composite_in_order(&refs, &conf, &local, size, self.settings.background);
        Ok(RenderTrace {
            image: Image::new(size, size, out.image)?,
            order: local.iter().map(|&k| drawn[k]).collect(),
            before: out.before,
            layers,
        })
    }

    pub fn render(&self, prims: &[Primitive], light: [f64; 2]) -> Result<Image> {
        Ok(self.trace(prims, light)?.image)
    }

    /// Gradients of `sum(grad * image)` with respect to every primitive and
    /// the light direction.
    pub fn backward(
        &self,
        trace: &RenderTrace,
        prims: &[Primitive],
        light: [f64; 2],
        grad: &[f64],
    ) -> Result<(Vec<PrimitiveGrad>, [f64; 2])> {
        let mut grads = vec![PrimitiveGrad::default(); prims.len()];
        let mut g_light = [0.0; 2];
        if trace.order.is_empty() {
            return Ok((grads, g_light));
        }
        // Local indexing over drawn layers, as in the forward pass.
        let drawn: Vec<usize> = (0..prims.len()).filter(|&i| trace.layers[i].is_some()).collect();
        let refs: Vec<&Layer> = drawn.iter().map(|&i| trace.layers[i].as_ref().unwrap()).collect();
        let conf: Vec<f64> = drawn.iter().map(|&i| prims[i].confidence).collect();
        let local_order: Vec<usize> = trace
            .order
            .iter()
            .map(|i| drawn.iter().position(|d| d == i).unwrap())
            .collect();
        let cg = composite_backward(&refs, &conf, &local_order, &trace.before, grad);
        for (k, &i) in drawn.iter().enumerate() {
            let p = &prims[i];
            let g = &mut grads[i];
            g.confidence = cg.confidence[k];
            match &self.view {
                View::Planar { size, extent } => {
                    let (gc, gr, gcol) = circle2d_backward(
                        [p.center[0], p.center[1]],
                        *size,
                        *extent,
                        &self.settings,
                        refs[k],
                        &cg.alpha[k],
                        &cg.rgb[k],
                    );
                    g.center = [gc[0], gc[1], 0.0];
                    g.radius = gr;
                    g.rgb = gcol;
                }
                View::Perspective(cam) => {
                    let sg = sphere_backward(
                        p.center,
                        p.radius,
                        p.rgb,
                        light,
                        cam,
                        &self.settings,
                        refs[k],
                        &cg.alpha[k],
                        &cg.rgb[k],
                    )?;
                    g.center = sg.center;
                    g.radius = sg.radius;
                    g.rgb = sg.color;
                    g_light[0] += sg.light[0];
                    g_light[1] += sg.light[1];
                }
            }
        }
        Ok((grads, g_light))
    }
}

/// Primitives for a scene code under a world's fixed attributes: radius,
/// default color and light, and forced confidence for known-count worlds.
pub fn scene_primitives(s: &SceneCode, world: &WorldSpec) -> (Vec<Primitive>, [f64; 2]) {
    let forced = world.known_count();
    let prims = s
        .objects
        .iter()
        .map(|o| {
            let mut center = [0.0; 3];
            for (d, v) in center.iter_mut().zip(&o.center) {
                *d = *v;
            }
            Primitive {
                center,
                radius: world.radius,
                rgb: o.rgb.unwrap_or(world.default_color),
                confidence: if forced { 1.0 } else { o.confidence.unwrap_or(1.0) },
            }
        })
        .collect();
    (prims, s.light.unwrap_or(world.default_light))
}

/// Render a scene code for `world` through `view`.
pub fn render_scene(s: &SceneCode, world: &WorldSpec, view: &View, settings: &RenderSettings) -> Result<Image> {
    for o in &s.objects {
        if o.center.len() != world.dims {
            return Err(Error::ShapeMismatch(format!(
                "{}-D center in a {}-D world",
                o.center.len(),
                world.dims
            )));
        }
    }
    let (prims, light) = scene_primitives(s, world);
    Renderer::new(view.clone(), settings.clone()).render(&prims, light)
}

/// Tape inputs of a batched render: per-object attributes as `[B, n, k]`
/// tensors and the light as `[B, 2]`. Missing inputs take the world's fixed
/// values.
#[derive(Clone, Copy, Debug)]
pub struct BatchInputs {
    pub centers: Var,
    pub colors: Option<Var>,
    pub confidences: Option<Var>,
    pub light: Option<Var>,
}

struct RenderBatchOp {
    renderer: Renderer,
    prims: Vec<Vec<Primitive>>,
    lights: Vec<[f64; 2]>,
    traces: Vec<RenderTrace>,
    dims: usize,
    has_colors: bool,
    has_conf: bool,
    has_light: bool,
}

impl CustomOp for RenderBatchOp {
    fn name(&self) -> &'static str {
        "render_batch"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let b = self.prims.len();
        let n = self.prims.first().map_or(0, Vec::len);
        let size = self.renderer.size();
        let npix = size * size;
        let mut g_centers = vec![0.0; b * n * self.dims];
        let mut g_colors = vec![0.0; b * n * 3];
        let mut g_conf = vec![0.0; b * n];
        let mut g_light = vec![0.0; b * 2];
        let gd = grad_out.data();
        for s in 0..b {
            // grad_out is [B, 3, H, W]; the renderer works in HWC.
            let plane = &gd[s * CHANNELS * npix..(s + 1) * CHANNELS * npix];
            let mut hwc = vec![0.0; CHANNELS * npix];
            for c in 0..CHANNELS {
                for p in 0..npix {
                    hwc[p * CHANNELS + c] = plane[c * npix + p];
                }
            }
            let (pg, lg) = self
                .renderer
                .backward(&self.traces[s], &self.prims[s], self.lights[s], &hwc)?;
            for (i, g) in pg.iter().enumerate() {
                let o = s * n + i;
                g_centers[o * self.dims..(o + 1) * self.dims].copy_from_slice(&g.center[..self.dims]);
                g_colors[o * 3..o * 3 + 3].copy_from_slice(&g.rgb);
                g_conf[o] = g.confidence;
            }
            g_light[s * 2..s * 2 + 2].copy_from_slice(&lg);
        }
        let mut out = vec![Some(Tensor::new(inputs[0].shape().to_vec(), g_centers)?)];
        let mut k = 1;
        if self.has_colors {
            out.push(Some(Tensor::new(inputs[k].shape().to_vec(), g_colors)?));
            k += 1;
        }
        if self.has_conf {
            out.push(Some(Tensor::new(inputs[k].shape().to_vec(), g_conf)?));
            k += 1;
        }
        if self.has_light {
            out.push(Some(Tensor::new(inputs[k].shape().to_vec(), g_light)?));
        }
        Ok(out)
    }
}

/// Render a batch of scenes on the tape; output is `[B, 3, S, S]`.
pub fn render_batch(tape: &mut Tape, renderer: &Renderer, world: &WorldSpec, inputs: BatchInputs) -> Result<Var> {
    let cs = tape.value(inputs.centers).shape().to_vec();
    if cs.len() != 3 || cs[2] != world.dims {
        return Err(Error::ShapeMismatch(format!(
            "centers must be [B, n, {}], got {cs:?}",
            world.dims
        )));
    }
    let (b, n, dims) = (cs[0], cs[1], cs[2]);
    let expect = |v: Option<Var>, shape: &[usize], what: &str, tape: &Tape| -> Result<()> {
        match v {
            Some(v) if tape.value(v).shape() != shape => Err(Error::ShapeMismatch(format!(
                "{what} must be {shape:?}, got {:?}",
                tape.value(v).shape()
            ))),
            _ => Ok(()),
        }
    };
    expect(inputs.colors, &[b, n, 3], "colors", tape)?;
    expect(inputs.confidences, &[b, n], "confidences", tape)?;
    expect(inputs.light, &[b, 2], "light", tape)?;

    let forced = world.known_count();
    let centers = tape.value(inputs.centers).data();
    let colors = inputs.colors.map(|v| tape.value(v).data());
    let conf = inputs.confidences.map(|v| tape.value(v).data());
    let lights_in = inputs.light.map(|v| tape.value(v).data());

    let mut prims = Vec::with_capacity(b);
    let mut lights = Vec::with_capacity(b);
    for s in 0..b {
        let mut ps = Vec::with_capacity(n);
        for i in 0..n {
            let o = s * n + i;
            let mut center = [0.0; 3];
            center[..dims].copy_from_slice(&centers[o * dims..(o + 1) * dims]);
            ps.push(Primitive {
                center,
                radius: world.radius,
                rgb: colors.map_or(world.default_color, |c| [c[o * 3], c[o * 3 + 1], c[o * 3 + 2]]),
                confidence: match conf {
                    Some(c) if !forced => c[o],
                    _ => 1.0,
                },
            });
        }
        prims.push(ps);
        lights.push(lights_in.map_or(world.default_light, |l| [l[s * 2], l[s * 2 + 1]]));
    }

    let traces: Vec<RenderTrace> = prims
        .iter()
        .zip(&lights)
        .map(|(p, l)| renderer.trace(p, *l))
        .collect::<Result<_>>()?;
    let size = renderer.size();
    let mut out = Vec::with_capacity(b * CHANNELS * size * size);
    for t in &traces {
        out.extend(t.image.to_chw());
    }
    let output = Tensor::new(vec![b, CHANNELS, size, size], out)?;

    let mut vars = vec![inputs.centers];
    vars.extend(inputs.colors);
    // Known-count worlds ignore predicted confidences entirely.
    let conf_var = inputs.confidences.filter(|_| !forced);
    vars.extend(conf_var);
    vars.extend(inputs.light);
    let op = RenderBatchOp {
        renderer: renderer.clone(),
        prims,
        lights,
        traces,
        dims,
        has_colors: inputs.colors.is_some(),
        has_conf: conf_var.is_some(),
        has_light: inputs.light.is_some(),
    };
    tape.custom(&vars, output, Box::new(op))
}
