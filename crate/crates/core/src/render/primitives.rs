//! Soft silhouettes for circles and Lambert-shaded spheres, with their
//! vector-Jacobian products.

use super::camera::{dot, sub, Camera, Vec3};
use super::{Layer, RenderSettings};
use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::image::CHANNELS;

/// Shading floor for surfaces facing away from the light.
pub const AMBIENT: f64 = 0.2;

/// Floor on the squared depth component of the reconstructed normal outside
/// the disc, so the soft alpha tails still get a well-defined shade.
const NORMAL_Z2_FLOOR: f64 = 0.01;

/// Unit direction towards the light for `(azimuth, elevation)`, y up.
pub fn light_vector(light: [f64; 2]) -> Vec3 {
    let [az, el] = light;
    [el.cos() * az.cos(), el.sin(), el.cos() * az.sin()]
}

fn light_partials(light: [f64; 2]) -> [Vec3; 2] {
    let [az, el] = light;
    [
        [-el.cos() * az.sin(), 0.0, el.cos() * az.cos()],
        [-el.sin() * az.cos(), el.cos(), -el.sin() * az.sin()],
    ]
}

/// World position of the center of pixel `(row, col)` for a planar view of
/// side `extent` centred on the origin.
pub fn planar_pixel(row: usize, col: usize, size: usize, extent: f64) -> [f64; 2] {
    let s = extent / size as f64;
    [(col as f64 + 0.5) * s - 0.5 * extent, 0.5 * extent - (row as f64 + 0.5) * s]
}

/// Planar silhouette sharpness in inverse world units.
fn planar_k(size: usize, extent: f64, settings: &RenderSettings) -> f64 {
    settings.softness * size as f64 / extent
}

pub fn render_circle2d(
    center: [f64; 2],
    radius: f64,
    color: [f64; 3],
    size: usize,
    extent: f64,
    settings: &RenderSettings,
) -> Result<Layer> {
    if radius <= 0.0 || !radius.is_finite() {
        return Err(Error::InvalidConfig(format!("circle radius must be positive, got {radius}")));
    }
    let k = planar_k(size, extent, settings);
    let mut alpha = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let [x, y] = planar_pixel(row, col, size, extent);
            let d = ((x - center[0]).powi(2) + (y - center[1]).powi(2)).sqrt();
            alpha.push(sigmoid(k * (radius - d)));
        }
    }
    let rgb = (0..size * size).flat_map(|_| color).collect();
    Ok(Layer {
        size,
        rgb,
        alpha,
        depth: 0.0,
    })
}

/// Gradients of a circle layer with respect to its center, radius and color,
/// given the upstream gradients on its alpha and rgb planes.
pub fn circle2d_backward(
    center: [f64; 2],
    size: usize,
    extent: f64,
    settings: &RenderSettings,
    layer: &Layer,
    g_alpha: &[f64],
    g_rgb: &[f64],
) -> ([f64; 2], f64, [f64; 3]) {
    let k = planar_k(size, extent, settings);
    let (mut gc, mut gr, mut gcol) = ([0.0; 2], 0.0, [0.0; 3]);
    for row in 0..size {
        for col in 0..size {
            let p = row * size + col;
            for c in 0..CHANNELS {
                gcol[c] += g_rgb[p * CHANNELS + c];
            }
            let a = layer.alpha[p];
            let gs = g_alpha[p] * a * (1.0 - a) * k;
            if gs == 0.0 {
                continue;
            }
            gr += gs;
            let [x, y] = planar_pixel(row, col, size, extent);
            let (dx, dy) = (x - center[0], y - center[1]);
            let d = (dx * dx + dy * dy).sqrt();
            if d > 1e-12 {
                gc[0] += gs * dx / d;
                gc[1] += gs * dy / d;
            }
        }
    }
    (gc, gr, gcol)
}

/// Per-pixel shading of a projected sphere: the shade factor and the
/// partials of the (unclamped) normal-light product with respect to the
/// normalized disc offsets `(a, b)` and the camera-space light vector.
struct Shade {
    factor: f64,
    lit: bool,
    d_a: f64,
    d_b: f64,
    normal: Vec3,
}

fn shade(a: f64, b: f64, l: Vec3) -> Shade {
    let rho2 = a * a + b * b;
    let q = 1.0 - rho2;
    // Camera looks along +z, so the visible normal has a negative z part.
    let (ndot, d_a, d_b, normal) = if q >= NORMAL_Z2_FLOOR {
        let w = q.sqrt();
        let ndot = a * l[0] - b * l[1] - w * l[2];
        (ndot, l[0] + a / w * l[2], -l[1] + b / w * l[2], [a, -b, -w])
    } else {
        let wz = NORMAL_Z2_FLOOR.sqrt();
        let n = (rho2 + NORMAL_Z2_FLOOR).sqrt();
        let ndot = (a * l[0] - b * l[1] - wz * l[2]) / n;
        let d_a = l[0] / n - ndot * a / (n * n);
        let d_b = -l[1] / n - ndot * b / (n * n);
        (ndot, d_a, d_b, [a / n, -b / n, -wz / n])
    };
    Shade {
        factor: ndot.max(AMBIENT),
        lit: ndot > AMBIENT,
        d_a,
        d_b,
        normal,
    }
}

pub(crate) struct SphereGeometry {
    pub u: f64,
    pub v: f64,
    pub big_r: f64,
    pub depth: f64,
    pub light_cam: Vec3,
}

pub(crate) fn sphere_geometry(center: Vec3, radius: f64, light: [f64; 2], camera: &Camera) -> Result<SphereGeometry> {
    if radius <= 0.0 || !radius.is_finite() {
        return Err(Error::InvalidConfig(format!("sphere radius must be positive, got {radius}")));
    }
    let pr = camera.project(center)?;
    let b = camera.basis();
    let l = light_vector(light);
    Ok(SphereGeometry {
        u: pr.pixel[0],
        v: pr.pixel[1],
        big_r: camera.focal() * radius / pr.depth,
        depth: pr.depth,
        light_cam: [dot(b[0], l), dot(b[1], l), dot(b[2], l)],
    })
}

pub fn render_sphere(
    center: Vec3,
    radius: f64,
    color: [f64; 3],
    light: [f64; 2],
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<Layer> {
    let g = sphere_geometry(center, radius, light, camera)?;
    let size = camera.image_size;
    let k = settings.softness;
    let mut alpha = Vec::with_capacity(size * size);
    let mut rgb = Vec::with_capacity(size * size * CHANNELS);
    for row in 0..size {
        for col in 0..size {
            let dx = col as f64 + 0.5 - g.u;
            let dy = row as f64 + 0.5 - g.v;
            let dist = (dx * dx + dy * dy).sqrt();
            alpha.push(sigmoid(k * (g.big_r - dist)));
            let s = shade(dx / g.big_r, dy / g.big_r, g.light_cam);
            rgb.extend(color.map(|c| c * s.factor));
        }
    }
    Ok(Layer {
        size,
        rgb,
        alpha,
        depth: dot(sub(center, camera.position), sub(center, camera.position)).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SphereGrad {
    pub center: Vec3,
    pub radius: f64,
    pub color: [f64; 3],
    pub light: [f64; 2],
}

#[allow(clippy::too_many_arguments)]
pub fn sphere_backward(
    center: Vec3,
    radius: f64,
    color: [f64; 3],
    light: [f64; 2],
    camera: &Camera,
    settings: &RenderSettings,
    layer: &Layer,
    g_alpha: &[f64],
    g_rgb: &[f64],
) -> Result<SphereGrad> {
    let g = sphere_geometry(center, radius, light, camera)?;
    let size = camera.image_size;
    let k = settings.softness;
    let r = g.big_r;
    let (mut gu, mut gv, mut g_big_r) = (0.0, 0.0, 0.0);
    let mut g_lc = [0.0; 3];
    let mut gcol = [0.0; 3];
    for row in 0..size {
        for col in 0..size {
            let p = row * size + col;
            let dx = col as f64 + 0.5 - g.u;
            let dy = row as f64 + 0.5 - g.v;
            let dist = (dx * dx + dy * dy).sqrt();
            let (a, b) = (dx / r, dy / r);
            let s = shade(a, b, g.light_cam);

            let gp = &g_rgb[p * CHANNELS..(p + 1) * CHANNELS];
            let mut g_factor = 0.0;
            for c in 0..CHANNELS {
                gcol[c] += gp[c] * s.factor;
                g_factor += gp[c] * color[c];
            }
            let (mut g_dx, mut g_dy) = (0.0, 0.0);
            if s.lit && g_factor != 0.0 {
                let (ga, gb) = (g_factor * s.d_a, g_factor * s.d_b);
                for i in 0..3 {
                    g_lc[i] += g_factor * s.normal[i];
                }
                g_dx += ga / r;
                g_dy += gb / r;
                g_big_r -= (ga * a + gb * b) / r;
            }

            let al = layer.alpha[p];
            let gs = g_alpha[p] * al * (1.0 - al) * k;
            if gs != 0.0 {
                g_big_r += gs;
                if dist > 1e-12 {
                    g_dx -= gs * dx / dist;
                    g_dy -= gs * dy / dist;
                }
            }
            gu -= g_dx;
            gv -= g_dy;
        }
    }

    let jac = camera.project_jacobian(center)?;
    let g_depth = -g_big_r * r / g.depth;
    let mut out = SphereGrad {
        color: gcol,
        radius: g_big_r * camera.focal() / g.depth,
        ..Default::default()
    };
    for i in 0..3 {
        out.center[i] = gu * jac[0][i] + gv * jac[1][i] + g_depth * jac[2][i];
    }
    let basis = camera.basis();
    let partials = light_partials(light);
    for (j, dl) in partials.iter().enumerate() {
        let dl_cam = [dot(basis[0], *dl), dot(basis[1], *dl), dot(basis[2], *dl)];
        out.light[j] = dot(g_lc, dl_cam);
    }
    Ok(out)
}
