//! Synthetic worlds: declarative specs, scene sampling and datasets.

mod dataset;

pub use dataset::{generate_dataset, load_dataset, save_dataset, split_sizes, Dataset, Split};

use std::f64::consts::PI;

use rand::Rng;

use crate::config::{format_floats, parse_floats, KvFile};
use crate::error::{Error, Result};
use crate::render::{Camera, RenderSettings, Renderer, View};
use crate::scene::{Group, GroupSet, SceneCode, SceneObject};

pub const MAX_REJECTION_ATTEMPTS: usize = 1000;

pub const WORLD_NAMES: [&str; 3] = ["circles", "spheres", "varied"];

/// One synthetic task: what varies, in which ranges, and how it is viewed.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    pub name: String,
    /// 2 for planar circle worlds, 3 for sphere worlds.
    pub dims: usize,
    pub object_count: (usize, usize),
    pub groups: GroupSet,
    /// Sampling interval of each center coordinate.
    pub position_range: [[f64; 2]; 3],
    pub color_range: [f64; 2],
    pub azimuth_range: [f64; 2],
    pub elevation_range: [f64; 2],
    pub radius: f64,
    pub background: [f64; 3],
    /// Color of every object when the color group is disabled.
    pub default_color: [f64; 3],
    /// Light direction when the light group is disabled.
    pub default_light: [f64; 2],
    pub image_size: usize,
    /// Side of the square seen by planar views.
    pub extent: f64,
    pub camera: Camera,
    pub novel_camera: Camera,
}

fn camera_at(position: [f64; 3], image_size: usize) -> Camera {
    Camera {
        fov_y: 0.6,
        image_size,
        position,
        look_at: [0.0; 3],
        up: [0.0, 1.0, 0.0],
    }
}

impl WorldSpec {
    fn base(name: &str, dims: usize, count: (usize, usize), groups: &[Group], image_size: usize) -> Self {
        let planar = dims == 2;
        Self {
            name: name.to_string(),
            dims,
            object_count: count,
            groups: GroupSet::of(groups),
            position_range: [[-1.5, 1.5], [-1.5, 1.5], [-0.5, 0.5]],
            color_range: [0.2, 1.0],
            azimuth_range: [-PI, PI],
            elevation_range: [0.3, 1.4],
            radius: 0.5,
            background: if planar { [0.0; 3] } else { [0.5; 3] },
            default_color: if planar { [1.0, 0.0, 0.0] } else { [0.8; 3] },
            default_light: [PI / 4.0, PI / 4.0],
            image_size,
            extent: 4.0,
            camera: camera_at([0.0, 0.0, 8.0], image_size),
            novel_camera: camera_at([8.0, 0.0, 0.0], image_size),
        }
    }

    /// A single red circle of fixed radius on black; only its position varies.
    pub fn circles(image_size: usize) -> Self {
        Self::base("circles", 2, (1, 1), &[Group::Position], image_size)
    }

    /// Three spheres with varying position and color.
    pub fn spheres(image_size: usize) -> Self {
        Self::base("spheres", 3, (3, 3), &[Group::Position, Group::Color], image_size)
    }

    /// Two to five spheres; proposals carry a confidence.
    pub fn varied(image_size: usize) -> Self {
        Self::base(
            "varied",
            3,
            (2, 5),
            &[Group::Position, Group::Color, Group::Confidence],
            image_size,
        )
    }

    pub fn preset(name: &str, image_size: usize) -> Result<Self> {
        let w = match name {
            "circles" => Self::circles(image_size),
            "spheres" => Self::spheres(image_size),
            "varied" => Self::varied(image_size),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown world '{other}'; valid worlds: {}",
                    WORLD_NAMES.join(", ")
                )))
            }
        };
        w.validate()?;
        Ok(w)
    }

    /// Degrees of freedom: per-object parameter dimensions plus globals.
    pub fn dof(&self) -> usize {
        self.groups
            .iter()
            .map(|g| match g {
                Group::Position => self.dims,
                Group::Color => 3,
                Group::Rotation | Group::Confidence => 1,
                Group::Light => 2,
            })
            .sum()
    }

    pub fn known_count(&self) -> bool {
        self.object_count.0 == self.object_count.1
    }

    pub fn max_objects(&self) -> usize {
        self.object_count.1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("world '{}': {m}", self.name)));
        if self.dims != 2 && self.dims != 3 {
            return bad(format!("dims must be 2 or 3, got {}", self.dims));
        }
        let (lo, hi) = self.object_count;
        if lo < 1 || lo > hi {
            return bad(format!("object count range {lo}..{hi} is empty or starts below 1"));
        }
        if !self.groups.contains(Group::Position) {
            return bad("the position group is always required".into());
        }
        if self.dims == 2 && self.groups.contains(Group::Light) {
            return bad("planar worlds have no lighting".into());
        }
        if self.groups.contains(Group::Confidence) && self.known_count() {
            return bad("confidence only makes sense with a variable object count".into());
        }
        if !(self.radius > 0.0) {
            return bad(format!("radius must be positive, got {}", self.radius));
        }
        if !(self.extent > 0.0) {
            return bad(format!("extent must be positive, got {}", self.extent));
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} is too small", self.image_size));
        }
        for r in self.position_range.iter().chain([&self.color_range, &self.azimuth_range, &self.elevation_range]) {
            if !(r[0] <= r[1]) {
                return bad(format!("empty range [{}, {}]", r[0], r[1]));
            }
        }
        if self.elevation_range[0] <= 0.0 || self.elevation_range[1] > PI / 2.0 {
            return bad("elevation must stay within (0, pi/2]".into());
        }
        self.camera.validate()?;
        self.novel_camera.validate()?;
        Ok(())
    }

    pub fn view(&self) -> View {
        if self.dims == 2 {
            View::Planar {
                size: self.image_size,
                extent: self.extent,
            }
        } else {
            View::Perspective(Camera {
                image_size: self.image_size,
                ..self.camera.clone()
            })
        }
    }

    /// View used for held-out evaluation. Planar worlds have a single view.
    pub fn novel_view(&self) -> View {
        if self.dims == 2 {
            self.view()
        } else {
            View::Perspective(Camera {
                image_size: self.image_size,
                ..self.novel_camera.clone()
            })
        }
    }

    pub fn settings(&self) -> RenderSettings {
        RenderSettings::for_size(self.image_size, self.background)
    }

    pub fn renderer(&self) -> Renderer {
        Renderer::new(self.view(), self.settings())
    }

    pub fn render(&self, s: &SceneCode) -> Result<crate::image::Image> {
        crate::render::render_scene(s, self, &self.view(), &self.settings())
    }

    /// Draw one scene. Whole scenes are rejected and redrawn until every pair
    /// of centers is more than two radii apart.
    pub fn sample_scene<R: Rng>(&self, rng: &mut R) -> Result<SceneCode> {
        let (lo, hi) = self.object_count;
        let n = rng.gen_range(lo..=hi);
        for _ in 0..MAX_REJECTION_ATTEMPTS {
            let mut objects = Vec::with_capacity(n);
            for _ in 0..n {
                let center = (0..self.dims)
                    .map(|d| uniform(rng, self.position_range[d]))
                    .collect();
                let mut o = SceneObject::at(center);
                if self.groups.contains(Group::Color) {
                    o.rgb = Some([0; 3].map(|_| uniform(rng, self.color_range)));
                }
                if self.groups.contains(Group::Rotation) {
                    o.rotation = Some(PI - rng.gen::<f64>() * 2.0 * PI);
                }
                if self.groups.contains(Group::Confidence) {
                    o.confidence = Some(1.0);
                }
                objects.push(o);
            }
            let light = self.groups.contains(Group::Light).then(|| {
                // Uniform in solid angle over the patch.
                let [s0, s1] = self.elevation_range.map(f64::sin);
                [uniform(rng, self.azimuth_range), uniform(rng, [s0, s1]).asin()]
            });
            if self.separated(&objects) {
                return Ok(SceneCode { objects, light });
            }
        }
        Err(Error::RejectionExhausted(MAX_REJECTION_ATTEMPTS))
    }

    fn separated(&self, objects: &[SceneObject]) -> bool {
        let min_sq = (2.0 * self.radius).powi(2);
        objects.iter().enumerate().all(|(i, a)| {
            objects[i + 1..].iter().all(|b| {
                let d2: f64 = a.center.iter().zip(&b.center).map(|(x, y)| (x - y).powi(2)).sum();
                d2 > min_sq
            })
        })
    }

    pub fn to_kv(&self, kv: &mut KvFile, section: &str) {
        let s = section;
        kv.set(s, "name", &self.name);
        kv.set(s, "dims", self.dims);
        kv.set(s, "dof", self.dof());
        kv.set(s, "min_objects", self.object_count.0);
        kv.set(s, "max_objects", self.object_count.1);
        kv.set(s, "groups", self.groups.to_list());
        kv.set(s, "position_x", format_floats(&self.position_range[0]));
        kv.set(s, "position_y", format_floats(&self.position_range[1]));
        kv.set(s, "position_z", format_floats(&self.position_range[2]));
        kv.set(s, "color_range", format_floats(&self.color_range));
        kv.set(s, "azimuth_range", format_floats(&self.azimuth_range));
        kv.set(s, "elevation_range", format_floats(&self.elevation_range));
        kv.set(s, "radius", format!("{:?}", self.radius));
        kv.set(s, "background", format_floats(&self.background));
        kv.set(s, "default_color", format_floats(&self.default_color));
        kv.set(s, "default_light", format_floats(&self.default_light));
        kv.set(s, "image_size", self.image_size);
        kv.set(s, "extent", format!("{:?}", self.extent));
        for (prefix, cam) in [("camera", &self.camera), ("novel_camera", &self.novel_camera)] {
            kv.set(s, &format!("{prefix}_fov_y"), format!("{:?}", cam.fov_y));
            kv.set(s, &format!("{prefix}_position"), format_floats(&cam.position));
            kv.set(s, &format!("{prefix}_look_at"), format_floats(&cam.look_at));
            kv.set(s, &format!("{prefix}_up"), format_floats(&cam.up));
        }
    }

    /// Read a world from `section`: `name` selects a preset (default from
    /// `image_size`), every other key overrides a field.
    pub fn from_kv(kv: &KvFile, section: &str) -> Result<Self> {
        let s = section;
        let name: String = kv.require(s, "name")?;
        let size = kv.parse_opt::<usize>(s, "image_size")?.unwrap_or(64);
        let mut w = match WorldSpec::preset(&name, size) {
            Ok(w) => w,
            // Custom names start from the generic 3D template.
            Err(_) => {
                let dims = kv.require::<usize>(s, "dims")?;
                let mut w = if dims == 2 { Self::circles(size) } else { Self::spheres(size) };
                w.name = name;
                w
            }
        };
        let floats = |key: &str| -> Result<Option<String>> { Ok(kv.get(s, key).map(str::to_string)) };
        if let Some(d) = kv.parse_opt(s, "dims")? {
            w.dims = d;
        }
        if let Some(v) = kv.parse_opt(s, "min_objects")? {
            w.object_count.0 = v;
        }
        if let Some(v) = kv.parse_opt(s, "max_objects")? {
            w.object_count.1 = v;
        }
        if let Some(g) = kv.get(s, "groups") {
            w.groups = GroupSet::parse_list(g)?;
        }
        for (i, key) in ["position_x", "position_y", "position_z"].iter().enumerate() {
            if let Some(v) = floats(key)? {
                w.position_range[i] = parse_floats(&v)?;
            }
        }
        if let Some(v) = floats("color_range")? {
            w.color_range = parse_floats(&v)?;
        }
        if let Some(v) = floats("azimuth_range")? {
            w.azimuth_range = parse_floats(&v)?;
        }
        if let Some(v) = floats("elevation_range")? {
            w.elevation_range = parse_floats(&v)?;
        }
        if let Some(v) = kv.parse_opt(s, "radius")? {
            w.radius = v;
        }
        if let Some(v) = floats("background")? {
            w.background = parse_floats(&v)?;
        }
        if let Some(v) = floats("default_color")? {
            w.default_color = parse_floats(&v)?;
        }
        if let Some(v) = floats("default_light")? {
            w.default_light = parse_floats(&v)?;
        }
        if let Some(v) = kv.parse_opt(s, "extent")? {
            w.extent = v;
        }
        for prefix in ["camera", "novel_camera"] {
            let cam = if prefix == "camera" { &mut w.camera } else { &mut w.novel_camera };
            cam.image_size = size;
            if let Some(v) = kv.parse_opt(s, &format!("{prefix}_fov_y"))? {
                cam.fov_y = v;
            }
            if let Some(v) = kv.get(s, &format!("{prefix}_position")) {
                cam.position = parse_floats(v)?;
            }
            if let Some(v) = kv.get(s, &format!("{prefix}_look_at")) {
                cam.look_at = parse_floats(v)?;
            }
            if let Some(v) = kv.get(s, &format!("{prefix}_up")) {
                cam.up = parse_floats(v)?;
            }
        }
        if let Some(dof) = kv.parse_opt::<usize>(s, "dof")? {
            if dof != w.dof() {
                return Err(Error::InvalidConfig(format!(
                    "world '{}': dof {dof} disagrees with its groups ({})",
                    w.name,
                    w.dof()
                )));
            }
        }
        w.validate()?;
        Ok(w)
    }
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    r[0] + (r[1] - r[0]) * rng.gen::<f64>()
}
