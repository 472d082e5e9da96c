//! Generated datasets and their on-disk layout.
//!
//! A dataset directory holds `meta.txt` (world spec, seed, split sizes),
//! `images.bin` (magic `CURIOIMG`, then `u32` count, height, width and
//! channels, then raw little-endian `f64` HWC frames), `labels.jsonl` (one
//! scene per line) and `preview/NNNN.png`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::WorldSpec;
use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::scene::SceneCode;

const IMAGES_MAGIC: &[u8; 8] = b"CURIOIMG";

/// Contiguous index ranges: train first, then validation, then test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: std::ops::Range<usize>,
    pub val: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
}

/// Half for training and a quarter each for validation and test.
pub fn split_sizes(n_total: usize) -> (usize, usize, usize) {
    let held = (n_total / 4).max(1);
    (n_total - 2 * held, held, held)
}

impl Split {
    pub fn for_total(n_total: usize) -> Self {
        let (tr, va, _) = split_sizes(n_total);
        Self {
            train: 0..tr,
            val: tr..tr + va,
            test: tr + va..n_total,
        }
    }
}

/// Images plus ground-truth labels behind a per-scene capability mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub world: WorldSpec,
    pub seed: u64,
    pub images: Vec<Image>,
    pub split: Split,
    labels: Vec<SceneCode>,
    visible: Vec<bool>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Ground truth of scene `i`, if this view may read it.
    pub fn label(&self, i: usize) -> Result<&SceneCode> {
        if self.visible.get(i).copied().unwrap_or(false) {
            Ok(&self.labels[i])
        } else {
            Err(Error::Capability)
        }
    }

    pub fn label_visible(&self, i: usize) -> bool {
        self.visible.get(i).copied().unwrap_or(false)
    }

    pub fn visible_label_count(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }

    /// All labels of `range`, failing if any is hidden.
    pub fn labels_in(&self, range: std::ops::Range<usize>) -> Result<Vec<&SceneCode>> {
        range.map(|i| self.label(i)).collect()
    }

    /// A copy whose labels are all hidden.
    pub fn without_labels(&self) -> Dataset {
        let mut d = self.clone();
        d.visible.iter_mut().for_each(|v| *v = false);
        d.labels.clear();
        d.labels.resize(self.images.len(), SceneCode::default());
        d
    }

    /// A copy where only the first `round(frac * n_train)` training labels
    /// (at least one) remain visible.
    pub fn with_label_fraction(&self, frac: f64) -> Result<Dataset> {
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(Error::InvalidConfig(format!("supervision fraction {frac} outside (0, 1]")));
        }
        let n_train = self.split.train.len();
        let keep = ((frac * n_train as f64).round() as usize).clamp(1, n_train);
        let mut d = self.clone();
        for (i, v) in d.visible.iter_mut().enumerate() {
            *v = *v && self.split.train.start <= i && i < self.split.train.start + keep;
        }
        for i in 0..d.labels.len() {
            if !d.visible[i] {
                d.labels[i] = SceneCode::default();
            }
        }
        Ok(d)
    }
}

/// Deterministic generator for scene `index` of a dataset seeded with `seed`.
pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn generate_dataset(world: &WorldSpec, n_total: usize, seed: u64) -> Result<Dataset> {
    world.validate()?;
    if n_total < 3 {
        return Err(Error::InvalidConfig(format!("need at least 3 scenes, got {n_total}")));
    }
    let pairs: Vec<(SceneCode, Image)> = (0..n_total)
        .into_par_iter()
        .map(|i| {
            let s = world.sample_scene(&mut scene_rng(seed, i))?;
            let im = world.render(&s)?;
            Ok((s, im))
        })
        .collect::<Result<_>>()?;
    let (labels, images): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(Dataset {
        world: world.clone(),
        seed,
        images,
        split: Split::for_total(n_total),
        visible: vec![true; n_total],
        labels,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write `d` under `dir`, which is created if needed. Hidden labels are not
/// written.
pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("preview")).map_err(|e| Error::io(dir, e))?;

    let mut meta = KvFile::new();
    meta.set("", "format", "curio-dataset-1");
    meta.set("", "seed", d.seed);
    meta.set("", "n_total", d.len());
    meta.set("", "n_train", d.split.train.len());
    meta.set("", "n_val", d.split.val.len());
    meta.set("", "n_test", d.split.test.len());
    d.world.to_kv(&mut meta, "world");
    write_file(&dir.join("meta.txt"), meta.to_text().as_bytes())?;

    let size = d.world.image_size;
    let mut buf = Vec::with_capacity(24 + d.len() * size * size * CHANNELS * 8);
    buf.extend_from_slice(IMAGES_MAGIC);
    for v in [d.len(), size, size, CHANNELS] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for im in &d.images {
        for v in im.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_file(&dir.join("images.bin"), &buf)?;

    if d.visible.iter().all(|v| *v) {
        let mut text = String::new();
        for s in &d.labels {
            text.push_str(&s.to_json());
            text.push('\n');
        }
        write_file(&dir.join("labels.jsonl"), text.as_bytes())?;
    }

    d.images
        .par_iter()
        .enumerate()
        .try_for_each(|(i, im)| im.save_png(&dir.join("preview").join(format!("{i:04}.png"))))
}

/// Load a dataset directory. With `with_labels == false` the label file is
/// never opened and every label access fails with a capability error.
pub fn load_dataset(dir: &Path, with_labels: bool) -> Result<Dataset> {
    let meta_path = dir.join("meta.txt");
    let meta = KvFile::load(&meta_path)?;
    let world = WorldSpec::from_kv(&meta, "world")?;
    let seed: u64 = meta.require("", "seed")?;
    let n_total: usize = meta.require("", "n_total")?;

    let img_path = dir.join("images.bin");
    let mut file = fs::File::open(&img_path).map_err(|e| Error::io(&img_path, e))?;
    let mut bytes = Vec::new();
    std::io::Read::read_to_end(&mut file, &mut bytes).map_err(|e| Error::io(&img_path, e))?;
    let images = decode_images(&bytes, &world, n_total)?;

    let (labels, visible) = if with_labels {
        let lab_path = dir.join("labels.jsonl");
        let text = fs::read_to_string(&lab_path).map_err(|e| Error::io(&lab_path, e))?;
        (decode_labels(&text, n_total)?, vec![true; n_total])
    } else {
        (vec![SceneCode::default(); n_total], vec![false; n_total])
    };

    let split = Split::for_total(n_total);
    let stored = (meta.require::<usize>("", "n_train")?, meta.require::<usize>("", "n_val")?);
    if stored != (split.train.len(), split.val.len()) {
        return Err(Error::format("meta.txt", 0, "split sizes disagree with n_total"));
    }
    Ok(Dataset {
        world,
        seed,
        images,
        split,
        labels,
        visible,
    })
}

fn decode_images(bytes: &[u8], world: &WorldSpec, n_total: usize) -> Result<Vec<Image>> {
    let bad = |i: usize, m: &str| Error::format("images.bin", i, m);
    if bytes.len() < 24 || &bytes[..8] != IMAGES_MAGIC {
        return Err(bad(0, "missing CURIOIMG header"));
    }
    let u = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().unwrap()) as usize;
    let (n, h, w, c) = (u(0), u(1), u(2), u(3));
    if n != n_total || h != world.image_size || w != world.image_size || c != CHANNELS {
        return Err(bad(0, "header disagrees with meta.txt"));
    }
    let frame = h * w * c * 8;
    (0..n)
        .map(|i| {
            let start = 24 + i * frame;
            let chunk = bytes.get(start..start + frame).ok_or_else(|| bad(i, "truncated frame"))?;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Image::new(h, w, data)
        })
        .collect()
}

fn decode_labels(text: &str, n_total: usize) -> Result<Vec<SceneCode>> {
    let mut out = Vec::with_capacity(n_total);
    for (i, line) in text.lines().enumerate() {
        let s = SceneCode::from_json(line).map_err(|e| Error::format("labels.jsonl", i, e.to_string()))?;
        out.push(s);
    }
    if out.len() != n_total {
        return Err(Error::format(
            "labels.jsonl",
            out.len(),
            format!("expected {n_total} records, found {}", out.len()),
        ));
    }
    Ok(out)
}
