//! RGB float images in `[0, 1]`, stored row-major HWC.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "image {height}x{width}x{CHANNELS} needs {} values, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Planar `[3, H, W]` layout used by the networks.
    pub fn to_chw(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; n * CHANNELS];
        for (p, px) in self.data.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                out[c * n + p] = px[c];
            }
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, chw: &[f64]) -> Result<Self> {
        let n = height * width;
        if chw.len() != n * CHANNELS {
            return Err(Error::ShapeMismatch(format!("chw buffer of {} for {height}x{width}", chw.len())));
        }
        let mut data = vec![0.0; n * CHANNELS];
        for p in 0..n {
            for c in 0..CHANNELS {
                data[p * CHANNELS + c] = chw[c * n + p];
            }
        }
        Ok(Self { height, width, data })
    }

    /// Stack images into a `[B, 3, H, W]` tensor.
    pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
        let Some(first) = images.first() else {
            return Err(Error::ShapeMismatch("empty image batch".into()));
        };
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if !im.same_shape(first) {
                return Err(Error::ShapeMismatch("images in a batch differ in size".into()));
            }
            data.extend(im.to_chw());
        }
        Tensor::new(vec![images.len(), CHANNELS, first.height, first.width], data)
    }

    /// 8-bit RGB bytes, values clamped to `[0, 1]` and rounded.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
        let mut writer = enc.write_header().map_err(to_io)?;
        writer.write_image_data(&self.to_rgb8()).map_err(to_io)?;
        writer.finish().map_err(to_io)
    }

    /// Place images next to each other, top-aligned, on a black canvas.
    pub fn hstack(images: &[&Image]) -> Image {
        let height = images.iter().map(|i| i.height).max().unwrap_or(0);
        let width: usize = images.iter().map(|i| i.width).sum();
        let mut out = Image::filled(height, width, [0.0; 3]);
        let mut x0 = 0;
        for im in images {
            for y in 0..im.height {
                let src = &im.data[y * im.width * CHANNELS..(y + 1) * im.width * CHANNELS];
                let dst = (y * width + x0) * CHANNELS;
                out.data[dst..dst + src.len()].copy_from_slice(src);
            }
            x0 += im.width;
        }
        out
    }
}

/// Decode an 8-bit RGB or RGBA PNG into an image.
pub fn load_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let bad = |msg: String| Error::format(path.display().to_string(), 0, msg);
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(bad(format!("unsupported color type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * CHANNELS);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            for c in 0..CHANNELS {
                data.push(row[x * stride + c] as f64 / 255.0);
            }
        }
    }
    Image::new(h, w, data)
}
