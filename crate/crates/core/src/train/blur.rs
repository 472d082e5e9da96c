//! Separable Gaussian blur with reflect padding, usable on the tape.

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

pub const DEFAULT_KERNEL: usize = 9;

/// Normalised taps of an odd-sized Gaussian.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size % 2 == 0 || size == 0 {
        return Err(Error::InvalidConfig(format!("blur kernel size must be odd, got {size}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("blur sigma must be positive, got {sigma}")));
    }
    let half = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / s).collect())
}

/// Mirror an index into `0..n` without repeating the edge sample.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Blur one `h x w` plane along rows then columns. With `adjoint` the
/// transposed operator is applied instead, which is the backward pass.
fn blur_plane(src: &[f64], h: usize, w: usize, taps: &[f64], adjoint: bool) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let v = src[y * w + x];
                for (t, g) in taps.iter().enumerate() {
                    let off = t as isize - r;
                    let (yy, xx) = if along_x {
                        (y, reflect(x as isize + off, w))
                    } else {
                        (reflect(y as isize + off, h), x)
                    };
                    if adjoint {
                        out[yy * w + xx] += g * v;
                    } else {
                        out[y * w + x] += g * src[yy * w + xx];
                    }
                }
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

pub fn gaussian_blur(image: &Image, kernel_size: usize, sigma: f64) -> Result<Image> {
    let taps = gaussian_kernel(kernel_size, sigma)?;
    let (h, w) = (image.height(), image.width());
    let chw = image.to_chw();
    let mut out = Vec::with_capacity(chw.len());
    for c in 0..CHANNELS {
        out.extend(blur_plane(&chw[c * h * w..(c + 1) * h * w], h, w, &taps, false));
    }
    Image::from_chw(h, w, &out)
}

struct BlurOp {
    taps: Vec<f64>,
}

fn map_planes(t: &Tensor, taps: &[f64], adjoint: bool) -> Result<Tensor> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = Vec::with_capacity(t.len());
    for plane in t.data().chunks_exact(h * w) {
        out.extend(blur_plane(plane, h, w, taps, adjoint));
    }
    Tensor::new(s.to_vec(), out)
}

impl CustomOp for BlurOp {
    fn name(&self) -> &'static str {
        "gaussian_blur"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(map_planes(grad_out, &self.taps, true)?)])
    }
}

/// Blur every `H x W` plane of a `[..., H, W]` tensor on the tape.
pub fn blur_var(tape: &mut Tape, x: Var, kernel_size: usize, sigma: f64) -> Result<Var> {
    let taps = gaussian_kernel(kernel_size, sigma)?;
    if tape.value(x).rank() < 2 {
        return Err(Error::ShapeMismatch("blur needs at least two dimensions".into()));
    }
    let out = map_planes(tape.value(x), &taps, false)?;
    tape.custom(&[x], out, Box::new(BlurOp { taps }))
}
