//! Float image tensors and the geometric/photometric operations used by
//! training augmentation and evaluation preprocessing.

use image::{imageops, imageops::FilterType, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-major (CHW) float image, 3 channels, values nominally in [0, 1]
/// before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut t = Self::zeros(3, h, w);
        let n = w * h;
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                t.data[c * n + i] = px[c] as f32 / 255.0;
            }
        }
        t
    }

    pub fn to_rgb(&self) -> RgbImage {
        let n = self.width * self.height;
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            let px = |c: usize| (self.data[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Decodes PNG/JPEG bytes to RGB.
pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

/// Resizes so the shorter side equals `short_side` (bicubic).
pub fn resize_shortest_side(img: &RgbImage, short_side: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    if w.min(h) == short_side {
        return img.clone();
    }
    let (nw, nh) = if w <= h {
        (
            short_side,
            ((h as f64 * short_side as f64 / w as f64).round() as u32).max(short_side),
        )
    } else {
        (
            ((w as f64 * short_side as f64 / h as f64).round() as u32).max(short_side),
            short_side,
        )
    };
    imageops::resize(img, nw, nh, FilterType::CatmullRom)
}

/// Central `size`×`size` crop; the image must be at least that large.
pub fn center_crop(img: &RgbImage, size: u32) -> Result<RgbImage> {
    let (w, h) = img.dimensions();
    if w < size || h < size {
        return Err(Error::Contract(format!(
            "{w}x{h} image smaller than crop {size}"
        )));
    }
    let x = (w - size) / 2;
    let y = (h - size) / 2;
    Ok(imageops::crop_imm(img, x, y, size, size).to_image())
}

/// Evaluation preprocessing: shortest side to `size`, then central square crop.
pub fn resize_center_crop(img: &RgbImage, size: u32) -> RgbImage {
    let resized = resize_shortest_side(img, size);
    center_crop(&resized, size).expect("shortest side equals crop size")
}

/// Crop box in source pixel coordinates (may be fractional).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

/// Bilinearly samples `src` inside `bx` into an `out`×`out` tensor.
pub fn crop_resize(src: &Tensor3, bx: CropBox, out: usize) -> Tensor3 {
    crop_resize_rect(src, bx, out, out)
}

/// Bilinearly samples `src` inside `bx` into an `out_w`×`out_h` tensor.
pub fn crop_resize_rect(src: &Tensor3, bx: CropBox, out_w: usize, out_h: usize) -> Tensor3 {
    let out = out_w;
    let mut dst = Tensor3::zeros(src.channels, out_h, out_w);
    let sx = bx.w / out_w as f32;
    let sy = bx.h / out_h as f32;
    let maxx = (src.width - 1) as f32;
    let maxy = (src.height - 1) as f32;
    let mut xs = Vec::with_capacity(out);
    for ox in 0..out {
        let fx = (bx.x + (ox as f32 + 0.5) * sx - 0.5).clamp(0.0, maxx);
        let x0 = fx.floor() as usize;
        let x1 = (x0 + 1).min(src.width - 1);
        xs.push((x0, x1, fx - x0 as f32));
    }
    for oy in 0..out_h {
        let fy = (bx.y + (oy as f32 + 0.5) * sy - 0.5).clamp(0.0, maxy);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src.height - 1);
        let ty = fy - y0 as f32;
        for c in 0..src.channels {
            let p = src.plane(c);
            let r0 = &p[y0 * src.width..(y0 + 1) * src.width];
            let r1 = &p[y1 * src.width..(y1 + 1) * src.width];
            let d = &mut dst.plane_mut(c)[oy * out..(oy + 1) * out];
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * tx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * tx;
                d[ox] = top + (bot - top) * ty;
            }
        }
    }
    dst
}

pub fn hflip(t: &mut Tensor3) {
    let w = t.width;
    for row in t.data.chunks_mut(w) {
        row.reverse();
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn grayscale(t: &mut Tensor3) {
    let n = t.width * t.height;
    for i in 0..n {
        let y = luma(t.data[i], t.data[n + i], t.data[2 * n + i]);
        t.data[i] = y;
        t.data[n + i] = y;
        t.data[2 * n + i] = y;
    }
}

pub fn adjust_brightness(t: &mut Tensor3, factor: f32) {
    t.data
        .iter_mut()
        .for_each(|v| *v = (*v * factor).clamp(0.0, 1.0));
}

pub fn adjust_contrast(t: &mut Tensor3, factor: f32) {
    let n = t.width * t.height;
    let mean = (0..n)
        .map(|i| luma(t.data[i], t.data[n + i], t.data[2 * n + i]))
        .sum::<f32>()
        / n as f32;
    t.data
        .iter_mut()
        .for_each(|v| *v = (mean + (*v - mean) * factor).clamp(0.0, 1.0));
}

pub fn adjust_saturation(t: &mut Tensor3, factor: f32) {
    let n = t.width * t.height;
    for i in 0..n {
        let y = luma(t.data[i], t.data[n + i], t.data[2 * n + i]);
        for c in 0..3 {
            let v = &mut t.data[c * n + i];
            *v = (y + (*v - y) * factor).clamp(0.0, 1.0);
        }
    }
}

/// Rotates hue by `shift` turns (in [-0.5, 0.5]).
pub fn adjust_hue(t: &mut Tensor3, shift: f32) {
    if shift == 0.0 {
        return;
    }
    let n = t.width * t.height;
    for i in 0..n {
        let (h, s, v) = rgb_to_hsv(t.data[i], t.data[n + i], t.data[2 * n + i]);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        t.data[i] = r;
        t.data[n + i] = g;
        t.data[2 * n + i] = b;
    }
}

pub fn solarize(t: &mut Tensor3, threshold: f32) {
    t.data.iter_mut().for_each(|v| {
        if *v >= threshold {
            *v = 1.0 - *v
        }
    });
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(t: &mut Tensor3, sigma: f32) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.into_iter().map(|k| k / norm).collect();
    let (w, h) = (t.width as isize, t.height as isize);
    let mut tmp = vec![0.0f32; (w * h) as usize];
    for c in 0..t.channels {
        let p = t.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = (x + k as isize - radius).clamp(0, w - 1);
                    acc += kv * p[(y * w + xx) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = (y + k as isize - radius).clamp(0, h - 1);
                    acc += kv * tmp[(yy * w + x) as usize];
                }
                p[(y * w + x) as usize] = acc;
            }
        }
    }
}

/// Per-channel mean/std normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    /// ImageNet statistics.
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn apply(&self, t: &mut Tensor3) {
        for c in 0..3 {
            let (m, s) = (self.mean[c], self.std[c]);
            t.plane_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }

    /// Closed range a normalized value of channel `c` can take.
    pub fn range(&self, c: usize) -> (f32, f32) {
        (
            -self.mean[c] / self.std[c],
            (1.0 - self.mean[c]) / self.std[c],
        )
    }
}

pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
