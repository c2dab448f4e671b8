//! Deterministic image loading and preprocessing: grayscale-to-RGB
//! replication, bicubic resize, per-channel normalisation and training-time
//! augmentation (horizontal flip, small rotation).

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Standard ImageNet channel statistics.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Bicubic kernel parameter.
pub const BICUBIC_A: f64 = -0.5;

/// Maximum rotation magnitude used by [`augment`], in degrees.
pub const MAX_ROTATION_DEG: f64 = 10.0;

/// Channel-major float image, `channels × height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width || channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!("image {channels}×{height}×{width} with {} values", data.len())));
        }
        Ok(ImageTensor { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        ImageTensor { channels, height, width, data: vec![value; channels * height * width] }
    }

    /// Single gray plane replicated into three channels, scaled by 1/255.
    pub fn from_gray_u8(height: usize, width: usize, pixels: &[u8]) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::shape(format!("{height}×{width} gray image with {} pixels", pixels.len())));
        }
        let plane: Vec<f32> = pixels.iter().map(|&p| p as f32 / 255.0).collect();
        let mut data = Vec::with_capacity(3 * plane.len());
        for _ in 0..3 {
            data.extend_from_slice(&plane);
        }
        Ok(ImageTensor { channels: 3, height, width, data })
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// ITU-R 601 luma of an 8-bit RGB triple, in 0..=255.
pub fn luma(r: u8, g: u8, b: u8) -> f32 {
    (299.0 * r as f32 + 587.0 * g as f32 + 114.0 * b as f32) / 1000.0
}

/// Decodes an image file into a 3-channel tensor in [0, 1].
///
/// Grayscale is replicated across channels; colour input is first reduced to
/// luma so the three channels are always identical.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?;
    decode_dynamic(img)
}

/// Same as [`load_image`] for an in-memory encoded buffer.
pub fn load_image_bytes(bytes: &[u8]) -> Result<ImageTensor> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Data(format!("cannot decode image: {e}")))?;
    decode_dynamic(img)
}

fn decode_dynamic(img: image::DynamicImage) -> Result<ImageTensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray: Vec<u8> = match img {
        image::DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        other => {
            let rgb = other.to_rgb8();
            rgb.pixels().map(|p| luma(p[0], p[1], p[2]).round().clamp(0.0, 255.0) as u8).collect()
        }
    };
    ImageTensor::from_gray_u8(h, w, &gray)
}

/// Cubic convolution kernel with parameter `a`.
pub fn cubic_weight(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps and weights for every output coordinate along one axis.
/// Pixel centres are aligned (`src = (dst + 0.5)·scale − 0.5`) and indices
/// are clamped at the edges.
fn axis_taps(src_len: usize, dst_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let base = center.floor();
            let mut idx = [0usize; 4];
            let mut w = [0f64; 4];
            for k in 0..4 {
                let i = base + k as f64 - 1.0;
                w[k] = cubic_weight(center - i, BICUBIC_A);
                idx[k] = i.clamp(0.0, (src_len - 1) as f64) as usize;
            }
            (idx, w)
        })
        .collect()
}

/// Separable bicubic resize (a = −0.5, clamped edges), output clipped to
/// [0, 1].
pub fn resize_bicubic(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if img.height < 4 || img.width < 4 {
        return Err(Error::Data(format!(
            "bicubic resize needs a source of at least 4×4, got {}×{}",
            img.height, img.width
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Data("bicubic resize to an empty image".into()));
    }
    let tx = axis_taps(img.width, out_w);
    let ty = axis_taps(img.height, out_h);
    let mut out = Vec::with_capacity(img.channels * out_h * out_w);
    let mut rows = vec![0f64; img.height * out_w];
    for c in 0..img.channels {
        let plane = img.plane(c);
        for y in 0..img.height {
            let src = &plane[y * img.width..(y + 1) * img.width];
            for (x, (idx, w)) in tx.iter().enumerate() {
                rows[y * out_w + x] = (0..4).map(|k| w[k] * src[idx[k]] as f64).sum();
            }
        }
        for (idx, w) in &ty {
            for x in 0..out_w {
                let v: f64 = (0..4).map(|k| w[k] * rows[idx[k] * out_w + x]).sum();
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    ImageTensor::new(img.channels, out_h, out_w, out)
}

/// `(x − mean_c) / std_c` per channel.
pub fn normalize(img: &ImageTensor, mean: &[f32], std: &[f32]) -> Result<ImageTensor> {
    if mean.len() != img.channels || std.len() != img.channels {
        return Err(Error::shape(format!(
            "normalize: {} channels, {} means, {} stds",
            img.channels,
            mean.len(),
            std.len()
        )));
    }
    if let Some(bad) = std.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Data(format!("normalize: standard deviation {bad} must be positive")));
    }
    let n = img.height * img.width;
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / n;
            (v - mean[c]) / std[c]
        })
        .collect();
    ImageTensor::new(img.channels, img.height, img.width, data)
}

/// Left-right mirror.
pub fn hflip(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            let row = (c * img.height + y) * img.width;
            out.data[row..row + img.width].reverse();
        }
    }
    out
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Counter-clockwise rotation (as displayed) about the image centre with
/// bilinear resampling; samples falling outside the source are 0.
pub fn rotate(img: &ImageTensor, angle_deg: f64) -> ImageTensor {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let (h, w) = (img.height, img.width);
    let mut out = ImageTensor::filled(img.channels, h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = snap(dx * cos - dy * sin + cx);
            let sy = snap(dx * sin + dy * cos + cy);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            for c in 0..img.channels {
                let plane = img.plane(c);
                let sample = |yy: f64, xx: f64| -> f64 {
                    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                        0.0
                    } else {
                        plane[yy as usize * w + xx as usize] as f64
                    }
                };
                let mut v = 0.0;
                for (oy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                    for (ox, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                        let wgt = wy * wx;
                        if wgt != 0.0 {
                            v += wgt * sample(y0 + oy, x0 + ox);
                        }
                    }
                }
                out.data[(c * h + y) * w + x] = v as f32;
            }
        }
    }
    out
}

/// A concrete draw of the training augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub angle_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { flip: false, angle_deg: 0.0 };

    /// Flip with p = 0.5; angle ~ U(−10°, +10°).
    pub fn sample(rng: &mut impl Rng) -> Self {
        let flip = rng.random_bool(0.5);
        let angle_deg = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
        AugmentParams { flip, angle_deg }
    }

    pub fn apply(&self, img: &ImageTensor) -> ImageTensor {
        let img = if self.flip { hflip(img) } else { img.clone() };
        if self.angle_deg == 0.0 {
            img
        } else {
            rotate(&img, self.angle_deg)
        }
    }
}

/// Random flip and small rotation. Apply to the training split only.
pub fn augment(img: &ImageTensor, rng: &mut impl Rng) -> ImageTensor {
    AugmentParams::sample(rng).apply(img)
}
