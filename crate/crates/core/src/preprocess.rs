//! Face preprocessing: bounding-box expansion, crop and resample, masking.
//!
//! A detected face box is expanded by a small factor (default 13/10) to build
//! the masked reference crop used for concept extraction, and by a large
//! factor (default 3) to build the unmasked denoising target.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// An RGB(ish) image with `f32` samples in `[0, 1]`, stored height-major,
/// then width, then channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "image buffer has {} samples, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { width, height, channels, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Pixels as a `(height * width) x channels` matrix.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.width * self.height,
            self.channels,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("image buffer matches its shape")
    }

    /// Inverse of [`Image::to_matrix`]; values are clamped to `[0, 1]`.
    pub fn from_matrix(width: usize, height: usize, m: &Matrix) -> Result<Self> {
        if m.rows() != width * height {
            return Err(Error::invalid("matrix rows do not match image size"));
        }
        let data = m.data().iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
        Self::new(width, height, m.cols(), data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
        Self::new(w as usize, h as usize, 3, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            n => return Err(Error::invalid(format!("cannot write a {n}-channel PNG"))),
        };
        image::save_buffer_with_format(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )?;
        Ok(())
    }
}

/// Face box in pixel coordinates; `x_max`/`y_max` are exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: i64,
    pub y_min: i64,
    pub x_max: i64,
    pub y_max: i64,
}

impl BoundingBox {
    pub fn new(x_min: i64, y_min: i64, x_max: i64, y_max: i64) -> Result<Self> {
        let b = Self { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::invalid(format!("degenerate bounding box {self}")));
        }
        Ok(())
    }

    pub fn width(&self) -> i64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> i64 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min && self.y_min <= other.y_min && self.x_max >= other.x_max && self.y_max >= other.y_max
    }

    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.x_min >= 0 && self.y_min >= 0 && self.x_max <= width as i64 && self.y_max <= height as i64
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

impl FromStr for BoundingBox {
    type Err = Error;

    /// Parses `x0,y0,x1,y1`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<i64> = s
            .split(',')
            .map(|p| p.trim().parse::<i64>().map_err(|_| Error::invalid(format!("bad bbox component {p:?}"))))
            .collect::<Result<_>>()?;
        match parts.as_slice() {
            &[a, b, c, d] => Self::new(a, b, c, d),
            _ => Err(Error::invalid(format!("bbox needs four components, got {s:?}"))),
        }
    }
}

/// A positive rational expansion factor `num / den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scale {
    num: i64,
    den: i64,
}

impl Scale {
    pub fn new(num: i64, den: i64) -> Result<Self> {
        if den <= 0 || num < den {
            return Err(Error::invalid(format!("scale {num}/{den} must be >= 1")));
        }
        let g = gcd(num, den);
        Ok(Self { num: num / g, den: den / g })
    }

    pub fn integer(n: i64) -> Result<Self> {
        Self::new(n, 1)
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn num(&self) -> i64 {
        self.num
    }

    pub fn den(&self) -> i64 {
        self.den
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs().max(1)
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    /// Accepts `3`, `1.3` (an exact decimal) or `13/10`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::invalid(format!("bad scale {s:?}"));
        if let Some((n, d)) = s.split_once('/') {
            return Self::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?);
        }
        match s.split_once('.') {
            None => Self::integer(s.parse().map_err(|_| bad())?),
            Some((int, frac)) => {
                if frac.is_empty() || frac.len() > 9 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(bad());
                }
                let den = 10i64.pow(frac.len() as u32);
                let int: i64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
                let frac: i64 = frac.parse().map_err(|_| bad())?;
                Self::new(int * den + frac, den)
            }
        }
    }
}

/// Expand `bbox` about its center by `scale` on both axes, then clamp to the
/// image. Coordinates are computed exactly; the expanded box is rounded
/// outward to whole pixels.
pub fn expand_bbox(bbox: BoundingBox, scale: Scale, image_dims: (usize, usize)) -> Result<BoundingBox> {
    bbox.validate()?;
    let expanded = expand_unclamped(bbox, scale);
    let (w, h) = (image_dims.0 as i64, image_dims.1 as i64);
    let clamped = BoundingBox {
        x_min: expanded.x_min.clamp(0, w),
        y_min: expanded.y_min.clamp(0, h),
        x_max: expanded.x_max.clamp(0, w),
        y_max: expanded.y_max.clamp(0, h),
    };
    clamped.validate().map_err(|_| Error::invalid(format!("bbox {bbox} lies outside the {w}x{h} image")))?;
    Ok(clamped)
}

/// Center-preserving expansion without clamping.
pub fn expand_unclamped(bbox: BoundingBox, scale: Scale) -> BoundingBox {
    let (num, den) = (scale.num, scale.den);
    // Work in units of 1 / (2 * den) pixels.
    let axis = |lo: i64, hi: i64| {
        let center2 = (lo + hi) * den;
        let extent = (hi - lo) * num;
        let q = 2 * den;
        ((center2 - extent).div_euclid(q), -(-(center2 + extent)).div_euclid(q))
    };
    let (x_min, x_max) = axis(bbox.x_min, bbox.x_max);
    let (y_min, y_max) = axis(bbox.y_min, bbox.y_max);
    BoundingBox { x_min, y_min, x_max, y_max }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Resample {
    #[default]
    Bilinear,
    Nearest,
}

/// A preprocessed face crop.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceRegion {
    pub pixels: Image,
    pub source_bbox: BoundingBox,
    pub scale: Scale,
    pub masked: bool,
}

/// Crop `bbox` out of `image` and resample it to `output_size` squared.
pub fn crop_resize(image: &Image, bbox: BoundingBox, output_size: usize, resample: Resample) -> Result<FaceRegion> {
    bbox.validate()?;
    if !bbox.inside(image.width(), image.height()) {
        return Err(Error::invalid(format!(
            "bbox {bbox} is outside the {}x{} image",
            image.width(),
            image.height()
        )));
    }
    if output_size == 0 {
        return Err(Error::invalid("output size must be positive"));
    }
    let (bw, bh) = (bbox.width() as usize, bbox.height() as usize);
    let (x0, y0) = (bbox.x_min as usize, bbox.y_min as usize);
    let channels = image.channels();
    let sx = bw as f64 / output_size as f64;
    let sy = bh as f64 / output_size as f64;
    let pixels = match resample {
        Resample::Nearest => Image::from_fn(output_size, output_size, channels, |ox, oy, c| {
            let x = (((ox as f64 + 0.5) * sx).floor() as usize).min(bw - 1);
            let y = (((oy as f64 + 0.5) * sy).floor() as usize).min(bh - 1);
            image.get(x0 + x, y0 + y, c)
        }),
        Resample::Bilinear => {
            let coord = |o: usize, s: f64, n: usize| {
                let p = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
                let lo = p.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                (lo, hi, p - lo as f64)
            };
            Image::from_fn(output_size, output_size, channels, |ox, oy, c| {
                let (xl, xh, fx) = coord(ox, sx, bw);
                let (yl, yh, fy) = coord(oy, sy, bh);
                let at = |x: usize, y: usize| f64::from(image.get(x0 + x, y0 + y, c));
                let top = lerp(at(xl, yl), at(xh, yl), fx);
                let bottom = lerp(at(xl, yh), at(xh, yh), fx);
                lerp(top, bottom, fy) as f32
            })
        }
    };
    Ok(FaceRegion { pixels, source_bbox: bbox, scale: Scale { num: 1, den: 1 }, masked: false })
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

/// Resample a whole image to `size` squared.
pub fn resize_image(image: &Image, size: usize, resample: Resample) -> Result<Image> {
    if image.width() == size && image.height() == size {
        return Ok(image.clone());
    }
    let full = BoundingBox::new(0, 0, image.width() as i64, image.height() as i64)?;
    Ok(crop_resize(image, full, size, resample)?.pixels)
}

/// A binary mask; `true` keeps the pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != width * height {
            return Err(Error::invalid("mask buffer does not match its dimensions"));
        }
        Ok(Self { width, height, keep })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let keep = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, keep }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn keeps(&self, x: usize, y: usize) -> bool {
        self.keep[y * self.width + x]
    }
}

/// Zero every pixel where the mask is off.
pub fn apply_face_mask(region: &FaceRegion, mask: &Mask) -> Result<FaceRegion> {
    let px = &region.pixels;
    if mask.width != px.width() || mask.height != px.height() {
        return Err(Error::invalid(format!(
            "mask is {}x{} but region is {}x{}",
            mask.width,
            mask.height,
            px.width(),
            px.height()
        )));
    }
    let mut pixels = px.clone();
    for y in 0..px.height() {
        for x in 0..px.width() {
            if !mask.keeps(x, y) {
                for c in 0..px.channels() {
                    pixels.set(x, y, c, 0.0);
                }
            }
        }
    }
    Ok(FaceRegion { pixels, masked: true, ..region.clone() })
}

/// Supplies a face box for an image.
pub trait FaceDetector {
    fn detect(&self, image: &Image) -> Result<Option<BoundingBox>>;
}

/// A detector that always reports a caller-supplied box.
#[derive(Clone, Copy, Debug)]
pub struct FixedBox(pub BoundingBox);

impl FaceDetector for FixedBox {
    fn detect(&self, _image: &Image) -> Result<Option<BoundingBox>> {
        Ok(Some(self.0))
    }
}

/// Supplies a face segmentation mask for a crop.
pub trait FaceMasker {
    fn mask(&self, region: &FaceRegion) -> Result<Mask>;
}

/// Keeps an axis-aligned ellipse around the original (unexpanded) face box,
/// which sits centered in the crop.
#[derive(Clone, Copy, Debug, Default)]
pub struct EllipseMasker;

impl FaceMasker for EllipseMasker {
    fn mask(&self, region: &FaceRegion) -> Result<Mask> {
        let w = region.pixels.width() as f64;
        let h = region.pixels.height() as f64;
        let s = region.scale.as_f64();
        let rx = (0.5 * w / s).max(0.5);
        let ry = (0.6 * h / s).min(0.5 * h).max(0.5);
        let (cx, cy) = (0.5 * w, 0.5 * h);
        Ok(Mask::from_fn(region.pixels.width(), region.pixels.height(), |x, y| {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            dx * dx + dy * dy <= 1.0
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub reference_scale: Scale,
    pub target_scale: Scale,
    pub output_size: usize,
    pub apply_mask_to_reference: bool,
    pub resample: Resample,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            reference_scale: Scale { num: 13, den: 10 },
            target_scale: Scale { num: 3, den: 1 },
            output_size: 16,
            apply_mask_to_reference: true,
            resample: Resample::Bilinear,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_size == 0 {
            return Err(Error::invalid("output_size must be positive"));
        }
        Ok(())
    }
}

fn expanded_crop(image: &Image, face_bbox: BoundingBox, scale: Scale, cfg: &PreprocessConfig) -> Result<FaceRegion> {
    cfg.validate()?;
    let bbox = expand_bbox(face_bbox, scale, (image.width(), image.height()))?;
    let mut region = crop_resize(image, bbox, cfg.output_size, cfg.resample)?;
    region.scale = scale;
    Ok(region)
}

/// The masked reference crop used for concept extraction.
pub fn prepare_reference(
    image: &Image,
    face_bbox: BoundingBox,
    cfg: &PreprocessConfig,
    masker: &dyn FaceMasker,
) -> Result<FaceRegion> {
    let region = expanded_crop(image, face_bbox, cfg.reference_scale, cfg)?;
    if cfg.apply_mask_to_reference {
        let mask = masker.mask(&region)?;
        apply_face_mask(&region, &mask)
    } else {
        Ok(region)
    }
}

/// The unmasked wide crop used as the denoising target.
pub fn prepare_target(image: &Image, face_bbox: BoundingBox, cfg: &PreprocessConfig) -> Result<FaceRegion> {
    expanded_crop(image, face_bbox, cfg.target_scale, cfg)
}
