//! Training-sample composition: background-removed subject images
//! concatenated side by side without overlap, aligned per-subject masks,
//! synthetic class-prior composites, and geometry-consistent augmentations.
//!
//! Subjects are procedurally drawn colored shapes so that identity and
//! co-occurrence are measurable by color/shape oracles downstream.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub type Rgb = [f64; 3];

pub const WHITE: Rgb = [1.0, 1.0, 1.0];

// ---------------------------------------------------------------------------
// Image / Mask primitives
// ---------------------------------------------------------------------------

/// RGB image with values in [0, 1], row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new_fill(h: usize, w: usize, fill: Rgb) -> Image {
        let mut data = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            data.extend_from_slice(&fill);
        }
        Image { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize) -> Rgb {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: Rgb) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn hflip(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                out.set(y, x, self.get(y, self.w - 1 - x));
            }
        }
        out
    }

    pub fn resize_nearest(&self, h: usize, w: usize) -> Image {
        let mut out = Image::new_fill(h, w, [0.0; 3]);
        for y in 0..h {
            let sy = (y * self.h) / h;
            for x in 0..w {
                let sx = (x * self.w) / w;
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }

    /// To a [H, W, 3] tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.h, self.w, 3], self.data.clone()).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        if t.shape().len() != 3 || t.shape()[2] != 3 {
            return Err(Error::invalid(format!("expected [H, W, 3], got {:?}", t.shape())));
        }
        Ok(Image { h: t.shape()[0], w: t.shape()[1], data: t.data().to_vec() })
    }
}

/// Binary mask aligned with an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Mask {
        Mask { h, w, data: vec![false; h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count_ones() == 0
    }

    pub fn hflip(&self) -> Mask {
        let mut out = self.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                out.set(y, x, self.get(y, self.w - 1 - x));
            }
        }
        out
    }

    pub fn resize_nearest(&self, h: usize, w: usize) -> Mask {
        let mut out = Mask::new(h, w);
        for y in 0..h {
            let sy = (y * self.h) / h;
            for x in 0..w {
                let sx = (x * self.w) / w;
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }

    pub fn overlap_count(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a && b).count()
    }

    /// As a [H, W] tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.h, self.w],
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap()
    }
}

// ---------------------------------------------------------------------------
// Synthetic subject classes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassShape {
    Circle,
    Square,
    Triangle,
    Rect,
    Ring,
    Diamond,
}

/// Color/shape signature of a synthetic class, also used by the
/// co-occurrence oracle.
#[derive(Debug, Clone)]
pub struct ClassSpec {
    pub name: &'static str,
    pub shape: ClassShape,
    pub color: Rgb,
}

const CLASSES: &[ClassSpec] = &[
    ClassSpec { name: "cat", shape: ClassShape::Circle, color: [0.85, 0.10, 0.10] },
    ClassSpec { name: "dog", shape: ClassShape::Square, color: [0.10, 0.20, 0.85] },
    ClassSpec { name: "bird", shape: ClassShape::Triangle, color: [0.10, 0.75, 0.15] },
    ClassSpec { name: "car", shape: ClassShape::Rect, color: [0.90, 0.78, 0.10] },
    ClassSpec { name: "plush", shape: ClassShape::Ring, color: [0.80, 0.10, 0.80] },
    ClassSpec { name: "lamp", shape: ClassShape::Diamond, color: [0.10, 0.80, 0.80] },
];

pub fn known_classes() -> Vec<&'static str> {
    CLASSES.iter().map(|c| c.name).collect()
}

pub fn class_spec(name: &str) -> Result<&'static ClassSpec> {
    CLASSES
        .iter()
        .find(|c| c.name == name)
        .ok_or_else(|| Error::invalid(format!("unknown class '{name}'")))
}

fn inside_shape(shape: ClassShape, dy: f64, dx: f64, r: f64) -> bool {
    match shape {
        ClassShape::Circle => dy * dy + dx * dx <= r * r,
        ClassShape::Square => dy.abs() <= r * 0.9 && dx.abs() <= r * 0.9,
        ClassShape::Triangle => {
            let t = (dy + r) / (2.0 * r); // 0 at top, 1 at bottom
            (0.0..=1.0).contains(&t) && dx.abs() <= r * t
        }
        ClassShape::Rect => dy.abs() <= r * 0.55 && dx.abs() <= r * 1.15,
        ClassShape::Ring => {
            let d2 = dy * dy + dx * dx;
            d2 <= r * r && d2 >= (r * 0.45) * (r * 0.45)
        }
        ClassShape::Diamond => dy.abs() + dx.abs() <= r * 1.2,
    }
}

/// Jitter knobs for drawing one subject instance.
#[derive(Debug, Clone, Copy)]
pub struct DrawParams {
    pub center_jitter: f64,
    pub radius_lo: f64,
    pub radius_hi: f64,
    pub shade_jitter: f64,
}

impl Default for DrawParams {
    fn default() -> Self {
        DrawParams { center_jitter: 0.08, radius_lo: 0.30, radius_hi: 0.42, shade_jitter: 0.06 }
    }
}

/// Draw one subject on a cluttered background, returning the raw image and
/// its foreground mask. Background removal is a separate, explicit step.
pub fn synth_subject(class: &str, side: usize, params: DrawParams, rng: &mut Rng) -> Result<(Image, Mask)> {
    let spec = class_spec(class)?;
    let s = side as f64;
    let cy = s * (0.5 + params.center_jitter * (rng.uniform() - 0.5));
    let cx = s * (0.5 + params.center_jitter * (rng.uniform() - 0.5));
    let r = s * rng.uniform_in(params.radius_lo, params.radius_hi);
    let shade = 1.0 + params.shade_jitter * (rng.uniform() - 0.5);

    let mut img = Image::new_fill(side, side, [0.0; 3]);
    let mut mask = Mask::new(side, side);
    let mut bg_rng = rng.split();
    for y in 0..side {
        for x in 0..side {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            if inside_shape(spec.shape, dy, dx, r) {
                mask.set(y, x, true);
                let tex = 1.0 + 0.08 * (bg_rng.uniform() - 0.5);
                img.set(
                    y,
                    x,
                    [
                        (spec.color[0] * shade * tex).clamp(0.0, 1.0),
                        (spec.color[1] * shade * tex).clamp(0.0, 1.0),
                        (spec.color[2] * shade * tex).clamp(0.0, 1.0),
                    ],
                );
            } else {
                // Busy background so removal actually changes the image.
                let g = 0.35 + 0.3 * ((x / 4 + y / 4) % 2) as f64 + 0.1 * (bg_rng.uniform() - 0.5);
                img.set(y, x, [g.clamp(0.0, 1.0); 3]);
            }
        }
    }
    Ok((img, mask))
}

// ---------------------------------------------------------------------------
// Subject assets
// ---------------------------------------------------------------------------

/// One reference subject: background-removed image, foreground mask, class
/// name and its bound learnable token.
#[derive(Debug, Clone)]
pub struct SubjectAsset {
    pub image: Image,
    pub mask: Mask,
    pub class_name: String,
    pub token_name: String,
}

/// Set every background pixel (mask = 0) to the fill color.
pub fn remove_background(image: &Image, mask: &Mask, fill: Rgb) -> Result<Image> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::invalid(format!(
            "image {}x{} vs mask {}x{}",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    if mask.is_empty() {
        return Err(Error::invalid("empty mask"));
    }
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if !mask.get(y, x) {
                out.set(y, x, fill);
            }
        }
    }
    Ok(out)
}

impl SubjectAsset {
    /// Build an asset from a raw image + mask, optionally removing the
    /// background (the default path; keeping it is an ablation).
    pub fn new(
        image: Image,
        mask: Mask,
        class_name: &str,
        token_name: &str,
        fill: Rgb,
        strip_background: bool,
    ) -> Result<SubjectAsset> {
        if mask.is_empty() {
            return Err(Error::invalid("empty mask"));
        }
        let image = if strip_background { remove_background(&image, &mask, fill)? } else { image };
        Ok(SubjectAsset {
            image,
            mask,
            class_name: class_name.to_string(),
            token_name: token_name.to_string(),
        })
    }

    /// Procedural asset for a known class.
    pub fn synthetic(
        class: &str,
        token_name: &str,
        side: usize,
        strip_background: bool,
        rng: &mut Rng,
    ) -> Result<SubjectAsset> {
        let (img, mask) = synth_subject(class, side, DrawParams::default(), rng)?;
        SubjectAsset::new(img, mask, class, token_name, WHITE, strip_background)
    }
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Horizontal,
}

#[derive(Debug, Clone, Copy)]
pub struct ComposeOptions {
    /// Fixed-color gap between subjects, in pixels.
    pub gutter: usize,
    pub fill: Rgb,
    /// Common height subjects are resized to before concatenation.
    pub tile_height: usize,
}

impl Default for ComposeOptions {
    fn default() -> Self {
        ComposeOptions { gutter: 4, fill: WHITE, tile_height: 32 }
    }
}

/// A training composite: subjects side by side, pairwise-disjoint masks at
/// the composite resolution, and the rendered training prompt.
#[derive(Debug, Clone)]
pub struct CompositeSample {
    pub image: Image,
    pub masks: Vec<Mask>,
    pub prompt: String,
    /// (class, token) per subject, composite order.
    pub subjects: Vec<(String, String)>,
    /// Whitespace-token positions of the learnable tokens in `prompt`.
    pub token_positions: Vec<usize>,
}

/// Conjunction prompt over (token, class) pairs:
/// "a <new1> cat and a <new2> dog".
pub fn training_prompt(subjects: &[(String, String)]) -> String {
    let parts: Vec<String> =
        subjects.iter().map(|(class, token)| format!("a {token} {class}")).collect();
    match parts.len() {
        0 => String::new(),
        1 => parts[0].clone(),
        2 => format!("{} and {}", parts[0], parts[1]),
        _ => format!("{} and {}", parts[..parts.len() - 1].join(", "), parts[parts.len() - 1]),
    }
}

fn token_positions_of(prompt: &str, subjects: &[(String, String)]) -> Vec<usize> {
    let words: Vec<&str> = prompt.split_whitespace().collect();
    subjects
        .iter()
        .map(|(_, token)| {
            words
                .iter()
                .position(|w| w.eq_ignore_ascii_case(token))
                .expect("token missing from its own prompt")
        })
        .collect()
}

/// Concatenate >= 2 assets side by side with a fixed-color gutter; each
/// subject's mask lands at its horizontal offset and nowhere else.
pub fn compose_concat(
    assets: &[SubjectAsset],
    layout: Layout,
    opts: ComposeOptions,
) -> Result<CompositeSample> {
    let Layout::Horizontal = layout;
    if assets.len() < 2 {
        return Err(Error::invalid(
            "composition needs at least 2 subjects; single-subject training is a separate ablation path",
        ));
    }
    let h = opts.tile_height;
    // Resize to common height, preserving aspect.
    let tiles: Vec<(Image, Mask)> = assets
        .iter()
        .map(|a| {
            let w = (a.image.width() * h).div_euclid(a.image.height()).max(1);
            (a.image.resize_nearest(h, w), a.mask.resize_nearest(h, w))
        })
        .collect();
    let total_w: usize =
        tiles.iter().map(|(img, _)| img.width()).sum::<usize>() + opts.gutter * (assets.len() - 1);

    let mut image = Image::new_fill(h, total_w, opts.fill);
    let mut masks = Vec::with_capacity(assets.len());
    let mut x0 = 0usize;
    for (img, mask) in &tiles {
        let mut placed = Mask::new(h, total_w);
        for y in 0..h {
            for x in 0..img.width() {
                image.set(y, x0 + x, img.get(y, x));
                if mask.get(y, x) {
                    placed.set(y, x0 + x, true);
                }
            }
        }
        masks.push(placed);
        x0 += img.width() + opts.gutter;
    }

    let subjects: Vec<(String, String)> =
        assets.iter().map(|a| (a.class_name.clone(), a.token_name.clone())).collect();
    let prompt = training_prompt(&subjects);
    let token_positions = token_positions_of(&prompt, &subjects);
    Ok(CompositeSample { image, masks, prompt, subjects, token_positions })
}

/// Single-subject sample for the "w/o concat" ablation path.
pub fn single_subject_sample(asset: &SubjectAsset, opts: ComposeOptions) -> CompositeSample {
    let h = opts.tile_height;
    let w = (asset.image.width() * h).div_euclid(asset.image.height()).max(1);
    let image = asset.image.resize_nearest(h, w);
    let mask = asset.mask.resize_nearest(h, w);
    let subjects = vec![(asset.class_name.clone(), asset.token_name.clone())];
    let prompt = training_prompt(&subjects);
    let token_positions = token_positions_of(&prompt, &subjects);
    CompositeSample { image, masks: vec![mask], prompt, subjects, token_positions }
}

/// Scale a composite onto a fixed canvas (network-friendly dimensions),
/// centered, padding with the fill color; masks get the same geometry.
pub fn fit_to_canvas(sample: &CompositeSample, h: usize, w: usize, fill: Rgb) -> CompositeSample {
    let (sh, sw) = (sample.image.height(), sample.image.width());
    let scale = (h as f64 / sh as f64).min(w as f64 / sw as f64);
    let nh = ((sh as f64 * scale).round() as usize).clamp(1, h);
    let nw = ((sw as f64 * scale).round() as usize).clamp(1, w);
    let y0 = (h - nh) / 2;
    let x0 = (w - nw) / 2;
    let resized = sample.image.resize_nearest(nh, nw);
    let mut image = Image::new_fill(h, w, fill);
    for y in 0..nh {
        for x in 0..nw {
            image.set(y0 + y, x0 + x, resized.get(y, x));
        }
    }
    let masks = sample
        .masks
        .iter()
        .map(|m| {
            let rm = m.resize_nearest(nh, nw);
            let mut out = Mask::new(h, w);
            for y in 0..nh {
                for x in 0..nw {
                    if rm.get(y, x) {
                        out.set(y0 + y, x0 + x, true);
                    }
                }
            }
            out
        })
        .collect();
    CompositeSample {
        image,
        masks,
        prompt: sample.prompt.clone(),
        subjects: sample.subjects.clone(),
        token_positions: sample.token_positions.clone(),
    }
}

// ---------------------------------------------------------------------------
// Class prior samples
// ---------------------------------------------------------------------------

/// A class-generic composite with a plain class prompt; never contains
/// learnable tokens.
#[derive(Debug, Clone)]
pub struct ClassPriorSample {
    pub image: Image,
    pub prompt: String,
}

/// Plain class prompt: "a cat and a dog".
pub fn class_prompt(class_names: &[String]) -> String {
    let parts: Vec<String> = class_names.iter().map(|c| format!("a {c}")).collect();
    match parts.len() {
        0 => String::new(),
        1 => parts[0].clone(),
        2 => format!("{} and {}", parts[0], parts[1]),
        _ => format!("{} and {}", parts[..parts.len() - 1].join(", "), parts[parts.len() - 1]),
    }
}

/// Generate `count` class-prior composites: randomized shape variants of
/// each class, background-removed and concatenated like training samples.
pub fn synth_class_prior(
    class_names: &[String],
    count: usize,
    opts: ComposeOptions,
    rng: &mut Rng,
) -> Result<Vec<ClassPriorSample>> {
    if count < 1 {
        return Err(Error::invalid("prior sample count must be >= 1"));
    }
    for c in class_names {
        class_spec(c)?;
    }
    let prompt = class_prompt(class_names);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let assets: Vec<SubjectAsset> = class_names
            .iter()
            .map(|c| SubjectAsset::synthetic(c, "<prior>", opts.tile_height, true, rng))
            .collect::<Result<_>>()?;
        let image = if assets.len() >= 2 {
            compose_concat(&assets, Layout::Horizontal, opts)?.image
        } else {
            single_subject_sample(&assets[0], opts).image
        };
        out.push(ClassPriorSample { image, prompt: prompt.clone() });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CropResize {
    /// Crop a rectangle fully inside the image, then resize back up.
    /// Subjects appear larger; prefixes the prompt with "close up".
    ZoomIn { x: usize, y: usize, w: usize, h: usize },
    /// Grow the canvas by `factor` > 1 around the centered image, then
    /// resize back down. Subjects appear smaller; prefixes "very small".
    ZoomOut { factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub flip: bool,
    pub crop: Option<CropResize>,
}

impl AugmentSpec {
    pub fn none() -> AugmentSpec {
        AugmentSpec { flip: false, crop: None }
    }

    /// Sample a spec the way the training loop does: fair-coin flip and an
    /// occasional zoom in either direction.
    pub fn sample(rng: &mut Rng, w: usize, h: usize) -> AugmentSpec {
        let flip = rng.uniform() < 0.5;
        let crop = match rng.below(4) {
            0 => {
                let fx = rng.uniform_in(0.75, 0.95);
                let cw = ((w as f64 * fx) as usize).max(2);
                let ch = ((h as f64 * fx) as usize).max(2);
                let x = rng.below(w - cw + 1);
                let y = rng.below(h - ch + 1);
                Some(CropResize::ZoomIn { x, y, w: cw, h: ch })
            }
            1 => Some(CropResize::ZoomOut { factor: rng.uniform_in(1.1, 1.4) }),
            _ => None,
        };
        AugmentSpec { flip, crop }
    }
}

/// Apply a flip and/or crop-resize, with identical geometry on the image
/// and on every mask, adjusting the prompt prefix for zoom changes.
pub fn augment(sample: &CompositeSample, spec: AugmentSpec, fill: Rgb) -> Result<CompositeSample> {
    let (h, w) = (sample.image.height(), sample.image.width());
    let mut image = sample.image.clone();
    let mut masks = sample.masks.clone();
    let mut prompt = sample.prompt.clone();
    let mut shift = 0usize;

    if spec.flip {
        image = image.hflip();
        for m in &mut masks {
            *m = m.hflip();
        }
    }

    match spec.crop {
        None => {}
        Some(CropResize::ZoomIn { x, y, w: cw, h: ch }) => {
            if cw == 0 || ch == 0 || x + cw > w || y + ch > h {
                return Err(Error::invalid(format!(
                    "crop {cw}x{ch}+{x}+{y} outside image bounds {w}x{h}"
                )));
            }
            let mut crop_img = Image::new_fill(ch, cw, fill);
            for yy in 0..ch {
                for xx in 0..cw {
                    crop_img.set(yy, xx, image.get(y + yy, x + xx));
                }
            }
            image = crop_img.resize_nearest(h, w);
            for m in masks.iter_mut() {
                let mut crop_m = Mask::new(ch, cw);
                for yy in 0..ch {
                    for xx in 0..cw {
                        crop_m.set(yy, xx, m.get(y + yy, x + xx));
                    }
                }
                *m = crop_m.resize_nearest(h, w);
            }
            prompt = format!("close up {prompt}");
            shift = 2;
        }
        Some(CropResize::ZoomOut { factor }) => {
            if factor <= 1.0 {
                return Err(Error::invalid(format!("zoom-out factor {factor} must exceed 1")));
            }
            let ch = ((h as f64 * factor).round() as usize).max(h + 1);
            let cw = ((w as f64 * factor).round() as usize).max(w + 1);
            let y0 = (ch - h) / 2;
            let x0 = (cw - w) / 2;
            let mut canvas = Image::new_fill(ch, cw, fill);
            for yy in 0..h {
                for xx in 0..w {
                    canvas.set(y0 + yy, x0 + xx, image.get(yy, xx));
                }
            }
            image = canvas.resize_nearest(h, w);
            for m in masks.iter_mut() {
                let mut canvas_m = Mask::new(ch, cw);
                for yy in 0..h {
                    for xx in 0..w {
                        if m.get(yy, xx) {
                            canvas_m.set(y0 + yy, x0 + xx, true);
                        }
                    }
                }
                *m = canvas_m.resize_nearest(h, w);
            }
            prompt = format!("very small {prompt}");
            shift = 2;
        }
    }

    let token_positions = sample.token_positions.iter().map(|p| p + shift).collect();
    Ok(CompositeSample {
        image,
        masks,
        prompt,
        subjects: sample.subjects.clone(),
        token_positions,
    })
}

/// Replicate a composite's image as each of L frames.
pub fn extend_to_video(sample: &CompositeSample, frames: usize) -> (LatentVideo, Vec<Mask>) {
    let (h, w) = (sample.image.height(), sample.image.width());
    let frames = frames.max(1);
    let mut data = Vec::with_capacity(frames * h * w * 3);
    for _ in 0..frames {
        data.extend_from_slice(sample.image.data());
    }
    let t = Tensor::from_vec(&[1, frames, h, w, 3], data).unwrap();
    (LatentVideo::new(t).unwrap(), sample.masks.clone())
}

// ---------------------------------------------------------------------------
// Asset manifest
// ---------------------------------------------------------------------------

/// One manifest line: image path | mask path | class | token.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub class_name: String,
    pub token_name: String,
}

pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split('|').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::format(format!(
                "manifest line {}: expected 'image|mask|class|token', got '{line}'",
                ln + 1
            )));
        }
        out.push(ManifestEntry {
            image_path: base_dir.join(parts[0]),
            mask_path: base_dir.join(parts[1]),
            class_name: parts[2].to_string(),
            token_name: parts[3].to_string(),
        });
    }
    if out.is_empty() {
        return Err(Error::format("manifest lists no subjects"));
    }
    Ok(out)
}

impl fmt::Display for ManifestEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}|{}|{}|{}",
            self.image_path.display(),
            self.mask_path.display(),
            self.class_name,
            self.token_name
        )
    }
}
