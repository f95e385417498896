//! PNG input/output for images and masks.

use std::path::Path;

use crate::compose::{Image, Mask};
use crate::error::{Error, Result};

pub fn save_image_png(img: &Image, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width() as u32, img.height() as u32);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let [r, g, b] = img.get(y, x);
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([to_u8(r), to_u8(g), to_u8(b)]),
            );
        }
    }
    buf.save(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

pub fn load_image_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::new_fill(h, w, [0.0, 0.0, 0.0]);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            out.set(
                y,
                x,
                [p.0[0] as f64 / 255.0, p.0[1] as f64 / 255.0, p.0[2] as f64 / 255.0],
            );
        }
    }
    Ok(out)
}

pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let mut buf = image::GrayImage::new(mask.width() as u32, mask.height() as u32);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            buf.put_pixel(x as u32, y as u32, image::Luma([if mask.get(y, x) { 255 } else { 0 }]));
        }
    }
    buf.save(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            out.set(y, x, img.get_pixel(x as u32, y as u32).0[0] >= 128);
        }
    }
    Ok(out)
}

/// Save a [0,1]-valued map as a grayscale heatmap PNG.
pub fn save_gray_png(values: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    assert_eq!(values.len(), h * w);
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([to_u8(values[y * w + x])]));
        }
    }
    buf.save(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
