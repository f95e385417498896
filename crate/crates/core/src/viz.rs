//! Attention-map visualization: grayscale heatmaps with a metadata
//! sidecar, and red-tinted overlays aligned to the composite geometry.

use std::path::{Path, PathBuf};

use crate::attnctl::AttentionMapSet;
use crate::compose::Image;
use crate::error::{Error, Result};
use crate::imgio::{save_gray_png, save_image_png};
use crate::tensor::Tensor;

fn sanitize(token: &str) -> String {
    token
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Nearest-neighbour upscale of a map onto the composite grid: map cell
/// (i, j) covers exactly the pixel block (i*fy..(i+1)*fy, j*fx..(j+1)*fx).
pub fn upscale_map(map: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (mh, mw) = (map.shape()[0], map.shape()[1]);
    if mh == 0 || mw == 0 || h % mh != 0 || w % mw != 0 {
        return Err(Error::invalid(format!(
            "cannot upscale {mh}x{mw} map to {h}x{w}"
        )));
    }
    let (fy, fx) = (h / mh, w / mw);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = map.data()[(y / fy) * mw + (x / fx)];
        }
    }
    Tensor::from_vec(&[h, w], out)
}

/// Red-tinted overlay of an attention map on the composite, max-normalized
/// for visibility.
pub fn overlay_heatmap(composite: &Image, map: &Tensor) -> Result<Image> {
    let (h, w) = (composite.height(), composite.width());
    let up = upscale_map(map, h, w)?;
    let peak = up.max().max(1e-12);
    let mut out = composite.clone();
    for y in 0..h {
        for x in 0..w {
            let a = (up.data()[y * w + x] / peak).clamp(0.0, 1.0);
            let p = composite.get(y, x);
            out.set(
                y,
                x,
                [
                    (p[0] * (1.0 - a) + a).clamp(0.0, 1.0),
                    p[1] * (1.0 - a) * 0.9,
                    p[2] * (1.0 - a) * 0.9,
                ],
            );
        }
    }
    Ok(out)
}

/// Files written for one exported token map.
#[derive(Debug, Clone)]
pub struct HeatmapPaths {
    pub heatmap: PathBuf,
    pub overlay: Option<PathBuf>,
    pub sidecar: PathBuf,
}

/// Write per-token grayscale heatmaps (max-normalized), optional overlays
/// on the composite, and a JSON sidecar with level, token and step.
pub fn export_heatmaps(
    dir: &Path,
    step: usize,
    set: &AttentionMapSet,
    token_names: &[String],
    composite: Option<&Image>,
) -> Result<Vec<HeatmapPaths>> {
    if set.per_token_maps.len() != token_names.len() {
        return Err(Error::invalid("token name count does not match map count"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for (map, token) in set.per_token_maps.iter().zip(token_names) {
        let stem = format!("attn_{}_{}_step{step:05}", set.level.name(), sanitize(token));
        let (mh, mw) = (map.shape()[0], map.shape()[1]);
        let peak = map.max().max(1e-12);
        let normalized: Vec<f64> = map.data().iter().map(|v| v / peak).collect();
        let heatmap = dir.join(format!("{stem}.png"));
        save_gray_png(&normalized, mh, mw, &heatmap)?;

        let overlay = match composite {
            Some(img) => {
                let path = dir.join(format!("{stem}_overlay.png"));
                save_image_png(&overlay_heatmap(img, map)?, &path)?;
                Some(path)
            }
            None => None,
        };

        let sidecar = dir.join(format!("{stem}.json"));
        let json = format!(
            "{{\n  \"level\": \"{}\",\n  \"token\": \"{}\",\n  \"step\": {},\n  \"height\": {},\n  \"width\": {},\n  \"min\": {:.6e},\n  \"max\": {:.6e}\n}}\n",
            set.level.name(),
            token,
            step,
            mh,
            mw,
            map.min(),
            map.max()
        );
        std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
        out.push(HeatmapPaths { heatmap, overlay, sidecar });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attnctl::Level;
    use crate::compose::WHITE;

    #[test]
    fn upscale_blocks_are_exact() {
        let mut map = Tensor::zeros(&[2, 4]);
        map.data_mut()[1 * 4 + 2] = 1.0;
        let up = upscale_map(&map, 8, 16).unwrap();
        for y in 0..8 {
            for x in 0..16 {
                let expect = if (4..8).contains(&y) && (8..12).contains(&x) { 1.0 } else { 0.0 };
                assert_eq!(up.data()[y * 16 + x], expect, "at ({y},{x})");
            }
        }
        assert!(upscale_map(&map, 9, 16).is_err());
    }

    #[test]
    fn overlay_aligns_hot_cell_within_one_pixel() {
        // Coordinate round-trip: a single hot map cell must light exactly
        // its corresponding composite block.
        let composite = Image::new_fill(16, 32, [0.2, 0.2, 0.2]);
        let mut map = Tensor::zeros(&[4, 8]);
        let (ci, cj) = (2usize, 5usize);
        map.data_mut()[ci * 8 + cj] = 1.0;
        let overlay = overlay_heatmap(&composite, &map).unwrap();
        let (fy, fx) = (16 / 4, 32 / 8);
        let mut min_y = usize::MAX;
        let mut max_y = 0;
        let mut min_x = usize::MAX;
        let mut max_x = 0;
        for y in 0..16 {
            for x in 0..32 {
                let delta = overlay.get(y, x)[0] - composite.get(y, x)[0];
                if delta > 0.5 {
                    min_y = min_y.min(y);
                    max_y = max_y.max(y);
                    min_x = min_x.min(x);
                    max_x = max_x.max(x);
                }
            }
        }
        assert!(min_y.abs_diff(ci * fy) <= 1 && max_y.abs_diff((ci + 1) * fy - 1) <= 1);
        assert!(min_x.abs_diff(cj * fx) <= 1 && max_x.abs_diff((cj + 1) * fx - 1) <= 1);
    }

    #[test]
    fn export_writes_heatmap_overlay_and_sidecar() {
        let dir = std::env::temp_dir().join("vidlab_viz_test");
        let _ = std::fs::remove_dir_all(&dir);
        let mut map = Tensor::zeros(&[4, 8]);
        map.data_mut()[5] = 0.7;
        let set = AttentionMapSet { level: Level::L3, per_token_maps: vec![map] };
        let composite = Image::new_fill(32, 64, WHITE);
        let paths = export_heatmaps(
            &dir,
            42,
            &set,
            &["<new1>".to_string()],
            Some(&composite),
        )
        .unwrap();
        assert_eq!(paths.len(), 1);
        assert!(paths[0].heatmap.exists());
        assert!(paths[0].overlay.as_ref().unwrap().exists());
        let sidecar = std::fs::read_to_string(&paths[0].sidecar).unwrap();
        assert!(sidecar.contains("\"level\": \"l3\""));
        assert!(sidecar.contains("\"token\": \"<new1>\""));
        assert!(sidecar.contains("\"step\": 42"));
    }

    #[test]
    fn token_map_count_mismatch_rejected() {
        let dir = std::env::temp_dir().join("vidlab_viz_test2");
        let set = AttentionMapSet {
            level: Level::L3,
            per_token_maps: vec![Tensor::zeros(&[2, 2])],
        };
        assert!(export_heatmaps(&dir, 0, &set, &[], None).is_err());
    }
}
