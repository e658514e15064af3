use std::path::Path;

use image::{Rgb, RgbImage};

use crate::annotation::EntityMask;
use crate::dit::Volume;
use crate::error::{Error, Result};

/// Writes videos as a PNG grid: one row per video, one tile per frame,
/// pixels upscaled by `scale`. Values are clamped to `[0, 1]`; channels
/// beyond three are ignored and a single channel is drawn as gray.
pub fn save_frame_grid(path: &Path, videos: &[&Volume], scale: u32) -> Result<()> {
    let first = videos
        .first()
        .ok_or_else(|| Error::InvalidParam("no videos to draw".into()))?;
    let (t, h, w, c) = first.dim();
    if videos.iter().any(|v| v.dim() != (t, h, w, c)) {
        return Err(Error::Shape("frame grid videos differ in shape".into()));
    }
    let scale = scale.max(1);
    let gap = 1u32;
    let tile_w = w as u32 * scale + gap;
    let tile_h = h as u32 * scale + gap;
    let mut img = RgbImage::from_pixel(tile_w * t as u32, tile_h * videos.len() as u32, Rgb([40, 40, 40]));
    let to_byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for (row, v) in videos.iter().enumerate() {
        for f in 0..t {
            for r in 0..h {
                for col in 0..w {
                    let rgb = if c == 1 {
                        let g = to_byte(v[[f, r, col, 0]]);
                        [g, g, g]
                    } else {
                        let ch = |k: usize| if k < c { to_byte(v[[f, r, col, k]]) } else { 0 };
                        [ch(0), ch(1), ch(2)]
                    };
                    for dy in 0..scale {
                        for dx in 0..scale {
                            img.put_pixel(
                                f as u32 * tile_w + col as u32 * scale + dx,
                                row as u32 * tile_h + r as u32 * scale + dy,
                                Rgb(rgb),
                            );
                        }
                    }
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)?;
    Ok(())
}

fn png_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads a directory of same-sized frame images (sorted by file name) as an
/// RGB volume in `[0, 1]`.
pub fn load_frames(dir: &Path) -> Result<Volume> {
    let files = png_files(dir)?;
    if files.is_empty() {
        return Err(Error::InvalidParam(format!("no PNG frames in {}", dir.display())));
    }
    let mut frames = Vec::with_capacity(files.len());
    for f in &files {
        frames.push(image::open(f)?.to_rgb8());
    }
    let (w, h) = frames[0].dimensions();
    if frames.iter().any(|f| f.dimensions() != (w, h)) {
        return Err(Error::Shape(format!("frames in {} differ in size", dir.display())));
    }
    Ok(Volume::from_shape_fn((frames.len(), h as usize, w as usize, 3), |(t, r, c, k)| {
        frames[t].get_pixel(c as u32, r as u32)[k] as f64 / 255.0
    }))
}

/// Loads first-frame entity masks, one image per entity; any nonzero pixel
/// is foreground and the file stem becomes the entity id.
pub fn load_masks(dir: &Path) -> Result<Vec<EntityMask>> {
    png_files(dir)?
        .iter()
        .map(|f| {
            let img = image::open(f)?.to_luma8();
            let id = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let (w, h) = img.dimensions();
            EntityMask::from_fn(0, id, h as usize, w as usize, |r, c| img.get_pixel(c as u32, r as u32)[0] > 0)
        })
        .collect()
}
