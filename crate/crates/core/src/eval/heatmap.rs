//! Heatmap panels: input | color-mapped overlay | ground-truth mask.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::scorers::ScoreMap;

pub const OVERLAY_ALPHA: f32 = 0.5;

/// Jet-style colormap for `t` in `[0, 1]`, as 0..=255 RGB.
pub fn jet(t: f64) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |x: f64| (1.5 - (4.0 * t - x).abs()).clamp(0.0, 1.0) * 255.0;
    [ch(3.0) as f32, ch(2.0) as f32, ch(1.0) as f32]
}

/// Per-image min-max normalization; a constant map becomes all zeros.
pub fn normalize(map: &ScoreMap) -> Vec<f64> {
    let (lo, hi) = (map.min(), map.max());
    if !(hi > lo) {
        return vec![0.0; map.data.len()];
    }
    map.data.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn to_rgb(img: &Image) -> Result<Image> {
    match img.channels() {
        3 => Ok(img.clone()),
        1 => {
            let data = img.data().iter().flat_map(|&v| [v, v, v]).collect();
            Image::from_vec(img.width(), img.height(), 3, data)
        }
        c => Err(Error::DimensionMismatch { expected: 3, found: c }),
    }
}

/// Builds the side-by-side panel as an RGB image.
pub fn heatmap_panel(map: &ScoreMap, img: &Image, mask: Option<&Image>) -> Result<Image> {
    let (w, h) = (img.width(), img.height());
    if (map.width, map.height) != (w, h) {
        return Err(Error::DimensionMismatch {
            expected: w * h,
            found: map.width * map.height,
        });
    }
    let base = to_rgb(img)?;
    let mask = mask.map(to_rgb).transpose()?;
    if let Some(m) = &mask {
        if m.dims() != base.dims() {
            return Err(Error::DimensionMismatch {
                expected: w * h,
                found: m.width() * m.height(),
            });
        }
    }
    let norm = normalize(map);
    let panels = if mask.is_some() { 3 } else { 2 };
    let mut out = Image::new(w * panels, h, 3);
    for y in 0..h {
        for x in 0..w {
            let src = base.pixel(x, y).to_vec();
            out.pixel_mut(x, y).copy_from_slice(&src);
            let c = jet(norm[y * w + x]);
            let px = out.pixel_mut(w + x, y);
            for i in 0..3 {
                px[i] = (1.0 - OVERLAY_ALPHA) * src[i] + OVERLAY_ALPHA * c[i];
            }
            if let Some(m) = &mask {
                let mv = m.pixel(x, y).to_vec();
                out.pixel_mut(2 * w + x, y).copy_from_slice(&mv);
            }
        }
    }
    Ok(out)
}

pub fn render_heatmap(map: &ScoreMap, img: &Image, mask: Option<&Image>, path: &Path) -> Result<()> {
    heatmap_panel(map, img, mask)?.save_png(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_map_gives_uniform_overlay() {
        let img = Image::filled(8, 6, 3, 100.0);
        let map = ScoreMap {
            width: 8,
            height: 6,
            data: vec![0.0; 48],
        };
        let p = heatmap_panel(&map, &img, None).unwrap();
        assert_eq!(p.width(), 16);
        let c = jet(0.0);
        for y in 0..6 {
            for x in 0..8 {
                assert_eq!(p.pixel(x, y), &[100.0; 3]);
                let o = p.pixel(8 + x, y);
                for i in 0..3 {
                    assert_eq!(o[i], 50.0 + 0.5 * c[i]);
                }
            }
        }
    }

    #[test]
    fn hottest_region_is_the_mask() {
        let img = Image::filled(10, 10, 1, 30.0);
        let mut mask = Image::new(10, 10, 1);
        for y in 3..6 {
            for x in 2..7 {
                mask.set(x, y, 0, 255.0);
            }
        }
        let map = ScoreMap {
            width: 10,
            height: 10,
            data: mask.data().iter().map(|&v| v as f64).collect(),
        };
        let p = heatmap_panel(&map, &img, Some(&mask)).unwrap();
        assert_eq!(p.width(), 30);
        let hot = jet(1.0);
        for y in 0..10 {
            for x in 0..10 {
                let inside = (3..6).contains(&y) && (2..7).contains(&x);
                let red = p.pixel(10 + x, y)[0];
                assert_eq!(red == 15.0 + 0.5 * hot[0], inside);
                assert_eq!(p.pixel(20 + x, y)[0], if inside { 255.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(jet(0.0), [0.0, 0.0, 127.5]);
        assert_eq!(jet(1.0), [127.5, 0.0, 0.0]);
        assert_eq!(jet(0.5), [127.5, 255.0, 127.5]);
    }
}
