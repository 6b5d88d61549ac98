//! Rasterization of explanations: heatmap color washes, superpixel
//! outlines, and the side-by-side figure panel.
//!
//! Heatmaps blend a jet-colored wash whose per-pixel opacity scales with
//! the heat value, so a zero map reproduces the input byte for byte.
//! Superpixel explanations draw boundary outlines around the selected
//! segments only.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{ExplainError, HeatMap, SuperpixelExplanation};

/// Rendering knobs for overlays and panels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlayStyle {
    /// Opacity of the color wash at full heat; colder pixels scale down
    /// proportionally.
    pub alpha: f32,
    /// Outline color for selected superpixels.
    pub outline: [u8; 3],
    /// Pixel gap between panels in composite figures.
    pub gutter: usize,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        Self {
            alpha: 0.45,
            outline: [255, 255, 0],
            gutter: 4,
        }
    }
}

/// Convert a raw `[3, H, W]` raster on the 0..255 scale to an RGB image.
pub fn to_rgb_image(image: &Array3<f32>) -> Result<RgbImage, ExplainError> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(ExplainError::ImageShape {
            expected: vec![3, h, w],
            got: image.shape().to_vec(),
        });
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                quantize(image[(0, y, x)]),
                quantize(image[(1, y, x)]),
                quantize(image[(2, y, x)]),
            ];
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(out)
}

/// Blend a heatmap color wash over the image.
pub fn heatmap_overlay(
    image: &Array3<f32>,
    map: &HeatMap,
    style: &OverlayStyle,
) -> Result<RgbImage, ExplainError> {
    let (c, h, w) = image.dim();
    if c != 3 || map.grid.dim() != (h, w) {
        return Err(ExplainError::ImageShape {
            expected: vec![3, h, w],
            got: vec![3, map.grid.dim().0, map.grid.dim().1],
        });
    }
    let alpha = style.alpha.clamp(0.0, 1.0);
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let heat = map.grid[(y, x)].clamp(0.0, 1.0);
            let a = alpha * heat;
            let wash = jet(heat);
            let mut px = [0u8; 3];
            for ch in 0..3 {
                px[ch] = quantize(image[(ch, y, x)] * (1.0 - a) + wash[ch] * a);
            }
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(out)
}

/// Outline the segments selected for one explained class.
///
/// `class` defaults to the highest-probability explained label; naming a
/// class the explanation does not cover is an error.
pub fn superpixel_overlay(
    image: &Array3<f32>,
    explanation: &SuperpixelExplanation,
    class: Option<usize>,
    style: &OverlayStyle,
) -> Result<RgbImage, ExplainError> {
    let (c, h, w) = image.dim();
    if c != 3 || explanation.segments.dim() != (h, w) {
        return Err(ExplainError::ImageShape {
            expected: vec![3, h, w],
            got: vec![
                3,
                explanation.segments.dim().0,
                explanation.segments.dim().1,
            ],
        });
    }
    let features = match class {
        None => explanation
            .selected_features
            .first()
            .map(|f| f.as_slice())
            .unwrap_or(&[]),
        Some(class) => explanation.features_for(class).ok_or_else(|| {
            ExplainError::BadConfig(format!(
                "class {class} was not explained; explained labels: {:?}",
                explanation.target_labels
            ))
        })?,
    };
    let selected: Vec<u32> = features.iter().map(|f| f.segment).collect();

    let segments = &explanation.segments;
    let mut out = to_rgb_image(image)?;
    for y in 0..h {
        for x in 0..w {
            let seg = segments[(y, x)];
            if !selected.contains(&seg) {
                continue;
            }
            let neighbors = [
                (y.wrapping_sub(1), x),
                (y + 1, x),
                (y, x.wrapping_sub(1)),
                (y, x + 1),
            ];
            let boundary = neighbors
                .into_iter()
                .any(|(ny, nx)| ny < h && nx < w && segments[(ny, nx)] != seg);
            if boundary {
                out.put_pixel(x as u32, y as u32, Rgb(style.outline));
            }
        }
    }
    Ok(out)
}

/// The figure layout: original, heatmap overlay, and superpixel overlay
/// side by side with a white gutter.
pub fn explanation_panel(
    image: &Array3<f32>,
    map: &HeatMap,
    explanation: &SuperpixelExplanation,
    style: &OverlayStyle,
) -> Result<RgbImage, ExplainError> {
    let panels = [
        to_rgb_image(image)?,
        heatmap_overlay(image, map, style)?,
        superpixel_overlay(image, explanation, None, style)?,
    ];
    let (h, w) = (panels[0].height(), panels[0].width());
    let gutter = style.gutter as u32;
    let mut out = RgbImage::from_pixel(
        3 * w + 2 * gutter,
        h,
        Rgb([255, 255, 255]),
    );
    for (i, panel) in panels.iter().enumerate() {
        let x0 = i as u32 * (w + gutter);
        for y in 0..h {
            for x in 0..w {
                out.put_pixel(x0 + x, y, *panel.get_pixel(x, y));
            }
        }
    }
    Ok(out)
}

/// Write an image as PNG regardless of the path extension.
pub fn save_png(image: &RgbImage, path: &Path) -> Result<(), ExplainError> {
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| ExplainError::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn quantize(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Classic jet ramp from blue through green to red, on 0..255.
fn jet(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [r * 255.0, g * 255.0, b * 255.0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::SegmentWeight;
    use ndarray::{Array2, Array3};

    fn test_image(h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            ((c * 67 + y * 13 + x * 7) % 256) as f32
        })
    }

    fn halves_explanation(h: usize, w: usize) -> SuperpixelExplanation {
        let mut segments = Array2::<u32>::zeros((h, w));
        for y in 0..h {
            for x in w / 2..w {
                segments[(y, x)] = 1;
            }
        }
        SuperpixelExplanation {
            segments,
            target_labels: vec![2, 0],
            selected_features: vec![
                vec![SegmentWeight {
                    segment: 0,
                    weight: 0.7,
                }],
                vec![],
            ],
            seed: 0,
            n_samples: 1,
        }
    }

    #[test]
    fn a_zero_heatmap_renders_the_input_unchanged() {
        let image = test_image(12, 9);
        let map = HeatMap {
            grid: Array2::zeros((12, 9)),
            target_class: 0,
            source_layer: "feat".into(),
            peak: 0.0,
            is_zero: true,
        };
        let overlay = heatmap_overlay(&image, &map, &OverlayStyle::default()).unwrap();
        assert_eq!(overlay, to_rgb_image(&image).unwrap());
    }

    #[test]
    fn a_single_hot_pixel_colors_only_its_location() {
        let image = test_image(50, 70);
        let mut grid = Array2::<f32>::zeros((50, 70));
        grid[(40, 60)] = 1.0;
        let map = HeatMap {
            grid,
            target_class: 1,
            source_layer: "feat".into(),
            peak: 3.5,
            is_zero: false,
        };
        let base = to_rgb_image(&image).unwrap();
        let overlay = heatmap_overlay(&image, &map, &OverlayStyle::default()).unwrap();
        assert_ne!(overlay.get_pixel(60, 40), base.get_pixel(60, 40));
        assert_eq!(overlay.get_pixel(0, 0), base.get_pixel(0, 0));
        assert_eq!(overlay.get_pixel(69, 49), base.get_pixel(69, 49));
        let changed = overlay
            .pixels()
            .zip(base.pixels())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 1);
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let image = test_image(10, 10);
        let map = HeatMap {
            grid: Array2::zeros((9, 10)),
            target_class: 0,
            source_layer: "feat".into(),
            peak: 0.0,
            is_zero: true,
        };
        let err = heatmap_overlay(&image, &map, &OverlayStyle::default()).unwrap_err();
        assert!(matches!(err, ExplainError::ImageShape { .. }), "{err}");

        let exp = halves_explanation(9, 10);
        let err = superpixel_overlay(&image, &exp, None, &OverlayStyle::default()).unwrap_err();
        assert!(matches!(err, ExplainError::ImageShape { .. }), "{err}");
    }

    #[test]
    fn selected_segments_get_boundary_outlines_only() {
        let (h, w) = (8, 10);
        let image = test_image(h, w);
        let exp = halves_explanation(h, w);
        let style = OverlayStyle::default();
        let base = to_rgb_image(&image).unwrap();
        let overlay = superpixel_overlay(&image, &exp, None, &style).unwrap();

        // Segment 0 touches segment 1 along column w/2 - 1.
        for y in 0..h {
            assert_eq!(
                overlay.get_pixel((w / 2 - 1) as u32, y as u32),
                &Rgb(style.outline)
            );
        }
        assert_eq!(overlay.get_pixel(0, 0), base.get_pixel(0, 0));
        assert_eq!(overlay.get_pixel((w - 1) as u32, 0), base.get_pixel((w - 1) as u32, 0));

        // The second explained label selected nothing, so nothing is
        // drawn for it.
        let quiet = superpixel_overlay(&image, &exp, Some(0), &style).unwrap();
        assert_eq!(quiet, base);

        let err = superpixel_overlay(&image, &exp, Some(3), &style).unwrap_err();
        assert!(matches!(err, ExplainError::BadConfig(_)), "{err}");
    }

    #[test]
    fn the_panel_lines_up_three_views_with_gutters() {
        let (h, w) = (8, 10);
        let image = test_image(h, w);
        let map = HeatMap {
            grid: Array2::from_elem((h, w), 0.5),
            target_class: 0,
            source_layer: "feat".into(),
            peak: 1.0,
            is_zero: false,
        };
        let exp = halves_explanation(h, w);
        let style = OverlayStyle::default();
        let panel = explanation_panel(&image, &map, &exp, &style).unwrap();
        assert_eq!(panel.width(), 3 * w as u32 + 2 * style.gutter as u32);
        assert_eq!(panel.height(), h as u32);

        let base = to_rgb_image(&image).unwrap();
        for y in 0..h as u32 {
            for x in 0..w as u32 {
                assert_eq!(panel.get_pixel(x, y), base.get_pixel(x, y));
            }
        }
        // Gutter pixels are white.
        assert_eq!(panel.get_pixel(w as u32 + 1, 0), &Rgb([255, 255, 255]));
    }

    #[test]
    fn overlays_round_trip_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("overlay.png");
        let image = test_image(6, 6);
        let rendered = to_rgb_image(&image).unwrap();
        save_png(&rendered, &path).unwrap();
        let loaded = image::open(&path).unwrap().to_rgb8();
        assert_eq!(loaded, rendered);
    }
}
