//! Online image augmentation.
//!
//! Each epoch pass shuffles the records and draws a fresh affine
//! transform (rotation, shift, shear, zoom) plus a channel-intensity
//! shift per record, all from a ChaCha stream keyed by `(seed, epoch)`.
//! Pixel work runs in parallel but parameter draws are sequential, so
//! emission is bit-identical to a single-threaded pass.
//!
//! Transforms operate on the 0..255 intensity scale and the configured
//! `rescale` factor is applied last; evaluation batches skip the
//! stochastic steps and apply resize + rescale only.

use std::path::Path;

use image::imageops::FilterType;
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DatasetError, ImageRecord};

/// Stochastic augmentation ranges, plus the intensity rescale factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Multiplier applied to raw 0..255 intensities after all transforms.
    pub rescale: f32,
    /// Rotation drawn uniformly from `[-r, r]` degrees.
    pub rotation_range_deg: f32,
    /// Horizontal shift as a fraction of image width.
    pub width_shift_frac: f32,
    /// Vertical shift as a fraction of image height.
    pub height_shift_frac: f32,
    /// Shear angle range in degrees.
    pub shear_range: f32,
    /// Zoom factors drawn from `[1-z, 1+z]` independently per axis.
    pub zoom_range: f32,
    /// Intensity shift drawn from `[-c, c]` on the 0..255 scale.
    pub channel_shift_range: f32,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rescale: 1.0 / 255.0,
            rotation_range_deg: 50.0,
            width_shift_frac: 0.2,
            height_shift_frac: 0.2,
            shear_range: 0.25,
            zoom_range: 0.1,
            channel_shift_range: 20.0,
        }
    }
}

impl AugmentationConfig {
    /// Resize + rescale only; every stochastic range is zero.
    pub fn identity() -> Self {
        Self {
            rescale: 1.0 / 255.0,
            rotation_range_deg: 0.0,
            width_shift_frac: 0.0,
            height_shift_frac: 0.0,
            shear_range: 0.0,
            zoom_range: 0.0,
            channel_shift_range: 0.0,
        }
    }

    /// Check the range invariants.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let ranges = [
            self.rotation_range_deg,
            self.width_shift_frac,
            self.height_shift_frac,
            self.shear_range,
            self.zoom_range,
            self.channel_shift_range,
        ];
        if self.rescale <= 0.0 || !self.rescale.is_finite() {
            return Err(DatasetError::BadAugmentation(format!(
                "rescale must be positive and finite, got {}",
                self.rescale
            )));
        }
        if ranges.iter().any(|r| *r < 0.0 || !r.is_finite()) {
            return Err(DatasetError::BadAugmentation(
                "all augmentation ranges must be non-negative and finite".to_string(),
            ));
        }
        Ok(())
    }

    fn is_stochastic(&self) -> bool {
        self.rotation_range_deg > 0.0
            || self.width_shift_frac > 0.0
            || self.height_shift_frac > 0.0
            || self.shear_range > 0.0
            || self.zoom_range > 0.0
            || self.channel_shift_range > 0.0
    }
}

/// One emitted batch: images as `[B, 3, H, W]`, labels one-hot `[B, C]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Array4<f32>,
    pub labels: Array2<f32>,
    pub record_ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.record_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_ids.is_empty()
    }
}

/// Affine + intensity parameters drawn for one record.
#[derive(Debug, Clone, Copy)]
struct DrawnTransform {
    theta_deg: f32,
    shift_rows: f32,
    shift_cols: f32,
    shear_deg: f32,
    zoom_rows: f32,
    zoom_cols: f32,
    channel_shift: f32,
}

/// Seeded single-consumer iterator source over augmented batches.
#[derive(Debug, Clone)]
pub struct AugmentationStream {
    records: Vec<ImageRecord>,
    n_classes: usize,
    cfg: AugmentationConfig,
    target: (usize, usize),
    batch: usize,
    seed: u64,
}

impl AugmentationStream {
    pub fn new(
        records: Vec<ImageRecord>,
        n_classes: usize,
        cfg: AugmentationConfig,
        target: (usize, usize),
        batch: usize,
        seed: u64,
    ) -> Result<Self, DatasetError> {
        cfg.validate()?;
        if records.is_empty() {
            return Err(DatasetError::BadAugmentation(
                "augmentation stream needs at least one record".to_string(),
            ));
        }
        assert!(target.0 > 0 && target.1 > 0, "target size must be positive");
        assert!(batch >= 1, "batch size must be at least 1");
        Ok(Self {
            records,
            n_classes,
            cfg,
            target,
            batch,
            seed,
        })
    }

    /// Number of batches one epoch pass emits (before any corrupt-file skips).
    pub fn batches_per_epoch(&self) -> usize {
        self.records.len().div_ceil(self.batch)
    }

    /// Number of records per epoch pass.
    pub fn records_per_epoch(&self) -> usize {
        self.records.len()
    }

    /// One deterministic epoch pass: shuffled order, fresh transforms.
    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = Batch> + '_ {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);

        let mut order: Vec<usize> = (0..self.records.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);

        // Draw all parameters up front so pixel-level parallelism cannot
        // perturb the sequence of random values.
        let draws: Vec<DrawnTransform> = order.iter().map(|_| self.draw(&mut rng)).collect();

        let chunks: Vec<Vec<(usize, DrawnTransform)>> = order
            .iter()
            .copied()
            .zip(draws)
            .collect::<Vec<_>>()
            .chunks(self.batch)
            .map(|c| c.to_vec())
            .collect();

        chunks
            .into_iter()
            .filter_map(move |chunk| self.materialize(&chunk))
    }

    fn draw(&self, rng: &mut ChaCha12Rng) -> DrawnTransform {
        let mut unit = |range: f32| -> f32 {
            let u: f32 = rng.gen_range(-1.0..=1.0);
            u * range
        };
        DrawnTransform {
            theta_deg: unit(self.cfg.rotation_range_deg),
            shift_rows: unit(self.cfg.height_shift_frac),
            shift_cols: unit(self.cfg.width_shift_frac),
            shear_deg: unit(self.cfg.shear_range),
            zoom_rows: 1.0 + unit(self.cfg.zoom_range),
            zoom_cols: 1.0 + unit(self.cfg.zoom_range),
            channel_shift: unit(self.cfg.channel_shift_range),
        }
    }

    fn materialize(&self, chunk: &[(usize, DrawnTransform)]) -> Option<Batch> {
        let (h, w) = self.target;
        let results: Vec<Option<(usize, Array3<f32>)>> = chunk
            .par_iter()
            .map(|(record_index, draw)| {
                let record = &self.records[*record_index];
                match load_image_raw(&record.source_path, self.target) {
                    Ok(raw) => {
                        let transformed = if self.cfg.is_stochastic() {
                            apply_transform(&raw, draw)
                        } else {
                            raw
                        };
                        Some((*record_index, transformed * self.cfg.rescale))
                    }
                    Err(err) => {
                        log::warn!(
                            "skipping corrupt image {} ({err})",
                            record.source_path.display()
                        );
                        None
                    }
                }
            })
            .collect();

        let kept: Vec<(usize, Array3<f32>)> = results.into_iter().flatten().collect();
        if kept.is_empty() {
            return None;
        }

        let mut images = Array4::<f32>::zeros((kept.len(), 3, h, w));
        let mut labels = Array2::<f32>::zeros((kept.len(), self.n_classes));
        let mut record_ids = Vec::with_capacity(kept.len());
        for (b, (record_index, pixels)) in kept.into_iter().enumerate() {
            let record = &self.records[record_index];
            images.index_axis_mut(ndarray::Axis(0), b).assign(&pixels);
            labels[(b, record.label.id)] = 1.0;
            record_ids.push(record.record_id.clone());
        }
        Some(Batch {
            images,
            labels,
            record_ids,
        })
    }
}

/// Decode and resize one image to `[3, H, W]` on the raw 0..255 scale.
fn load_image_raw(path: &Path, target: (usize, usize)) -> Result<Array3<f32>, String> {
    let (h, w) = target;
    let img = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
    let resized = if img.width() as usize == w && img.height() as usize == h {
        img
    } else {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    };
    let mut out = Array3::<f32>::zeros((3, h, w));
    for (x, y, pixel) in resized.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = pixel.0[c] as f32;
        }
    }
    Ok(out)
}

/// Decode and resize one image to `[3, H, W]` on the raw 0..255 scale.
///
/// Single-image counterpart of [`load_eval_batch`] for callers that need
/// the raster itself, such as explanation overlays.
pub fn load_image(path: &Path, target: (usize, usize)) -> Result<Array3<f32>, DatasetError> {
    load_image_raw(path, target).map_err(|detail| DatasetError::Undecodable {
        path: path.to_path_buf(),
        detail,
    })
}

/// Load evaluation batches: resize + rescale only, no stochastic steps.
///
/// Corrupt files are skipped with a warning, mirroring the training
/// stream's behavior.
pub fn load_eval_batch(
    records: &[&ImageRecord],
    n_classes: usize,
    target: (usize, usize),
    rescale: f32,
) -> Batch {
    let (h, w) = target;
    let loaded: Vec<Option<(usize, Array3<f32>)>> = records
        .par_iter()
        .enumerate()
        .map(|(i, record)| match load_image_raw(&record.source_path, target) {
            Ok(raw) => Some((i, raw * rescale)),
            Err(err) => {
                log::warn!(
                    "skipping corrupt image {} ({err})",
                    record.source_path.display()
                );
                None
            }
        })
        .collect();
    let kept: Vec<(usize, Array3<f32>)> = loaded.into_iter().flatten().collect();

    let mut images = Array4::<f32>::zeros((kept.len(), 3, h, w));
    let mut labels = Array2::<f32>::zeros((kept.len(), n_classes));
    let mut record_ids = Vec::with_capacity(kept.len());
    for (b, (i, pixels)) in kept.into_iter().enumerate() {
        images.index_axis_mut(ndarray::Axis(0), b).assign(&pixels);
        labels[(b, records[i].label.id)] = 1.0;
        record_ids.push(records[i].record_id.clone());
    }
    Batch {
        images,
        labels,
        record_ids,
    }
}

/// Apply the drawn affine transform and channel shift to a `[3, H, W]`
/// image on the 0..255 scale.
fn apply_transform(pixels: &Array3<f32>, draw: &DrawnTransform) -> Array3<f32> {
    let (_, h, w) = pixels.dim();
    let matrix = build_affine(draw, h, w);
    let mut out = warp_bilinear(pixels, &matrix);
    if draw.channel_shift != 0.0 {
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        for &v in out.iter() {
            min = min.min(v);
            max = max.max(v);
        }
        out.mapv_inplace(|v| (v + draw.channel_shift).clamp(min, max));
    }
    out
}

/// 3x3 inverse map: output pixel (row, col, 1) -> input coordinates.
///
/// Composition order is rotation, shift, shear, zoom, recentered about the
/// image midpoint.
fn build_affine(draw: &DrawnTransform, h: usize, w: usize) -> [[f32; 3]; 3] {
    let theta = draw.theta_deg.to_radians();
    let shear = draw.shear_deg.to_radians();
    let rotation = [
        [theta.cos(), -theta.sin(), 0.0],
        [theta.sin(), theta.cos(), 0.0],
        [0.0, 0.0, 1.0],
    ];
    let shift = [
        [1.0, 0.0, draw.shift_rows * h as f32],
        [0.0, 1.0, draw.shift_cols * w as f32],
        [0.0, 0.0, 1.0],
    ];
    let shear_m = [
        [1.0, -shear.sin(), 0.0],
        [0.0, shear.cos(), 0.0],
        [0.0, 0.0, 1.0],
    ];
    let zoom = [
        [draw.zoom_rows, 0.0, 0.0],
        [0.0, draw.zoom_cols, 0.0],
        [0.0, 0.0, 1.0],
    ];
    let m = mat3_mul(&mat3_mul(&mat3_mul(&rotation, &shift), &shear_m), &zoom);

    let cr = (h as f32 - 1.0) / 2.0;
    let cc = (w as f32 - 1.0) / 2.0;
    let to_origin = [[1.0, 0.0, -cr], [0.0, 1.0, -cc], [0.0, 0.0, 1.0]];
    let from_origin = [[1.0, 0.0, cr], [0.0, 1.0, cc], [0.0, 0.0, 1.0]];
    mat3_mul(&mat3_mul(&from_origin, &m), &to_origin)
}

fn mat3_mul(a: &[[f32; 3]; 3], b: &[[f32; 3]; 3]) -> [[f32; 3]; 3] {
    let mut out = [[0.0f32; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Inverse-map bilinear warp with edge-clamp (nearest) fill.
fn warp_bilinear(pixels: &Array3<f32>, m: &[[f32; 3]; 3]) -> Array3<f32> {
    let (channels, h, w) = pixels.dim();
    let mut out = Array3::<f32>::zeros((channels, h, w));
    for row in 0..h {
        for col in 0..w {
            let r = row as f32;
            let c = col as f32;
            let src_r = m[0][0] * r + m[0][1] * c + m[0][2];
            let src_c = m[1][0] * r + m[1][1] * c + m[1][2];
            let r0 = src_r.floor();
            let c0 = src_c.floor();
            let fr = src_r - r0;
            let fc = src_c - c0;
            let clamp_r = |v: f32| (v.max(0.0) as usize).min(h - 1);
            let clamp_c = |v: f32| (v.max(0.0) as usize).min(w - 1);
            let (r0i, r1i) = (clamp_r(r0), clamp_r(r0 + 1.0));
            let (c0i, c1i) = (clamp_c(c0), clamp_c(c0 + 1.0));
            for ch in 0..channels {
                let v00 = pixels[(ch, r0i, c0i)];
                let v01 = pixels[(ch, r0i, c1i)];
                let v10 = pixels[(ch, r1i, c0i)];
                let v11 = pixels[(ch, r1i, c1i)];
                let top = v00 * (1.0 - fc) + v01 * fc;
                let bottom = v10 * (1.0 - fc) + v11 * fc;
                out[(ch, row, col)] = top * (1.0 - fr) + bottom * fr;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_dataset, testutil, DEFAULT_VOCAB};
    use tempfile::TempDir;

    fn stream_over(
        counts: &[usize],
        cfg: AugmentationConfig,
        target: (usize, usize),
        batch: usize,
        seed: u64,
    ) -> (TempDir, AugmentationStream) {
        let dir = TempDir::new().unwrap();
        testutil::write_corpus(dir.path(), &DEFAULT_VOCAB, counts, target.0 as u32, 5);
        let index = load_dataset(dir.path(), &DEFAULT_VOCAB).unwrap();
        let stream = AugmentationStream::new(
            index.records.clone(),
            index.n_classes(),
            cfg,
            target,
            batch,
            seed,
        )
        .unwrap();
        (dir, stream)
    }

    #[test]
    fn identity_config_rescales_only() {
        let dir = TempDir::new().unwrap();
        testutil::write_corpus(dir.path(), &DEFAULT_VOCAB, &[1, 1, 1, 1], 12, 5);
        let index = load_dataset(dir.path(), &DEFAULT_VOCAB).unwrap();
        let stream = AugmentationStream::new(
            index.records.clone(),
            4,
            AugmentationConfig::identity(),
            (12, 12),
            4,
            1,
        )
        .unwrap();
        let batch = stream.epoch(0).next().unwrap();
        // Every emitted pixel must be a source byte divided by 255.
        for &v in batch.images.iter() {
            let raw = v * 255.0;
            assert!(
                (raw - raw.round()).abs() < 1e-4,
                "pixel {v} is not a rescaled byte"
            );
            assert!((0.0..=1.0).contains(&v));
        }
        // Labels are exact one-hot rows.
        for row in batch.labels.rows() {
            assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(row.sum(), 1.0);
        }
    }

    #[test]
    fn remainder_batch_sizes() {
        let (_dir, stream) = stream_over(&[9, 8, 8, 8], AugmentationConfig::default(), (8, 8), 16, 3);
        let sizes: Vec<usize> = stream.epoch(0).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![16, 16, 1]);
        assert_eq!(stream.batches_per_epoch(), 3);
    }

    #[test]
    fn fixed_seed_reproduces_first_batch_exactly() {
        let (_dir, stream) = stream_over(&[4, 4, 4, 4], AugmentationConfig::default(), (10, 10), 6, 9);
        let a = stream.epoch(0).next().unwrap();
        let b = stream.epoch(0).next().unwrap();
        assert_eq!(a.record_ids, b.record_ids);
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn epochs_differ_under_stochastic_config() {
        let (_dir, stream) = stream_over(&[4, 4, 4, 4], AugmentationConfig::default(), (10, 10), 16, 9);
        let a = stream.epoch(0).next().unwrap();
        let b = stream.epoch(1).next().unwrap();
        assert!(a.record_ids != b.record_ids || a.images != b.images);
    }

    #[test]
    fn output_shape_and_range() {
        let (_dir, stream) = stream_over(&[3, 3, 3, 3], AugmentationConfig::default(), (15, 15), 5, 2);
        for batch in stream.epoch(0) {
            let (b, c, h, w) = batch.images.dim();
            assert_eq!((c, h, w), (3, 15, 15));
            assert_eq!(batch.labels.dim(), (b, 4));
            for &v in batch.images.iter() {
                assert!(v.is_finite());
                assert!((-0.2..=1.2).contains(&v), "pixel {v} far outside range");
            }
        }
    }

    #[test]
    fn corrupt_file_is_skipped_mid_stream() {
        let dir = TempDir::new().unwrap();
        testutil::write_corpus(dir.path(), &DEFAULT_VOCAB, &[2, 2, 2, 2], 8, 5);
        // Overwrite one file with junk after indexing so the stream hits it.
        let index = load_dataset(dir.path(), &DEFAULT_VOCAB).unwrap();
        std::fs::write(dir.path().join("Measles/Measles_0000.png"), b"junk").unwrap();
        let stream = AugmentationStream::new(
            index.records.clone(),
            4,
            AugmentationConfig::identity(),
            (8, 8),
            8,
            1,
        )
        .unwrap();
        let total: usize = stream.epoch(0).map(|b| b.len()).sum();
        assert_eq!(total, 7);
    }

    #[test]
    fn eval_batch_is_resize_rescale_only() {
        let dir = TempDir::new().unwrap();
        testutil::write_corpus(dir.path(), &DEFAULT_VOCAB, &[2, 1, 1, 1], 8, 5);
        let index = load_dataset(dir.path(), &DEFAULT_VOCAB).unwrap();
        let refs: Vec<&ImageRecord> = index.records.iter().collect();
        let batch = load_eval_batch(&refs, 4, (8, 8), 1.0 / 255.0);
        assert_eq!(batch.len(), 5);
        let again = load_eval_batch(&refs, 4, (8, 8), 1.0 / 255.0);
        assert_eq!(batch.images, again.images);
    }

    #[test]
    fn zero_rotation_warp_is_identity() {
        let draw = DrawnTransform {
            theta_deg: 0.0,
            shift_rows: 0.0,
            shift_cols: 0.0,
            shear_deg: 0.0,
            zoom_rows: 1.0,
            zoom_cols: 1.0,
            channel_shift: 0.0,
        };
        let mut pixels = Array3::<f32>::zeros((3, 6, 6));
        for (i, v) in pixels.iter_mut().enumerate() {
            *v = i as f32;
        }
        let out = apply_transform(&pixels, &draw);
        for (a, b) in pixels.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
