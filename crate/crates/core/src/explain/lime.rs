//! Local interpretable model-agnostic explanations over superpixels.
//!
//! The image is segmented SLIC-style into roughly `n_segments` compact
//! regions. `n_samples` random on/off masks over those segments perturb
//! the image (row 0 keeps everything on); the model scores every masked
//! variant, and a ridge surrogate weighted by an exponential kernel on
//! cosine distance from the unperturbed mask is fitted per target label.
//! The segments with the largest absolute coefficients are the
//! explanation. Everything downstream of the seed is deterministic.

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ModelHandle;

use super::ExplainError;

/// Batched probability inference over raw `[B, 3, H, W]` images.
///
/// Implementations own any preprocessing (rescaling, normalization).
/// The trait decouples the sampler from model plumbing so tests can
/// plant synthetic scoring rules.
pub trait Classifier {
    /// Probabilities shaped `[B, n_classes]`, rows aligned to the batch.
    fn predict(&self, images: &Array4<f32>) -> Result<Array2<f32>, String>;
}

/// A trained model plus its inference-time rescale factor.
pub struct ModelClassifier {
    model: ModelHandle,
    rescale: f32,
}

impl ModelClassifier {
    pub fn new(model: ModelHandle, rescale: f32) -> Self {
        Self { model, rescale }
    }

    pub fn model(&self) -> &ModelHandle {
        &self.model
    }
}

impl Classifier for ModelClassifier {
    fn predict(&self, images: &Array4<f32>) -> Result<Array2<f32>, String> {
        let scaled = images.mapv(|v| v * self.rescale).into_dyn();
        self.model.predict_probs(scaled).map_err(|e| e.to_string())
    }
}

/// What hidden segments are replaced with, on the raw 0..255 scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFill {
    /// Each hidden segment shows its own mean color, hiding texture but
    /// not brightness.
    SegmentMean,
    /// Every hidden pixel becomes this gray value.
    Constant(f32),
}

/// Sampling and surrogate parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LimeConfig {
    /// Segments kept per explained label.
    pub n_features: usize,
    /// Random masks drawn (the first is always all-on).
    pub n_samples: usize,
    /// How many of the highest-probability labels to explain.
    pub top_labels: usize,
    /// Requested superpixel count; the actual count may differ slightly.
    pub n_segments: usize,
    /// SLIC compactness: higher favors square segments over color edges.
    pub compactness: f32,
    /// SLIC assignment/update rounds.
    pub slic_iterations: usize,
    /// Width of the exponential kernel on cosine distance.
    pub kernel_width: f64,
    /// L2 penalty of the ridge surrogate.
    pub ridge_alpha: f64,
    /// Replacement for hidden segments.
    pub mask_fill: MaskFill,
    /// Masked variants scored per inference call.
    pub batch_size: usize,
    /// Seed for the mask draws.
    pub seed: u64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            n_features: 5,
            n_samples: 1000,
            top_labels: 4,
            n_segments: 50,
            compactness: 10.0,
            slic_iterations: 10,
            kernel_width: 0.25,
            ridge_alpha: 1.0,
            mask_fill: MaskFill::SegmentMean,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl LimeConfig {
    pub fn validate(&self) -> Result<(), ExplainError> {
        let bad = |msg: String| Err(ExplainError::BadConfig(msg));
        if self.n_features == 0 {
            return bad("n_features must be at least 1".into());
        }
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1".into());
        }
        if self.top_labels == 0 {
            return bad("top_labels must be at least 1".into());
        }
        if self.n_segments == 0 {
            return bad("n_segments must be at least 1".into());
        }
        if !(self.compactness > 0.0 && self.compactness.is_finite()) {
            return bad(format!("compactness {} must be positive", self.compactness));
        }
        if self.slic_iterations == 0 {
            return bad("slic_iterations must be at least 1".into());
        }
        if !(self.kernel_width > 0.0 && self.kernel_width.is_finite()) {
            return bad(format!("kernel_width {} must be positive", self.kernel_width));
        }
        if !(self.ridge_alpha >= 0.0 && self.ridge_alpha.is_finite()) {
            return bad(format!("ridge_alpha {} must be non-negative", self.ridge_alpha));
        }
        if let MaskFill::Constant(v) = self.mask_fill {
            if !v.is_finite() {
                return bad(format!("mask_fill constant {v} must be finite"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }
}

/// One attributed superpixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentWeight {
    /// Label in the segmentation grid.
    pub segment: u32,
    /// Surrogate coefficient; positive weights support the label.
    pub weight: f64,
}

/// A per-label superpixel attribution for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelExplanation {
    /// Segment label per pixel, contiguous from 0.
    pub segments: Array2<u32>,
    /// Explained class indices, highest predicted probability first.
    pub target_labels: Vec<usize>,
    /// Parallel to `target_labels`: the highest-|weight| segments each,
    /// sorted by descending |weight|.
    pub selected_features: Vec<Vec<SegmentWeight>>,
    /// Seed the masks were drawn with.
    pub seed: u64,
    /// Number of masks scored.
    pub n_samples: usize,
}

impl SuperpixelExplanation {
    /// Number of distinct segments.
    pub fn n_segments(&self) -> usize {
        self.segments.iter().copied().max().map_or(0, |m| m as usize + 1)
    }

    /// Selected segments for a class, if it was explained.
    pub fn features_for(&self, class: usize) -> Option<&[SegmentWeight]> {
        self.target_labels
            .iter()
            .position(|&l| l == class)
            .map(|i| self.selected_features[i].as_slice())
    }
}

/// Explain one raw `[3, H, W]` image under the given classifier.
pub fn lime_explain<C: Classifier + ?Sized>(
    model: &C,
    image: &Array3<f32>,
    cfg: &LimeConfig,
) -> Result<SuperpixelExplanation, ExplainError> {
    cfg.validate()?;
    let (chan, h, w) = image.dim();
    if chan != 3 {
        return Err(ExplainError::ImageShape {
            expected: vec![3, h, w],
            got: image.shape().to_vec(),
        });
    }

    let segments = slic_segments(image, cfg.n_segments, cfg.compactness, cfg.slic_iterations);
    let n_seg = segments.iter().copied().max().unwrap_or(0) as usize + 1;
    let fill = build_fill(image, &segments, n_seg, cfg.mask_fill);

    // Bernoulli design matrix; the first row keeps every segment on so
    // the sample set is anchored at the unperturbed instance.
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut masks = Array2::<f32>::zeros((cfg.n_samples, n_seg));
    masks.mapv_inplace(|_| f32::from(rng.gen_range(0..2u8)));
    masks.row_mut(0).fill(1.0);

    let probs = score_masks(model, image, &fill, &segments, &masks, cfg)?;
    let n_classes = probs.ncols();

    // Exponential kernel on cosine distance from the all-on mask.
    let weights: Vec<f64> = (0..cfg.n_samples)
        .map(|i| {
            let on = f64::from(masks.row(i).sum());
            let distance = 1.0 - (on / n_seg as f64).sqrt();
            (-(distance * distance) / (cfg.kernel_width * cfg.kernel_width))
                .exp()
                .sqrt()
        })
        .collect();

    let mut order: Vec<usize> = (0..n_classes).collect();
    order.sort_by(|&a, &b| {
        probs[(0, b)]
            .partial_cmp(&probs[(0, a)])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let target_labels: Vec<usize> = order.into_iter().take(cfg.top_labels).collect();

    let design = masks.mapv(f64::from);
    let mut selected_features = Vec::with_capacity(target_labels.len());
    for &label in &target_labels {
        let y: Vec<f64> = (0..cfg.n_samples).map(|i| probs[(i, label)]).collect();
        let beta = weighted_ridge(&design, &y, &weights, cfg.ridge_alpha);
        let mut idx: Vec<usize> = (0..n_seg).collect();
        idx.sort_by(|&a, &b| {
            beta[b]
                .abs()
                .partial_cmp(&beta[a].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        selected_features.push(
            idx.into_iter()
                .take(cfg.n_features)
                .map(|j| SegmentWeight {
                    segment: j as u32,
                    weight: beta[j],
                })
                .collect(),
        );
    }

    Ok(SuperpixelExplanation {
        segments,
        target_labels,
        selected_features,
        seed: cfg.seed,
        n_samples: cfg.n_samples,
    })
}

/// Score every mask row, batched; aborts with the progress count on the
/// first inference failure.
fn score_masks<C: Classifier + ?Sized>(
    model: &C,
    image: &Array3<f32>,
    fill: &Array3<f32>,
    segments: &Array2<u32>,
    masks: &Array2<f32>,
    cfg: &LimeConfig,
) -> Result<Array2<f64>, ExplainError> {
    let (_, h, w) = image.dim();
    let total = masks.nrows();
    let fail = |done: usize, detail: String| ExplainError::Inference {
        done,
        total,
        detail,
    };

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut n_classes: Option<usize> = None;
    let mut done = 0;
    while done < total {
        let take = cfg.batch_size.min(total - done);
        let mut batch = Array4::<f32>::zeros((take, 3, h, w));
        for b in 0..take {
            let mask = masks.row(done + b);
            for y in 0..h {
                for x in 0..w {
                    let seg = segments[(y, x)] as usize;
                    let src = if mask[seg] > 0.0 { image } else { fill };
                    for c in 0..3 {
                        batch[(b, c, y, x)] = src[(c, y, x)];
                    }
                }
            }
        }
        let out = model.predict(&batch).map_err(|detail| fail(done, detail))?;
        if out.nrows() != take {
            return Err(fail(
                done,
                format!("model returned {} rows for a batch of {take}", out.nrows()),
            ));
        }
        match n_classes {
            None if out.ncols() == 0 => {
                return Err(fail(done, "model returned zero classes".into()));
            }
            None => n_classes = Some(out.ncols()),
            Some(nc) if nc != out.ncols() => {
                return Err(fail(
                    done,
                    format!("model switched from {nc} to {} classes", out.ncols()),
                ));
            }
            Some(_) => {}
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(fail(done, "model returned non-finite probabilities".into()));
        }
        for r in 0..take {
            rows.push((0..out.ncols()).map(|c| f64::from(out[(r, c)])).collect());
        }
        done += take;
    }

    let nc = n_classes.expect("n_samples is validated to be at least 1");
    let mut probs = Array2::<f64>::zeros((total, nc));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            probs[(i, j)] = v;
        }
    }
    Ok(probs)
}

/// Replacement image for hidden segments.
fn build_fill(
    image: &Array3<f32>,
    segments: &Array2<u32>,
    n_seg: usize,
    fill: MaskFill,
) -> Array3<f32> {
    let (c, h, w) = image.dim();
    match fill {
        MaskFill::Constant(v) => Array3::from_elem((c, h, w), v),
        MaskFill::SegmentMean => {
            let mut sums = Array2::<f64>::zeros((n_seg, c));
            let mut counts = vec![0f64; n_seg];
            for y in 0..h {
                for x in 0..w {
                    let seg = segments[(y, x)] as usize;
                    counts[seg] += 1.0;
                    for ch in 0..c {
                        sums[(seg, ch)] += f64::from(image[(ch, y, x)]);
                    }
                }
            }
            let mut out = Array3::<f32>::zeros((c, h, w));
            for y in 0..h {
                for x in 0..w {
                    let seg = segments[(y, x)] as usize;
                    for ch in 0..c {
                        out[(ch, y, x)] = (sums[(seg, ch)] / counts[seg]) as f32;
                    }
                }
            }
            out
        }
    }
}

/// SLIC-style superpixels: k-means over (color, position) with a
/// compactness-scaled spatial term, then connectivity enforcement.
///
/// Returns per-pixel labels, contiguous from 0 in raster order of first
/// appearance. The result is deterministic; the actual segment count
/// tracks `n_segments` only approximately.
pub fn slic_segments(
    image: &Array3<f32>,
    n_segments: usize,
    compactness: f32,
    iterations: usize,
) -> Array2<u32> {
    let (c, h, w) = image.dim();
    let k = n_segments.clamp(1, h * w);
    let step = ((h * w) as f32 / k as f32).sqrt().max(1.0);
    let rows = (h as f32 / step).round().max(1.0) as usize;
    let cols = (w as f32 / step).round().max(1.0) as usize;

    // Color distances run on a 0..100 scale so the default compactness
    // balances the two terms the way it does in L*a*b* implementations.
    const COLOR_SCALE: f32 = 100.0 / 255.0;
    let pixel = |y: usize, x: usize| -> Vec<f32> {
        (0..c).map(|ch| image[(ch, y, x)] * COLOR_SCALE).collect()
    };

    struct Center {
        y: f32,
        x: f32,
        color: Vec<f32>,
    }
    let mut centers: Vec<Center> = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for col in 0..cols {
            let cy = ((r as f32 + 0.5) * h as f32 / rows as f32) as usize;
            let cx = ((col as f32 + 0.5) * w as f32 / cols as f32) as usize;
            let (cy, cx) = (cy.min(h - 1), cx.min(w - 1));
            centers.push(Center {
                y: cy as f32,
                x: cx as f32,
                color: pixel(cy, cx),
            });
        }
    }

    let radius = (2.0 * step).ceil() as usize;
    let spatial_scale = (compactness / step) * (compactness / step);
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut dist = Array2::<f32>::from_elem((h, w), f32::INFINITY);
    for _ in 0..iterations.max(1) {
        dist.fill(f32::INFINITY);
        for (ci, center) in centers.iter().enumerate() {
            let cy = center.y.round() as usize;
            let cx = center.x.round() as usize;
            let y0 = cy.saturating_sub(radius);
            let y1 = (cy + radius + 1).min(h);
            let x0 = cx.saturating_sub(radius);
            let x1 = (cx + radius + 1).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    let mut dc = 0.0f32;
                    for ch in 0..c {
                        let d = image[(ch, y, x)] * COLOR_SCALE - center.color[ch];
                        dc += d * d;
                    }
                    let dy = y as f32 - center.y;
                    let dx = x as f32 - center.x;
                    let d = dc + (dy * dy + dx * dx) * spatial_scale;
                    if d < dist[(y, x)] {
                        dist[(y, x)] = d;
                        labels[(y, x)] = ci as u32;
                    }
                }
            }
        }
        // Window coverage leaves no pixel unassigned, but guard against
        // degenerate geometry by snapping strays to the nearest center.
        for y in 0..h {
            for x in 0..w {
                if dist[(y, x)].is_infinite() {
                    let nearest = centers
                        .iter()
                        .enumerate()
                        .min_by(|(_, a), (_, b)| {
                            let da = (y as f32 - a.y).powi(2) + (x as f32 - a.x).powi(2);
                            let db = (y as f32 - b.y).powi(2) + (x as f32 - b.x).powi(2);
                            da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
                        })
                        .map(|(i, _)| i)
                        .unwrap_or(0);
                    labels[(y, x)] = nearest as u32;
                }
            }
        }

        let mut sums: Vec<(f64, f64, Vec<f64>, f64)> = centers
            .iter()
            .map(|_| (0.0, 0.0, vec![0.0; c], 0.0))
            .collect();
        for y in 0..h {
            for x in 0..w {
                let s = &mut sums[labels[(y, x)] as usize];
                s.0 += y as f64;
                s.1 += x as f64;
                for ch in 0..c {
                    s.2[ch] += f64::from(image[(ch, y, x)] * COLOR_SCALE);
                }
                s.3 += 1.0;
            }
        }
        for (center, (sy, sx, scol, n)) in centers.iter_mut().zip(sums) {
            if n == 0.0 {
                continue;
            }
            center.y = (sy / n) as f32;
            center.x = (sx / n) as f32;
            for (color, sum) in center.color.iter_mut().zip(&scol) {
                *color = (*sum / n) as f32;
            }
        }
    }

    let min_size = (h * w / k).max(4) / 4;
    enforce_connectivity(&labels, min_size)
}

/// Relabel 4-connected components in raster order, merging those smaller
/// than `min_size` into the previously seen adjacent component.
fn enforce_connectivity(labels: &Array2<u32>, min_size: usize) -> Array2<u32> {
    let (h, w) = labels.dim();
    let mut out = Array2::<i64>::from_elem((h, w), -1);
    let mut next: i64 = 0;
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if out[(sy, sx)] >= 0 {
                continue;
            }
            let value = labels[(sy, sx)];
            let mut adjacent: Option<i64> = None;
            component.clear();
            stack.push((sy, sx));
            out[(sy, sx)] = i64::MAX; // visit marker
            while let Some((y, x)) = stack.pop() {
                component.push((y, x));
                let neighbors = [
                    (y.wrapping_sub(1), x),
                    (y + 1, x),
                    (y, x.wrapping_sub(1)),
                    (y, x + 1),
                ];
                for (ny, nx) in neighbors {
                    if ny >= h || nx >= w {
                        continue;
                    }
                    let seen = out[(ny, nx)];
                    if labels[(ny, nx)] == value {
                        if seen < 0 {
                            out[(ny, nx)] = i64::MAX;
                            stack.push((ny, nx));
                        }
                    } else if seen >= 0 && seen != i64::MAX && adjacent.is_none() {
                        adjacent = Some(seen);
                    }
                }
            }
            let assign = match adjacent {
                Some(a) if component.len() < min_size => a,
                _ => {
                    next += 1;
                    next - 1
                }
            };
            for &(y, x) in &component {
                out[(y, x)] = assign;
            }
        }
    }
    out.mapv(|v| v as u32)
}

/// Weighted ridge regression with an intercept; returns the coefficient
/// vector. A singular system (possible only with a zero penalty)
/// collapses to the zero surrogate.
fn weighted_ridge(x: &Array2<f64>, y: &[f64], w: &[f64], alpha: f64) -> Vec<f64> {
    let (n, k) = x.dim();
    let sw: f64 = w.iter().sum();
    let mut xbar = vec![0.0f64; k];
    let mut ybar = 0.0f64;
    for i in 0..n {
        for j in 0..k {
            xbar[j] += w[i] * x[(i, j)];
        }
        ybar += w[i] * y[i];
    }
    for m in &mut xbar {
        *m /= sw;
    }
    ybar /= sw;

    let mut gram = Array2::<f64>::zeros((k, k));
    let mut rhs = vec![0.0f64; k];
    let mut xc = vec![0.0f64; k];
    for i in 0..n {
        let yc = y[i] - ybar;
        for j in 0..k {
            xc[j] = x[(i, j)] - xbar[j];
        }
        for j in 0..k {
            let wx = w[i] * xc[j];
            rhs[j] += wx * yc;
            for l in j..k {
                gram[(j, l)] += wx * xc[l];
            }
        }
    }
    for j in 0..k {
        for l in 0..j {
            gram[(j, l)] = gram[(l, j)];
        }
        gram[(j, j)] += alpha;
    }
    solve(gram, rhs).unwrap_or_else(|| vec![0.0; k])
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Array2<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let k = b.len();
    for col in 0..k {
        let mut pivot = col;
        for r in col + 1..k {
            if a[(r, col)].abs() > a[(pivot, col)].abs() {
                pivot = r;
            }
        }
        if a[(pivot, col)].abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for cc in 0..k {
                let tmp = a[(col, cc)];
                a[(col, cc)] = a[(pivot, cc)];
                a[(pivot, cc)] = tmp;
            }
            b.swap(col, pivot);
        }
        for r in col + 1..k {
            let f = a[(r, col)] / a[(col, col)];
            if f == 0.0 {
                continue;
            }
            for cc in col..k {
                a[(r, cc)] -= f * a[(col, cc)];
            }
            b[r] -= f * b[col];
        }
    }
    let mut beta = vec![0.0f64; k];
    for col in (0..k).rev() {
        let mut acc = b[col];
        for cc in col + 1..k {
            acc -= a[(col, cc)] * beta[cc];
        }
        beta[col] = acc / a[(col, col)];
    }
    Some(beta)
}
