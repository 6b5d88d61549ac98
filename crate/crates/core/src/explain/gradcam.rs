//! Gradient-weighted class activation maps.
//!
//! The class score (pre-softmax logit) is backpropagated to a named
//! spatial layer. Averaging the gradient over each channel's spatial
//! extent gives per-channel weights; the ReLU of the weighted channel sum
//! is the localization map, bilinearly upsampled to the input size and
//! normalized so its maximum is 1.

use ndarray::{Array2, Array3, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::ModelHandle;
use crate::nn::{BackwardSpec, Graph, NodeId};

use super::ExplainError;

/// A class activation map aligned to the model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatMap {
    /// Input-sized grid of non-negative values with maximum 1 unless the
    /// map is all zeros.
    pub grid: Array2<f32>,
    /// Class index the map explains.
    pub target_class: usize,
    /// Name of the layer the gradients were taken at.
    pub source_layer: String,
    /// Maximum of the weighted channel sum before normalization; 0 when
    /// the map is all zeros.
    pub peak: f32,
    /// True when every weighted activation was non-positive, which leaves
    /// nothing to localize.
    pub is_zero: bool,
}

impl HeatMap {
    /// Grid dimensions as (height, width).
    pub fn dim(&self) -> (usize, usize) {
        self.grid.dim()
    }
}

/// Grad-CAM for a model handle on one raw `[3, H, W]` image.
///
/// The image is scaled by `rescale` exactly as in inference. `layer_id`
/// defaults to the registry's last convolutional feature map and
/// `target_class` to the predicted class.
pub fn grad_cam(
    model: &ModelHandle,
    image: &Array3<f32>,
    rescale: f32,
    layer_id: Option<&str>,
    target_class: Option<usize>,
) -> Result<HeatMap, ExplainError> {
    let spec = model.spec();
    let (h, w) = spec.input_size;
    if image.dim() != (3, h, w) {
        return Err(ExplainError::ImageShape {
            expected: vec![3, h, w],
            got: image.shape().to_vec(),
        });
    }
    let layer = layer_id.unwrap_or(spec.feature_source);
    let x = image.mapv(|v| v * rescale).insert_axis(Axis(0)).into_dyn();
    grad_cam_on_graph(model.graph(), model.logits_node(), x, layer, target_class)
}

/// Grad-CAM on a bare graph, seeding the backward pass at `score_node`.
///
/// `x` is one preprocessed sample shaped `[1, C, H, W]`; `score_node`
/// must produce per-class scores shaped `[1, n_classes]`. A missing
/// `target_class` resolves to the argmax score, ties toward the lowest
/// index.
pub fn grad_cam_on_graph(
    graph: &Graph,
    score_node: NodeId,
    x: ArrayD<f32>,
    layer_id: &str,
    target_class: Option<usize>,
) -> Result<HeatMap, ExplainError> {
    let input_shape = graph.node_shape(graph.input_node());
    if x.ndim() != 4 || x.shape()[0] != 1 || x.shape()[1..] != *input_shape {
        let mut expected = vec![1];
        expected.extend_from_slice(input_shape);
        return Err(ExplainError::ImageShape {
            expected,
            got: x.shape().to_vec(),
        });
    }
    let layer = graph
        .node_id(layer_id)
        .map_err(|_| unknown_layer(graph, layer_id))?;
    let feat_shape = graph.node_shape(layer).to_vec();
    if feat_shape.len() != 3 {
        return Err(ExplainError::NotSpatial {
            layer: layer_id.to_string(),
            shape: feat_shape,
        });
    }
    let (out_h, out_w) = (x.shape()[2], x.shape()[3]);

    let acts = graph.forward_eval(x)?;
    let scores = acts.value(score_node);
    if scores.ndim() != 2 || scores.shape()[0] != 1 {
        return Err(ExplainError::NotSpatial {
            layer: graph.node(score_node).name.clone(),
            shape: scores.shape().to_vec(),
        });
    }
    let n_classes = scores.shape()[1];
    let target = match target_class {
        Some(class) if class >= n_classes => {
            return Err(ExplainError::BadTarget { class, n_classes });
        }
        Some(class) => class,
        None => {
            let row: Vec<f32> = (0..n_classes).map(|j| scores[[0, j]]).collect();
            argmax(&row)
        }
    };

    let mut seed_grad = ArrayD::<f32>::zeros(scores.raw_dim());
    seed_grad[[0, target]] = 1.0;
    let grads = graph.backward(
        &acts,
        BackwardSpec {
            seed: score_node,
            seed_grad,
            param_grads: false,
            node_grads: &[layer],
        },
    )?;
    let feature = acts.value(layer);
    // Nodes the score does not depend on get no gradient entry; their
    // gradient is zero and so is their map.
    let zero = ArrayD::<f32>::zeros(feature.raw_dim());
    let grad = grads.nodes.get(&layer).unwrap_or(&zero);

    let (channels, fh, fw) = (feat_shape[0], feat_shape[1], feat_shape[2]);
    let spatial = (fh * fw) as f32;
    let mut cam = Array2::<f32>::zeros((fh, fw));
    for ch in 0..channels {
        let mut alpha = 0.0f32;
        for y in 0..fh {
            for xx in 0..fw {
                alpha += grad[[0, ch, y, xx]];
            }
        }
        alpha /= spatial;
        if alpha == 0.0 {
            continue;
        }
        for y in 0..fh {
            for xx in 0..fw {
                cam[(y, xx)] += alpha * feature[[0, ch, y, xx]];
            }
        }
    }
    // ReLU maps NaN to zero, so check finiteness before it runs.
    if cam.iter().any(|v| !v.is_finite()) {
        return Err(ExplainError::NonFinite(layer_id.to_string()));
    }
    cam.mapv_inplace(|v| v.max(0.0));

    let mut grid = upsample_bilinear(&cam, out_h, out_w);
    let peak = grid.fold(0.0f32, |m, &v| m.max(v));
    let is_zero = peak <= 0.0;
    if !is_zero {
        grid.mapv_inplace(|v| v / peak);
    }
    Ok(HeatMap {
        grid,
        target_class: target,
        source_layer: layer_id.to_string(),
        peak,
        is_zero,
    })
}

/// Index of the largest value, ties toward the lowest index.
fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn unknown_layer(graph: &Graph, layer: &str) -> ExplainError {
    let names: Vec<&str> = (0..graph.n_nodes())
        .filter(|&id| graph.node_shape(id).len() == 3)
        .map(|id| graph.node(id).name.as_str())
        .collect();
    // The layers nearest the head are the usual Grad-CAM targets, so
    // show the tail of the topological order.
    const SHOW: usize = 12;
    let tail = names.len().saturating_sub(SHOW);
    let mut candidates = names[tail..].join(", ");
    if tail > 0 {
        candidates.push_str(&format!(" (+{tail} earlier)"));
    }
    ExplainError::UnknownLayer {
        layer: layer.to_string(),
        graph: graph.name().to_string(),
        candidates,
    }
}

/// Bilinear resize with half-pixel centers; same-size input is returned
/// unchanged.
fn upsample_bilinear(grid: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = grid.dim();
    if (h, w) == (out_h, out_w) {
        return grid.clone();
    }
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let mut out = Array2::<f32>::zeros((out_h, out_w));
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            let top = grid[(y0, x0)] * (1.0 - tx) + grid[(y0, x1)] * tx;
            let bottom = grid[(y1, x0)] * (1.0 - tx) + grid[(y1, x1)] * tx;
            out[(oy, ox)] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Conv2dCfg, GraphBuilder, Padding};
    use ndarray::{s, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn conv_cfg(filters: usize, stride: usize) -> Conv2dCfg {
        Conv2dCfg {
            filters,
            kernel: (3, 3),
            stride: (stride, stride),
            padding: Padding::Same,
            use_bias: true,
        }
    }

    /// input -> conv -> activation -> gap -> dense scores.
    fn cam_probe_with(stride: usize, n_classes: usize, act: Activation) -> Graph {
        let mut b = GraphBuilder::new("cam_probe", Some(7));
        let x = b.input("in", &[3, 8, 8]).unwrap();
        let x = b.conv2d("conv", x, conv_cfg(4, stride)).unwrap();
        let x = b.activation("feat", x, act).unwrap();
        let x = b.global_avg_pool("gap", x).unwrap();
        let x = b.dense("logits", x, n_classes).unwrap();
        b.finish(x).unwrap()
    }

    fn cam_probe(stride: usize, n_classes: usize) -> Graph {
        cam_probe_with(stride, n_classes, Activation::Relu)
    }

    fn probe_input(seed: u64) -> Array4<f32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut x = Array4::<f32>::zeros((1, 3, 8, 8));
        x.mapv_inplace(|_| rng.gen_range(0.2..0.8f32));
        x
    }

    fn class_score(graph: &Graph, x: &Array4<f32>, class: usize) -> f32 {
        let acts = graph.forward_eval(x.clone().into_dyn()).unwrap();
        acts.value(graph.output_node())[[0, class]]
    }

    #[test]
    fn channel_weights_match_finite_differences() {
        // Probing the input node makes the feature map observable, so
        // the map can be rebuilt from finite-difference weights. The
        // probe uses a smooth activation: shifting a whole channel by
        // epsilon would cross relu kinks and bias the difference
        // quotient.
        let graph = cam_probe_with(1, 3, Activation::Swish);
        let x = probe_input(11);
        let map =
            grad_cam_on_graph(&graph, graph.output_node(), x.clone().into_dyn(), "in", Some(1))
                .unwrap();

        let eps = 1e-2f32;
        let mut expected = Array2::<f32>::zeros((8, 8));
        for ch in 0..3 {
            // A uniform shift of one channel differentiates the score by
            // the summed per-pixel gradient: spatial size times alpha.
            let mut plus = x.clone();
            plus.slice_mut(s![0, ch, .., ..]).mapv_inplace(|v| v + eps);
            let mut minus = x.clone();
            minus.slice_mut(s![0, ch, .., ..]).mapv_inplace(|v| v - eps);
            let summed =
                (class_score(&graph, &plus, 1) - class_score(&graph, &minus, 1)) / (2.0 * eps);
            let alpha = summed / 64.0;
            expected
                .iter_mut()
                .zip(x.slice(s![0, ch, .., ..]).iter())
                .for_each(|(e, &a)| *e += alpha * a);
        }
        expected.mapv_inplace(|v| v.max(0.0));
        let peak = expected.fold(0.0f32, |m, &v| m.max(v));
        assert!(peak > 0.0, "degenerate probe: all-zero expected map");

        let rel_peak = (map.peak - peak).abs() / peak;
        assert!(rel_peak <= 1e-2, "peak off by {rel_peak}");
        for (got, want) in map.grid.iter().zip(expected.iter()) {
            assert!(
                (got - want / peak).abs() <= 1e-2,
                "grid mismatch: {got} vs {}",
                want / peak
            );
        }
    }

    #[test]
    fn default_target_is_the_predicted_class() {
        let graph = cam_probe(1, 3);
        let x = probe_input(3);
        let acts = graph.forward_eval(x.clone().into_dyn()).unwrap();
        let scores = acts.value(graph.output_node());
        let row: Vec<f32> = (0..3).map(|j| scores[[0, j]]).collect();
        let predicted = argmax(&row);

        let defaulted =
            grad_cam_on_graph(&graph, graph.output_node(), x.clone().into_dyn(), "feat", None)
                .unwrap();
        let pinned = grad_cam_on_graph(
            &graph,
            graph.output_node(),
            x.into_dyn(),
            "feat",
            Some(predicted),
        )
        .unwrap();
        assert_eq!(defaulted.target_class, predicted);
        assert_eq!(defaulted, pinned);
    }

    #[test]
    fn zero_head_yields_a_flagged_all_zero_map() {
        let mut graph = cam_probe(1, 3);
        for (id, (name, _)) in graph.param_manifest().into_iter().enumerate() {
            if name.starts_with("logits/") {
                graph.param_mut(id).value.fill(0.0);
            }
        }
        let map = grad_cam_on_graph(
            &graph,
            graph.output_node(),
            probe_input(5).into_dyn(),
            "feat",
            Some(2),
        )
        .unwrap();
        assert!(map.is_zero);
        assert_eq!(map.peak, 0.0);
        assert!(map.grid.iter().all(|&v| v == 0.0));
        assert_eq!(map.grid.dim(), (8, 8));
    }

    #[test]
    fn coarse_maps_upsample_to_the_input_size() {
        let graph = cam_probe(2, 3);
        assert_eq!(graph.node_shape(graph.node_id("feat").unwrap()), &[4, 4, 4]);
        let map = grad_cam_on_graph(
            &graph,
            graph.output_node(),
            probe_input(9).into_dyn(),
            "feat",
            None,
        )
        .unwrap();
        assert_eq!(map.grid.dim(), (8, 8));
        assert!(map.grid.iter().all(|&v| (0.0..=1.0).contains(&v)));
        if !map.is_zero {
            let max = map.grid.fold(0.0f32, |m, &v| m.max(v));
            assert!((max - 1.0).abs() <= f32::EPSILON);
        }
    }

    #[test]
    fn unknown_layers_list_spatial_candidates() {
        let graph = cam_probe(1, 3);
        let err = grad_cam_on_graph(
            &graph,
            graph.output_node(),
            probe_input(1).into_dyn(),
            "block99_conv",
            None,
        )
        .unwrap_err();
        let message = err.to_string();
        assert!(message.contains("block99_conv"), "{message}");
        assert!(message.contains("feat"), "{message}");
        assert!(message.contains("conv"), "{message}");
    }

    #[test]
    fn non_spatial_layers_and_bad_targets_are_rejected() {
        let graph = cam_probe(1, 3);
        let err = grad_cam_on_graph(
            &graph,
            graph.output_node(),
            probe_input(1).into_dyn(),
            "gap",
            None,
        )
        .unwrap_err();
        assert!(matches!(err, ExplainError::NotSpatial { .. }), "{err}");

        let err = grad_cam_on_graph(
            &graph,
            graph.output_node(),
            probe_input(1).into_dyn(),
            "feat",
            Some(7),
        )
        .unwrap_err();
        assert!(
            matches!(
                err,
                ExplainError::BadTarget {
                    class: 7,
                    n_classes: 3
                }
            ),
            "{err}"
        );

        let err = grad_cam_on_graph(
            &graph,
            graph.output_node(),
            ArrayD::zeros(vec![2, 3, 8, 8]),
            "feat",
            None,
        )
        .unwrap_err();
        assert!(matches!(err, ExplainError::ImageShape { .. }), "{err}");
    }

    #[test]
    fn bilinear_resize_is_identity_at_the_same_size_and_localizes_a_hot_pixel() {
        let mut grid = Array2::<f32>::zeros((3, 3));
        grid[(1, 1)] = 1.0;
        assert_eq!(upsample_bilinear(&grid, 3, 3), grid);

        let up = upsample_bilinear(&grid, 9, 9);
        assert_eq!(up[(4, 4)], 1.0);
        assert_eq!(up[(0, 0)], 0.0);
        assert_eq!(up[(8, 8)], 0.0);
        let max = up.fold(0.0f32, |m, &v| m.max(v));
        assert_eq!(max, 1.0);
    }
}
