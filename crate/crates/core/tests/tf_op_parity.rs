//! Forward parity against a reference-framework fixture.
//!
//! `goldens/op_parity.pxwt` holds the weights of a small network built
//! and evaluated with TensorFlow/Keras, plus a probe batch and the
//! probabilities it produced there. The same network is assembled here
//! node by node; loading the weights and running the probe must
//! reproduce those probabilities. The fixture exercises every
//! operation: rescale with offset, fixed normalization, zero padding,
//! strided valid and same convolutions with and without bias, depthwise
//! and separable convolutions, batch norm in both scale modes, relu,
//! relu6, swish, sigmoid, softmax, squeeze-excite broadcast multiply,
//! add, concat, max and average pooling with same padding, global
//! average pooling, and dense layers.

use ndarray::ArrayD;
use poxscreen_core::nn::{
    load_weight_file, Activation, BnCfg, Conv2dCfg, DwConv2dCfg, Graph, GraphBuilder, NnError,
    PadSpec, Padding, PoolCfg,
};

fn bn(eps: f32, scale: bool) -> BnCfg {
    BnCfg {
        eps,
        momentum: 0.99,
        scale,
    }
}

fn conv(filters: usize, kernel: usize, stride: usize, padding: Padding, bias: bool) -> Conv2dCfg {
    Conv2dCfg {
        filters,
        kernel: (kernel, kernel),
        stride: (stride, stride),
        padding,
        use_bias: bias,
    }
}

fn build_fixture_graph() -> Result<Graph, NnError> {
    let mut b = GraphBuilder::new("op_fixture", Some(0));
    let input = b.input("in", &[3, 16, 16])?;
    let x = b.rescale("pre_rescale", input, 1.0 / 127.5, -1.0)?;
    let x = b.fixed_norm("pre_norm", x)?;
    let x = b.zero_pad(
        "stem_pad",
        x,
        PadSpec {
            top: 0,
            bottom: 1,
            left: 0,
            right: 1,
        },
    )?;
    let x = b.conv2d("stem_conv", x, conv(8, 3, 2, Padding::Valid, true))?;
    let x = b.batch_norm("stem_bn", x, bn(1e-3, true))?;
    let x = b.activation("stem_relu6", x, Activation::Relu6)?;

    let a = b.conv2d("a_pw", x, conv(8, 1, 1, Padding::Same, false))?;
    let a = b.batch_norm("a_bn", a, bn(1e-3, false))?;
    let a = b.activation("a_swish", a, Activation::Swish)?;
    let a = b.depthwise_conv2d(
        "a_dw",
        a,
        DwConv2dCfg {
            kernel: (3, 3),
            stride: (1, 1),
            padding: Padding::Same,
        },
    )?;
    let a = b.batch_norm("a_dw_bn", a, bn(1e-3, true))?;
    let a = b.activation("a_relu", a, Activation::Relu)?;

    let se = b.global_avg_pool("se_gap", a)?;
    let se = b.reshape("se_reshape", se, &[8, 1, 1])?;
    let se = b.conv2d("se_reduce", se, conv(4, 1, 1, Padding::Same, true))?;
    let se = b.activation("se_swish", se, Activation::Swish)?;
    let se = b.conv2d("se_expand", se, conv(8, 1, 1, Padding::Same, true))?;
    let se = b.activation("se_sigmoid", se, Activation::Sigmoid)?;
    let a = b.multiply("se_mul", a, se)?;

    let s = b.separable_conv2d("b_sep", x, (3, 3), (1, 1), Padding::Same, 8)?;
    let s = b.batch_norm("b_bn", s, bn(1e-3, true))?;

    let m = b.add("merge_add", &[a, s])?;
    let c = b.concat("merge_cat", &[m, x])?;
    let p = b.max_pool(
        "pool_max",
        c,
        PoolCfg {
            size: (3, 3),
            stride: (2, 2),
            padding: Padding::Same,
        },
    )?;
    let p = b.avg_pool(
        "pool_avg",
        p,
        PoolCfg {
            size: (3, 3),
            stride: (1, 1),
            padding: Padding::Same,
        },
    )?;
    let g = b.global_avg_pool("gap", p)?;
    let d = b.dense("fc1", g, 8)?;
    let d = b.activation("fc1_relu", d, Activation::Relu)?;
    let d = b.dense("fc2", d, 5)?;
    let out = b.activation("probs", d, Activation::Softmax)?;
    b.finish(out)
}

#[test]
fn fixture_network_reproduces_reference_probabilities() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/goldens/op_parity.pxwt");
    let mut entries = load_weight_file(path.as_ref()).expect("fixture loads");

    let pos = entries
        .iter()
        .position(|e| e.name == "__probe_input__")
        .expect("probe input present");
    let probe_input = entries.swap_remove(pos).value;
    let pos = entries
        .iter()
        .position(|e| e.name == "__probe_output__")
        .expect("probe output present");
    let expected = entries.swap_remove(pos).value;

    let mut graph = build_fixture_graph().expect("fixture graph builds");
    let missing = graph.import_entries(entries).expect("weights import");
    assert!(missing.is_empty(), "uncovered parameters: {missing:?}");

    let acts = graph.forward_eval(probe_input).expect("forward pass");
    let got: &ArrayD<f32> = acts.value(graph.output_node());
    assert_eq!(got.shape(), expected.shape());

    let scale = expected
        .iter()
        .fold(0.0f32, |m, v| m.max(v.abs()))
        .max(1e-6);
    let worst = got
        .iter()
        .zip(expected.iter())
        .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
    assert!(
        worst / scale < 1e-5,
        "probability mismatch: max abs diff {worst:.3e} against scale {scale:.3e}"
    );

    // Each probability row is a simplex point.
    for row in got.rows() {
        let sum: f32 = row.sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }
}
