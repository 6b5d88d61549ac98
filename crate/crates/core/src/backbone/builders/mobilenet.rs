//! MobileNetV2: inverted residual bottlenecks with relu6.

use super::{bn, conv, correct_pad, dwconv};
use crate::nn::{Activation, GraphBuilder, NnError, NodeId, Padding};

const EPS: f32 = 1e-3;
const MOMENTUM: f32 = 0.999;

/// (expansion, output channels, repeats, first stride) per stage.
const STAGES: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

pub(super) fn build(b: &mut GraphBuilder, input: NodeId) -> Result<NodeId, NnError> {
    let mut x = conv(b, "Conv1", input, 32, (3, 3), (2, 2), Padding::Same, false)?;
    x = bn(b, "bn_Conv1", x, EPS, MOMENTUM, true)?;
    x = b.activation("Conv1_relu", x, Activation::Relu6)?;

    let mut block_id = 0usize;
    for &(expansion, filters, repeats, first_stride) in &STAGES {
        for rep in 0..repeats {
            let stride = if rep == 0 { first_stride } else { 1 };
            x = inverted_res_block(b, x, expansion, stride, filters, block_id)?;
            block_id += 1;
        }
    }

    x = conv(b, "Conv_1", x, 1280, (1, 1), (1, 1), Padding::Valid, false)?;
    x = bn(b, "Conv_1_bn", x, EPS, MOMENTUM, true)?;
    b.activation("out_relu", x, Activation::Relu6)
}

fn inverted_res_block(
    b: &mut GraphBuilder,
    input: NodeId,
    expansion: usize,
    stride: usize,
    filters: usize,
    block_id: usize,
) -> Result<NodeId, NnError> {
    let in_channels = b.shape(input)[0];
    let mut x = input;
    let prefix = if block_id == 0 {
        "expanded_conv_".to_string()
    } else {
        let name = format!("block_{block_id}_");
        x = conv(
            b,
            &format!("{name}expand"),
            x,
            expansion * in_channels,
            (1, 1),
            (1, 1),
            Padding::Same,
            false,
        )?;
        x = bn(b, &format!("{name}expand_BN"), x, EPS, MOMENTUM, true)?;
        x = b.activation(&format!("{name}expand_relu"), x, Activation::Relu6)?;
        name
    };

    let dw_padding = if stride == 2 {
        let pad = correct_pad(b, x, 3);
        x = b.zero_pad(&format!("{prefix}pad"), x, pad)?;
        Padding::Valid
    } else {
        Padding::Same
    };
    x = dwconv(
        b,
        &format!("{prefix}depthwise"),
        x,
        (3, 3),
        (stride, stride),
        dw_padding,
    )?;
    x = bn(b, &format!("{prefix}depthwise_BN"), x, EPS, MOMENTUM, true)?;
    x = b.activation(&format!("{prefix}depthwise_relu"), x, Activation::Relu6)?;

    x = conv(
        b,
        &format!("{prefix}project"),
        x,
        filters,
        (1, 1),
        (1, 1),
        Padding::Same,
        false,
    )?;
    x = bn(b, &format!("{prefix}project_BN"), x, EPS, MOMENTUM, true)?;

    if in_channels == filters && stride == 1 {
        return b.add(&format!("block_{block_id}_add"), &[input, x]);
    }
    Ok(x)
}
