//! Xception: depthwise-separable convolution flows with pooled
//! residual connections.

use super::{bn, conv, max_pool, relu, AutoName};
use crate::nn::{GraphBuilder, NnError, NodeId, Padding};

const EPS: f32 = 1e-3;
const MOMENTUM: f32 = 0.99;

fn sepconv(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    filters: usize,
) -> Result<NodeId, NnError> {
    b.separable_conv2d(name, x, (3, 3), (1, 1), Padding::Same, filters)
}

pub(super) fn build(b: &mut GraphBuilder, input: NodeId) -> Result<NodeId, NnError> {
    let mut shortcut_convs = AutoName::new("conv2d");
    let mut shortcut_bns = AutoName::new("batch_normalization");
    let mut adds = AutoName::new("add");

    // Entry flow stem.
    let mut x = conv(b, "block1_conv1", input, 32, (3, 3), (2, 2), Padding::Valid, false)?;
    x = bn(b, "block1_conv1_bn", x, EPS, MOMENTUM, true)?;
    x = relu(b, "block1_conv1_act", x)?;
    x = conv(b, "block1_conv2", x, 64, (3, 3), (1, 1), Padding::Valid, false)?;
    x = bn(b, "block1_conv2_bn", x, EPS, MOMENTUM, true)?;
    x = relu(b, "block1_conv2_act", x)?;

    // Entry flow blocks 2-4: each halves the grid and adds a strided
    // 1x1 projection of its input.
    for (block, filters) in [(2usize, 128usize), (3, 256), (4, 728)] {
        let mut residual = conv(
            b,
            &shortcut_convs.take(),
            x,
            filters,
            (1, 1),
            (2, 2),
            Padding::Same,
            false,
        )?;
        residual = bn(b, &shortcut_bns.take(), residual, EPS, MOMENTUM, true)?;

        if block > 2 {
            x = relu(b, &format!("block{block}_sepconv1_act"), x)?;
        }
        x = sepconv(b, &format!("block{block}_sepconv1"), x, filters)?;
        x = bn(b, &format!("block{block}_sepconv1_bn"), x, EPS, MOMENTUM, true)?;
        x = relu(b, &format!("block{block}_sepconv2_act"), x)?;
        x = sepconv(b, &format!("block{block}_sepconv2"), x, filters)?;
        x = bn(b, &format!("block{block}_sepconv2_bn"), x, EPS, MOMENTUM, true)?;
        x = max_pool(
            b,
            &format!("block{block}_pool"),
            x,
            (3, 3),
            (2, 2),
            Padding::Same,
        )?;
        x = b.add(&adds.take(), &[x, residual])?;
    }

    // Middle flow: eight identity residual blocks at 728 channels.
    for block in 5..13 {
        let residual = x;
        for i in 1..=3 {
            x = relu(b, &format!("block{block}_sepconv{i}_act"), x)?;
            x = sepconv(b, &format!("block{block}_sepconv{i}"), x, 728)?;
            x = bn(
                b,
                &format!("block{block}_sepconv{i}_bn"),
                x,
                EPS,
                MOMENTUM,
                true,
            )?;
        }
        x = b.add(&adds.take(), &[x, residual])?;
    }

    // Exit flow.
    let mut residual = conv(
        b,
        &shortcut_convs.take(),
        x,
        1024,
        (1, 1),
        (2, 2),
        Padding::Same,
        false,
    )?;
    residual = bn(b, &shortcut_bns.take(), residual, EPS, MOMENTUM, true)?;
    x = relu(b, "block13_sepconv1_act", x)?;
    x = sepconv(b, "block13_sepconv1", x, 728)?;
    x = bn(b, "block13_sepconv1_bn", x, EPS, MOMENTUM, true)?;
    x = relu(b, "block13_sepconv2_act", x)?;
    x = sepconv(b, "block13_sepconv2", x, 1024)?;
    x = bn(b, "block13_sepconv2_bn", x, EPS, MOMENTUM, true)?;
    x = max_pool(b, "block13_pool", x, (3, 3), (2, 2), Padding::Same)?;
    x = b.add(&adds.take(), &[x, residual])?;

    x = sepconv(b, "block14_sepconv1", x, 1536)?;
    x = bn(b, "block14_sepconv1_bn", x, EPS, MOMENTUM, true)?;
    x = relu(b, "block14_sepconv1_act", x)?;
    x = sepconv(b, "block14_sepconv2", x, 2048)?;
    x = bn(b, "block14_sepconv2_bn", x, EPS, MOMENTUM, true)?;
    relu(b, "block14_sepconv2_act", x)
}
