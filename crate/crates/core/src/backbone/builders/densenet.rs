//! DenseNet-121 and DenseNet-169: densely concatenated blocks with
//! halving transitions.

use super::{avg_pool, bn, conv, max_pool, relu, AutoName};
use crate::nn::{GraphBuilder, NnError, NodeId, PadSpec, Padding};

const EPS: f32 = 1.001e-5;
const MOMENTUM: f32 = 0.99;
const GROWTH: usize = 32;

pub(super) fn build(
    b: &mut GraphBuilder,
    input: NodeId,
    blocks: &[usize; 4],
) -> Result<NodeId, NnError> {
    let mut pads = AutoName::new("zero_padding2d");
    let mut x = b.zero_pad(
        &pads.take(),
        input,
        PadSpec {
            top: 3,
            bottom: 3,
            left: 3,
            right: 3,
        },
    )?;
    x = conv(b, "conv1_conv", x, 64, (7, 7), (2, 2), Padding::Valid, false)?;
    x = bn(b, "conv1_bn", x, EPS, MOMENTUM, true)?;
    x = relu(b, "conv1_relu", x)?;
    x = b.zero_pad(
        &pads.take(),
        x,
        PadSpec {
            top: 1,
            bottom: 1,
            left: 1,
            right: 1,
        },
    )?;
    x = max_pool(b, "pool1", x, (3, 3), (2, 2), Padding::Valid)?;

    for (i, &reps) in blocks.iter().enumerate() {
        let stage = i + 2;
        for j in 1..=reps {
            x = conv_block(b, x, &format!("conv{stage}_block{j}"))?;
        }
        if i + 1 < blocks.len() {
            x = transition(b, x, &format!("pool{stage}"))?;
        }
    }
    x = bn(b, "bn", x, EPS, MOMENTUM, true)?;
    relu(b, "relu", x)
}

/// Bottleneck growth unit; its 32 new channels are concatenated onto
/// the running feature map.
fn conv_block(b: &mut GraphBuilder, x: NodeId, name: &str) -> Result<NodeId, NnError> {
    let mut y = bn(b, &format!("{name}_0_bn"), x, EPS, MOMENTUM, true)?;
    y = relu(b, &format!("{name}_0_relu"), y)?;
    y = conv(
        b,
        &format!("{name}_1_conv"),
        y,
        4 * GROWTH,
        (1, 1),
        (1, 1),
        Padding::Valid,
        false,
    )?;
    y = bn(b, &format!("{name}_1_bn"), y, EPS, MOMENTUM, true)?;
    y = relu(b, &format!("{name}_1_relu"), y)?;
    y = conv(
        b,
        &format!("{name}_2_conv"),
        y,
        GROWTH,
        (3, 3),
        (1, 1),
        Padding::Same,
        false,
    )?;
    b.concat(&format!("{name}_concat"), &[x, y])
}

/// Compress channels by half and halve the spatial grid.
fn transition(b: &mut GraphBuilder, x: NodeId, name: &str) -> Result<NodeId, NnError> {
    let channels = b.shape(x)[0];
    let mut y = bn(b, &format!("{name}_bn"), x, EPS, MOMENTUM, true)?;
    y = relu(b, &format!("{name}_relu"), y)?;
    y = conv(
        b,
        &format!("{name}_conv"),
        y,
        channels / 2,
        (1, 1),
        (1, 1),
        Padding::Valid,
        false,
    )?;
    avg_pool(b, &format!("{name}_pool"), y, (2, 2), (2, 2), Padding::Valid)
}
