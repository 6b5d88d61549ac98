//! ResNet-50 and ResNet-101: v1 bottleneck residual stacks.

use super::{bn, conv, max_pool, relu};
use crate::nn::{GraphBuilder, NnError, NodeId, PadSpec, Padding};

const EPS: f32 = 1.001e-5;
const MOMENTUM: f32 = 0.99;

pub(super) fn build(
    b: &mut GraphBuilder,
    input: NodeId,
    blocks_per_stack: &[usize; 4],
) -> Result<NodeId, NnError> {
    let mut x = b.zero_pad(
        "conv1_pad",
        input,
        PadSpec {
            top: 3,
            bottom: 3,
            left: 3,
            right: 3,
        },
    )?;
    x = conv(b, "conv1_conv", x, 64, (7, 7), (2, 2), Padding::Valid, true)?;
    x = bn(b, "conv1_bn", x, EPS, MOMENTUM, true)?;
    x = relu(b, "conv1_relu", x)?;
    x = b.zero_pad(
        "pool1_pad",
        x,
        PadSpec {
            top: 1,
            bottom: 1,
            left: 1,
            right: 1,
        },
    )?;
    x = max_pool(b, "pool1_pool", x, (3, 3), (2, 2), Padding::Valid)?;

    for (i, &blocks) in blocks_per_stack.iter().enumerate() {
        let filters = 64 << i;
        let stack = format!("conv{}", i + 2);
        // The first stack keeps stride 1; later stacks downsample in
        // their first block.
        let stride1 = if i == 0 { 1 } else { 2 };
        x = block(b, x, filters, stride1, true, &format!("{stack}_block1"))?;
        for j in 2..=blocks {
            x = block(b, x, filters, 1, false, &format!("{stack}_block{j}"))?;
        }
    }
    Ok(x)
}

/// One bottleneck block: 1x1 (stride) -> 3x3 -> 1x1 with a projection
/// shortcut in each stack's first block.
fn block(
    b: &mut GraphBuilder,
    x: NodeId,
    filters: usize,
    stride: usize,
    conv_shortcut: bool,
    name: &str,
) -> Result<NodeId, NnError> {
    let s = (stride, stride);
    let shortcut = if conv_shortcut {
        let sc = conv(
            b,
            &format!("{name}_0_conv"),
            x,
            4 * filters,
            (1, 1),
            s,
            Padding::Valid,
            true,
        )?;
        bn(b, &format!("{name}_0_bn"), sc, EPS, MOMENTUM, true)?
    } else {
        x
    };
    let mut y = conv(
        b,
        &format!("{name}_1_conv"),
        x,
        filters,
        (1, 1),
        s,
        Padding::Valid,
        true,
    )?;
    y = bn(b, &format!("{name}_1_bn"), y, EPS, MOMENTUM, true)?;
    y = relu(b, &format!("{name}_1_relu"), y)?;
    y = conv(
        b,
        &format!("{name}_2_conv"),
        y,
        filters,
        (3, 3),
        (1, 1),
        Padding::Same,
        true,
    )?;
    y = bn(b, &format!("{name}_2_bn"), y, EPS, MOMENTUM, true)?;
    y = relu(b, &format!("{name}_2_relu"), y)?;
    y = conv(
        b,
        &format!("{name}_3_conv"),
        y,
        4 * filters,
        (1, 1),
        (1, 1),
        Padding::Valid,
        true,
    )?;
    y = bn(b, &format!("{name}_3_bn"), y, EPS, MOMENTUM, true)?;
    let merged = b.add(&format!("{name}_add"), &[shortcut, y])?;
    relu(b, &format!("{name}_out"), merged)
}
