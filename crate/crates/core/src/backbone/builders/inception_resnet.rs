//! Inception-ResNet-v2: residual inception blocks with learned scaling.

use super::{avg_pool, bn, conv, max_pool, relu, AutoName};
use crate::nn::{GraphBuilder, NnError, NodeId, Padding};

const EPS: f32 = 1e-3;
const MOMENTUM: f32 = 0.99;

/// Counters reproducing the reference auto-naming of the unnamed layers.
struct Namer {
    convs: AutoName,
    bns: AutoName,
    acts: AutoName,
    max_pools: AutoName,
    scales: AutoName,
}

impl Namer {
    fn new() -> Self {
        Namer {
            convs: AutoName::new("conv2d"),
            bns: AutoName::new("batch_normalization"),
            acts: AutoName::new("activation"),
            max_pools: AutoName::new("max_pooling2d"),
            scales: AutoName::new("custom_scale_layer"),
        }
    }

    /// Unnamed, unbiased convolution with scale-free batch norm and relu.
    fn conv_bn(
        &mut self,
        b: &mut GraphBuilder,
        x: NodeId,
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<NodeId, NnError> {
        let y = conv(b, &self.convs.take(), x, filters, kernel, stride, padding, false)?;
        let y = bn(b, &self.bns.take(), y, EPS, MOMENTUM, false)?;
        relu(b, &self.acts.take(), y)
    }
}

/// Branch layouts of the three residual block families.
#[derive(Clone, Copy)]
enum BlockKind {
    Block35,
    Block17,
    Block8,
}

impl BlockKind {
    fn prefix(self) -> &'static str {
        match self {
            BlockKind::Block35 => "block35",
            BlockKind::Block17 => "block17",
            BlockKind::Block8 => "block8",
        }
    }

    /// Channel count restored by the residual projection.
    fn channels(self) -> usize {
        match self {
            BlockKind::Block35 => 320,
            BlockKind::Block17 => 1088,
            BlockKind::Block8 => 2080,
        }
    }
}

/// One residual inception block: branches, concat, biased 1x1 projection,
/// then a scaled residual sum and optional relu.
fn resnet_block(
    n: &mut Namer,
    b: &mut GraphBuilder,
    x: NodeId,
    kind: BlockKind,
    idx: usize,
    scale: f32,
    activation: bool,
) -> Result<NodeId, NnError> {
    let same = Padding::Same;
    let s1 = (1, 1);
    let branches = match kind {
        BlockKind::Block35 => {
            let b0 = n.conv_bn(b, x, 32, (1, 1), s1, same)?;
            let mut b1 = n.conv_bn(b, x, 32, (1, 1), s1, same)?;
            b1 = n.conv_bn(b, b1, 32, (3, 3), s1, same)?;
            let mut b2 = n.conv_bn(b, x, 32, (1, 1), s1, same)?;
            b2 = n.conv_bn(b, b2, 48, (3, 3), s1, same)?;
            b2 = n.conv_bn(b, b2, 64, (3, 3), s1, same)?;
            vec![b0, b1, b2]
        }
        BlockKind::Block17 => {
            let b0 = n.conv_bn(b, x, 192, (1, 1), s1, same)?;
            let mut b1 = n.conv_bn(b, x, 128, (1, 1), s1, same)?;
            b1 = n.conv_bn(b, b1, 160, (1, 7), s1, same)?;
            b1 = n.conv_bn(b, b1, 192, (7, 1), s1, same)?;
            vec![b0, b1]
        }
        BlockKind::Block8 => {
            let b0 = n.conv_bn(b, x, 192, (1, 1), s1, same)?;
            let mut b1 = n.conv_bn(b, x, 192, (1, 1), s1, same)?;
            b1 = n.conv_bn(b, b1, 224, (1, 3), s1, same)?;
            b1 = n.conv_bn(b, b1, 256, (3, 1), s1, same)?;
            vec![b0, b1]
        }
    };
    let name = format!("{}_{idx}", kind.prefix());
    let mixed = b.concat(&format!("{name}_mixed"), &branches)?;
    let up = conv(
        b,
        &format!("{name}_conv"),
        mixed,
        kind.channels(),
        (1, 1),
        s1,
        same,
        true,
    )?;
    let y = b.scaled_add(&n.scales.take(), x, up, scale)?;
    if activation {
        relu(b, &format!("{name}_ac"), y)
    } else {
        Ok(y)
    }
}

pub(super) fn build(b: &mut GraphBuilder, input: NodeId) -> Result<NodeId, NnError> {
    let n = &mut Namer::new();
    let same = Padding::Same;
    let valid = Padding::Valid;
    let s1 = (1, 1);
    let s2 = (2, 2);

    // Stem.
    let mut x = n.conv_bn(b, input, 32, (3, 3), s2, valid)?;
    x = n.conv_bn(b, x, 32, (3, 3), s1, valid)?;
    x = n.conv_bn(b, x, 64, (3, 3), s1, same)?;
    x = max_pool(b, &n.max_pools.take(), x, (3, 3), s2, valid)?;
    x = n.conv_bn(b, x, 80, (1, 1), s1, valid)?;
    x = n.conv_bn(b, x, 192, (3, 3), s1, valid)?;
    x = max_pool(b, &n.max_pools.take(), x, (3, 3), s2, valid)?;

    // mixed_5b inception block: 320 channels.
    {
        let b0 = n.conv_bn(b, x, 96, (1, 1), s1, same)?;
        let mut b1 = n.conv_bn(b, x, 48, (1, 1), s1, same)?;
        b1 = n.conv_bn(b, b1, 64, (5, 5), s1, same)?;
        let mut b2 = n.conv_bn(b, x, 64, (1, 1), s1, same)?;
        b2 = n.conv_bn(b, b2, 96, (3, 3), s1, same)?;
        b2 = n.conv_bn(b, b2, 96, (3, 3), s1, same)?;
        let mut pool = avg_pool(b, "average_pooling2d", x, (3, 3), s1, same)?;
        pool = n.conv_bn(b, pool, 64, (1, 1), s1, same)?;
        x = b.concat("mixed_5b", &[b0, b1, b2, pool])?;
    }

    for idx in 1..=10 {
        x = resnet_block(n, b, x, BlockKind::Block35, idx, 0.17, true)?;
    }

    // mixed_6a reduction: 1088 channels.
    {
        let b0 = n.conv_bn(b, x, 384, (3, 3), s2, valid)?;
        let mut b1 = n.conv_bn(b, x, 256, (1, 1), s1, same)?;
        b1 = n.conv_bn(b, b1, 256, (3, 3), s1, same)?;
        b1 = n.conv_bn(b, b1, 384, (3, 3), s2, valid)?;
        let pool = max_pool(b, &n.max_pools.take(), x, (3, 3), s2, valid)?;
        x = b.concat("mixed_6a", &[b0, b1, pool])?;
    }

    for idx in 1..=20 {
        x = resnet_block(n, b, x, BlockKind::Block17, idx, 0.1, true)?;
    }

    // mixed_7a reduction: 2080 channels.
    {
        let mut b0 = n.conv_bn(b, x, 256, (1, 1), s1, same)?;
        b0 = n.conv_bn(b, b0, 384, (3, 3), s2, valid)?;
        let mut b1 = n.conv_bn(b, x, 256, (1, 1), s1, same)?;
        b1 = n.conv_bn(b, b1, 288, (3, 3), s2, valid)?;
        let mut b2 = n.conv_bn(b, x, 256, (1, 1), s1, same)?;
        b2 = n.conv_bn(b, b2, 288, (3, 3), s1, same)?;
        b2 = n.conv_bn(b, b2, 320, (3, 3), s2, valid)?;
        let pool = max_pool(b, &n.max_pools.take(), x, (3, 3), s2, valid)?;
        x = b.concat("mixed_7a", &[b0, b1, b2, pool])?;
    }

    for idx in 1..=9 {
        x = resnet_block(n, b, x, BlockKind::Block8, idx, 0.2, true)?;
    }
    x = resnet_block(n, b, x, BlockKind::Block8, 10, 1.0, false)?;

    // Final 1x1 projection to 1536 channels.
    let y = conv(b, "conv_7b", x, 1536, (1, 1), s1, same, false)?;
    let y = bn(b, "conv_7b_bn", y, EPS, MOMENTUM, false)?;
    relu(b, "conv_7b_ac", y)
}
