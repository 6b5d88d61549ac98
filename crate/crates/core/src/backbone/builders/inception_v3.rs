//! InceptionV3: factorized inception blocks mixed0 through mixed10.

use super::{avg_pool, bn, conv, max_pool, relu, AutoName};
use crate::nn::{GraphBuilder, NnError, NodeId, Padding};

const EPS: f32 = 1e-3;
const MOMENTUM: f32 = 0.99;

/// Counters reproducing the reference auto-naming of the unnamed
/// convolution/normalization/activation/pool layers.
struct Namer {
    convs: AutoName,
    bns: AutoName,
    acts: AutoName,
    max_pools: AutoName,
    avg_pools: AutoName,
    concats: AutoName,
}

impl Namer {
    fn new() -> Self {
        Namer {
            convs: AutoName::new("conv2d"),
            bns: AutoName::new("batch_normalization"),
            acts: AutoName::new("activation"),
            max_pools: AutoName::new("max_pooling2d"),
            avg_pools: AutoName::new("average_pooling2d"),
            concats: AutoName::new("concatenate"),
        }
    }

    /// Unbiased convolution, scale-free batch norm, relu.
    #[allow(clippy::too_many_arguments)]
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

    fn branch_avg_pool(&mut self, b: &mut GraphBuilder, x: NodeId) -> Result<NodeId, NnError> {
        avg_pool(b, &self.avg_pools.take(), x, (3, 3), (1, 1), Padding::Same)
    }
}

pub(super) fn build(b: &mut GraphBuilder, input: NodeId) -> Result<NodeId, NnError> {
    let n = &mut Namer::new();
    let same = Padding::Same;
    let valid = Padding::Valid;

    // Stem.
    let mut x = n.conv_bn(b, input, 32, (3, 3), (2, 2), valid)?;
    x = n.conv_bn(b, x, 32, (3, 3), (1, 1), valid)?;
    x = n.conv_bn(b, x, 64, (3, 3), (1, 1), same)?;
    x = max_pool(b, &n.max_pools.take(), x, (3, 3), (2, 2), valid)?;
    x = n.conv_bn(b, x, 80, (1, 1), (1, 1), valid)?;
    x = n.conv_bn(b, x, 192, (3, 3), (1, 1), valid)?;
    x = max_pool(b, &n.max_pools.take(), x, (3, 3), (2, 2), valid)?;

    // mixed0..mixed2: 5x5 blocks whose pool branch widens after mixed0.
    for (i, pool_filters) in [(0usize, 32usize), (1, 64), (2, 64)] {
        let b1x1 = n.conv_bn(b, x, 64, (1, 1), (1, 1), same)?;
        let mut b5x5 = n.conv_bn(b, x, 48, (1, 1), (1, 1), same)?;
        b5x5 = n.conv_bn(b, b5x5, 64, (5, 5), (1, 1), same)?;
        let mut b3x3 = n.conv_bn(b, x, 64, (1, 1), (1, 1), same)?;
        b3x3 = n.conv_bn(b, b3x3, 96, (3, 3), (1, 1), same)?;
        b3x3 = n.conv_bn(b, b3x3, 96, (3, 3), (1, 1), same)?;
        let mut pool = n.branch_avg_pool(b, x)?;
        pool = n.conv_bn(b, pool, pool_filters, (1, 1), (1, 1), same)?;
        x = b.concat(&format!("mixed{i}"), &[b1x1, b5x5, b3x3, pool])?;
    }

    // mixed3: grid reduction to 768 channels.
    {
        let b3x3 = n.conv_bn(b, x, 384, (3, 3), (2, 2), valid)?;
        let mut dbl = n.conv_bn(b, x, 64, (1, 1), (1, 1), same)?;
        dbl = n.conv_bn(b, dbl, 96, (3, 3), (1, 1), same)?;
        dbl = n.conv_bn(b, dbl, 96, (3, 3), (2, 2), valid)?;
        let pool = max_pool(b, &n.max_pools.take(), x, (3, 3), (2, 2), valid)?;
        x = b.concat("mixed3", &[b3x3, dbl, pool])?;
    }

    // mixed4..mixed7: factorized 7x7 blocks with widening mid channels.
    for (i, mid) in [(4usize, 128usize), (5, 160), (6, 160), (7, 192)] {
        let b1x1 = n.conv_bn(b, x, 192, (1, 1), (1, 1), same)?;
        let mut b7x7 = n.conv_bn(b, x, mid, (1, 1), (1, 1), same)?;
        b7x7 = n.conv_bn(b, b7x7, mid, (1, 7), (1, 1), same)?;
        b7x7 = n.conv_bn(b, b7x7, 192, (7, 1), (1, 1), same)?;
        let mut dbl = n.conv_bn(b, x, mid, (1, 1), (1, 1), same)?;
        dbl = n.conv_bn(b, dbl, mid, (7, 1), (1, 1), same)?;
        dbl = n.conv_bn(b, dbl, mid, (1, 7), (1, 1), same)?;
        dbl = n.conv_bn(b, dbl, mid, (7, 1), (1, 1), same)?;
        dbl = n.conv_bn(b, dbl, 192, (1, 7), (1, 1), same)?;
        let mut pool = n.branch_avg_pool(b, x)?;
        pool = n.conv_bn(b, pool, 192, (1, 1), (1, 1), same)?;
        x = b.concat(&format!("mixed{i}"), &[b1x1, b7x7, dbl, pool])?;
    }

    // mixed8: grid reduction to 1280 channels.
    {
        let mut b3x3 = n.conv_bn(b, x, 192, (1, 1), (1, 1), same)?;
        b3x3 = n.conv_bn(b, b3x3, 320, (3, 3), (2, 2), valid)?;
        let mut b7x7x3 = n.conv_bn(b, x, 192, (1, 1), (1, 1), same)?;
        b7x7x3 = n.conv_bn(b, b7x7x3, 192, (1, 7), (1, 1), same)?;
        b7x7x3 = n.conv_bn(b, b7x7x3, 192, (7, 1), (1, 1), same)?;
        b7x7x3 = n.conv_bn(b, b7x7x3, 192, (3, 3), (2, 2), valid)?;
        let pool = max_pool(b, &n.max_pools.take(), x, (3, 3), (2, 2), valid)?;
        x = b.concat("mixed8", &[b3x3, b7x7x3, pool])?;
    }

    // mixed9, mixed10: expanded-filter-bank blocks with split branches.
    for i in 0..2 {
        let b1x1 = n.conv_bn(b, x, 320, (1, 1), (1, 1), same)?;
        let b3x3 = n.conv_bn(b, x, 384, (1, 1), (1, 1), same)?;
        let b3x3_1 = n.conv_bn(b, b3x3, 384, (1, 3), (1, 1), same)?;
        let b3x3_2 = n.conv_bn(b, b3x3, 384, (3, 1), (1, 1), same)?;
        let b3x3 = b.concat(&format!("mixed9_{i}"), &[b3x3_1, b3x3_2])?;
        let mut dbl = n.conv_bn(b, x, 448, (1, 1), (1, 1), same)?;
        dbl = n.conv_bn(b, dbl, 384, (3, 3), (1, 1), same)?;
        let dbl_1 = n.conv_bn(b, dbl, 384, (1, 3), (1, 1), same)?;
        let dbl_2 = n.conv_bn(b, dbl, 384, (3, 1), (1, 1), same)?;
        let dbl = b.concat(&n.concats.take(), &[dbl_1, dbl_2])?;
        let mut pool = n.branch_avg_pool(b, x)?;
        pool = n.conv_bn(b, pool, 192, (1, 1), (1, 1), same)?;
        x = b.concat(&format!("mixed{}", 9 + i), &[b1x1, b3x3, dbl, pool])?;
    }
    Ok(x)
}
