//! EfficientNet B0-B2: mobile inverted bottlenecks with squeeze-excitation,
//! compound-scaled in width and depth.

use super::{bn, conv, correct_pad, dwconv};
use crate::nn::{Activation, GraphBuilder, NnError, NodeId, Padding};

const EPS: f32 = 1e-3;
const MOMENTUM: f32 = 0.99;
const DROP_CONNECT_RATE: f32 = 0.2;
const SE_RATIO: f64 = 0.25;

/// Base stage table before compound scaling:
/// (kernel, repeats, filters_in, filters_out, expand_ratio, stride).
const BLOCK_ARGS: [(usize, usize, usize, usize, usize, usize); 7] = [
    (3, 1, 32, 16, 1, 1),
    (3, 2, 16, 24, 6, 2),
    (5, 2, 24, 40, 6, 2),
    (3, 3, 40, 80, 6, 2),
    (5, 3, 80, 112, 6, 1),
    (5, 4, 112, 192, 6, 2),
    (3, 1, 192, 320, 6, 1),
];

/// Width-scale a filter count to a multiple of 8, bumping up whenever
/// rounding down would lose more than 10 percent.
fn round_filters(filters: usize, width: f64) -> usize {
    let scaled = filters as f64 * width;
    let mut new = (((scaled + 4.0) as usize) / 8 * 8).max(8);
    if (new as f64) < 0.9 * scaled {
        new += 8;
    }
    new
}

/// Depth-scale a repeat count, always rounding up.
fn round_repeats(repeats: usize, depth: f64) -> usize {
    (depth * repeats as f64).ceil() as usize
}

fn swish(b: &mut GraphBuilder, name: &str, x: NodeId) -> Result<NodeId, NnError> {
    b.activation(name, x, Activation::Swish)
}

/// One mobile inverted bottleneck with squeeze-excitation. `name` carries
/// the trailing underscore, e.g. "block2a_".
#[allow(clippy::too_many_arguments)]
fn block(
    b: &mut GraphBuilder,
    inputs: NodeId,
    name: &str,
    drop_rate: f32,
    kernel: usize,
    stride: usize,
    filters_in: usize,
    filters_out: usize,
    expand_ratio: usize,
) -> Result<NodeId, NnError> {
    let same = Padding::Same;
    let s1 = (1, 1);
    let filters = filters_in * expand_ratio;
    let mut x = inputs;
    if expand_ratio != 1 {
        x = conv(b, &format!("{name}expand_conv"), x, filters, (1, 1), s1, same, false)?;
        x = bn(b, &format!("{name}expand_bn"), x, EPS, MOMENTUM, true)?;
        x = swish(b, &format!("{name}expand_activation"), x)?;
    }

    let pad = if stride == 2 {
        let spec = correct_pad(b, x, kernel);
        x = b.zero_pad(&format!("{name}dwconv_pad"), x, spec)?;
        Padding::Valid
    } else {
        same
    };
    x = dwconv(
        b,
        &format!("{name}dwconv"),
        x,
        (kernel, kernel),
        (stride, stride),
        pad,
    )?;
    x = bn(b, &format!("{name}bn"), x, EPS, MOMENTUM, true)?;
    x = swish(b, &format!("{name}activation"), x)?;

    // Squeeze-excitation gate sized from the unexpanded block input.
    let filters_se = ((filters_in as f64 * SE_RATIO) as usize).max(1);
    let mut se = b.global_avg_pool(&format!("{name}se_squeeze"), x)?;
    se = b.reshape(&format!("{name}se_reshape"), se, &[filters, 1, 1])?;
    se = conv(b, &format!("{name}se_reduce"), se, filters_se, (1, 1), s1, same, true)?;
    se = swish(b, &format!("{name}se_reduce_swish"), se)?;
    se = conv(b, &format!("{name}se_expand"), se, filters, (1, 1), s1, same, true)?;
    se = b.activation(
        &format!("{name}se_expand_sigmoid"),
        se,
        Activation::Sigmoid,
    )?;
    x = b.multiply(&format!("{name}se_excite"), x, se)?;

    x = conv(
        b,
        &format!("{name}project_conv"),
        x,
        filters_out,
        (1, 1),
        s1,
        same,
        false,
    )?;
    x = bn(b, &format!("{name}project_bn"), x, EPS, MOMENTUM, true)?;
    if stride == 1 && filters_in == filters_out {
        if drop_rate > 0.0 {
            // Stochastic depth: drop the whole residual branch per sample.
            x = b.dropout(&format!("{name}drop"), x, drop_rate, true)?;
        }
        x = b.add(&format!("{name}add"), &[x, inputs])?;
    }
    Ok(x)
}

pub(super) fn build(
    b: &mut GraphBuilder,
    input: NodeId,
    width: f64,
    depth: f64,
) -> Result<NodeId, NnError> {
    let mut x = b.rescale("rescaling", input, 1.0 / 255.0, 0.0)?;
    x = b.fixed_norm("normalization", x)?;

    let spec = correct_pad(b, x, 3);
    x = b.zero_pad("stem_conv_pad", x, spec)?;
    x = conv(
        b,
        "stem_conv",
        x,
        round_filters(32, width),
        (3, 3),
        (2, 2),
        Padding::Valid,
        false,
    )?;
    x = bn(b, "stem_bn", x, EPS, MOMENTUM, true)?;
    x = swish(b, "stem_activation", x)?;

    let total_blocks: usize = BLOCK_ARGS
        .iter()
        .map(|args| round_repeats(args.1, depth))
        .sum();
    let mut block_no = 0usize;
    for (stage, &(kernel, repeats, f_in, f_out, expand, stride)) in BLOCK_ARGS.iter().enumerate() {
        let filters_in = round_filters(f_in, width);
        let filters_out = round_filters(f_out, width);
        for j in 0..round_repeats(repeats, depth) {
            let (s, f_in_j) = if j > 0 {
                (1, filters_out)
            } else {
                (stride, filters_in)
            };
            let name = format!("block{}{}_", stage + 1, (b'a' + j as u8) as char);
            let drop_rate = DROP_CONNECT_RATE * block_no as f32 / total_blocks as f32;
            x = block(
                b, x, &name, drop_rate, kernel, s, f_in_j, filters_out, expand,
            )?;
            block_no += 1;
        }
    }

    x = conv(
        b,
        "top_conv",
        x,
        round_filters(1280, width),
        (1, 1),
        (1, 1),
        Padding::Same,
        false,
    )?;
    x = bn(b, "top_bn", x, EPS, MOMENTUM, true)?;
    swish(b, "top_activation", x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_rounding_matches_reference_widths() {
        // Width 1.1 stage widths for the B2 variant.
        for (base, want) in [
            (32usize, 32usize),
            (16, 16),
            (24, 24),
            (40, 48),
            (80, 88),
            (112, 120),
            (192, 208),
            (320, 352),
            (1280, 1408),
        ] {
            assert_eq!(round_filters(base, 1.1), want, "base {base}");
        }
        assert_eq!(round_filters(32, 1.0), 32);
    }

    #[test]
    fn repeat_rounding_always_rounds_up() {
        assert_eq!(round_repeats(1, 1.0), 1);
        assert_eq!(round_repeats(1, 1.1), 2);
        assert_eq!(round_repeats(4, 1.1), 5);
        assert_eq!(round_repeats(3, 1.2), 4);
    }
}
