//! Graph builders for the 13 registry backbones.
//!
//! Each builder reproduces the reference architecture layer for layer:
//! node names, parameter tensor names, normalization settings, and
//! padding rules all match the original models so converted pretrained
//! weights load by name.

mod densenet;
mod efficientnet;
mod inception_resnet;
mod inception_v3;
mod mobilenet;
mod resnet;
mod vgg;
mod xception;

use crate::nn::{
    Activation, BnCfg, Conv2dCfg, DwConv2dCfg, GraphBuilder, NnError, NodeId, PadSpec, Padding,
    PoolCfg,
};

/// Build the named backbone on top of `input`, returning the node that
/// produces its final feature map.
pub(super) fn build_feature(
    b: &mut GraphBuilder,
    id: &str,
    input: NodeId,
) -> Result<NodeId, NnError> {
    match id {
        "vgg16" => vgg::build(b, input, &[2, 2, 3, 3, 3]),
        "vgg19" => vgg::build(b, input, &[2, 2, 4, 4, 4]),
        "resnet50" => resnet::build(b, input, &[3, 4, 6, 3]),
        "resnet101" => resnet::build(b, input, &[3, 4, 23, 3]),
        "inceptionresnetv2" => inception_resnet::build(b, input),
        "mobilenetv2" => mobilenet::build(b, input),
        "inceptionv3" => inception_v3::build(b, input),
        "xception" => xception::build(b, input),
        "efficientnetb0" => efficientnet::build(b, input, 1.0, 1.0),
        "efficientnetb1" => efficientnet::build(b, input, 1.0, 1.1),
        "efficientnetb2" => efficientnet::build(b, input, 1.1, 1.2),
        "densenet121" => densenet::build(b, input, &[6, 12, 24, 16]),
        "densenet169" => densenet::build(b, input, &[6, 12, 32, 32]),
        other => Err(NnError::BadConfig(format!("no builder for '{other}'"))),
    }
}

/// Convolution with explicit geometry; bias per the reference layer.
#[allow(clippy::too_many_arguments)]
fn conv(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    filters: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
    use_bias: bool,
) -> Result<NodeId, NnError> {
    b.conv2d(
        name,
        x,
        Conv2dCfg {
            filters,
            kernel,
            stride,
            padding,
            use_bias,
        },
    )
}

fn dwconv(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<NodeId, NnError> {
    b.depthwise_conv2d(
        name,
        x,
        DwConv2dCfg {
            kernel,
            stride,
            padding,
        },
    )
}

fn bn(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    eps: f32,
    momentum: f32,
    scale: bool,
) -> Result<NodeId, NnError> {
    b.batch_norm(
        name,
        x,
        BnCfg {
            eps,
            momentum,
            scale,
        },
    )
}

fn max_pool(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    size: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<NodeId, NnError> {
    b.max_pool(
        name,
        x,
        PoolCfg {
            size,
            stride,
            padding,
        },
    )
}

fn avg_pool(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    size: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<NodeId, NnError> {
    b.avg_pool(
        name,
        x,
        PoolCfg {
            size,
            stride,
            padding,
        },
    )
}

fn relu(b: &mut GraphBuilder, name: &str, x: NodeId) -> Result<NodeId, NnError> {
    b.activation(name, x, Activation::Relu)
}

/// Asymmetric padding in front of a stride-2 valid convolution so the
/// output matches same-padding geometry: odd inputs pad evenly, even
/// inputs pad only bottom and right.
fn correct_pad(b: &GraphBuilder, x: NodeId, kernel: usize) -> PadSpec {
    let shape = b.shape(x);
    let (h, w) = (shape[1], shape[2]);
    let half = kernel / 2;
    PadSpec {
        top: half - (1 - h % 2),
        bottom: half,
        left: half - (1 - w % 2),
        right: half,
    }
}

/// Counter-based names matching reference auto-naming: `prefix`,
/// `prefix_1`, `prefix_2`, ...
pub(crate) struct AutoName {
    prefix: &'static str,
    next: usize,
}

impl AutoName {
    fn new(prefix: &'static str) -> Self {
        AutoName { prefix, next: 0 }
    }

    fn take(&mut self) -> String {
        let name = if self.next == 0 {
            self.prefix.to_string()
        } else {
            format!("{}_{}", self.prefix, self.next)
        };
        self.next += 1;
        name
    }
}
