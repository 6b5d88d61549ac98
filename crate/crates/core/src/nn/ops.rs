//! Operation definitions: shape inference, forward evaluation, and
//! gradients for every node kind a graph may contain.

use ndarray::{
    s, Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView4, Axis, Ix2, Ix4, IxDyn,
};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use super::conv;
use super::graph::{Node, Param, ParamId};
use super::NnError;

/// Spatial padding policy for convolutions and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Relu6,
    Sigmoid,
    Swish,
    Softmax,
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dCfg {
    pub filters: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    pub use_bias: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct DwConv2dCfg {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
}

#[derive(Debug, Clone, Copy)]
pub struct PoolCfg {
    pub size: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
}

#[derive(Debug, Clone, Copy)]
pub struct BnCfg {
    pub eps: f32,
    pub momentum: f32,
    /// Whether a learned gamma is present.
    pub scale: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct PadSpec {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

/// Every operation a node can perform.
#[derive(Debug, Clone)]
pub enum Op {
    Input,
    Conv2d(Conv2dCfg),
    DepthwiseConv2d(DwConv2dCfg),
    Dense { units: usize },
    BatchNorm(BnCfg),
    FixedNorm,
    Act(Activation),
    MaxPool(PoolCfg),
    AvgPool(PoolCfg),
    GlobalAvgPool,
    ZeroPad(PadSpec),
    Add,
    ScaledAdd { scale: f32 },
    Multiply,
    Concat,
    Dropout { rate: f32, per_sample: bool },
    Reshape { shape: Vec<usize> },
    Rescale { scale: f32, offset: f32 },
}

/// Per-node forward bookkeeping needed by the backward pass.
pub enum Aux {
    None,
    /// Flat spatial index of each window maximum.
    MaxPool { argmax: Vec<u32> },
    /// Per-channel statistics actually used for normalization.
    BatchNorm { mean: Vec<f32>, inv_std: Vec<f32> },
    /// Pre-scaled keep mask, broadcastable to the output shape.
    Dropout { mask: ArrayD<f32> },
}

/// Mutable context threaded through a forward pass.
pub struct ForwardCtx<'a> {
    pub train: bool,
    pub rng: Option<&'a mut ChaCha12Rng>,
    pub bn_updates: Option<&'a mut Vec<(ParamId, ArrayD<f32>)>>,
}

/// Output of one node's backward step.
pub struct BackwardResult {
    pub param_grads: Vec<(ParamId, ArrayD<f32>)>,
    pub input_grads: Vec<Option<ArrayD<f32>>>,
}

fn shape_err(node: &str, detail: impl Into<String>) -> NnError {
    NnError::Shape {
        node: node.to_string(),
        detail: detail.into(),
    }
}

/// Per-sample output shape of `op` given per-sample input shapes.
pub fn infer_shape(op: &Op, name: &str, inputs: &[&[usize]]) -> Result<Vec<usize>, NnError> {
    let one = |wanted_rank: usize| -> Result<&[usize], NnError> {
        if inputs.len() != 1 {
            return Err(shape_err(name, format!("expected 1 input, got {}", inputs.len())));
        }
        if wanted_rank != 0 && inputs[0].len() != wanted_rank {
            return Err(shape_err(
                name,
                format!("expected rank-{wanted_rank} input, got {:?}", inputs[0]),
            ));
        }
        Ok(inputs[0])
    };
    match op {
        Op::Input => Err(shape_err(name, "input nodes are created via the builder")),
        Op::Conv2d(cfg) => {
            let i = one(3)?;
            let geo = conv::geometry(i[1], i[2], cfg.kernel, cfg.stride, cfg.padding)
                .map_err(|e| shape_err(name, e))?;
            Ok(vec![cfg.filters, geo.out_h, geo.out_w])
        }
        Op::DepthwiseConv2d(cfg) => {
            let i = one(3)?;
            let geo = conv::geometry(i[1], i[2], cfg.kernel, cfg.stride, cfg.padding)
                .map_err(|e| shape_err(name, e))?;
            Ok(vec![i[0], geo.out_h, geo.out_w])
        }
        Op::Dense { units } => {
            one(1)?;
            Ok(vec![*units])
        }
        Op::BatchNorm(_) | Op::FixedNorm => Ok(one(3)?.to_vec()),
        Op::Act(Activation::Softmax) => Ok(one(1)?.to_vec()),
        Op::Act(_) | Op::Dropout { .. } | Op::Rescale { .. } => Ok(one(0)?.to_vec()),
        Op::MaxPool(cfg) | Op::AvgPool(cfg) => {
            let i = one(3)?;
            let geo = conv::geometry(i[1], i[2], cfg.size, cfg.stride, cfg.padding)
                .map_err(|e| shape_err(name, e))?;
            Ok(vec![i[0], geo.out_h, geo.out_w])
        }
        Op::GlobalAvgPool => {
            let i = one(3)?;
            Ok(vec![i[0]])
        }
        Op::ZeroPad(p) => {
            let i = one(3)?;
            Ok(vec![i[0], i[1] + p.top + p.bottom, i[2] + p.left + p.right])
        }
        Op::Add | Op::ScaledAdd { .. } => {
            if inputs.len() < 2 {
                return Err(shape_err(name, "needs at least two inputs"));
            }
            if matches!(op, Op::ScaledAdd { .. }) && inputs.len() != 2 {
                return Err(shape_err(name, "scaled add takes exactly two inputs"));
            }
            if inputs.iter().any(|i| *i != inputs[0]) {
                return Err(shape_err(name, format!("mismatched shapes {inputs:?}")));
            }
            Ok(inputs[0].to_vec())
        }
        Op::Multiply => {
            if inputs.len() != 2 {
                return Err(shape_err(name, "multiply takes exactly two inputs"));
            }
            let (a, b) = (inputs[0], inputs[1]);
            if a == b {
                return Ok(a.to_vec());
            }
            let gate = |full: &[usize], g: &[usize]| {
                full.len() == 3 && g.len() == 3 && g[0] == full[0] && g[1] == 1 && g[2] == 1
            };
            if gate(a, b) {
                Ok(a.to_vec())
            } else if gate(b, a) {
                Ok(b.to_vec())
            } else {
                Err(shape_err(name, format!("cannot broadcast {a:?} with {b:?}")))
            }
        }
        Op::Concat => {
            if inputs.len() < 2 {
                return Err(shape_err(name, "needs at least two inputs"));
            }
            let first = inputs[0];
            if first.len() != 3 {
                return Err(shape_err(name, "concatenation expects rank-3 inputs"));
            }
            let mut channels = 0;
            for i in inputs {
                if i.len() != 3 || i[1] != first[1] || i[2] != first[2] {
                    return Err(shape_err(name, format!("mismatched shapes {inputs:?}")));
                }
                channels += i[0];
            }
            Ok(vec![channels, first[1], first[2]])
        }
        Op::Reshape { shape } => {
            let i = one(0)?;
            let have: usize = i.iter().product();
            let want: usize = shape.iter().product();
            if have != want {
                return Err(shape_err(
                    name,
                    format!("cannot reshape {i:?} ({have}) into {shape:?} ({want})"),
                ));
            }
            Ok(shape.clone())
        }
    }
}

fn view4(a: &ArrayD<f32>) -> ArrayView4<'_, f32> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 value")
}

fn view2(a: &ArrayD<f32>) -> ArrayView2<'_, f32> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 value")
}

fn kernel2(kernel: &ArrayD<f32>) -> Array2<f32> {
    let s = kernel.shape();
    kernel
        .to_shape((s[0] * s[1] * s[2], s[3]))
        .expect("contiguous kernel")
        .to_owned()
}

/// Indices of batch-norm parameters within a node's param list.
struct BnParams {
    gamma: Option<ParamId>,
    beta: ParamId,
    moving_mean: ParamId,
    moving_var: ParamId,
}

fn bn_params(node: &Node, cfg: &BnCfg) -> BnParams {
    if cfg.scale {
        BnParams {
            gamma: Some(node.params[0]),
            beta: node.params[1],
            moving_mean: node.params[2],
            moving_var: node.params[3],
        }
    } else {
        BnParams {
            gamma: None,
            beta: node.params[0],
            moving_mean: node.params[1],
            moving_var: node.params[2],
        }
    }
}

/// Apply `out = x * scale[c] + shift[c]` channelwise.
fn channel_affine(x: &ArrayView4<f32>, scale: &[f32], shift: &[f32]) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let plane = h * w;
    let image = c * plane;
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    out.as_slice_mut()
        .unwrap()
        .par_chunks_mut(image)
        .enumerate()
        .for_each(|(ni, img)| {
            for ci in 0..c {
                let (a, b) = (scale[ci], shift[ci]);
                let src = &xs[ni * image + ci * plane..ni * image + (ci + 1) * plane];
                let dst = &mut img[ci * plane..(ci + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s * a + b;
                }
            }
        });
    out
}

/// Per-channel mean and biased variance over batch and spatial axes.
fn batch_stats(x: &ArrayView4<f32>) -> (Vec<f32>, Vec<f32>) {
    let (n, c, h, w) = x.dim();
    let plane = h * w;
    let image = c * plane;
    let m = (n * plane) as f64;
    let xs = x.as_slice().expect("standard layout");
    let stats: Vec<(f32, f32)> = (0..c)
        .into_par_iter()
        .map(|ci| {
            let mut sum = 0.0f64;
            for ni in 0..n {
                let src = &xs[ni * image + ci * plane..ni * image + (ci + 1) * plane];
                for &v in src {
                    sum += v as f64;
                }
            }
            let mean = sum / m;
            let mut ss = 0.0f64;
            for ni in 0..n {
                let src = &xs[ni * image + ci * plane..ni * image + (ci + 1) * plane];
                for &v in src {
                    let d = v as f64 - mean;
                    ss += d * d;
                }
            }
            (mean as f32, (ss / m) as f32)
        })
        .collect();
    stats.into_iter().unzip()
}

pub fn forward(
    node: &Node,
    inputs: &[&ArrayD<f32>],
    params: &[Param],
    ctx: &mut ForwardCtx<'_>,
) -> Result<(ArrayD<f32>, Aux), NnError> {
    let value = |pid: ParamId| -> &ArrayD<f32> { &params[pid].value };
    match &node.op {
        Op::Input => Err(shape_err(&node.name, "input nodes are evaluated directly")),
        Op::Conv2d(cfg) => {
            let x = view4(inputs[0]);
            let k2 = kernel2(value(node.params[0]));
            let mut out =
                conv::conv2d_forward(&x, &k2.view(), cfg.kernel, cfg.stride, cfg.padding)
                    .map_err(|e| shape_err(&node.name, e))?;
            if cfg.use_bias {
                let bias = value(node.params[1]);
                let b = bias.as_slice().unwrap();
                let (n, co, oh, ow) = out.dim();
                let plane = oh * ow;
                out.as_slice_mut()
                    .unwrap()
                    .par_chunks_mut(co * plane)
                    .for_each(|img| {
                        for o in 0..co {
                            let add = b[o];
                            for v in &mut img[o * plane..(o + 1) * plane] {
                                *v += add;
                            }
                        }
                    });
                let _ = n;
            }
            Ok((out.into_dyn(), Aux::None))
        }
        Op::DepthwiseConv2d(cfg) => {
            let x = view4(inputs[0]);
            let kernel = value(node.params[0]).as_slice().unwrap();
            let out = conv::depthwise_forward(&x, kernel, cfg.kernel, cfg.stride, cfg.padding)
                .map_err(|e| shape_err(&node.name, e))?;
            Ok((out.into_dyn(), Aux::None))
        }
        Op::Dense { .. } => {
            let x = view2(inputs[0]);
            let kernel = view2(value(node.params[0]));
            let bias = value(node.params[1]);
            let mut out = x.dot(&kernel);
            let b = bias.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            out += &b;
            Ok((out.into_dyn(), Aux::None))
        }
        Op::BatchNorm(cfg) => {
            let x = view4(inputs[0]);
            let ids = bn_params(node, cfg);
            let c = x.dim().1;
            let gamma: Vec<f32> = match ids.gamma {
                Some(g) => value(g).iter().copied().collect(),
                None => vec![1.0; c],
            };
            let beta = value(ids.beta).as_slice().unwrap();
            let (mean, var): (Vec<f32>, Vec<f32>) = if ctx.train {
                batch_stats(&x)
            } else {
                (
                    value(ids.moving_mean).iter().copied().collect(),
                    value(ids.moving_var).iter().copied().collect(),
                )
            };
            let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + cfg.eps).sqrt()).collect();
            let scale: Vec<f32> = gamma.iter().zip(&inv_std).map(|(g, i)| g * i).collect();
            let shift: Vec<f32> = beta
                .iter()
                .zip(&mean)
                .zip(&scale)
                .map(|((b, m), s)| b - m * s)
                .collect();
            let out = channel_affine(&x, &scale, &shift);
            if ctx.train {
                if let Some(updates) = ctx.bn_updates.as_deref_mut() {
                    let mm = value(ids.moving_mean);
                    let mv = value(ids.moving_var);
                    let new_mm: Array1<f32> = mm
                        .iter()
                        .zip(&mean)
                        .map(|(old, new)| old * cfg.momentum + new * (1.0 - cfg.momentum))
                        .collect();
                    let new_mv: Array1<f32> = mv
                        .iter()
                        .zip(&var)
                        .map(|(old, new)| old * cfg.momentum + new * (1.0 - cfg.momentum))
                        .collect();
                    updates.push((ids.moving_mean, new_mm.into_dyn()));
                    updates.push((ids.moving_var, new_mv.into_dyn()));
                }
            }
            Ok((out.into_dyn(), Aux::BatchNorm { mean, inv_std }))
        }
        Op::FixedNorm => {
            let x = view4(inputs[0]);
            let mean = value(node.params[0]).as_slice().unwrap();
            let var = value(node.params[1]).as_slice().unwrap();
            let scale: Vec<f32> = var.iter().map(|v| 1.0 / v.sqrt().max(1e-7)).collect();
            let shift: Vec<f32> = mean
                .iter()
                .zip(&scale)
                .map(|(m, s)| -m * s)
                .collect();
            Ok((channel_affine(&x, &scale, &shift).into_dyn(), Aux::None))
        }
        Op::Act(act) => {
            let x = inputs[0];
            let out = match act {
                Activation::Relu => x.mapv(|v| v.max(0.0)),
                Activation::Relu6 => x.mapv(|v| v.clamp(0.0, 6.0)),
                Activation::Sigmoid => x.mapv(sigmoid),
                Activation::Swish => x.mapv(|v| v * sigmoid(v)),
                Activation::Softmax => {
                    let x2 = view2(x);
                    let mut out = x2.to_owned();
                    for mut row in out.rows_mut() {
                        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                        row.mapv_inplace(|v| (v - max).exp());
                        let sum = row.sum();
                        row.mapv_inplace(|v| v / sum);
                    }
                    out.into_dyn()
                }
            };
            Ok((out, Aux::None))
        }
        Op::MaxPool(cfg) => {
            let x = view4(inputs[0]);
            let (n, c, h, w) = x.dim();
            let geo = conv::geometry(h, w, cfg.size, cfg.stride, cfg.padding)
                .map_err(|e| shape_err(&node.name, e))?;
            let xs = x.as_slice().unwrap();
            let plane = h * w;
            let image = c * plane;
            let out_plane = geo.out_h * geo.out_w;
            let mut out = Array4::<f32>::zeros((n, c, geo.out_h, geo.out_w));
            let mut argmax = vec![0u32; n * c * out_plane];
            out.as_slice_mut()
                .unwrap()
                .par_chunks_mut(c * out_plane)
                .zip(argmax.par_chunks_mut(c * out_plane))
                .enumerate()
                .for_each(|(ni, (out_img, arg_img))| {
                    for ci in 0..c {
                        let x_plane = &xs[ni * image + ci * plane..ni * image + (ci + 1) * plane];
                        for oy in 0..geo.out_h {
                            let base_y = (oy * cfg.stride.0) as isize - geo.pad_top;
                            for ox in 0..geo.out_w {
                                let base_x = (ox * cfg.stride.1) as isize - geo.pad_left;
                                let mut best = f32::NEG_INFINITY;
                                let mut best_idx = 0u32;
                                for ky in 0..cfg.size.0 {
                                    let iy = base_y + ky as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..cfg.size.1 {
                                        let ix = base_x + kx as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let v = x_plane[iy as usize * w + ix as usize];
                                        if v > best {
                                            best = v;
                                            best_idx = (iy as usize * w + ix as usize) as u32;
                                        }
                                    }
                                }
                                out_img[ci * out_plane + oy * geo.out_w + ox] = best;
                                arg_img[ci * out_plane + oy * geo.out_w + ox] = best_idx;
                            }
                        }
                    }
                });
            Ok((out.into_dyn(), Aux::MaxPool { argmax }))
        }
        Op::AvgPool(cfg) => {
            let x = view4(inputs[0]);
            let (n, c, h, w) = x.dim();
            let geo = conv::geometry(h, w, cfg.size, cfg.stride, cfg.padding)
                .map_err(|e| shape_err(&node.name, e))?;
            let xs = x.as_slice().unwrap();
            let plane = h * w;
            let image = c * plane;
            let out_plane = geo.out_h * geo.out_w;
            let mut out = Array4::<f32>::zeros((n, c, geo.out_h, geo.out_w));
            out.as_slice_mut()
                .unwrap()
                .par_chunks_mut(c * out_plane)
                .enumerate()
                .for_each(|(ni, out_img)| {
                    for ci in 0..c {
                        let x_plane = &xs[ni * image + ci * plane..ni * image + (ci + 1) * plane];
                        for oy in 0..geo.out_h {
                            let base_y = (oy * cfg.stride.0) as isize - geo.pad_top;
                            for ox in 0..geo.out_w {
                                let base_x = (ox * cfg.stride.1) as isize - geo.pad_left;
                                let mut acc = 0.0f32;
                                let mut count = 0u32;
                                for ky in 0..cfg.size.0 {
                                    let iy = base_y + ky as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..cfg.size.1 {
                                        let ix = base_x + kx as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc += x_plane[iy as usize * w + ix as usize];
                                        count += 1;
                                    }
                                }
                                out_img[ci * out_plane + oy * geo.out_w + ox] =
                                    acc / count as f32;
                            }
                        }
                    }
                });
            Ok((out.into_dyn(), Aux::None))
        }
        Op::GlobalAvgPool => {
            let x = view4(inputs[0]);
            let out = x.mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap();
            Ok((out.into_dyn(), Aux::None))
        }
        Op::ZeroPad(p) => {
            let x = view4(inputs[0]);
            let (n, c, h, w) = x.dim();
            let mut out = Array4::<f32>::zeros((n, c, h + p.top + p.bottom, w + p.left + p.right));
            out.slice_mut(s![
                ..,
                ..,
                p.top..p.top + h,
                p.left..p.left + w
            ])
            .assign(&x);
            Ok((out.into_dyn(), Aux::None))
        }
        Op::Add => {
            let mut out = inputs[0].clone();
            for x in &inputs[1..] {
                out += *x;
            }
            Ok((out, Aux::None))
        }
        Op::ScaledAdd { scale } => {
            let mut out = inputs[0].clone();
            out.zip_mut_with(inputs[1], |a, b| *a += scale * b);
            Ok((out, Aux::None))
        }
        Op::Multiply => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() == b.shape() {
                Ok((a * b, Aux::None))
            } else {
                let (big, small) = if a.len() >= b.len() { (a, b) } else { (b, a) };
                let bc = small
                    .broadcast(big.raw_dim())
                    .ok_or_else(|| shape_err(&node.name, "broadcast failure"))?;
                Ok((big * &bc, Aux::None))
            }
        }
        Op::Concat => {
            let views: Vec<_> = inputs.iter().map(|x| x.view()).collect();
            let out = ndarray::concatenate(Axis(1), &views)
                .map_err(|e| shape_err(&node.name, e.to_string()))?;
            Ok((out.as_standard_layout().to_owned(), Aux::None))
        }
        Op::Dropout { rate, per_sample } => {
            if !ctx.train || *rate == 0.0 {
                return Ok((inputs[0].clone(), Aux::None));
            }
            let rng = ctx.rng.as_deref_mut().ok_or_else(|| {
                NnError::BadConfig("training forward requires an rng for dropout".to_string())
            })?;
            let x = inputs[0];
            let keep_scale = 1.0 / (1.0 - rate);
            let mask = if *per_sample {
                let n = x.shape()[0];
                let mut shape = vec![1usize; x.ndim()];
                shape[0] = n;
                let draws: Vec<f32> = (0..n)
                    .map(|_| {
                        if rng.gen::<f32>() < *rate {
                            0.0
                        } else {
                            keep_scale
                        }
                    })
                    .collect();
                ArrayD::from_shape_vec(IxDyn(&shape), draws).unwrap()
            } else {
                let mut mask = ArrayD::zeros(x.raw_dim());
                for v in mask.iter_mut() {
                    *v = if rng.gen::<f32>() < *rate {
                        0.0
                    } else {
                        keep_scale
                    };
                }
                mask
            };
            let bc = mask.broadcast(x.raw_dim()).unwrap();
            let out = x * &bc;
            Ok((out, Aux::Dropout { mask }))
        }
        Op::Reshape { shape } => {
            let mut full = vec![inputs[0].shape()[0]];
            full.extend_from_slice(shape);
            let out = inputs[0]
                .clone()
                .into_shape_with_order(IxDyn(&full))
                .map_err(|e| shape_err(&node.name, e.to_string()))?;
            Ok((out, Aux::None))
        }
        Op::Rescale { scale, offset } => {
            Ok((inputs[0].mapv(|v| v * scale + offset), Aux::None))
        }
    }
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Sum a gradient over batch and spatial axes, yielding one value per
/// channel, in fixed order.
fn sum_per_channel(dy: &ArrayView4<f32>) -> Vec<f32> {
    let (n, c, h, w) = dy.dim();
    let plane = h * w;
    let image = c * plane;
    let ds = dy.as_slice().unwrap();
    (0..c)
        .into_par_iter()
        .map(|ci| {
            let mut acc = 0.0f64;
            for ni in 0..n {
                for &v in &ds[ni * image + ci * plane..ni * image + (ci + 1) * plane] {
                    acc += v as f64;
                }
            }
            acc as f32
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn backward(
    node: &Node,
    grad: &ArrayD<f32>,
    inputs: &[&ArrayD<f32>],
    output: &ArrayD<f32>,
    aux: &Aux,
    params: &[Param],
    train: bool,
    want_inputs: &[bool],
    compute_param_grads: bool,
) -> Result<BackwardResult, NnError> {
    let wants_param = |pid: ParamId| -> bool {
        compute_param_grads && params[pid].trainable && !params[pid].statistic
    };
    let mut result = BackwardResult {
        param_grads: Vec::new(),
        input_grads: vec![None; inputs.len()],
    };
    match &node.op {
        Op::Input => {}
        Op::Conv2d(cfg) => {
            let x = view4(inputs[0]);
            let dy = view4(grad);
            let kernel = &params[node.params[0]].value;
            let k2 = kernel2(kernel);
            let want_dk = wants_param(node.params[0]);
            let (dx, dk) = conv::conv2d_backward(
                &x,
                &k2.view(),
                cfg.kernel,
                cfg.stride,
                cfg.padding,
                &dy,
                want_inputs[0],
                want_dk,
            )
            .map_err(|e| shape_err(&node.name, e))?;
            if let Some(dk) = dk {
                let dk = dk
                    .into_shape_with_order(IxDyn(kernel.shape()))
                    .expect("kernel gradient shape");
                result.param_grads.push((node.params[0], dk));
            }
            if cfg.use_bias && wants_param(node.params[1]) {
                let db = sum_per_channel(&dy);
                result
                    .param_grads
                    .push((node.params[1], Array1::from(db).into_dyn()));
            }
            if let Some(dx) = dx {
                result.input_grads[0] = Some(dx.into_dyn());
            }
        }
        Op::DepthwiseConv2d(cfg) => {
            let x = view4(inputs[0]);
            let dy = view4(grad);
            let kernel = &params[node.params[0]].value;
            let want_dk = wants_param(node.params[0]);
            let (dx, dk) = conv::depthwise_backward(
                &x,
                kernel.as_slice().unwrap(),
                cfg.kernel,
                cfg.stride,
                cfg.padding,
                &dy,
                want_inputs[0],
                want_dk,
            )
            .map_err(|e| shape_err(&node.name, e))?;
            if let Some(dk) = dk {
                let dk = ArrayD::from_shape_vec(IxDyn(kernel.shape()), dk).unwrap();
                result.param_grads.push((node.params[0], dk));
            }
            if let Some(dx) = dx {
                result.input_grads[0] = Some(dx.into_dyn());
            }
        }
        Op::Dense { .. } => {
            let x = view2(inputs[0]);
            let dy = view2(grad);
            let kernel = view2(&params[node.params[0]].value);
            if wants_param(node.params[0]) {
                let dk = x.t().dot(&dy);
                result.param_grads.push((node.params[0], dk.into_dyn()));
            }
            if wants_param(node.params[1]) {
                let db = dy.sum_axis(Axis(0));
                result.param_grads.push((node.params[1], db.into_dyn()));
            }
            if want_inputs[0] {
                let dx = dy.dot(&kernel.t());
                result.input_grads[0] = Some(dx.into_dyn());
            }
        }
        Op::BatchNorm(cfg) => {
            let Aux::BatchNorm { mean, inv_std } = aux else {
                return Err(shape_err(&node.name, "missing batch-norm statistics"));
            };
            let x = view4(inputs[0]);
            let dy = view4(grad);
            let ids = bn_params(node, cfg);
            let (n, c, h, w) = x.dim();
            let plane = h * w;
            let image = c * plane;
            let m = (n * plane) as f32;
            let xs = x.as_slice().unwrap();
            let ds = dy.as_slice().unwrap();
            let gamma: Vec<f32> = match ids.gamma {
                Some(g) => params[g].value.iter().copied().collect(),
                None => vec![1.0; c],
            };
            // Per-channel sums of dy and dy * x_hat.
            let sums: Vec<(f32, f32)> = (0..c)
                .into_par_iter()
                .map(|ci| {
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for ni in 0..n {
                        let xo = ni * image + ci * plane;
                        for i in 0..plane {
                            let g = ds[xo + i] as f64;
                            let xh = ((xs[xo + i] - mean[ci]) * inv_std[ci]) as f64;
                            s1 += g;
                            s2 += g * xh;
                        }
                    }
                    (s1 as f32, s2 as f32)
                })
                .collect();
            if let Some(g) = ids.gamma {
                if wants_param(g) {
                    let dgamma: Array1<f32> = sums.iter().map(|s| s.1).collect();
                    result.param_grads.push((g, dgamma.into_dyn()));
                }
            }
            if wants_param(ids.beta) {
                let dbeta: Array1<f32> = sums.iter().map(|s| s.0).collect();
                result.param_grads.push((ids.beta, dbeta.into_dyn()));
            }
            if want_inputs[0] {
                let mut dx = Array4::<f32>::zeros((n, c, h, w));
                if train {
                    dx.as_slice_mut()
                        .unwrap()
                        .par_chunks_mut(image)
                        .enumerate()
                        .for_each(|(ni, img)| {
                            for ci in 0..c {
                                let k = gamma[ci] * inv_std[ci] / m;
                                let (s1, s2) = sums[ci];
                                let xo = ni * image + ci * plane;
                                let dst = &mut img[ci * plane..(ci + 1) * plane];
                                for (i, d) in dst.iter_mut().enumerate() {
                                    let xh = (xs[xo + i] - mean[ci]) * inv_std[ci];
                                    *d = k * (m * ds[xo + i] - s1 - xh * s2);
                                }
                            }
                        });
                } else {
                    dx.as_slice_mut()
                        .unwrap()
                        .par_chunks_mut(image)
                        .enumerate()
                        .for_each(|(ni, img)| {
                            for ci in 0..c {
                                let k = gamma[ci] * inv_std[ci];
                                let xo = ni * image + ci * plane;
                                let dst = &mut img[ci * plane..(ci + 1) * plane];
                                for (i, d) in dst.iter_mut().enumerate() {
                                    *d = k * ds[xo + i];
                                }
                            }
                        });
                }
                result.input_grads[0] = Some(dx.into_dyn());
            }
        }
        Op::FixedNorm => {
            if want_inputs[0] {
                let var = params[node.params[1]].value.as_slice().unwrap();
                let scale: Vec<f32> = var.iter().map(|v| 1.0 / v.sqrt().max(1e-7)).collect();
                let dy = view4(grad);
                let (n, c, h, w) = dy.dim();
                let plane = h * w;
                let image = c * plane;
                let ds = dy.as_slice().unwrap();
                let mut dx = Array4::<f32>::zeros((n, c, h, w));
                dx.as_slice_mut()
                    .unwrap()
                    .par_chunks_mut(image)
                    .enumerate()
                    .for_each(|(ni, img)| {
                        for ci in 0..c {
                            let k = scale[ci];
                            let xo = ni * image + ci * plane;
                            for (i, d) in img[ci * plane..(ci + 1) * plane].iter_mut().enumerate()
                            {
                                *d = k * ds[xo + i];
                            }
                        }
                    });
                result.input_grads[0] = Some(dx.into_dyn());
            }
        }
        Op::Act(act) => {
            if want_inputs[0] {
                let dx = match act {
                    Activation::Relu => {
                        let mut dx = grad.clone();
                        dx.zip_mut_with(output, |g, &o| {
                            if o <= 0.0 {
                                *g = 0.0;
                            }
                        });
                        dx
                    }
                    Activation::Relu6 => {
                        let mut dx = grad.clone();
                        dx.zip_mut_with(inputs[0], |g, &x| {
                            if x <= 0.0 || x >= 6.0 {
                                *g = 0.0;
                            }
                        });
                        dx
                    }
                    Activation::Sigmoid => {
                        let mut dx = grad.clone();
                        dx.zip_mut_with(output, |g, &o| *g *= o * (1.0 - o));
                        dx
                    }
                    Activation::Swish => {
                        let mut dx = grad.clone();
                        dx.zip_mut_with(inputs[0], |g, &x| {
                            let s = sigmoid(x);
                            *g *= s + x * s * (1.0 - s);
                        });
                        dx
                    }
                    Activation::Softmax => {
                        let dy = view2(grad);
                        let out = view2(output);
                        let mut dx = dy.to_owned();
                        for (mut dxr, outr) in dx.rows_mut().into_iter().zip(out.rows()) {
                            let dot: f32 = dxr.iter().zip(outr.iter()).map(|(a, b)| a * b).sum();
                            for (d, &o) in dxr.iter_mut().zip(outr.iter()) {
                                *d = o * (*d - dot);
                            }
                        }
                        dx.into_dyn()
                    }
                };
                result.input_grads[0] = Some(dx);
            }
        }
        Op::MaxPool(cfg) => {
            if want_inputs[0] {
                let Aux::MaxPool { argmax } = aux else {
                    return Err(shape_err(&node.name, "missing max-pool indices"));
                };
                let dy = view4(grad);
                let (n, c, oh, ow) = dy.dim();
                let in_shape = view4(inputs[0]).dim();
                let (h, w) = (in_shape.2, in_shape.3);
                let plane = h * w;
                let image = c * plane;
                let out_plane = oh * ow;
                let out_image = c * out_plane;
                let ds = dy.as_slice().unwrap();
                let mut dx = Array4::<f32>::zeros((n, c, h, w));
                dx.as_slice_mut()
                    .unwrap()
                    .par_chunks_mut(image)
                    .enumerate()
                    .for_each(|(ni, img)| {
                        for ci in 0..c {
                            let base = ni * out_image + ci * out_plane;
                            let dst = &mut img[ci * plane..(ci + 1) * plane];
                            for i in 0..out_plane {
                                dst[argmax[base + i] as usize] += ds[base + i];
                            }
                        }
                    });
                let _ = cfg;
                result.input_grads[0] = Some(dx.into_dyn());
            }
        }
        Op::AvgPool(cfg) => {
            if want_inputs[0] {
                let dy = view4(grad);
                let (n, c, oh, ow) = dy.dim();
                let in_shape = view4(inputs[0]).dim();
                let (h, w) = (in_shape.2, in_shape.3);
                let geo = conv::geometry(h, w, cfg.size, cfg.stride, cfg.padding)
                    .map_err(|e| shape_err(&node.name, e))?;
                let plane = h * w;
                let image = c * plane;
                let out_plane = oh * ow;
                let out_image = c * out_plane;
                let ds = dy.as_slice().unwrap();
                let mut dx = Array4::<f32>::zeros((n, c, h, w));
                dx.as_slice_mut()
                    .unwrap()
                    .par_chunks_mut(image)
                    .enumerate()
                    .for_each(|(ni, img)| {
                        for ci in 0..c {
                            let dst = &mut img[ci * plane..(ci + 1) * plane];
                            for oy in 0..oh {
                                let base_y = (oy * cfg.stride.0) as isize - geo.pad_top;
                                for ox in 0..ow {
                                    let base_x = (ox * cfg.stride.1) as isize - geo.pad_left;
                                    let g = ds[ni * out_image + ci * out_plane + oy * ow + ox];
                                    let mut cells = Vec::with_capacity(cfg.size.0 * cfg.size.1);
                                    for ky in 0..cfg.size.0 {
                                        let iy = base_y + ky as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..cfg.size.1 {
                                            let ix = base_x + kx as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            cells.push(iy as usize * w + ix as usize);
                                        }
                                    }
                                    let share = g / cells.len() as f32;
                                    for idx in cells {
                                        dst[idx] += share;
                                    }
                                }
                            }
                        }
                    });
                result.input_grads[0] = Some(dx.into_dyn());
            }
        }
        Op::GlobalAvgPool => {
            if want_inputs[0] {
                let dy = view2(grad);
                let in_shape = view4(inputs[0]).dim();
                let (n, c, h, w) = in_shape;
                let inv = 1.0 / (h * w) as f32;
                let mut dx = Array4::<f32>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let g = dy[(ni, ci)] * inv;
                        dx.slice_mut(s![ni, ci, .., ..]).fill(g);
                    }
                }
                result.input_grads[0] = Some(dx.into_dyn());
            }
        }
        Op::ZeroPad(p) => {
            if want_inputs[0] {
                let dy = view4(grad);
                let in_shape = view4(inputs[0]).dim();
                let (h, w) = (in_shape.2, in_shape.3);
                let dx = dy
                    .slice(s![.., .., p.top..p.top + h, p.left..p.left + w])
                    .to_owned();
                result.input_grads[0] = Some(dx.into_dyn());
            }
        }
        Op::Add => {
            for (i, want) in want_inputs.iter().enumerate() {
                if *want {
                    result.input_grads[i] = Some(grad.clone());
                }
            }
        }
        Op::ScaledAdd { scale } => {
            if want_inputs[0] {
                result.input_grads[0] = Some(grad.clone());
            }
            if want_inputs[1] {
                result.input_grads[1] = Some(grad.mapv(|g| g * scale));
            }
        }
        Op::Multiply => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() == b.shape() {
                if want_inputs[0] {
                    result.input_grads[0] = Some(grad * b);
                }
                if want_inputs[1] {
                    result.input_grads[1] = Some(grad * a);
                }
            } else {
                let a_is_big = a.len() >= b.len();
                let (big_i, small_i) = if a_is_big { (0, 1) } else { (1, 0) };
                let (big, small) = (inputs[big_i], inputs[small_i]);
                if want_inputs[big_i] {
                    let bc = small.broadcast(big.raw_dim()).unwrap();
                    result.input_grads[big_i] = Some(grad * &bc);
                }
                if want_inputs[small_i] {
                    // Reduce over the broadcast (spatial) axes.
                    let prod = grad * big;
                    let p4 = prod.view().into_dimensionality::<Ix4>().unwrap();
                    let reduced = p4.sum_axis(Axis(3)).sum_axis(Axis(2));
                    let (n, c) = reduced.dim();
                    let dsmall = reduced
                        .into_shape_with_order(IxDyn(&[n, c, 1, 1]))
                        .unwrap();
                    result.input_grads[small_i] = Some(dsmall);
                }
            }
        }
        Op::Concat => {
            let mut offset = 0;
            for (i, x) in inputs.iter().enumerate() {
                let ci = x.shape()[1];
                if want_inputs[i] {
                    let piece = grad
                        .view()
                        .into_dimensionality::<Ix4>()
                        .unwrap()
                        .slice(s![.., offset..offset + ci, .., ..])
                        .as_standard_layout()
                        .to_owned();
                    result.input_grads[i] = Some(piece.into_dyn());
                }
                offset += ci;
            }
        }
        Op::Dropout { rate, .. } => {
            if want_inputs[0] {
                if !train || *rate == 0.0 {
                    result.input_grads[0] = Some(grad.clone());
                } else {
                    let Aux::Dropout { mask } = aux else {
                        return Err(shape_err(&node.name, "missing dropout mask"));
                    };
                    let bc = mask.broadcast(grad.raw_dim()).unwrap();
                    result.input_grads[0] = Some(grad * &bc);
                }
            }
        }
        Op::Reshape { .. } => {
            if want_inputs[0] {
                let dx = grad
                    .clone()
                    .into_shape_with_order(IxDyn(inputs[0].shape()))
                    .expect("reshape gradient");
                result.input_grads[0] = Some(dx);
            }
        }
        Op::Rescale { scale, .. } => {
            if want_inputs[0] {
                result.input_grads[0] = Some(grad.mapv(|g| g * scale));
            }
        }
    }
    Ok(result)
}
