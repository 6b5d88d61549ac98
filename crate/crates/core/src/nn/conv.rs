//! Convolution kernels: patch-matrix (im2col) dense convolution and direct
//! depthwise convolution, with their gradients.
//!
//! Spatial padding follows the convention of the exporting framework:
//! `Same` output size is `ceil(in / stride)` with any odd padding surplus
//! applied at the bottom and right.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayView4, ArrayViewMut2};
use rayon::prelude::*;

use super::ops::Padding;

/// Resolved output size and implicit padding offsets for a sliding window.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: isize,
    pub pad_left: isize,
}

pub(crate) fn geometry(
    h: usize,
    w: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<Geometry, String> {
    if stride.0 == 0 || stride.1 == 0 || kernel.0 == 0 || kernel.1 == 0 {
        return Err("kernel and stride must be positive".to_string());
    }
    match padding {
        Padding::Valid => {
            if kernel.0 > h || kernel.1 > w {
                return Err(format!(
                    "window {}x{} larger than input {h}x{w}",
                    kernel.0, kernel.1
                ));
            }
            Ok(Geometry {
                out_h: (h - kernel.0) / stride.0 + 1,
                out_w: (w - kernel.1) / stride.1 + 1,
                pad_top: 0,
                pad_left: 0,
            })
        }
        Padding::Same => {
            let out_h = h.div_ceil(stride.0);
            let out_w = w.div_ceil(stride.1);
            let pad_h = ((out_h - 1) * stride.0 + kernel.0).saturating_sub(h);
            let pad_w = ((out_w - 1) * stride.1 + kernel.1).saturating_sub(w);
            Ok(Geometry {
                out_h,
                out_w,
                pad_top: (pad_h / 2) as isize,
                pad_left: (pad_w / 2) as isize,
            })
        }
    }
}

/// Extract sliding windows into one row per output position. Row
/// `(n, oy, ox)` lists the window in `(ky, kx, channel)` order, matching
/// the C-order flattening of a `[kh, kw, in, out]` kernel; out-of-bounds
/// cells stay zero.
pub(crate) fn im2col(
    x: &ArrayView4<f32>,
    kernel: (usize, usize),
    stride: (usize, usize),
    geo: &Geometry,
) -> Array2<f32> {
    let (_, c, h, w) = x.dim();
    let (kh, kw) = kernel;
    let k = kh * kw * c;
    let rows = x.dim().0 * geo.out_h * geo.out_w;
    let mut patches = Array2::<f32>::zeros((rows, k));
    let xs = x.as_slice().expect("standard layout input");
    let plane = h * w;
    let image = c * plane;
    let per_image = geo.out_h * geo.out_w;
    patches
        .as_slice_mut()
        .unwrap()
        .par_chunks_mut(k)
        .enumerate()
        .for_each(|(row, out_row)| {
            let ox = row % geo.out_w;
            let oy = (row / geo.out_w) % geo.out_h;
            let n = row / per_image;
            let base_y = (oy * stride.0) as isize - geo.pad_top;
            let base_x = (ox * stride.1) as isize - geo.pad_left;
            for ky in 0..kh {
                let iy = base_y + ky as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = base_x + kx as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = n * image + iy as usize * w + ix as usize;
                    let dst = (ky * kw + kx) * c;
                    for ci in 0..c {
                        out_row[dst + ci] = xs[src + ci * plane];
                    }
                }
            }
        });
    patches
}

/// Scatter-add patch-matrix gradients back onto the input, inverting
/// `im2col`.
pub(crate) fn col2im(
    dp: &Array2<f32>,
    dims: (usize, usize, usize, usize),
    kernel: (usize, usize),
    stride: (usize, usize),
    geo: &Geometry,
) -> Array4<f32> {
    let (n, c, h, w) = dims;
    let (kh, kw) = kernel;
    let k = kh * kw * c;
    let plane = h * w;
    let image = c * plane;
    let per_image = geo.out_h * geo.out_w;
    let dps = dp.as_slice().expect("standard layout gradient");
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    dx.as_slice_mut()
        .unwrap()
        .par_chunks_mut(image)
        .enumerate()
        .for_each(|(ni, dx_img)| {
            for r in 0..per_image {
                let row = ni * per_image + r;
                let ox = r % geo.out_w;
                let oy = r / geo.out_w;
                let base_y = (oy * stride.0) as isize - geo.pad_top;
                let base_x = (ox * stride.1) as isize - geo.pad_left;
                let src_row = &dps[row * k..(row + 1) * k];
                for ky in 0..kh {
                    let iy = base_y + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = base_x + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = iy as usize * w + ix as usize;
                        let src = (ky * kw + kx) * c;
                        for ci in 0..c {
                            dx_img[dst + ci * plane] += src_row[src + ci];
                        }
                    }
                }
            }
        });
    dx
}

fn is_pointwise(kernel: (usize, usize), stride: (usize, usize)) -> bool {
    kernel == (1, 1) && stride == (1, 1)
}

/// Dense convolution; kernel layout `[kh, kw, in, out]`.
pub(crate) fn conv2d_forward(
    x: &ArrayView4<f32>,
    kernel: &ArrayView2<f32>,
    kernel_hw: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<Array4<f32>, String> {
    let (n, c, h, w) = x.dim();
    let cout = kernel.dim().1;
    let geo = geometry(h, w, kernel_hw, stride, padding)?;

    if is_pointwise(kernel_hw, stride) {
        // A 1x1 stride-1 convolution is a per-image channel mixing matmul;
        // skip the patch materialization.
        let plane = h * w;
        let xs = x.as_slice().expect("standard layout input");
        let mut out = Array4::<f32>::zeros((n, cout, h, w));
        let kt = kernel.t();
        out.as_slice_mut()
            .unwrap()
            .par_chunks_mut(cout * plane)
            .enumerate()
            .for_each(|(ni, chunk)| {
                let x_img =
                    ArrayView2::from_shape((c, plane), &xs[ni * c * plane..(ni + 1) * c * plane])
                        .unwrap();
                let mut out_img = ArrayViewMut2::from_shape((cout, plane), chunk).unwrap();
                general_mat_mul(1.0, &kt, &x_img, 0.0, &mut out_img);
            });
        return Ok(out);
    }

    let patches = im2col(x, kernel_hw, stride, &geo);
    let out_mat = patches.dot(kernel);
    let nhwc = out_mat
        .into_shape_with_order((n, geo.out_h, geo.out_w, cout))
        .expect("row count matches geometry");
    Ok(nhwc
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .to_owned())
}

/// Gradients of a dense convolution. Returns `(dx, dkernel)`, each only
/// when requested.
pub(crate) fn conv2d_backward(
    x: &ArrayView4<f32>,
    kernel: &ArrayView2<f32>,
    kernel_hw: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
    dy: &ArrayView4<f32>,
    want_dx: bool,
    want_dk: bool,
) -> Result<(Option<Array4<f32>>, Option<Array2<f32>>), String> {
    let (n, c, h, w) = x.dim();
    let cout = kernel.dim().1;
    let geo = geometry(h, w, kernel_hw, stride, padding)?;

    if is_pointwise(kernel_hw, stride) {
        let plane = h * w;
        let xs = x.as_slice().expect("standard layout input");
        let dys = dy.as_slice().expect("standard layout gradient");
        let dk = if want_dk {
            // Accumulate per-image contributions in a fixed order.
            let mut dk = Array2::<f32>::zeros((c, cout));
            for ni in 0..n {
                let x_img =
                    ArrayView2::from_shape((c, plane), &xs[ni * c * plane..(ni + 1) * c * plane])
                        .unwrap();
                let dy_img = ArrayView2::from_shape(
                    (cout, plane),
                    &dys[ni * cout * plane..(ni + 1) * cout * plane],
                )
                .unwrap();
                general_mat_mul(1.0, &x_img, &dy_img.t(), 1.0, &mut dk.view_mut());
            }
            Some(dk)
        } else {
            None
        };
        let dx = if want_dx {
            let mut dx = Array4::<f32>::zeros((n, c, h, w));
            dx.as_slice_mut()
                .unwrap()
                .par_chunks_mut(c * plane)
                .enumerate()
                .for_each(|(ni, chunk)| {
                    let dy_img = ArrayView2::from_shape(
                        (cout, plane),
                        &dys[ni * cout * plane..(ni + 1) * cout * plane],
                    )
                    .unwrap();
                    let mut dx_img = ArrayViewMut2::from_shape((c, plane), chunk).unwrap();
                    general_mat_mul(1.0, kernel, &dy_img, 0.0, &mut dx_img);
                });
            Some(dx)
        } else {
            None
        };
        return Ok((dx, dk));
    }

    // dy rearranged to one row per output position.
    let dy_mat = dy
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((n * geo.out_h * geo.out_w, cout))
        .expect("gradient matches geometry");

    let dk = if want_dk {
        let patches = im2col(x, kernel_hw, stride, &geo);
        Some(patches.t().dot(&dy_mat))
    } else {
        None
    };
    let dx = if want_dx {
        let dp = dy_mat.dot(&kernel.t());
        Some(col2im(&dp, (n, c, h, w), kernel_hw, stride, &geo))
    } else {
        None
    };
    Ok((dx, dk))
}

/// Depthwise convolution; kernel layout `[kh, kw, channels, 1]` flattened
/// to a slice in `(ky, kx, channel)` order.
pub(crate) fn depthwise_forward(
    x: &ArrayView4<f32>,
    kernel: &[f32],
    kernel_hw: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<Array4<f32>, String> {
    let (n, c, h, w) = x.dim();
    let (kh, kw) = kernel_hw;
    let geo = geometry(h, w, kernel_hw, stride, padding)?;
    let xs = x.as_slice().expect("standard layout input");
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
                let out_ch = &mut out_img[ci * out_plane..(ci + 1) * out_plane];
                for oy in 0..geo.out_h {
                    let base_y = (oy * stride.0) as isize - geo.pad_top;
                    for ox in 0..geo.out_w {
                        let base_x = (ox * stride.1) as isize - geo.pad_left;
                        let mut acc = 0.0f32;
                        for ky in 0..kh {
                            let iy = base_y + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = base_x + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x_plane[iy as usize * w + ix as usize]
                                    * kernel[(ky * kw + kx) * c + ci];
                            }
                        }
                        out_ch[oy * geo.out_w + ox] = acc;
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of a depthwise convolution. Returns `(dx, dkernel)` with the
/// kernel gradient flattened in `(ky, kx, channel)` order.
pub(crate) fn depthwise_backward(
    x: &ArrayView4<f32>,
    kernel: &[f32],
    kernel_hw: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
    dy: &ArrayView4<f32>,
    want_dx: bool,
    want_dk: bool,
) -> Result<(Option<Array4<f32>>, Option<Vec<f32>>), String> {
    let (n, c, h, w) = x.dim();
    let (kh, kw) = kernel_hw;
    let geo = geometry(h, w, kernel_hw, stride, padding)?;
    let xs = x.as_slice().expect("standard layout input");
    let dys = dy.as_slice().expect("standard layout gradient");
    let plane = h * w;
    let image = c * plane;
    let out_plane = geo.out_h * geo.out_w;
    let out_image = c * out_plane;
    let k = kh * kw * c;

    let dk = if want_dk {
        // Per-image partials in parallel, then a fixed-order reduction.
        let partials: Vec<Vec<f32>> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let mut part = vec![0.0f32; k];
                for ci in 0..c {
                    let x_plane = &xs[ni * image + ci * plane..ni * image + (ci + 1) * plane];
                    let dy_ch = &dys[ni * out_image + ci * out_plane
                        ..ni * out_image + (ci + 1) * out_plane];
                    for oy in 0..geo.out_h {
                        let base_y = (oy * stride.0) as isize - geo.pad_top;
                        for ox in 0..geo.out_w {
                            let base_x = (ox * stride.1) as isize - geo.pad_left;
                            let g = dy_ch[oy * geo.out_w + ox];
                            if g == 0.0 {
                                continue;
                            }
                            for ky in 0..kh {
                                let iy = base_y + ky as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = base_x + kx as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    part[(ky * kw + kx) * c + ci] +=
                                        g * x_plane[iy as usize * w + ix as usize];
                                }
                            }
                        }
                    }
                }
                part
            })
            .collect();
        let mut dk = vec![0.0f32; k];
        for part in partials {
            for (d, p) in dk.iter_mut().zip(part) {
                *d += p;
            }
        }
        Some(dk)
    } else {
        None
    };

    let dx = if want_dx {
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        dx.as_slice_mut()
            .unwrap()
            .par_chunks_mut(image)
            .enumerate()
            .for_each(|(ni, dx_img)| {
                for ci in 0..c {
                    let dy_ch = &dys[ni * out_image + ci * out_plane
                        ..ni * out_image + (ci + 1) * out_plane];
                    let dx_plane = &mut dx_img[ci * plane..(ci + 1) * plane];
                    for oy in 0..geo.out_h {
                        let base_y = (oy * stride.0) as isize - geo.pad_top;
                        for ox in 0..geo.out_w {
                            let base_x = (ox * stride.1) as isize - geo.pad_left;
                            let g = dy_ch[oy * geo.out_w + ox];
                            if g == 0.0 {
                                continue;
                            }
                            for ky in 0..kh {
                                let iy = base_y + ky as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = base_x + kx as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    dx_plane[iy as usize * w + ix as usize] +=
                                        g * kernel[(ky * kw + kx) * c + ci];
                                }
                            }
                        }
                    }
                }
            });
        Some(dx)
    } else {
        None
    };
    Ok((dx, dk))
}
