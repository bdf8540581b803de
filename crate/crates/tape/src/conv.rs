//! Raw convolution kernels (im2col + matmul) and small spatial resamplers.

use ndarray::{Array2, Array4, ArrayView3, ArrayView4};

pub(crate) fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= k,
        "convolution kernel {k} larger than padded input {input}+2*{pad}"
    );
    (input + 2 * pad - k) / stride + 1
}

/// Unfold one image `(C, H, W)` into columns `(C*kh*kw, ho*wo)`.
fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for a in 0..kh {
            for b in 0..kw {
                let row = (ci * kh + a) * kw + b;
                for oi in 0..ho {
                    let ii = (oi * stride + a) as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + b) as isize - pad as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        col[[row, oi * wo + oj]] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Fold columns back onto an image, accumulating overlaps. Adjoint of `im2col`.
fn col2im(
    col: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array3<f64> {
    let mut x = ndarray::Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for a in 0..kh {
            for b in 0..kw {
                let row = (ci * kh + a) * kw + b;
                for oi in 0..ho {
                    let ii = (oi * stride + a) as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + b) as isize - pad as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        x[[ci, ii as usize, jj as usize]] += col[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation: `y[n,o,p,q] = sum x[n,c,p*s-pad+a,q*s-pad+b] * w[o,c,a,b]`.
pub(crate) fn conv2d(x: &ArrayView4<f64>, w: &ArrayView4<f64>, stride: usize, pad: usize) -> Array4<f64> {
    let (n, cin, h, wi) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_w, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, cin_w, "conv2d: input has {cin} channels, kernel expects {cin_w}");
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(wi, kw, stride, pad);
    let w_mat = w
        .to_shape((cout, cin * kh * kw))
        .expect("kernel reshape")
        .to_owned();
    let mut y = Array4::<f64>::zeros((n, cout, ho, wo));
    for ni in 0..n {
        let col = im2col(&x.index_axis(ndarray::Axis(0), ni), kh, kw, stride, pad, ho, wo);
        let y_mat = w_mat.dot(&col); // (cout, ho*wo)
        let mut y_n = y.index_axis_mut(ndarray::Axis(0), ni);
        for o in 0..cout {
            for oi in 0..ho {
                for oj in 0..wo {
                    y_n[[o, oi, oj]] = y_mat[[o, oi * wo + oj]];
                }
            }
        }
    }
    y
}

/// Adjoint of `conv2d` in `x`: propagate an output cotangent `g` back to the
/// `(hw.0, hw.1)` input plane.
pub(crate) fn conv2d_input_grad(
    g: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
    hw: (usize, usize),
) -> Array4<f64> {
    let (n, cout, ho, wo) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let (cout_w, cin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cout, cout_w, "conv2d_input_grad: channel mismatch");
    let (h, wi) = hw;
    assert_eq!(ho, conv_out_size(h, kh, stride, pad), "conv2d_input_grad: height mismatch");
    assert_eq!(wo, conv_out_size(wi, kw, stride, pad), "conv2d_input_grad: width mismatch");
    let w_mat = w
        .to_shape((cout, cin * kh * kw))
        .expect("kernel reshape")
        .to_owned();
    let w_t = w_mat.t().to_owned(); // (cin*kh*kw, cout)
    let mut dx = Array4::<f64>::zeros((n, cin, h, wi));
    for ni in 0..n {
        let g_n = g.index_axis(ndarray::Axis(0), ni);
        let g_mat = g_n.to_shape((cout, ho * wo)).expect("grad reshape").to_owned();
        let col = w_t.dot(&g_mat); // (cin*kh*kw, ho*wo)
        let dx_n = col2im(&col, cin, h, wi, kh, kw, stride, pad, ho, wo);
        dx.index_axis_mut(ndarray::Axis(0), ni).assign(&dx_n);
    }
    dx
}

/// Adjoint of `conv2d` in `w` for kernel size `khw`.
pub(crate) fn conv2d_weight_grad(
    x: &ArrayView4<f64>,
    g: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
    khw: (usize, usize),
) -> Array4<f64> {
    let (n, cin, h, wi) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ng, cout, ho, wo) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    assert_eq!(n, ng, "conv2d_weight_grad: batch mismatch");
    let (kh, kw) = khw;
    assert_eq!(ho, conv_out_size(h, kh, stride, pad), "conv2d_weight_grad: height mismatch");
    assert_eq!(wo, conv_out_size(wi, kw, stride, pad), "conv2d_weight_grad: width mismatch");
    let mut dw_mat = Array2::<f64>::zeros((cout, cin * kh * kw));
    for ni in 0..n {
        let col = im2col(&x.index_axis(ndarray::Axis(0), ni), kh, kw, stride, pad, ho, wo);
        let g_n = g.index_axis(ndarray::Axis(0), ni);
        let g_mat = g_n.to_shape((cout, ho * wo)).expect("grad reshape").to_owned();
        dw_mat = dw_mat + g_mat.dot(&col.t());
    }
    dw_mat
        .into_shape_with_order((cout, cin, kh, kw))
        .expect("weight grad reshape")
}

/// Depthwise valid-mode correlation with one shared 2-d kernel.
pub(crate) fn blur_valid(x: &ArrayView4<f64>, kernel: &Array2<f64>) -> Array4<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    assert!(h >= kh && w >= kw, "blur_valid: {h}x{w} input smaller than {kh}x{kw} kernel");
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let mut y = Array4::<f64>::zeros((n, c, ho, wo));
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = 0.0;
                    for a in 0..kh {
                        for b in 0..kw {
                            acc += x[[ni, ci, oi + a, oj + b]] * kernel[[a, b]];
                        }
                    }
                    y[[ni, ci, oi, oj]] = acc;
                }
            }
        }
    }
    y
}

/// Depthwise full-mode correlation: zero-pads by `k-1` then runs valid mode.
/// For a symmetric kernel this is the adjoint of `blur_valid`.
pub(crate) fn blur_full(x: &ArrayView4<f64>, kernel: &Array2<f64>) -> Array4<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    let mut padded = Array4::<f64>::zeros((n, c, h + 2 * (kh - 1), w + 2 * (kw - 1)));
    padded
        .slice_mut(ndarray::s![.., .., kh - 1..kh - 1 + h, kw - 1..kw - 1 + w])
        .assign(x);
    blur_valid(&padded.view(), kernel)
}

pub(crate) fn avg_pool2(x: &ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial size {h}x{w}");
    let mut y = Array4::<f64>::zeros((n, c, h / 2, w / 2));
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..h / 2 {
                for oj in 0..w / 2 {
                    y[[ni, ci, oi, oj]] = 0.25
                        * (x[[ni, ci, 2 * oi, 2 * oj]]
                            + x[[ni, ci, 2 * oi + 1, 2 * oj]]
                            + x[[ni, ci, 2 * oi, 2 * oj + 1]]
                            + x[[ni, ci, 2 * oi + 1, 2 * oj + 1]]);
                }
            }
        }
    }
    y
}

pub(crate) fn upsample2(x: &ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut y = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..h {
                for oj in 0..w {
                    let v = x[[ni, ci, oi, oj]];
                    y[[ni, ci, 2 * oi, 2 * oj]] = v;
                    y[[ni, ci, 2 * oi + 1, 2 * oj]] = v;
                    y[[ni, ci, 2 * oi, 2 * oj + 1]] = v;
                    y[[ni, ci, 2 * oi + 1, 2 * oj + 1]] = v;
                }
            }
        }
    }
    y
}
