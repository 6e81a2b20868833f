//! Plain CPU convolution kernels (im2col + GEMM) shared by the tape ops.
//!
//! Three primitives form a closed set under differentiation: the forward
//! convolution, the gradient w.r.t. the input and the gradient w.r.t. the
//! weights are each expressible as compositions of the other two, which is
//! what makes second-order terms (the critic's gradient penalty) possible.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView3, ArrayView4, NdFloat};

pub fn conv_out_size(in_size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (in_size + 2 * pad - k) / stride + 1
}

/// Unfold one sample [C,H,W] into a [C*kh*kw, oh*ow] matrix.
fn im2col<F: NdFloat>(
    x: &ArrayView3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<F>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for p in 0..kh {
            for q in 0..kw {
                let row = (ci * kh + p) * kw + q;
                let mut row_view = cols.row_mut(row);
                for i in 0..oh {
                    let yy = (i * stride + p) as isize - pad as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for j in 0..ow {
                        let xx = (j * stride + q) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        row_view[i * ow + j] = x[(ci, yy as usize, xx as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a [C*kh*kw, oh*ow] column matrix back onto a [C,H,W] sample.
fn col2im_add<F: NdFloat>(
    cols: &Array2<F>,
    dx: &mut ndarray::ArrayViewMut3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (c, h, w) = dx.dim();
    for ci in 0..c {
        for p in 0..kh {
            for q in 0..kw {
                let row = (ci * kh + p) * kw + q;
                let row_view = cols.row(row);
                for i in 0..oh {
                    let yy = (i * stride + p) as isize - pad as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for j in 0..ow {
                        let xx = (j * stride + q) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        dx[(ci, yy as usize, xx as usize)] += row_view[i * ow + j];
                    }
                }
            }
        }
    }
}

/// y[n,o,i,j] = sum_{c,p,q} x[n,c,i*s-pad+p,j*s-pad+q] * w[o,c,p,q]
pub fn conv2d<F: NdFloat>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, c, h, win) = x.dim();
    let (o, cw, kh, kw) = w.dim();
    assert_eq!(c, cw, "conv2d channel mismatch");
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(win, kw, stride, pad);
    let w_mat = w
        .to_shape((o, c * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let mut y = Array4::<F>::zeros((n, o, oh, ow));
    for ni in 0..n {
        let cols = im2col(&x.index_axis(ndarray::Axis(0), ni), kh, kw, stride, pad, oh, ow);
        let y_mat = w_mat.dot(&cols);
        y.index_axis_mut(ndarray::Axis(0), ni)
            .as_slice_mut()
            .expect("contiguous")
            .copy_from_slice(y_mat.as_slice().expect("contiguous"));
    }
    y
}

/// dx[n,c,:,:] given dy and w; adjoint of `conv2d` in its first argument.
pub fn conv2d_bwd_input<F: NdFloat>(
    w: &ArrayView4<F>,
    dy: &ArrayView4<F>,
    stride: usize,
    pad: usize,
    xh: usize,
    xw: usize,
) -> Array4<F> {
    let (n, o, oh, ow) = dy.dim();
    let (ow_o, c, kh, kw) = w.dim();
    assert_eq!(o, ow_o, "conv2d_bwd_input channel mismatch");
    let w_mat = w
        .to_shape((o, c * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let w_t = w_mat.t().to_owned();
    let mut dx = Array4::<F>::zeros((n, c, xh, xw));
    for ni in 0..n {
        let dy_n = dy.index_axis(ndarray::Axis(0), ni);
        let dy_mat = dy_n.to_shape((o, oh * ow)).expect("dy reshape").to_owned();
        let cols_grad = w_t.dot(&dy_mat);
        col2im_add(
            &cols_grad,
            &mut dx.index_axis_mut(ndarray::Axis(0), ni),
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        );
    }
    dx
}

/// dw[o,c,p,q] given x and dy; adjoint of `conv2d` in its second argument.
pub fn conv2d_bwd_weight<F: NdFloat>(
    x: &ArrayView4<F>,
    dy: &ArrayView4<F>,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Array4<F> {
    let (n, c, _h, _w) = x.dim();
    let (nd, o, oh, ow) = dy.dim();
    assert_eq!(n, nd, "conv2d_bwd_weight batch mismatch");
    let mut dw_mat = Array2::<F>::zeros((o, c * kh * kw));
    for ni in 0..n {
        let cols = im2col(&x.index_axis(ndarray::Axis(0), ni), kh, kw, stride, pad, oh, ow);
        let dy_n = dy.index_axis(ndarray::Axis(0), ni);
        let dy_mat = dy_n.to_shape((o, oh * ow)).expect("dy reshape").to_owned();
        general_mat_mul(F::one(), &dy_mat, &cols.t(), F::one(), &mut dw_mat);
    }
    dw_mat
        .into_shape((o, c, kh, kw))
        .expect("dw reshape")
}
