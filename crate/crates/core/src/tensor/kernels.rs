//! Forward and backward kernels shared by the untracked API and the tape.

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{matmul, MatView, Scalar};

/// Batch, channel and time extents of a `C x T` or `B x C x T` input.
pub(super) fn btc(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, bool)> {
    match *shape {
        [c, t] => Ok((1, c, t, false)),
        [b, c, t] => Ok((b, c, t, true)),
        _ => Err(Error::shape(op, format!("expected rank 2 or 3, got {shape:?}"))),
    }
}

pub(super) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub k: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    fn cols(&self) -> usize {
        self.batch * self.t_out
    }
}

pub(super) fn conv_geometry<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dilation: usize,
) -> Result<(ConvGeometry, bool)> {
    let (batch, c_in, t_in, batched) = btc(x.shape(), "conv1d")?;
    let &[c_out, w_in, k] = w.shape() else {
        return Err(Error::shape("conv1d", format!("weight must be rank 3, got {:?}", w.shape())));
    };
    if w_in != c_in {
        return Err(Error::shape("conv1d", format!("input has {c_in} channels, weight expects {w_in}")));
    }
    if dilation == 0 {
        return Err(Error::InvalidArgument("conv1d dilation must be positive".into()));
    }
    let span = dilation * (k - 1) + 1;
    if t_in < span {
        return Err(Error::TooShort { op: "conv1d", got: t_in, need: span });
    }
    let t_out = t_in - dilation * (k - 1);
    Ok((ConvGeometry { batch, c_in, c_out, t_in, t_out, k, dilation }, batched))
}

/// Unfolds `x` into a `(C_in * K) x (B * T')` matrix.
fn im2col<S: Scalar>(x: &[S], g: &ConvGeometry) -> Vec<S> {
    let cols = g.cols();
    let mut col = vec![S::zero(); g.c_in * g.k * cols];
    for i in 0..g.c_in {
        for kk in 0..g.k {
            let row = &mut col[(i * g.k + kk) * cols..(i * g.k + kk + 1) * cols];
            let shift = kk * g.dilation;
            for b in 0..g.batch {
                let src = &x[(b * g.c_in + i) * g.t_in + shift..][..g.t_out];
                row[b * g.t_out..(b + 1) * g.t_out].copy_from_slice(src);
            }
        }
    }
    col
}

pub(super) fn conv1d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dilation: usize,
) -> Result<(Tensor<S>, Vec<S>)> {
    let (g, batched) = conv_geometry(x, w, dilation)?;
    let col = im2col(x.data(), &g);
    let cols = g.cols();
    let mut mat = vec![S::zero(); g.c_out * cols];
    matmul(
        MatView::new(w.data(), g.c_out, g.c_in * g.k),
        MatView::new(&col, g.c_in * g.k, cols),
        S::zero(),
        &mut mat,
    );
    // (C_out, B*T') -> (B, C_out, T')
    let mut out = vec![S::zero(); g.batch * g.c_out * g.t_out];
    for c in 0..g.c_out {
        for b in 0..g.batch {
            out[(b * g.c_out + c) * g.t_out..][..g.t_out]
                .copy_from_slice(&mat[c * cols + b * g.t_out..][..g.t_out]);
        }
    }
    let shape = if batched { vec![g.batch, g.c_out, g.t_out] } else { vec![g.c_out, g.t_out] };
    Ok((Tensor::new(shape, out)?, col))
}

/// Gradients for `x` (optional) and `w` given the upstream gradient.
pub(super) fn conv1d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dilation: usize,
    col: &[S],
    dout: &[S],
    want_dx: bool,
) -> (Option<Vec<S>>, Vec<S>) {
    let (g, _) = conv_geometry(x, w, dilation).expect("geometry validated in forward");
    let cols = g.cols();
    let mut dmat = vec![S::zero(); g.c_out * cols];
    for c in 0..g.c_out {
        for b in 0..g.batch {
            dmat[c * cols + b * g.t_out..][..g.t_out]
                .copy_from_slice(&dout[(b * g.c_out + c) * g.t_out..][..g.t_out]);
        }
    }
    let ck = g.c_in * g.k;
    let mut dw = vec![S::zero(); g.c_out * ck];
    matmul(MatView::new(&dmat, g.c_out, cols), MatView::new(col, ck, cols).t(), S::zero(), &mut dw);
    let dx = want_dx.then(|| {
        let mut dcol = vec![S::zero(); ck * cols];
        matmul(MatView::new(w.data(), g.c_out, ck).t(), MatView::new(&dmat, g.c_out, cols), S::zero(), &mut dcol);
        let mut dx = vec![S::zero(); g.batch * g.c_in * g.t_in];
        for i in 0..g.c_in {
            for kk in 0..g.k {
                let row = &dcol[(i * g.k + kk) * cols..][..cols];
                let shift = kk * g.dilation;
                for b in 0..g.batch {
                    let dst = &mut dx[(b * g.c_in + i) * g.t_in + shift..][..g.t_out];
                    for (d, &s) in dst.iter_mut().zip(&row[b * g.t_out..(b + 1) * g.t_out]) {
                        *d += s;
                    }
                }
            }
        }
        dx
    });
    (dx, dw)
}

/// Rows and inner width of a linear layer input.
pub(super) fn linear_dims<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>) -> Result<(usize, usize, usize, bool)> {
    let &[d_out, d_in] = w.shape() else {
        return Err(Error::shape("linear", format!("weight must be rank 2, got {:?}", w.shape())));
    };
    let (rows, width, batched) = match *x.shape() {
        [n] => (1, n, false),
        [b, n] => (b, n, true),
        _ => return Err(Error::shape("linear", format!("input must be rank 1 or 2, got {:?}", x.shape()))),
    };
    if width != d_in {
        return Err(Error::shape("linear", format!("input width {width}, weight expects {d_in}")));
    }
    Ok((rows, d_in, d_out, batched))
}

pub(super) fn linear_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>) -> Result<Tensor<S>> {
    let (rows, d_in, d_out, batched) = linear_dims(x, w)?;
    let mut out = vec![S::zero(); rows * d_out];
    matmul(MatView::new(x.data(), rows, d_in), MatView::new(w.data(), d_out, d_in).t(), S::zero(), &mut out);
    let shape = if batched { vec![rows, d_out] } else { vec![d_out] };
    Tensor::new(shape, out)
}

pub(super) fn linear_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dout: &[S],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let (rows, d_in, d_out, _) = linear_dims(x, w).expect("validated in forward");
    let dx = want_dx.then(|| {
        let mut dx = vec![S::zero(); rows * d_in];
        matmul(MatView::new(dout, rows, d_out), MatView::new(w.data(), d_out, d_in), S::zero(), &mut dx);
        dx
    });
    let dw = want_dw.then(|| {
        let mut dw = vec![S::zero(); d_out * d_in];
        matmul(MatView::new(dout, rows, d_out).t(), MatView::new(x.data(), rows, d_in), S::zero(), &mut dw);
        dw
    });
    (dx, dw)
}

/// Returns the pooled values and the flat index of each maximum.
pub(super) fn max_pool_forward<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, Vec<usize>)> {
    let (batch, c, t, batched) = btc(x.shape(), "global_max_pool")?;
    let mut out = Vec::with_capacity(batch * c);
    let mut arg = Vec::with_capacity(batch * c);
    for r in 0..batch * c {
        let row = &x.data()[r * t..(r + 1) * t];
        let mut best = 0;
        for (i, &v) in row.iter().enumerate().skip(1) {
            // strict comparison keeps the first index on ties
            if v > row[best] {
                best = i;
            }
        }
        out.push(row[best]);
        arg.push(r * t + best);
    }
    let shape = if batched { vec![batch, c] } else { vec![c] };
    Ok((Tensor::new(shape, out)?, arg))
}

/// Scaled keep-mask for inverted dropout, or `None` for the identity.
pub(super) fn dropout_mask<S: Scalar, R: Rng + ?Sized>(
    n: usize,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Option<Vec<S>>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(None);
    }
    let scale = S::of(1.0 / (1.0 - p));
    Ok(Some((0..n).map(|_| if rng.random::<f64>() < p { S::zero() } else { scale }).collect()))
}

pub(super) fn softmax_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let k = *x.shape().last().expect("tensor has rank >= 1");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let mut z = S::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

pub(super) fn softmax_backward<S: Scalar>(y: &[S], dy: &[S], k: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks(k).zip(dy.chunks(k)).zip(dx.chunks_mut(k)) {
        let dot: S = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}
