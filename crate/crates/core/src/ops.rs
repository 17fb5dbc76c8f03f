//! Value-level kernels for the network ops: convolution (im2col + gemm),
//! pooling, normalization, activations, resampling and column softmax. The
//! autodiff tape wraps these; each forward has a matching backward that is
//! finite-difference checked in the tape tests.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{resize_taps, Tensor};

/// Output positions processed per gemm call; caps the im2col buffer.
const COL_BLOCK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCfg {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Default for ConvCfg {
    fn default() -> Self {
        Self {
            stride: 1,
            pad: 0,
            dilation: 1,
        }
    }
}

pub fn conv_out_len(in_len: usize, k: usize, cfg: &ConvCfg) -> Result<usize> {
    let eff = cfg.dilation * (k - 1) + 1;
    let padded = in_len + 2 * cfg.pad;
    if padded < eff {
        return Err(Error::Shape(format!(
            "input extent {in_len} too small for kernel {k} (dilation {}, pad {})",
            cfg.dilation, cfg.pad
        )));
    }
    Ok((padded - eff) / cfg.stride + 1)
}

fn check_conv_shapes<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    if x.shape().len() != 3 {
        return Err(Error::Shape(format!("conv input must be CHW, got {:?}", x.shape())));
    }
    if w.shape().len() != 4 {
        return Err(Error::Shape(format!("conv weight must be 4-D, got {:?}", w.shape())));
    }
    let (cout, cin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if cin != x.channels() {
        return Err(Error::Shape(format!(
            "conv channel mismatch: input has {} channels, weight expects {}",
            x.channels(),
            cin
        )));
    }
    Ok((cout, cin, kh, kw))
}

/// Fills `cols` with the im2col patch matrix for output positions
/// `[start, start+len)`, laid out `[cin*kh*kw, len]` row-major.
#[allow(clippy::too_many_arguments)]
fn im2col_block<T: Scalar>(
    x: &Tensor<T>,
    cfg: &ConvCfg,
    kh: usize,
    kw: usize,
    ow: usize,
    start: usize,
    len: usize,
    cols: &mut [T],
) {
    let (cin, h, w) = (x.channels(), x.height(), x.width());
    let xd = x.data();
    let mut row = 0;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * len..(row + 1) * len];
                for (p, slot) in dst.iter_mut().enumerate() {
                    let pos = start + p;
                    let oy = pos / ow;
                    let ox = pos % ow;
                    let iy = (oy * cfg.stride + ki * cfg.dilation) as isize - cfg.pad as isize;
                    let ix = (ox * cfg.stride + kj * cfg.dilation) as isize - cfg.pad as isize;
                    *slot = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        xd[(c * h + iy as usize) * w + ix as usize]
                    } else {
                        T::zero()
                    };
                }
                row += 1;
            }
        }
    }
}

/// 2-D convolution of a CHW input with an `[cout, cin, kh, kw]` weight.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    cfg: &ConvCfg,
) -> Result<Tensor<T>> {
    let (cout, cin, kh, kw) = check_conv_shapes(x, w)?;
    let oh = conv_out_len(x.height(), kh, cfg)?;
    let ow = conv_out_len(x.width(), kw, cfg)?;
    let npos = oh * ow;
    let kdim = cin * kh * kw;
    let mut out: Tensor<T> = Tensor::zeros(vec![cout, oh, ow]);
    let block = COL_BLOCK.min(npos.max(1));
    let mut cols = vec![T::zero(); kdim * block];
    let mut start = 0;
    while start < npos {
        let len = block.min(npos - start);
        im2col_block(x, cfg, kh, kw, ow, start, len, &mut cols);
        unsafe {
            T::gemm(
                cout,
                kdim,
                len,
                T::one(),
                w.data().as_ptr(),
                kdim as isize,
                1,
                cols.as_ptr(),
                len as isize,
                1,
                T::zero(),
                out.data_mut().as_mut_ptr().add(start),
                npos as isize,
                1,
            );
        }
        start += len;
    }
    if let Some(bias) = b {
        if bias.len() != cout {
            return Err(Error::Shape(format!(
                "conv bias has {} entries, expected {cout}",
                bias.len()
            )));
        }
        let od = out.data_mut();
        for co in 0..cout {
            let bv = bias.data()[co];
            for v in &mut od[co * npos..(co + 1) * npos] {
                *v += bv;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] w.r.t. input, weight and (optionally) bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    cfg: &ConvCfg,
    dout: &Tensor<T>,
    want_bias: bool,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (cout, cin, kh, kw) = check_conv_shapes(x, w)?;
    let (oh, ow) = (dout.height(), dout.width());
    let npos = oh * ow;
    let kdim = cin * kh * kw;
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let db = if want_bias {
        let mut db = Tensor::zeros(vec![cout]);
        for co in 0..cout {
            db.data_mut()[co] = dout.data()[co * npos..(co + 1) * npos].iter().copied().sum();
        }
        Some(db)
    } else {
        None
    };

    let block = COL_BLOCK.min(npos.max(1));
    let mut cols = vec![T::zero(); kdim * block];
    let mut dcols = vec![T::zero(); kdim * block];
    let (h, wd) = (x.height(), x.width());
    let mut start = 0;
    while start < npos {
        let len = block.min(npos - start);
        im2col_block(x, cfg, kh, kw, ow, start, len, &mut cols);
        unsafe {
            // dW += dOut[:, block] . cols^T
            T::gemm(
                cout,
                len,
                kdim,
                T::one(),
                dout.data().as_ptr().add(start),
                npos as isize,
                1,
                cols.as_ptr(),
                1,
                len as isize,
                T::one(),
                dw.data_mut().as_mut_ptr(),
                kdim as isize,
                1,
            );
            // dCols = W^T . dOut[:, block]
            T::gemm(
                kdim,
                cout,
                len,
                T::one(),
                w.data().as_ptr(),
                1,
                kdim as isize,
                dout.data().as_ptr().add(start),
                npos as isize,
                1,
                T::zero(),
                dcols.as_mut_ptr(),
                len as isize,
                1,
            );
        }
        // col2im scatter
        let dxd = dx.data_mut();
        let mut row = 0;
        for c in 0..cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    let src = &dcols[row * len..(row + 1) * len];
                    for (p, &g) in src.iter().enumerate() {
                        let pos = start + p;
                        let oy = pos / ow;
                        let ox = pos % ow;
                        let iy = (oy * cfg.stride + ki * cfg.dilation) as isize - cfg.pad as isize;
                        let ix = (ox * cfg.stride + kj * cfg.dilation) as isize - cfg.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            dxd[(c * h + iy as usize) * wd + ix as usize] += g;
                        }
                    }
                    row += 1;
                }
            }
        }
        start += len;
    }
    Ok((dx, dw, db))
}

/// Per-channel spatial standardization with learned affine. Statistics come
/// from the tensor itself, so inference needs no running averages and
/// checkpoints stay self-contained.
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub fn norm2d<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let c = x.channels();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "norm affine size {} / {} does not match {} channels",
            gamma.len(),
            beta.len(),
            c
        )));
    }
    let n = x.height() * x.width();
    let nt = T::from_f64_c(n as f64);
    let mut out = Tensor::zeros(x.shape().to_vec());
    let mut xhat = Tensor::zeros(x.shape().to_vec());
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let xs = &x.data()[ch * n..(ch + 1) * n];
        let mu = xs.iter().copied().sum::<T>() / nt;
        let var = xs.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nt;
        let is = T::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        let xh = &mut xhat.data_mut()[ch * n..(ch + 1) * n];
        for (i, &v) in xs.iter().enumerate() {
            xh[i] = (v - mu) * is;
        }
        let od = &mut out.data_mut()[ch * n..(ch + 1) * n];
        for i in 0..n {
            od[i] = xh[i] * g + b;
        }
    }
    Ok((out, NormCache { xhat, inv_std }))
}

pub fn norm2d_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = dout.channels();
    let n = dout.height() * dout.width();
    let nt = T::from_f64_c(n as f64);
    let mut dx = Tensor::zeros(dout.shape().to_vec());
    let mut dgamma = Tensor::zeros(vec![c]);
    let mut dbeta = Tensor::zeros(vec![c]);
    for ch in 0..c {
        let d = &dout.data()[ch * n..(ch + 1) * n];
        let xh = &cache.xhat.data()[ch * n..(ch + 1) * n];
        let g = gamma.data()[ch];
        let is = cache.inv_std[ch];
        let sum_d: T = d.iter().copied().sum();
        let sum_dxh: T = d.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
        dgamma.data_mut()[ch] = sum_dxh;
        dbeta.data_mut()[ch] = sum_d;
        let mean_d = sum_d / nt;
        let mean_dxh = sum_dxh / nt;
        let dxs = &mut dx.data_mut()[ch * n..(ch + 1) * n];
        for i in 0..n {
            dxs[i] = g * is * (d[i] - mean_d - xh[i] * mean_dxh);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn prelu<T: Scalar>(x: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.channels();
    if alpha.len() != c {
        return Err(Error::Shape(format!(
            "prelu alpha size {} does not match {} channels",
            alpha.len(),
            c
        )));
    }
    let n = x.height() * x.width();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for ch in 0..c {
        let a = alpha.data()[ch];
        let xs = &x.data()[ch * n..(ch + 1) * n];
        let od = &mut out.data_mut()[ch * n..(ch + 1) * n];
        for i in 0..n {
            od[i] = if xs[i] >= T::zero() { xs[i] } else { a * xs[i] };
        }
    }
    Ok(out)
}

pub fn prelu_backward<T: Scalar>(
    x: &Tensor<T>,
    alpha: &Tensor<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let c = x.channels();
    let n = x.height() * x.width();
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dalpha = Tensor::zeros(vec![c]);
    for ch in 0..c {
        let a = alpha.data()[ch];
        let xs = &x.data()[ch * n..(ch + 1) * n];
        let d = &dout.data()[ch * n..(ch + 1) * n];
        let dxs = &mut dx.data_mut()[ch * n..(ch + 1) * n];
        let mut da = T::zero();
        for i in 0..n {
            if xs[i] >= T::zero() {
                dxs[i] = d[i];
            } else {
                dxs[i] = a * d[i];
                da += d[i] * xs[i];
            }
        }
        dalpha.data_mut()[ch] = da;
    }
    (dx, dalpha)
}

/// Max pooling; returns the output and the flat argmax index per output cell.
pub fn maxpool2d<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let cfg = ConvCfg {
        stride,
        pad,
        dilation: 1,
    };
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let oh = conv_out_len(h, k, &cfg)?;
    let ow = conv_out_len(w, k, &cfg)?;
    let mut out = Tensor::zeros(vec![c, oh, ow]);
    let mut arg = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0;
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            let idx = (ch * h + iy as usize) * w + ix as usize;
                            let v = x.data()[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out.data_mut()[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2d_backward<T: Scalar>(
    in_shape: &[usize],
    arg: &[usize],
    dout: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape.to_vec());
    for (o, &src) in arg.iter().enumerate() {
        dx.data_mut()[src] += dout.data()[o];
    }
    dx
}

/// Global average pooling: CHW to Cx1x1.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let n = T::from_f64_c((h * w) as f64);
    let mut out = Tensor::zeros(vec![c, 1, 1]);
    for ch in 0..c {
        out.data_mut()[ch] = x.data()[ch * h * w..(ch + 1) * h * w].iter().copied().sum::<T>() / n;
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(in_shape: &[usize], dout: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let inv = T::one() / T::from_f64_c((h * w) as f64);
    let mut dx = Tensor::zeros(in_shape.to_vec());
    for ch in 0..c {
        let g = dout.data()[ch] * inv;
        for v in &mut dx.data_mut()[ch * h * w..(ch + 1) * h * w] {
            *v = g;
        }
    }
    dx
}

/// Backward of bilinear resampling (transpose scatter of the forward taps).
pub fn bilinear_resize_backward<T: Scalar>(in_shape: &[usize], dout: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (dout.height(), dout.width());
    if oh == h && ow == w {
        return dout.clone();
    }
    let taps_y = resize_taps::<T>(h, oh);
    let taps_x = resize_taps::<T>(w, ow);
    let mut dx = Tensor::zeros(in_shape.to_vec());
    let one = T::one();
    for ch in 0..c {
        for oy in 0..oh {
            let (y0, y1, fy) = taps_y[oy];
            for ox in 0..ow {
                let (x0, x1, fx) = taps_x[ox];
                let g = dout.at3(ch, oy, ox);
                let d = dx.data_mut();
                d[(ch * h + y0) * w + x0] += g * (one - fy) * (one - fx);
                d[(ch * h + y0) * w + x1] += g * (one - fy) * fx;
                d[(ch * h + y1) * w + x0] += g * fy * (one - fx);
                d[(ch * h + y1) * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

/// Column-wise softmax of a `[rows, cols]` matrix: each column is normalized
/// over the row axis.
pub fn softmax_cols<T: Scalar>(m: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mut out = Tensor::zeros(vec![r, c]);
    for j in 0..c {
        let mut maxv = T::neg_infinity();
        for i in 0..r {
            maxv = maxv.max(m.at2(i, j));
        }
        let mut denom = T::zero();
        for i in 0..r {
            let e = (m.at2(i, j) - maxv).exp();
            out.data_mut()[i * c + j] = e;
            denom += e;
        }
        for i in 0..r {
            out.data_mut()[i * c + j] /= denom;
        }
    }
    out
}

pub fn softmax_cols_backward<T: Scalar>(s: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (s.shape()[0], s.shape()[1]);
    let mut dz = Tensor::zeros(vec![r, c]);
    for j in 0..c {
        let mut dot = T::zero();
        for i in 0..r {
            dot += s.at2(i, j) * dout.at2(i, j);
        }
        for i in 0..r {
            dz.data_mut()[i * c + j] = s.at2(i, j) * (dout.at2(i, j) - dot);
        }
    }
    dz
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f64>::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        // 1x1 kernel with weight 2.0
        let w = Tensor::<f64>::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d(&x, &w, None, &ConvCfg::default()).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 10.0);
    }

    #[test]
    fn conv_matches_naive_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::new(vec![3, 7, 6], (0..3 * 7 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::<f64>::new(vec![2, 3, 3, 3], (0..2 * 3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::<f64>::new(vec![2], vec![0.3, -0.4]).unwrap();
        let cfg = ConvCfg { stride: 2, pad: 1, dilation: 2 };
        let y = conv2d(&x, &w, Some(&b), &cfg).unwrap();
        // independent naive evaluation
        let oh = conv_out_len(7, 3, &cfg).unwrap();
        let ow = conv_out_len(6, 3, &cfg).unwrap();
        assert_eq!(y.shape(), &[2, oh, ow]);
        for co in 0..2 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..3 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * 2 + ki * 2) as isize - 1;
                                let ix = (ox * 2 + kj * 2) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < 7 && (ix as usize) < 6 {
                                    acc += x.at3(ci, iy as usize, ix as usize)
                                        * w.data()[((co * 3 + ci) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                    }
                    assert!((y.at3(co, oy, ox) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_cols_sums_to_one() {
        let m = Tensor::<f64>::new(vec![3, 2], vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.0]).unwrap();
        let s = softmax_cols(&m);
        for j in 0..2 {
            let col: f64 = (0..3).map(|i| s.at2(i, j)).sum();
            assert!((col - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn maxpool_picks_max_and_routes_gradient() {
        let x = Tensor::<f64>::new(vec![1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let (y, arg) = maxpool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[5.0]);
        let dout = Tensor::<f64>::new(vec![1, 1, 1], vec![2.0]).unwrap();
        let dx = maxpool2d_backward(&[1, 2, 2], &arg, &dout);
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
