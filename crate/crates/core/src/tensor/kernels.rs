//! Raw convolution/pooling kernels.
//!
//! All kernels accumulate in a fixed serial order, so results are
//! bit-reproducible. Inner loops run along the contiguous width axis.

use super::Tensor;

/// Output extent of a cross-correlation: floor((n + 2p - k) / s) + 1.
pub fn conv_out_extent(input: usize, kernel: usize, padding: usize, stride: usize) -> usize {
    assert!(stride >= 1, "stride must be >= 1");
    assert!(
        input + 2 * padding >= kernel,
        "conv window {}x{} does not fit input extent {} with padding {}",
        kernel,
        kernel,
        input,
        padding
    );
    (input + 2 * padding - kernel) / stride + 1
}

/// Half-open range of output coordinates whose input coordinate
/// `o*stride + k_off - pad` lands inside `[0, in_extent)`.
#[inline]
fn out_span(in_extent: usize, k_off: usize, pad: usize, stride: usize, out_extent: usize) -> (usize, usize) {
    let (k_off, pad, stride_i) = (k_off as i64, pad as i64, stride as i64);
    let lo = if pad > k_off { (pad - k_off + stride_i - 1) / stride_i } else { 0 };
    let hi_raw = (in_extent as i64 - 1 + pad - k_off).div_euclid(stride_i) + 1;
    let hi = hi_raw.min(out_extent as i64).max(lo);
    (lo as usize, hi as usize)
}

/// out[n,co,oy,ox] += sum_{ci,ky,kx} kernel[co,ci,ky,kx] * x[n,ci,oy*s+ky-p,ox*s+kx-p]
///
/// Pure accumulation; the caller owns initialization (zeros or bias).
#[allow(clippy::too_many_arguments)]
pub fn conv_acc(
    x: &[f64],
    (b, ci, ih, iw): (usize, usize, usize, usize),
    kernel: &[f64],
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    padding: usize,
    out: &mut [f64],
    (oh, ow): (usize, usize),
) {
    debug_assert_eq!(x.len(), b * ci * ih * iw);
    debug_assert_eq!(kernel.len(), co * ci * kh * kw);
    debug_assert_eq!(out.len(), b * co * oh * ow);
    for n in 0..b {
        for cout in 0..co {
            let oplane = &mut out[(n * co + cout) * oh * ow..][..oh * ow];
            for cin in 0..ci {
                let xplane = &x[(n * ci + cin) * ih * iw..][..ih * iw];
                let kbase = (cout * ci + cin) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = out_span(ih, ky, padding, stride, oh);
                    for kx in 0..kw {
                        let kv = kernel[kbase + ky * kw + kx];
                        let (ox_lo, ox_hi) = out_span(iw, kx, padding, stride, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let xrow = &xplane[iy * iw..][..iw];
                            let orow = &mut oplane[oy * ow..][..ow];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - padding;
                                let src = &xrow[ix0..ix0 + (ox_hi - ox_lo)];
                                for (d, s) in orow[ox_lo..ox_hi].iter_mut().zip(src) {
                                    *d += kv * *s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    orow[ox] += kv * xrow[ox * stride + kx - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation with per-output-channel bias.
pub fn conv_forward(x: &Tensor, kernel: &Tensor, bias: &[f64], stride: usize, padding: usize) -> Tensor {
    let [b, ci, ih, iw] = x.shape();
    let [co, kci, kh, kw] = kernel.shape();
    assert_eq!(kci, ci, "conv kernel expects {} input channels, input has {}", kci, ci);
    assert_eq!(bias.len(), co, "conv bias length {} != output channels {}", bias.len(), co);
    let oh = conv_out_extent(ih, kh, padding, stride);
    let ow = conv_out_extent(iw, kw, padding, stride);
    let mut out = Tensor::zeros([b, co, oh, ow]);
    {
        let o = out.data_mut();
        for n in 0..b {
            for cout in 0..co {
                o[(n * co + cout) * oh * ow..][..oh * ow].fill(bias[cout]);
            }
        }
        conv_acc(x.data(), (b, ci, ih, iw), kernel.data(), (co, kh, kw), stride, padding, o, (oh, ow));
    }
    out
}

/// din[n,ci,iy,ix] += sum_{co,ky,kx} dout[n,co,oy,ox] * kernel[co,ci,ky,kx]
/// for every (oy,ox) that read (iy,ix) in the forward pass.
///
/// This is the linear adjoint of [`conv_acc`] and also serves as the
/// forward kernel of transposed convolution.
#[allow(clippy::too_many_arguments)]
pub fn conv_input_grad_acc(
    dout: &[f64],
    (b, co, oh, ow): (usize, usize, usize, usize),
    kernel: &[f64],
    (ci, kh, kw): (usize, usize, usize),
    stride: usize,
    padding: usize,
    din: &mut [f64],
    (ih, iw): (usize, usize),
) {
    debug_assert_eq!(dout.len(), b * co * oh * ow);
    debug_assert_eq!(kernel.len(), co * ci * kh * kw);
    debug_assert_eq!(din.len(), b * ci * ih * iw);
    for n in 0..b {
        for cin in 0..ci {
            let dplane = &mut din[(n * ci + cin) * ih * iw..][..ih * iw];
            for cout in 0..co {
                let gplane = &dout[(n * co + cout) * oh * ow..][..oh * ow];
                let kbase = (cout * ci + cin) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = out_span(ih, ky, padding, stride, oh);
                    for kx in 0..kw {
                        let kv = kernel[kbase + ky * kw + kx];
                        let (ox_lo, ox_hi) = out_span(iw, kx, padding, stride, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let drow = &mut dplane[iy * iw..][..iw];
                            let grow = &gplane[oy * ow..][..ow];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - padding;
                                let dst = &mut drow[ix0..ix0 + (ox_hi - ox_lo)];
                                for (d, g) in dst.iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                    *d += kv * *g;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    drow[ox * stride + kx - padding] += kv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dk[co,ci,ky,kx] += sum_{n,oy,ox} dout[n,co,oy,ox] * x[n,ci,oy*s+ky-p,ox*s+kx-p]
#[allow(clippy::too_many_arguments)]
pub fn conv_kernel_grad_acc(
    dout: &[f64],
    (b, co, oh, ow): (usize, usize, usize, usize),
    x: &[f64],
    (ci, ih, iw): (usize, usize, usize),
    stride: usize,
    padding: usize,
    dk: &mut [f64],
    (kh, kw): (usize, usize),
) {
    debug_assert_eq!(dout.len(), b * co * oh * ow);
    debug_assert_eq!(x.len(), b * ci * ih * iw);
    debug_assert_eq!(dk.len(), co * ci * kh * kw);
    for cout in 0..co {
        for cin in 0..ci {
            let kbase = (cout * ci + cin) * kh * kw;
            for ky in 0..kh {
                let (oy_lo, oy_hi) = out_span(ih, ky, padding, stride, oh);
                for kx in 0..kw {
                    let (ox_lo, ox_hi) = out_span(iw, kx, padding, stride, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for n in 0..b {
                        let gplane = &dout[(n * co + cout) * oh * ow..][..oh * ow];
                        let xplane = &x[(n * ci + cin) * ih * iw..][..ih * iw];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let grow = &gplane[oy * ow..][..ow];
                            let xrow = &xplane[iy * iw..][..iw];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - padding;
                                let src = &xrow[ix0..ix0 + (ox_hi - ox_lo)];
                                for (g, s) in grow[ox_lo..ox_hi].iter().zip(src) {
                                    acc += *g * *s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    acc += grow[ox] * xrow[ox * stride + kx - padding];
                                }
                            }
                        }
                    }
                    dk[kbase + ky * kw + kx] += acc;
                }
            }
        }
    }
}

/// db[co] += sum_{n,oy,ox} dout[n,co,oy,ox]
pub fn conv_bias_grad_acc(dout: &[f64], (b, co, oh, ow): (usize, usize, usize, usize), db: &mut [f64]) {
    debug_assert_eq!(db.len(), co);
    for n in 0..b {
        for cout in 0..co {
            let gplane = &dout[(n * co + cout) * oh * ow..][..oh * ow];
            let mut acc = 0.0;
            for g in gplane {
                acc += *g;
            }
            db[cout] += acc;
        }
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for each
/// output element, the flat index of its source element (first index in
/// row-major order wins ties).
pub fn max_pool2_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let [b, c, ih, iw] = x.shape();
    assert!(
        ih % 2 == 0 && iw % 2 == 0,
        "max_pool2 requires even spatial extents, got {}x{}",
        ih,
        iw
    );
    let (oh, ow) = (ih / 2, iw / 2);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    let mut argmax = vec![0usize; b * c * oh * ow];
    let xd = x.data();
    let od = out.data_mut();
    for plane in 0..b * c {
        let xbase = plane * ih * iw;
        let obase = plane * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let i00 = xbase + (2 * oy) * iw + 2 * ox;
                let candidates = [i00, i00 + 1, i00 + iw, i00 + iw + 1];
                let mut best = candidates[0];
                let mut best_v = xd[best];
                for &idx in &candidates[1..] {
                    if xd[idx] > best_v {
                        best_v = xd[idx];
                        best = idx;
                    }
                }
                od[obase + oy * ow + ox] = best_v;
                argmax[obase + oy * ow + ox] = best;
            }
        }
    }
    (out, argmax)
}
