//! Direct 3D convolution kernels (zero padding, arbitrary stride).
//!
//! All three passes are written tap-major: the innermost loop runs along the
//! output (or input) W axis with a precomputed valid range, so there are no
//! bounds checks inside hot loops and stride-1 cases vectorize. Outputs are
//! partitioned into disjoint chunks per thread and each chunk accumulates in
//! a fixed order, keeping results independent of thread count.

use xct_core::parallel;

use crate::tensor::GridShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCfg {
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub pad: (usize, usize, usize),
}

impl ConvCfg {
    pub fn out_dim(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
        (n + 2 * p).checked_sub(k).map(|v| v / s + 1)
    }

    pub fn out_shape(&self, x: &GridShape, c_out: usize) -> Option<GridShape> {
        Some(GridShape {
            c: c_out,
            d: Self::out_dim(x.d, self.kernel.0, self.stride.0, self.pad.0)?,
            h: Self::out_dim(x.h, self.kernel.1, self.stride.1, self.pad.1)?,
            w: Self::out_dim(x.w, self.kernel.2, self.stride.2, self.pad.2)?,
        })
    }
}

/// Output positions `o` with `0 <= o*stride + offset < limit`, as `o_lo..o_hi`
/// clamped to `0..count`.
#[inline]
fn valid_range(count: usize, stride: usize, offset: i64, limit: usize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    // o*stride + offset <= limit - 1  =>  o <= (limit - 1 - offset)/stride
    let hi_num = limit as i64 - 1 - offset;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize) / stride + 1;
    (lo.min(count), hi.min(count))
}

/// out[oc,od,oh,ow] = b[oc] + sum_{ic,kd,kh,kw} x[ic,id,ih,iw] * w[oc,ic,kd,kh,kw]
pub fn forward(
    x: &[f64],
    xs: &GridShape,
    weight: &[f64],
    bias: Option<&[f64]>,
    cfg: &ConvCfg,
    out: &mut [f64],
    os: &GridShape,
) {
    let (kd, kh, kw) = cfg.kernel;
    let (sd, sh, sw) = cfg.stride;
    let (pd, ph, pw) = cfg.pad;
    let w_per_oc = xs.c * kd * kh * kw;
    let plane = os.h * os.w;
    parallel::for_each_chunk_mut(out, plane, |chunk, dst| {
        let oc = chunk / os.d;
        let od = chunk % os.d;
        dst.fill(bias.map_or(0.0, |b| b[oc]));
        for ic in 0..xs.c {
            for kdi in 0..kd {
                let id = (od * sd + kdi) as i64 - pd as i64;
                if id < 0 || id >= xs.d as i64 {
                    continue;
                }
                let x_plane = (ic * xs.d + id as usize) * xs.h;
                for khi in 0..kh {
                    let h_off = khi as i64 - ph as i64;
                    let (oh_lo, oh_hi) = valid_range(os.h, sh, h_off, xs.h);
                    let wrow =
                        &weight[oc * w_per_oc + ((ic * kd + kdi) * kh + khi) * kw..][..kw];
                    for oh in oh_lo..oh_hi {
                        let ih = (oh * sh) as i64 + h_off;
                        let x_row = &x[(x_plane + ih as usize) * xs.w..][..xs.w];
                        let out_row = &mut dst[oh * os.w..][..os.w];
                        for (kwi, &wv) in wrow.iter().enumerate() {
                            if wv == 0.0 {
                                continue;
                            }
                            let w_off = kwi as i64 - pw as i64;
                            let (ow_lo, ow_hi) = valid_range(os.w, sw, w_off, xs.w);
                            if sw == 1 {
                                let xi = (ow_lo as i64 + w_off) as usize;
                                let n = ow_hi - ow_lo;
                                for (o, xv) in out_row[ow_lo..ow_hi]
                                    .iter_mut()
                                    .zip(&x_row[xi..xi + n])
                                {
                                    *o += wv * xv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = (ow * sw) as i64 + w_off;
                                    out_row[ow] += wv * x_row[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the input; parallel over input channels.
pub fn backward_input(
    grad_out: &[f64],
    os: &GridShape,
    weight: &[f64],
    cfg: &ConvCfg,
    xs: &GridShape,
    grad_x: &mut [f64],
) {
    let (kd, kh, kw) = cfg.kernel;
    let (sd, sh, sw) = cfg.stride;
    let (pd, ph, pw) = cfg.pad;
    let w_per_oc = xs.c * kd * kh * kw;
    let in_plane = xs.d * xs.h * xs.w;
    parallel::for_each_chunk_mut(grad_x, in_plane, |ic, dxp| {
        for oc in 0..os.c {
            let wbase = oc * w_per_oc + ic * kd * kh * kw;
            for kdi in 0..kd {
                let d_off = kdi as i64 - pd as i64;
                let (od_lo, od_hi) = valid_range(os.d, sd, d_off, xs.d);
                for od in od_lo..od_hi {
                    let id = (od * sd) as i64 + d_off;
                    let go_plane = (oc * os.d + od) * os.h;
                    let dx_plane = (id as usize) * xs.h;
                    for khi in 0..kh {
                        let h_off = khi as i64 - ph as i64;
                        let (oh_lo, oh_hi) = valid_range(os.h, sh, h_off, xs.h);
                        let wrow = &weight[wbase + (kdi * kh + khi) * kw..][..kw];
                        for oh in oh_lo..oh_hi {
                            let ih = (oh * sh) as i64 + h_off;
                            let go_row = &grad_out[(go_plane + oh) * os.w..][..os.w];
                            let dx_row =
                                &mut dxp[(dx_plane + ih as usize) * xs.w..][..xs.w];
                            for (kwi, &wv) in wrow.iter().enumerate() {
                                if wv == 0.0 {
                                    continue;
                                }
                                let w_off = kwi as i64 - pw as i64;
                                let (ow_lo, ow_hi) = valid_range(os.w, sw, w_off, xs.w);
                                if sw == 1 {
                                    let xi = (ow_lo as i64 + w_off) as usize;
                                    let n = ow_hi - ow_lo;
                                    for (d, g) in dx_row[xi..xi + n]
                                        .iter_mut()
                                        .zip(&go_row[ow_lo..ow_hi])
                                    {
                                        *d += wv * g;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = (ow * sw) as i64 + w_off;
                                        dx_row[iw as usize] += wv * go_row[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradients w.r.t. weight and bias; parallel over output channels.
pub fn backward_weight(
    grad_out: &[f64],
    os: &GridShape,
    x: &[f64],
    xs: &GridShape,
    cfg: &ConvCfg,
    grad_w: &mut [f64],
    grad_b: Option<&mut [f64]>,
) {
    let (kd, kh, kw) = cfg.kernel;
    let (sd, sh, sw) = cfg.stride;
    let (pd, ph, pw) = cfg.pad;
    let w_per_oc = xs.c * kd * kh * kw;
    parallel::for_each_chunk_mut(grad_w, w_per_oc, |oc, dst| {
        for ic in 0..xs.c {
            for kdi in 0..kd {
                let d_off = kdi as i64 - pd as i64;
                let (od_lo, od_hi) = valid_range(os.d, sd, d_off, xs.d);
                for khi in 0..kh {
                    let h_off = khi as i64 - ph as i64;
                    let (oh_lo, oh_hi) = valid_range(os.h, sh, h_off, xs.h);
                    for kwi in 0..kw {
                        let w_off = kwi as i64 - pw as i64;
                        let (ow_lo, ow_hi) = valid_range(os.w, sw, w_off, xs.w);
                        let mut acc = 0.0;
                        for od in od_lo..od_hi {
                            let id = (od * sd) as i64 + d_off;
                            let go_plane = (oc * os.d + od) * os.h;
                            let x_plane = (ic * xs.d + id as usize) * xs.h;
                            for oh in oh_lo..oh_hi {
                                let ih = (oh * sh) as i64 + h_off;
                                let go_row = &grad_out[(go_plane + oh) * os.w..][..os.w];
                                let x_row = &x[(x_plane + ih as usize) * xs.w..][..xs.w];
                                if sw == 1 {
                                    let xi = (ow_lo as i64 + w_off) as usize;
                                    let n = ow_hi - ow_lo;
                                    for (g, xv) in
                                        go_row[ow_lo..ow_hi].iter().zip(&x_row[xi..xi + n])
                                    {
                                        acc += g * xv;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = (ow * sw) as i64 + w_off;
                                        acc += go_row[ow] * x_row[iw as usize];
                                    }
                                }
                            }
                        }
                        dst[((ic * kd + kdi) * kh + khi) * kw + kwi] += acc;
                    }
                }
            }
        }
    });
    if let Some(gb) = grad_b {
        let plane = os.d * os.h * os.w;
        for oc in 0..os.c {
            let mut acc = 0.0;
            for v in &grad_out[oc * plane..(oc + 1) * plane] {
                acc += v;
            }
            gb[oc] += acc;
        }
    }
}
