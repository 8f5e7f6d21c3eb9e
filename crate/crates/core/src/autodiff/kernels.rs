//! Convolution kernels on flat row-major buffers.
//!
//! Accumulation order is fixed: bias first, then input channels ascending,
//! then kernel taps ascending. Removing an input channel whose activations are
//! all zero therefore leaves every output bit pattern unchanged, which the
//! pruning equivalence checks rely on.

use super::Scalar;

/// `floor((len + 2*padding - dilation*(kernel-1) - 1) / stride) + 1`, or
/// `None` when that is below one.
pub fn conv1d_output_len(
    len: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = len + 2 * padding;
    if padded < span || stride == 0 {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// `(len-1)*stride - 2*padding + kernel`, or `None` when that is below one.
pub fn conv_transpose1d_output_len(
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let full = (len.checked_sub(1)? * stride + kernel) as isize - 2 * padding as isize;
    (full >= 1).then_some(full as usize)
}

/// Output positions `t` with `0 <= t*stride + offset < len`, clipped to `lout`.
fn valid_range(offset: isize, stride: usize, len: usize, lout: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(lout as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub len: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
    pub lout: usize,
}

impl ConvGeom {
    fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }
    fn offset(&self, tap: usize) -> isize {
        (tap * self.dilation) as isize - self.padding as isize
    }
}

pub(crate) fn conv1d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let cig = g.cin_per_group();
    let cog = g.cout_per_group();
    let mut out = vec![T::zero(); g.batch * g.cout * g.lout];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let group = co / cog;
            let row = &mut out[(b * g.cout + co) * g.lout..][..g.lout];
            if let Some(bias) = bias {
                row.fill(bias[co]);
            }
            for cl in 0..cig {
                let ci = group * cig + cl;
                let xrow = &x[(b * g.cin + ci) * g.len..][..g.len];
                for tap in 0..g.kernel {
                    let wv = w[(co * cig + cl) * g.kernel + tap];
                    let off = g.offset(tap);
                    let (t0, t1) = valid_range(off, g.stride, g.len, g.lout);
                    if g.stride == 1 {
                        let start = (t0 as isize + off) as usize;
                        for (o, &xv) in row[t0..t1].iter_mut().zip(&xrow[start..]) {
                            *o += wv * xv;
                        }
                    } else {
                        for t in t0..t1 {
                            row[t] += wv * xrow[(t as isize * g.stride as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`, each only if requested.
#[allow(clippy::type_complexity)]
pub(crate) fn conv1d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let cig = g.cin_per_group();
    let cog = g.cout_per_group();
    let mut gx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut gw = need.1.then(|| vec![T::zero(); w.len()]);
    let mut gb = need.2.then(|| vec![T::zero(); g.cout]);
    for b in 0..g.batch {
        for co in 0..g.cout {
            let group = co / cog;
            let grow = &gout[(b * g.cout + co) * g.lout..][..g.lout];
            if let Some(gb) = gb.as_mut() {
                gb[co] += grow.iter().copied().sum::<T>();
            }
            for cl in 0..cig {
                let ci = group * cig + cl;
                let xoff = (b * g.cin + ci) * g.len;
                for tap in 0..g.kernel {
                    let widx = (co * cig + cl) * g.kernel + tap;
                    let off = g.offset(tap);
                    let (t0, t1) = valid_range(off, g.stride, g.len, g.lout);
                    if t0 >= t1 {
                        continue;
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xrow = &x[xoff..][..g.len];
                        let mut acc = T::zero();
                        if g.stride == 1 {
                            let start = (t0 as isize + off) as usize;
                            for (&go, &xv) in grow[t0..t1].iter().zip(&xrow[start..]) {
                                acc += go * xv;
                            }
                        } else {
                            for t in t0..t1 {
                                acc += grow[t]
                                    * xrow[(t as isize * g.stride as isize + off) as usize];
                            }
                        }
                        gw[widx] += acc;
                    }
                    if let Some(gx) = gx.as_mut() {
                        let wv = w[widx];
                        let gxrow = &mut gx[xoff..][..g.len];
                        if g.stride == 1 {
                            let start = (t0 as isize + off) as usize;
                            for (o, &go) in gxrow[start..].iter_mut().zip(&grow[t0..t1]) {
                                *o += wv * go;
                            }
                        } else {
                            for t in t0..t1 {
                                gxrow[(t as isize * g.stride as isize + off) as usize] +=
                                    wv * grow[t];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Transposed convolution; weight layout is `[cin, cout, kernel]` and
/// `g.lout` is the transposed output length.
pub(crate) fn conv_transpose1d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.cout * g.lout];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let row = &mut out[(b * g.cout + co) * g.lout..][..g.lout];
            if let Some(bias) = bias {
                row.fill(bias[co]);
            }
            for ci in 0..g.cin {
                let xrow = &x[(b * g.cin + ci) * g.len..][..g.len];
                for tap in 0..g.kernel {
                    let wv = w[(ci * g.cout + co) * g.kernel + tap];
                    // output index = t*stride + off must lie in [0, lout)
                    let off = g.offset(tap);
                    let (t0, t1) = valid_range(off, g.stride, g.lout, g.len);
                    for t in t0..t1 {
                        row[(t as isize * g.stride as isize + off) as usize] += wv * xrow[t];
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
pub(crate) fn conv_transpose1d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let mut gx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut gw = need.1.then(|| vec![T::zero(); w.len()]);
    let mut gb = need.2.then(|| vec![T::zero(); g.cout]);
    for b in 0..g.batch {
        for co in 0..g.cout {
            let grow = &gout[(b * g.cout + co) * g.lout..][..g.lout];
            if let Some(gb) = gb.as_mut() {
                gb[co] += grow.iter().copied().sum::<T>();
            }
            for ci in 0..g.cin {
                let xoff = (b * g.cin + ci) * g.len;
                for tap in 0..g.kernel {
                    let widx = (ci * g.cout + co) * g.kernel + tap;
                    let off = g.offset(tap);
                    let (t0, t1) = valid_range(off, g.stride, g.lout, g.len);
                    let s = g.stride as isize;
                    if let Some(gw) = gw.as_mut() {
                        let xrow = &x[xoff..][..g.len];
                        let mut acc = T::zero();
                        for t in t0..t1 {
                            acc += xrow[t] * grow[(t as isize * s + off) as usize];
                        }
                        gw[widx] += acc;
                    }
                    if let Some(gx) = gx.as_mut() {
                        let wv = w[widx];
                        let gxrow = &mut gx[xoff..][..g.len];
                        for t in t0..t1 {
                            gxrow[t] += wv * grow[(t as isize * s + off) as usize];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}
