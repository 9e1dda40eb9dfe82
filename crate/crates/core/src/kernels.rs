//! Raw forward/backward kernels on plain tensors.
//!
//! Every reduction runs in a fixed loop order, so results do not depend on
//! whether the batch (or output-channel) loop is executed in parallel.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enables or disables intra-kernel parallelism process-wide.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::SeqCst);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::SeqCst)
}

fn for_each_chunk<T: Send>(data: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if parallel_enabled() {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Output extent of a strided window along one axis: `floor((in + 2p - k) / s) + 1`.
pub fn conv_out_dim(op: &'static str, input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return Err(Error::InvalidOutputSize {
            op,
            input,
            kernel,
            stride,
            pad,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    x: Shape,
    w: Shape,
    out: Shape,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<Self> {
        if x.c != w.c {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                expected: w.c,
                got: x.c,
            });
        }
        let oh = conv_out_dim("conv2d", x.h, w.h, stride, pad)?;
        let ow = conv_out_dim("conv2d", x.w, w.w, stride, pad)?;
        let out = Shape::new(x.n, w.n, oh, ow)?;
        Ok(Self { x, w, out, stride, pad })
    }

    /// Output columns `ox` whose input column `ox*stride + k - pad` is in range.
    fn valid_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let k = k as isize;
        // smallest ox with ox*s + k - p >= 0
        let lo = if k >= p { 0 } else { ((p - k) + s - 1) / s };
        // largest ox with ox*s + k - p <= in_len - 1
        let hi_num = in_len as isize - 1 + p - k;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(out_len as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

/// 2-D cross-correlation without bias. `w` has shape `(c_out, c_in, k_h, k_w)`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let mut out = vec![T::zero(); g.out.numel()];
    let xd = x.data();
    let wd = w.data();
    let per_sample = g.out.c * g.out.plane();
    for_each_chunk(&mut out, per_sample, |n, out_n| {
        for co in 0..g.out.c {
            let out_plane = &mut out_n[co * g.out.plane()..(co + 1) * g.out.plane()];
            for ci in 0..g.x.c {
                let x_plane = &xd[(n * g.x.c + ci) * g.x.plane()..][..g.x.plane()];
                for ky in 0..g.w.h {
                    let (oy0, oy1) = g.valid_range(ky, g.x.h, g.out.h);
                    for kx in 0..g.w.w {
                        let wv = wd[((co * g.w.c + ci) * g.w.h + ky) * g.w.w + kx];
                        let (ox0, ox1) = g.valid_range(kx, g.x.w, g.out.w);
                        if ox0 == ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let x_row = &x_plane[iy * g.x.w..(iy + 1) * g.x.w];
                            let o_row = &mut out_plane[oy * g.out.w..(oy + 1) * g.out.w];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                let src = &x_row[ix0..ix0 + (ox1 - ox0)];
                                for (o, &xv) in o_row[ox0..ox1].iter_mut().zip(src) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    o_row[ox] += wv * x_row[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_shape(g.out, out))
}

/// Gradients of `conv2d` with respect to its input and kernel.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    if dy.shape() != g.out {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            left: g.out.dims(),
            right: dy.dims(),
        });
    }
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();

    let mut dx = vec![T::zero(); g.x.numel()];
    for_each_chunk(&mut dx, g.x.c * g.x.plane(), |n, dx_n| {
        for co in 0..g.out.c {
            let dy_plane = &dyd[(n * g.out.c + co) * g.out.plane()..][..g.out.plane()];
            for ci in 0..g.x.c {
                let dx_plane = &mut dx_n[ci * g.x.plane()..(ci + 1) * g.x.plane()];
                for ky in 0..g.w.h {
                    let (oy0, oy1) = g.valid_range(ky, g.x.h, g.out.h);
                    for kx in 0..g.w.w {
                        let wv = wd[((co * g.w.c + ci) * g.w.h + ky) * g.w.w + kx];
                        let (ox0, ox1) = g.valid_range(kx, g.x.w, g.out.w);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let dy_row = &dy_plane[oy * g.out.w..(oy + 1) * g.out.w];
                            let dx_row = &mut dx_plane[iy * g.x.w..(iy + 1) * g.x.w];
                            for ox in ox0..ox1 {
                                dx_row[ox * g.stride + kx - g.pad] += wv * dy_row[ox];
                            }
                        }
                    }
                }
            }
        }
    });

    let mut dw = vec![T::zero(); g.w.numel()];
    let per_co = g.w.c * g.w.h * g.w.w;
    for_each_chunk(&mut dw, per_co, |co, dw_co| {
        for n in 0..g.x.n {
            let dy_plane = &dyd[(n * g.out.c + co) * g.out.plane()..][..g.out.plane()];
            for ci in 0..g.x.c {
                let x_plane = &xd[(n * g.x.c + ci) * g.x.plane()..][..g.x.plane()];
                for ky in 0..g.w.h {
                    let (oy0, oy1) = g.valid_range(ky, g.x.h, g.out.h);
                    for kx in 0..g.w.w {
                        let (ox0, ox1) = g.valid_range(kx, g.x.w, g.out.w);
                        let mut acc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let x_row = &x_plane[iy * g.x.w..(iy + 1) * g.x.w];
                            let dy_row = &dy_plane[oy * g.out.w..(oy + 1) * g.out.w];
                            for ox in ox0..ox1 {
                                acc += dy_row[ox] * x_row[ox * g.stride + kx - g.pad];
                            }
                        }
                        dw_co[(ci * g.w.h + ky) * g.w.w + kx] += acc;
                    }
                }
            }
        }
    });

    Ok((
        Tensor::from_shape(g.x, dx),
        Tensor::from_shape(g.w, dw),
    ))
}

/// Max pooling with implicit `-inf` padding. Returns the output and, for
/// every output element, the flat input index that produced it.
pub fn max_pool<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    let oh = conv_out_dim("max_pool", s.h, k, stride, pad)?;
    let ow = conv_out_dim("max_pool", s.w, k, stride, pad)?;
    let out_shape = Shape::new(s.n, s.c, oh, ow)?;
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::with_capacity(out_shape.numel());
    let xd = x.data();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * s.w + ix as usize;
                            if best_idx == usize::MAX || xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((Tensor::from_shape(out_shape, out), argmax))
}

/// Per-channel spatial mean, shape `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = T::one() / T::lit(s.plane() as f64);
    let data = x
        .data()
        .chunks(s.plane())
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_shape(Shape { n: s.n, c: s.c, h: 1, w: 1 }, data)
}

/// Multiplies every `(h, w)` plane of channel `c` by `scale[c]`.
pub fn channelwise_scale<T: Scalar>(x: &Tensor<T>, scale: &[T]) -> Result<Tensor<T>> {
    let s = x.shape();
    if scale.len() != s.c {
        return Err(Error::ChannelMismatch {
            op: "channelwise_scale",
            expected: s.c,
            got: scale.len(),
        });
    }
    let mut out = x.data().to_vec();
    for (i, plane) in out.chunks_mut(s.plane()).enumerate() {
        let a = scale[i % s.c];
        plane.iter_mut().for_each(|v| *v *= a);
    }
    Ok(Tensor::from_shape(s, out))
}

/// Adds `shift[c]` to every element of channel `c`.
pub fn channelwise_shift<T: Scalar>(x: &Tensor<T>, shift: &[T]) -> Result<Tensor<T>> {
    let s = x.shape();
    if shift.len() != s.c {
        return Err(Error::ChannelMismatch {
            op: "channelwise_shift",
            expected: s.c,
            got: shift.len(),
        });
    }
    let mut out = x.data().to_vec();
    for (i, plane) in out.chunks_mut(s.plane()).enumerate() {
        let b = shift[i % s.c];
        plane.iter_mut().for_each(|v| *v += b);
    }
    Ok(Tensor::from_shape(s, out))
}

/// Sums each channel's planes over batch and space.
pub fn channel_sums<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let s = x.shape();
    let mut acc = vec![T::zero(); s.c];
    for (i, plane) in x.data().chunks(s.plane()).enumerate() {
        acc[i % s.c] += plane.iter().copied().sum::<T>();
    }
    acc
}
