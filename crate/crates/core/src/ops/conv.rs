use crate::error::{Error, Result};
use crate::ops::linalg::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Output extent of a sliding window: `floor((input + 2·pad − kernel)/stride) + 1`.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("window stride must be at least 1".into()));
    }
    if kernel == 0 || input + 2 * pad < kernel {
        return Err(Error::dim(format!(
            "window of {kernel} does not fit input extent {input} with padding {pad}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Window geometry for max pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Output positions `lo..hi` whose input coordinate `o·stride + k − pad`
/// lands inside `0..len`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if len + pad <= k {
        return (0, 0);
    }
    let hi = ((len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    /// Visits every (output row span, input row span, kernel tap) triple of
    /// one input/output plane pair. `f(oy, xlo, xhi, iy, ky, kx)`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        for ky in 0..self.kh {
            let (ylo, yhi) = valid_range(ky, self.pad, self.stride, self.h, self.oh);
            for kx in 0..self.kw {
                let (xlo, xhi) = valid_range(kx, self.pad, self.stride, self.w, self.ow);
                if xlo >= xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = oy * self.stride + ky - self.pad;
                    f(oy, xlo, xhi, iy, ky, kx);
                }
            }
        }
    }

    fn in_col(&self, ox: usize, kx: usize) -> usize {
        ox * self.stride + kx - self.pad
    }
}

/// Unfolds one image `[Cin×H×W]` into its block of columns of the batch
/// matrix `col[(Cin·kh·kw) × (B·oh·ow)]`, starting at column `offset`.
/// Taps that fall in the padding stay zero.
fn im2col(g: &ConvGeom, image: &[f64], col: &mut [f64], offset: usize) {
    let (in_plane, ld) = (g.h * g.w, g.batch * g.oh * g.ow);
    for ci in 0..g.cin {
        let iplane = &image[ci * in_plane..][..in_plane];
        g.for_each_tap(|oy, xlo, xhi, iy, ky, kx| {
            let row = (ci * g.kh + ky) * g.kw + kx;
            let dst = &mut col[row * ld + offset + oy * g.ow..][xlo..xhi];
            if g.stride == 1 {
                let start = iy * g.w + g.in_col(xlo, kx);
                dst.copy_from_slice(&iplane[start..start + dst.len()]);
            } else {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = iplane[iy * g.w + g.in_col(xlo + j, kx)];
                }
            }
        });
    }
}

/// Adjoint of [`im2col`]: scatters one image's columns back onto its
/// gradient.
fn col2im(g: &ConvGeom, col: &[f64], offset: usize, image: &mut [f64]) {
    let (in_plane, ld) = (g.h * g.w, g.batch * g.oh * g.ow);
    for ci in 0..g.cin {
        let iplane = &mut image[ci * in_plane..][..in_plane];
        g.for_each_tap(|oy, xlo, xhi, iy, ky, kx| {
            let row = (ci * g.kh + ky) * g.kw + kx;
            let src = &col[row * ld + offset + oy * g.ow..][xlo..xhi];
            if g.stride == 1 {
                let start = iy * g.w + g.in_col(xlo, kx);
                iplane[start..start + src.len()]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            } else {
                for (j, s) in src.iter().enumerate() {
                    iplane[iy * g.w + g.in_col(xlo + j, kx)] += s;
                }
            }
        });
    }
}

impl ConvGeom {
    fn taps(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// The whole batch unfolded, `[(Cin·kh·kw) × (B·oh·ow)]`.
    fn unfold(&self, input: &[f64]) -> Vec<f64> {
        let mut col = vec![0.0; self.taps() * self.batch * self.positions()];
        for (b, image) in input.chunks(self.cin * self.h * self.w).enumerate() {
            im2col(self, image, &mut col, b * self.positions());
        }
        col
    }

    /// `[B×Cout×P]` to `[Cout×(B·P)]`, or back when `inverse`.
    fn swap_batch(&self, data: &[f64], inverse: bool) -> Vec<f64> {
        let (npos, ld) = (self.positions(), self.batch * self.positions());
        let mut out = vec![0.0; data.len()];
        for b in 0..self.batch {
            for co in 0..self.cout {
                let batch_major = (b * self.cout + co) * npos;
                let chan_major = co * ld + b * npos;
                let (src, dst) = if inverse {
                    (chan_major, batch_major)
                } else {
                    (batch_major, chan_major)
                };
                out[dst..dst + npos].copy_from_slice(&data[src..src + npos]);
            }
        }
        out
    }
}

fn conv_forward(g: ConvGeom, input: &[f64], kernels: &[f64]) -> Vec<f64> {
    let col = g.unfold(input);
    let ld = g.batch * g.positions();
    let mut out = vec![0.0; g.cout * ld];
    gemm_acc(kernels, &col, g.taps(), ld, &mut out);
    g.swap_batch(&out, true)
}

fn conv_backward_input(g: ConvGeom, grad: &[f64], kernels: &[f64]) -> Vec<f64> {
    let ld = g.batch * g.positions();
    let gt = g.swap_batch(grad, false);
    let mut col = vec![0.0; g.taps() * ld];
    gemm_tn_acc(kernels, &gt, g.taps(), ld, &mut col);
    let in_size = g.cin * g.h * g.w;
    let mut gin = vec![0.0; g.batch * in_size];
    for (b, gimg) in gin.chunks_mut(in_size).enumerate() {
        col2im(&g, &col, b * g.positions(), gimg);
    }
    gin
}

fn conv_backward_kernel(g: ConvGeom, grad: &[f64], input: &[f64]) -> Vec<f64> {
    let ld = g.batch * g.positions();
    let gt = g.swap_batch(grad, false);
    let col = g.unfold(input);
    let mut gk = vec![0.0; g.cout * g.taps()];
    gemm_nt_acc(&gt, &col, g.taps(), ld, &mut gk);
    gk
}

impl Tape {
    /// 2-D cross-correlation of `[B×Cin×H×W]` with `[Cout×Cin×kh×kw]`,
    /// zero padding on all sides.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernels).to_vec());
        let (&[batch, cin, h, w], &[cout, kcin, kh, kw]) = (&si[..], &sk[..]) else {
            return Err(Error::dim(format!(
                "conv2d: expected rank-4 input and kernels, got {si:?} and {sk:?}"
            )));
        };
        if cin != kcin {
            return Err(Error::dim(format!(
                "conv2d: input {si:?} has {cin} channels but kernels {sk:?} expect {kcin}"
            )));
        }
        let oh = conv_out_extent(h, kh, stride, pad)?;
        let ow = conv_out_extent(w, kw, stride, pad)?;
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let out = conv_forward(geom, self.value(input).data(), self.value(kernels).data());
        let out = Tensor::from_parts(vec![batch, cout, oh, ow], out);
        Ok(self.custom("conv2d", &[input, kernels], out, move |ctx| {
            let (x, k) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let gx = ctx.needs(0).then(|| conv_backward_input(geom, ctx.grad, k));
            let gk = ctx.needs(1).then(|| conv_backward_kernel(geom, ctx.grad, x));
            vec![gx, gk]
        }))
    }

    /// Max pooling over each channel; padded positions never win.
    /// Ties go to the first position in row-major window order.
    pub fn max_pool2d(&mut self, input: Var, spec: PoolSpec) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let [batch, c, h, w] = s[..] else {
            return Err(Error::dim(format!("max_pool2d: expected rank 4, got {s:?}")));
        };
        if spec.pad >= spec.kernel {
            return Err(Error::Config(format!(
                "max_pool2d: padding {} must be below kernel {}",
                spec.pad, spec.kernel
            )));
        }
        let oh = conv_out_extent(h, spec.kernel, spec.stride, spec.pad)?;
        let ow = conv_out_extent(w, spec.kernel, spec.stride, spec.pad)?;
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(batch * c * oh * ow);
        let mut argmax = Vec::with_capacity(batch * c * oh * ow);
        for plane in 0..batch * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = usize::MAX;
                    for ky in 0..spec.kernel {
                        let Some(iy) = (oy * spec.stride + ky).checked_sub(spec.pad).filter(|&y| y < h) else {
                            continue;
                        };
                        for kx in 0..spec.kernel {
                            let Some(ix) = (ox * spec.stride + kx).checked_sub(spec.pad).filter(|&x| x < w) else {
                                continue;
                            };
                            let at = base + iy * w + ix;
                            if best_at == usize::MAX || src[at] > best {
                                best = src[at];
                                best_at = at;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_at);
                }
            }
        }
        let n_in = src.len();
        self.log_branches(argmax.iter().copied());
        let out = Tensor::from_parts(vec![batch, c, oh, ow], out);
        Ok(self.custom("max_pool2d", &[input], out, move |ctx| {
            let mut g = vec![0.0; n_in];
            for (&at, gv) in argmax.iter().zip(ctx.grad) {
                g[at] += gv;
            }
            vec![Some(g)]
        }))
    }

    /// Mean over all spatial positions: `[B×D×H×W]` to `[B×D]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let [batch, d, h, w] = s[..] else {
            return Err(Error::dim(format!("global_avg_pool: expected rank 4, got {s:?}")));
        };
        let n = h * w;
        let inv = 1.0 / n as f64;
        let data = self
            .value(input)
            .data()
            .chunks(n)
            .map(|plane| plane.iter().sum::<f64>() * inv)
            .collect();
        let out = Tensor::from_parts(vec![batch, d], data);
        Ok(self.custom("global_avg_pool", &[input], out, move |ctx| {
            let mut g = Vec::with_capacity(batch * d * n);
            for gv in ctx.grad {
                g.extend(std::iter::repeat_n(gv * inv, n));
            }
            vec![Some(g)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extent_formula() {
        assert_eq!(conv_out_extent(224, 7, 2, 3).unwrap(), 112);
        assert_eq!(conv_out_extent(112, 3, 2, 1).unwrap(), 56);
        assert_eq!(conv_out_extent(5, 3, 2, 0).unwrap(), 2);
        assert!(matches!(conv_out_extent(2, 5, 1, 1), Err(Error::Dimension(_))));
        assert!(conv_out_extent(5, 3, 0, 0).is_err());
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for len in 1..9 {
            for k in 0..5 {
                for pad in 0..4 {
                    for stride in 1..4 {
                        let kernel = k + 1;
                        let Ok(out_len) = conv_out_extent(len, kernel.max(k + 1), stride, pad) else {
                            continue;
                        };
                        let (lo, hi) = valid_range(k, pad, stride, len, out_len);
                        for o in 0..out_len {
                            let pos = (o * stride + k) as isize - pad as isize;
                            let inside = pos >= 0 && (pos as usize) < len;
                            assert_eq!(
                                inside,
                                o >= lo && o < hi,
                                "len={len} k={k} pad={pad} stride={stride} o={o}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 4, 4]));
        let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), &Tensor::ones(&[1, 1, 4, 4]));
    }

    #[test]
    fn stem_geometry_at_224() {
        // Shape only: a 1-channel 224x224 input with 64 7x7 kernels.
        let mut tape = Tape::no_grad();
        let x = tape.constant(Tensor::zeros(&[1, 1, 224, 224]));
        let k = tape.constant(Tensor::zeros(&[64, 1, 7, 7]));
        let y = tape.conv2d(x, k, 2, 3).unwrap();
        assert_eq!(tape.shape(y), &[1, 64, 112, 112]);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn max_pool_picks_window_max() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap());
        let y = tape
            .max_pool2d(
                x,
                PoolSpec {
                    kernel: 2,
                    stride: 2,
                    pad: 0,
                },
            )
            .unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn global_pool_of_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 5, 4], 0.75));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.shape(y), &[2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn global_pool_level4_map() {
        let mut tape = Tape::no_grad();
        let x = tape.constant(Tensor::zeros(&[1, 512, 7, 7]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 512]);
    }
}
