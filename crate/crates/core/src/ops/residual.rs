//! Kernels of the residual encoding: descriptor-to-codeword distances and
//! assignment-weighted residual aggregation.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Normalizer applied to the aggregated residual sum over `n` descriptors.
/// Mean aggregation keeps the encoding magnitude independent of resolution.
pub fn aggregation_scale(n: usize) -> f64 {
    1.0 / n as f64
}

fn descriptor_dims(tape: &Tape, x: Var, c: Var, op: &str) -> Result<(usize, usize, usize, usize)> {
    let (sx, sc) = (tape.shape(x), tape.shape(c));
    match (sx, sc) {
        ([b, n, d], [k, dc]) if d == dc => Ok((*b, *n, *d, *k)),
        _ => Err(Error::dim(format!(
            "{op}: descriptors {sx:?} and codewords {sc:?} disagree on dimension"
        ))),
    }
}

impl Tape {
    /// `out[b,i,k] = ‖x[b,i] − c[k]‖²` for descriptors `x[B×N×D]` and
    /// codewords `c[K×D]`.
    pub fn pairwise_sq_dist(&mut self, x: Var, c: Var) -> Result<Var> {
        let (batch, n, d, k) = descriptor_dims(self, x, c, "pairwise_sq_dist")?;
        let (xs, cs) = (self.value(x).data(), self.value(c).data());
        let mut out = vec![0.0; batch * n * k];
        for (xi, orow) in xs.chunks(d).zip(out.chunks_mut(k)) {
            for (o, ck) in orow.iter_mut().zip(cs.chunks(d)) {
                *o = xi.iter().zip(ck).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
        let out = Tensor::from_parts(vec![batch, n, k], out);
        Ok(self.custom("pairwise_sq_dist", &[x, c], out, move |ctx| {
            let (xs, cs) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut gx = vec![0.0; xs.len()];
            let mut gc = vec![0.0; cs.len()];
            for ((xi, gxi), grow) in xs.chunks(d).zip(gx.chunks_mut(d)).zip(ctx.grad.chunks(k)) {
                for ((ck, gck), &g) in cs.chunks(d).zip(gc.chunks_mut(d)).zip(grow) {
                    for j in 0..d {
                        let t = 2.0 * g * (xi[j] - ck[j]);
                        gxi[j] += t;
                        gck[j] -= t;
                    }
                }
            }
            vec![ctx.needs(0).then_some(gx), ctx.needs(1).then_some(gc)]
        }))
    }

    /// `e[b,k] = s · Σ_i a[b,i,k] (x[b,i] − c[k])` with `s` from
    /// [`aggregation_scale`]; output `[B×K×D]`.
    pub fn aggregate(&mut self, x: Var, c: Var, a: Var) -> Result<Var> {
        let (batch, n, d, k) = descriptor_dims(self, x, c, "aggregate")?;
        if self.shape(a) != [batch, n, k] {
            return Err(Error::dim(format!(
                "aggregate: assignments {:?} do not match [{batch}, {n}, {k}]",
                self.shape(a)
            )));
        }
        let scale = aggregation_scale(n);
        let (xs, cs, asg) = (self.value(x).data(), self.value(c).data(), self.value(a).data());
        let mut out = vec![0.0; batch * k * d];
        for b in 0..batch {
            let e = &mut out[b * k * d..(b + 1) * k * d];
            for i in 0..n {
                let xi = &xs[(b * n + i) * d..][..d];
                let ai = &asg[(b * n + i) * k..][..k];
                for kk in 0..k {
                    let (w, ck) = (ai[kk], &cs[kk * d..(kk + 1) * d]);
                    for j in 0..d {
                        e[kk * d + j] += w * (xi[j] - ck[j]);
                    }
                }
            }
            e.iter_mut().for_each(|v| *v *= scale);
        }
        let out = Tensor::from_parts(vec![batch, k, d], out);
        Ok(self.custom("aggregate", &[x, c, a], out, move |ctx| {
            let (xs, cs, asg) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
            let g = ctx.grad;
            let mut gx = vec![0.0; xs.len()];
            let mut gc = vec![0.0; cs.len()];
            let mut ga = vec![0.0; asg.len()];
            for b in 0..batch {
                let ge = &g[b * k * d..(b + 1) * k * d];
                for i in 0..n {
                    let row = b * n + i;
                    let xi = &xs[row * d..][..d];
                    let ai = &asg[row * k..][..k];
                    for kk in 0..k {
                        let gek = &ge[kk * d..(kk + 1) * d];
                        let ck = &cs[kk * d..(kk + 1) * d];
                        let w = ai[kk] * scale;
                        let mut dot = 0.0;
                        for j in 0..d {
                            gx[row * d + j] += w * gek[j];
                            gc[kk * d + j] -= w * gek[j];
                            dot += gek[j] * (xi[j] - ck[j]);
                        }
                        ga[row * k + kk] = scale * dot;
                    }
                }
            }
            vec![
                ctx.needs(0).then_some(gx),
                ctx.needs(1).then_some(gc),
                ctx.needs(2).then_some(ga),
            ]
        }))
    }
}
