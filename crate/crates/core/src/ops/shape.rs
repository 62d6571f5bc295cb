use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{numel, Tensor};

/// Sizes of the blocks before and after `axis`.
fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

impl Tape {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.custom("reshape", &[a], out, |ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat: {s:?} does not match {base:?} off axis {axis}"
                )));
            }
            lens.push(s[axis]);
        }
        let (outer, inner) = outer_inner(&base, axis);
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let block = len * inner;
                data.extend_from_slice(&self.value(p).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data);
        Ok(self.custom("concat", parts, out, move |ctx| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (g, &len) in grads.iter_mut().zip(&lens) {
                    g.extend_from_slice(&ctx.grad[offset..offset + len * inner]);
                    offset += len * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// The sub-range `start..start + len` of `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "slice: range {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let full = shape[axis] * inner;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = o * full + start * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.custom("slice", &[a], out, move |ctx| {
            let mut g = vec![0.0; outer * full];
            for o in 0..outer {
                let to = o * full + start * inner;
                g[to..to + len * inner].copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        }))
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let extent = self.shape(a).get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != extent {
            return Err(Error::dim(format!(
                "split: sizes {sizes:?} do not cover extent {extent} of axis {axis}"
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// `[B×D×H×W]` to `[B×(H·W)×D]`: one D-dimensional descriptor per spatial
    /// position, positions in row-major order.
    pub fn channels_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let [b, d, h, w] = s[..] else {
            return Err(Error::dim(format!("channels_last: expected rank 4, got {s:?}")));
        };
        let n = h * w;
        let src = self.value(a).data();
        let mut data = vec![0.0; b * n * d];
        for bi in 0..b {
            for c in 0..d {
                let plane = &src[(bi * d + c) * n..(bi * d + c + 1) * n];
                for (i, &v) in plane.iter().enumerate() {
                    data[(bi * n + i) * d + c] = v;
                }
            }
        }
        let out = Tensor::from_parts(vec![b, n, d], data);
        Ok(self.custom("channels_last", &[a], out, move |ctx| {
            let mut g = vec![0.0; b * d * n];
            for bi in 0..b {
                for i in 0..n {
                    for c in 0..d {
                        g[(bi * d + c) * n + i] = ctx.grad[(bi * n + i) * d + c];
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    /// Inverse of [`Tape::channels_last`] for a map of height `h`, width `w`.
    pub fn channels_first(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let [b, n, d] = s[..] else {
            return Err(Error::dim(format!("channels_first: expected rank 3, got {s:?}")));
        };
        if n != h * w {
            return Err(Error::dim(format!("channels_first: {n} positions cannot form {h}x{w}")));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; b * d * n];
        for bi in 0..b {
            for i in 0..n {
                for c in 0..d {
                    data[(bi * d + c) * n + i] = src[(bi * n + i) * d + c];
                }
            }
        }
        let out = Tensor::from_parts(vec![b, d, h, w], data);
        Ok(self.custom("channels_first", &[a], out, move |ctx| {
            let mut g = vec![0.0; b * n * d];
            for bi in 0..b {
                for c in 0..d {
                    for i in 0..n {
                        g[(bi * n + i) * d + c] = ctx.grad[(bi * d + c) * n + i];
                    }
                }
            }
            vec![Some(g)]
        }))
    }
}
