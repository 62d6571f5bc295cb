use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `out[m×q] += a[m×p] · b[p×q]`, all row-major.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], p: usize, q: usize, out: &mut [f64]) {
    let m = out.len() / q.max(1);
    debug_assert!(a.len() == m * p && b.len() == p * q && out.len() == m * q);
    // SAFETY: the three slices hold exactly m·p, p·q and m·q elements and the
    // strides describe row-major layouts within those bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            p,
            q,
            1.0,
            a.as_ptr(),
            p as isize,
            1,
            b.as_ptr(),
            q as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            q as isize,
            1,
        );
    }
}

/// `out[m×p] += g[m×q] · bᵀ` where `b` is `p×q`.
pub(crate) fn gemm_nt_acc(g: &[f64], b: &[f64], p: usize, q: usize, out: &mut [f64]) {
    let m = out.len() / p.max(1);
    debug_assert!(g.len() == m * q && b.len() == p * q && out.len() == m * p);
    // SAFETY: as in `gemm_acc`; `b` is read column-major to form its transpose.
    unsafe {
        matrixmultiply::dgemm(
            m,
            q,
            p,
            1.0,
            g.as_ptr(),
            q as isize,
            1,
            b.as_ptr(),
            1,
            q as isize,
            1.0,
            out.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}

/// `out[p×q] += aᵀ · g` where `a` is `m×p` and `g` is `m×q`.
pub(crate) fn gemm_tn_acc(a: &[f64], g: &[f64], p: usize, q: usize, out: &mut [f64]) {
    let m = g.len() / q.max(1);
    debug_assert!(a.len() == m * p && g.len() == m * q && out.len() == p * q);
    // SAFETY: as in `gemm_acc`; `a` is read column-major to form its transpose.
    unsafe {
        matrixmultiply::dgemm(
            p,
            m,
            q,
            1.0,
            a.as_ptr(),
            1,
            p as isize,
            g.as_ptr(),
            q as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            q as isize,
            1,
        );
    }
}

fn gemm(a: &[f64], b: &[f64], m: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * q];
    gemm_acc(a, b, p, q, &mut out);
    out
}

fn gemm_nt(g: &[f64], b: &[f64], m: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    gemm_nt_acc(g, b, p, q, &mut out);
    out
}

fn gemm_tn(a: &[f64], g: &[f64], _m: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    gemm_tn_acc(a, g, p, q, &mut out);
    out
}

impl Tape {
    /// Matrix product of `[M×P]` and `[P×Q]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, p, q) = (sa[0], sa[1], sb[1]);
        let out = gemm(self.value(a).data(), self.value(b).data(), m, p, q);
        let out = Tensor::from_parts(vec![m, q], out);
        Ok(self.custom("matmul", &[a, b], out, move |ctx| {
            let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let ga = ctx.needs(0).then(|| gemm_nt(ctx.grad, w, m, p, q));
            let gb = ctx.needs(1).then(|| gemm_tn(x, ctx.grad, m, p, q));
            vec![ga, gb]
        }))
    }

    /// Affine map `x·w + b` for `x[B×in]`, `w[in×out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Per-sample flattened outer product: `out[b, p·Q + q] = a[b,p]·c[b,q]`.
    pub fn outer_product(&mut self, a: Var, c: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(c));
        if sa.len() != 2 || sc.len() != 2 || sa[0] != sc[0] {
            return Err(Error::dim(format!(
                "outer_product: batch mismatch between {sa:?} and {sc:?}"
            )));
        }
        let (batch, p, q) = (sa[0], sa[1], sc[1]);
        let (ta, tc) = (self.value(a).data(), self.value(c).data());
        let mut out = vec![0.0; batch * p * q];
        for b in 0..batch {
            let (arow, crow) = (&ta[b * p..(b + 1) * p], &tc[b * q..(b + 1) * q]);
            let orow = &mut out[b * p * q..(b + 1) * p * q];
            for (i, &av) in arow.iter().enumerate() {
                orow[i * q..(i + 1) * q]
                    .iter_mut()
                    .zip(crow)
                    .for_each(|(o, cv)| *o = av * cv);
            }
        }
        let out = Tensor::from_parts(vec![batch, p * q], out);
        Ok(self.custom("outer_product", &[a, c], out, move |ctx| {
            let (ta, tc) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut ga = vec![0.0; batch * p];
            let mut gc = vec![0.0; batch * q];
            for b in 0..batch {
                let g = &ctx.grad[b * p * q..(b + 1) * p * q];
                let (arow, crow) = (&ta[b * p..(b + 1) * p], &tc[b * q..(b + 1) * q]);
                for i in 0..p {
                    let gblock = &g[i * q..(i + 1) * q];
                    ga[b * p + i] = gblock.iter().zip(crow).map(|(x, y)| x * y).sum();
                    let gcrow = &mut gc[b * q..(b + 1) * q];
                    gcrow.iter_mut().zip(gblock).for_each(|(s, gv)| *s += gv * arow[i]);
                }
            }
            vec![ctx.needs(0).then_some(ga), ctx.needs(1).then_some(gc)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_times_column() {
        let mut tape = Tape::new();
        let a = tape.constant(mat(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(mat(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 4.0]);
    }

    #[test]
    fn one_by_one() {
        let mut tape = Tape::new();
        let a = tape.constant(mat(&[1, 1], &[2.0]));
        let b = tape.constant(mat(&[1, 1], &[3.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[6.0]);
    }

    #[test]
    fn inner_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[3, 4]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[3, 4]") && msg.contains("[3, 2]"));
    }

    #[test]
    fn outer_product_layout() {
        let mut tape = Tape::new();
        let a = tape.constant(mat(&[1, 2], &[1.0, 0.0]));
        let b = tape.constant(mat(&[1, 2], &[5.0, 7.0]));
        let o = tape.outer_product(a, b).unwrap();
        assert_eq!(tape.value(o).data(), &[5.0, 7.0, 0.0, 0.0]);
    }

    #[test]
    fn outer_product_batch_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.outer_product(a, b).is_err());
    }

    #[test]
    fn outer_product_width_64_squared() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 64]));
        let b = tape.constant(Tensor::ones(&[2, 64]));
        let o = tape.outer_product(a, b).unwrap();
        assert_eq!(tape.shape(o), &[2, 4096]);
    }
}
