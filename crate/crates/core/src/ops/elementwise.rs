use crate::error::{Error, Result};
use crate::tape::{check_same_shape, Tape, Var};
use crate::tensor::Tensor;

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("add", self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.custom("add", &[a, b], out, |ctx| {
            vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("sub", self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.custom("sub", &[a, b], out, |ctx| {
            vec![Some(ctx.grad.to_vec()), Some(ctx.grad.iter().map(|g| -g).collect())]
        }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("mul", self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.custom("mul", &[a, b], out, |ctx| {
            let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let ga = ctx
                .needs(0)
                .then(|| ctx.grad.iter().zip(y).map(|(g, v)| g * v).collect());
            let gb = ctx
                .needs(1)
                .then(|| ctx.grad.iter().zip(x).map(|(g, v)| g * v).collect());
            vec![ga, gb]
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect());
        self.custom("scale", &[a], out, move |ctx| {
            vec![Some(ctx.grad.iter().map(|g| g * s).collect())]
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        if self.records_branches() {
            let mask: Vec<usize> = self.value(a).data().iter().map(|&x| usize::from(x > 0.0)).collect();
            self.log_branches(mask);
        }
        let ta = self.value(a);
        let out = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|&x| x.max(0.0)).collect());
        self.custom("relu", &[a], out, |ctx| {
            let x = ctx.inputs[0].data();
            vec![Some(
                ctx.grad
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
            )]
        })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_parts(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| stable_softplus(x)).collect(),
        );
        self.custom("softplus", &[a], out, |ctx| {
            let x = ctx.inputs[0].data();
            vec![Some(ctx.grad.iter().zip(x).map(|(&g, &v)| g * sigmoid(v)).collect())]
        })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let n = self.value(a).len();
        self.custom("sum", &[a], Tensor::scalar(total), move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    /// Adds `b` (length F) to every length-F row of `a` (last extent F).
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let f = last_extent(self.shape(a));
        if self.shape(b) != [f] {
            return Err(Error::dim(format!(
                "add_bias: bias {:?} does not match rows of {:?}",
                self.shape(b),
                self.shape(a)
            )));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(f) {
            row.iter_mut().zip(tb.data()).for_each(|(x, y)| *x += y);
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.custom("add_bias", &[a, b], out, move |ctx| {
            let gb = ctx.needs(1).then(|| {
                let mut gb = vec![0.0; f];
                for row in ctx.grad.chunks(f) {
                    gb.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                }
                gb
            });
            vec![Some(ctx.grad.to_vec()), gb]
        }))
    }

    /// Multiplies every length-K row of `a` (last extent K) by `s` elementwise.
    pub fn mul_last(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = last_extent(self.shape(a));
        if self.shape(s) != [k] {
            return Err(Error::dim(format!(
                "mul_last: scale {:?} does not match rows of {:?}",
                self.shape(s),
                self.shape(a)
            )));
        }
        let (ta, ts) = (self.value(a), self.value(s));
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(k) {
            row.iter_mut().zip(ts.data()).for_each(|(x, y)| *x *= y);
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.custom("mul_last", &[a, s], out, move |ctx| {
            let (x, s) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let ga = ctx.needs(0).then(|| {
                let mut ga = ctx.grad.to_vec();
                for row in ga.chunks_mut(k) {
                    row.iter_mut().zip(s).for_each(|(g, v)| *g *= v);
                }
                ga
            });
            let gs = ctx.needs(1).then(|| {
                let mut gs = vec![0.0; k];
                for (grow, xrow) in ctx.grad.chunks(k).zip(x.chunks(k)) {
                    for j in 0..k {
                        gs[j] += grow[j] * xrow[j];
                    }
                }
                gs
            });
            vec![ga, gs]
        }))
    }
}

pub(crate) fn last_extent(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}
