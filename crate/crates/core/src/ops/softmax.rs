use crate::error::{Error, Result};
use crate::ops::elementwise::last_extent;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

impl Tape {
    /// Softmax over the last axis, shifted by the row maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_finite() {
            return Err(Error::Numeric("softmax: non-finite input".into()));
        }
        let k = last_extent(ta.shape());
        let mut data = vec![0.0; ta.len()];
        for (row, out) in ta.data().chunks(k).zip(data.chunks_mut(k)) {
            softmax_row(row, out);
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.custom("softmax", &[a], out, move |ctx| {
            let y = ctx.output.data();
            let mut g = vec![0.0; y.len()];
            for ((yr, gr), out) in y.chunks(k).zip(ctx.grad.chunks(k)).zip(g.chunks_mut(k)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..k {
                    out[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(g)]
        }))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// for `logits[B×n]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [batch, n] = shape[..] else {
            return Err(Error::dim(format!(
                "cross_entropy: expected [B, n] logits, got {shape:?}"
            )));
        };
        if labels.len() != batch {
            return Err(Error::dim(format!(
                "cross_entropy: {} labels for batch of {batch}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Data(format!("label {bad} out of range for {n} classes")));
        }
        let z = self.value(logits);
        if !z.is_finite() {
            return Err(Error::Numeric("cross_entropy: non-finite logits".into()));
        }
        let mut probs = vec![0.0; batch * n];
        let mut loss = 0.0;
        for (b, (row, p)) in z.data().chunks(n).zip(probs.chunks_mut(n)).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[b]];
            softmax_row(row, p);
        }
        let labels = labels.to_vec();
        let inv_b = 1.0 / batch as f64;
        Ok(
            self.custom("cross_entropy", &[logits], Tensor::scalar(loss * inv_b), move |ctx| {
                let scale = ctx.grad[0] * inv_b;
                let mut g = probs.clone();
                for (b, row) in g.chunks_mut(n).enumerate() {
                    row[labels[b]] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![Some(g)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn softmax_of(data: &[f64], shape: &[usize]) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(shape, data.to_vec()).unwrap());
        let y = tape.softmax(x).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn symmetric_pair() {
        assert_eq!(softmax_of(&[0.0, 0.0], &[2]), vec![0.5, 0.5]);
    }

    #[test]
    fn single_class_is_one() {
        assert_eq!(softmax_of(&[-123.4], &[1]), vec![1.0]);
        assert_eq!(softmax_of(&[7.0, -3.0], &[2, 1]), vec![1.0, 1.0]);
    }

    #[test]
    fn matches_direct_formula() {
        let y = softmax_of(&[1.0, 2.0, 3.0], &[3]);
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (a, b) in y.iter().zip(&e) {
            assert!((a - b / z).abs() < 1e-15);
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let y = softmax_of(&[1000.0, 1000.0], &[2]);
        assert_eq!(y, vec![0.5, 0.5]);
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(tape.softmax(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn uniform_logits_give_log_n() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 5]));
        let l = tape.cross_entropy(z, &[0, 3]).unwrap();
        assert!((tape.value(l).item().unwrap() - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logits_give_zero_loss() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(&[1, 3], vec![0.0, 1e6, 0.0]).unwrap());
        let l = tape.cross_entropy(z, &[1]).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_data_error() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(tape.cross_entropy(z, &[3]), Err(Error::Data(_))));
    }
}
