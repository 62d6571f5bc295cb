//! Named parameter traversal shared by every model component.
//!
//! Names are dotted paths (`lem4.fc1.w`, `res2.block1.bn1.var`); they key the
//! tape bindings, the optimizer state and the model file.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tape::StatUpdate;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Learnable,
    /// Serialized state that is not trained by gradient (running statistics).
    Buffer,
}

pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Every tensor keyed by name, in visit order.
pub fn named_tensors<P: Parameterized + ?Sized>(p: &P) -> Vec<(String, ParamKind, Tensor)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, kind, t| out.push((name.to_string(), kind, t.clone())));
    out
}

pub fn learnable_count<P: Parameterized + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, kind, t| {
        if kind == ParamKind::Learnable {
            n += t.len();
        }
    });
    n
}

/// Writes running statistics produced by a training-mode forward pass into
/// the matching `<key>.mean` / `<key>.var` buffers.
pub fn apply_stat_updates<P: Parameterized + ?Sized>(p: &mut P, updates: Vec<StatUpdate>) {
    let by_key: BTreeMap<String, StatUpdate> = updates.into_iter().map(|u| (u.key.clone(), u)).collect();
    p.visit_mut("", &mut |name, kind, t| {
        if kind != ParamKind::Buffer {
            return;
        }
        let Some((key, field)) = name.rsplit_once('.') else {
            return;
        };
        let Some(update) = by_key.get(key) else { return };
        let src = match field {
            "mean" => &update.mean,
            "var" => &update.var,
            _ => return,
        };
        t.data_mut().copy_from_slice(src);
    });
}

fn fnv1a(key: &str) -> u64 {
    key.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Random stream for initializing the tensor called `key`. Depends only on
/// the seed and the name, so a component initializes identically whatever
/// else is in the model.
pub fn init_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(key));
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn init_streams_differ_by_key_and_repeat_by_seed() {
        let a: f64 = init_rng(7, "lem1.fc1.w").gen();
        let b: f64 = init_rng(7, "lem1.fc1.w").gen();
        let c: f64 = init_rng(7, "lem2.fc1.w").gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn join_handles_empty_prefix() {
        assert_eq!(join("", "w"), "w");
        assert_eq!(join("lem1.fc1", "w"), "lem1.fc1.w");
    }
}
