//! Finite-difference verification of every backward rule.
//!
//! A check contracts the output of a forward function with a fixed random
//! probe tensor `R`, giving the scalar `f = Σ out ⊙ R`, and compares the
//! tape gradient of `f` with central differences, coordinate by
//! coordinate.
//!
//! Piecewise-linear operations (ReLU, max pooling) log their branch
//! choices. When a central difference straddles a branch change it is not
//! estimating the derivative at the point, so the step is shrunk by 10×
//! until both sides stay on the base point's piece; coordinates that never
//! settle are counted as skipped rather than compared.

use rand::seq::index::sample;
use rand::Rng;

use crate::backbone::{basic_block, BackboneConfig, BasicBlockParams};
use crate::encoding::{assign_weights, encode, lem_forward, Codebook, LemConfig, LemParams};
use crate::error::{Error, Result};
use crate::network::{multer_forward, LevelSet, MulterConfig, MulterParams};
use crate::ops::{PoolSpec, RunningStats};
use crate::params::{init_rng, ParamKind, Parameterized};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Lower bound on the denominator of the relative error.
///
/// A central difference cannot resolve a derivative finer than about
/// `ulp(f) / eps`; for the network check `|f|` is a few tens, putting that
/// quantum near 2e-10 with several quanta of accumulated rounding. Below
/// this floor gradients are compared absolutely, to `TOLERANCE · floor`.
pub const ERROR_FLOOR: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 10;
const MAX_REFINEMENTS: usize = 2;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::new(x.shape(), grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub eps: f64,
    pub floor: f64,
    /// Coordinates compared per tensor; `None` compares all of them.
    pub max_coords: Option<usize>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            floor: ERROR_FLOOR,
            max_coords: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub max_rel_err: f64,
    /// Coordinate with the largest error, e.g. `input0[3]` or `fc1.w[7]`.
    pub worst: String,
    pub coords: usize,
    /// Coordinates compared with a reduced step because of a branch change.
    pub refined: usize,
    /// Coordinates where every step straddled a branch change.
    pub skipped: usize,
}

impl CheckOutcome {
    fn merge(&mut self, other: CheckOutcome) {
        if other.max_rel_err > self.max_rel_err || self.coords == 0 {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.coords += other.coords;
        self.refined += other.refined;
        self.skipped += other.skipped;
    }
}

/// Parameter set for checks over plain inputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoParams;

impl Parameterized for NoParams {
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, ParamKind, &Tensor)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {}
}

enum Target {
    Input(usize),
    Param(String),
}

fn set_param<P: Parameterized>(params: &mut P, name: &str, idx: usize, value: f64) {
    params.visit_mut("", &mut |n, _, t| {
        if n == name {
            t.data_mut()[idx] = value;
        }
    });
}

/// Compares tape gradients of `Σ forward(params, inputs) ⊙ R` against
/// central differences, for every input and every learnable tensor of
/// `params` that the forward function binds.
pub fn check_gradients<P, F>(
    params: &P,
    inputs: &[Tensor],
    forward: F,
    opts: &CheckOptions,
    seed: u64,
) -> Result<CheckOutcome>
where
    P: Parameterized + Clone,
    F: Fn(&mut Tape, &P, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = forward(&mut tape, params, &vars)?;
    let probe = Tensor::uniform(tape.shape(out), -1.0, 1.0, &mut init_rng(seed, "gradcheck/probe"));
    let r = tape.constant(probe.clone());
    let weighted = tape.mul(out, r)?;
    let loss = tape.sum(weighted);
    tape.backward(loss)?;
    let param_grads = tape.param_grads();

    let eval = |params: &P, inputs: &[Tensor]| -> Result<(f64, Vec<usize>)> {
        let mut tape = Tape::no_grad().record_branches();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = forward(&mut tape, params, &vars)?;
        let value = tape
            .value(out)
            .data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| a * b)
            .sum();
        Ok((value, tape.branches().unwrap_or_default().to_vec()))
    };
    let (_, base_branches) = eval(params, inputs)?;

    let mut targets: Vec<(Target, String, Vec<f64>)> = Vec::new();
    for (i, &v) in vars.iter().enumerate() {
        let g = tape.grad(v).expect("inputs require gradients").to_vec();
        targets.push((Target::Input(i), format!("input{i}"), g));
    }
    params.visit("", &mut |name, kind, t| {
        if kind == ParamKind::Learnable && tape.params().any(|(n, _)| n == name) {
            let g = param_grads
                .get(name)
                .map_or_else(|| vec![0.0; t.len()], |g| g.data().to_vec());
            targets.push((Target::Param(name.to_string()), name.to_string(), g));
        }
    });

    let mut rng = init_rng(seed, "gradcheck/coords");
    let mut scratch_params = params.clone();
    let mut scratch_inputs = inputs.to_vec();
    let mut outcome = CheckOutcome {
        max_rel_err: 0.0,
        worst: String::new(),
        coords: 0,
        refined: 0,
        skipped: 0,
    };
    for (target, label, analytic) in &targets {
        let n = analytic.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let original = match target {
                Target::Input(i) => inputs[*i].data()[idx],
                Target::Param(name) => {
                    let mut v = 0.0;
                    params.visit("", &mut |n, _, t| {
                        if n == name {
                            v = t.data()[idx];
                        }
                    });
                    v
                }
            };
            let mut at = |value: f64| -> Result<(f64, Vec<usize>)> {
                match target {
                    Target::Input(i) => scratch_inputs[*i].data_mut()[idx] = value,
                    Target::Param(name) => set_param(&mut scratch_params, name, idx, value),
                }
                let r = eval(&scratch_params, &scratch_inputs);
                match target {
                    Target::Input(i) => scratch_inputs[*i].data_mut()[idx] = original,
                    Target::Param(name) => set_param(&mut scratch_params, name, idx, original),
                }
                r
            };
            let mut h = opts.eps;
            let mut numeric = None;
            for attempt in 0..=MAX_REFINEMENTS {
                let (up, up_branches) = at(original + h)?;
                let (down, down_branches) = at(original - h)?;
                if up_branches == base_branches && down_branches == base_branches {
                    numeric = Some((up - down) / (2.0 * h));
                    if attempt > 0 {
                        outcome.refined += 1;
                    }
                    break;
                }
                h /= 10.0;
            }
            let Some(numeric) = numeric else {
                outcome.skipped += 1;
                continue;
            };
            outcome.coords += 1;
            let err = relative_error(analytic[idx], numeric, opts.floor);
            if !err.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at {label}[{idx}]")));
            }
            if err > outcome.max_rel_err || outcome.worst.is_empty() {
                outcome.max_rel_err = err;
                outcome.worst = format!("{label}[{idx}]");
            }
        }
    }
    Ok(outcome)
}

type CaseFn = Box<dyn Fn(u64, &CheckOptions) -> Result<CheckOutcome>>;

/// One named gradient check, run once per seed.
pub struct Case {
    pub name: &'static str,
    run: CaseFn,
}

impl Case {
    pub fn new<F>(name: &'static str, run: F) -> Self
    where
        F: Fn(u64, &CheckOptions) -> Result<CheckOutcome> + 'static,
    {
        Self {
            name,
            run: Box::new(run),
        }
    }

    pub fn run(&self, seed: u64, opts: &CheckOptions) -> Result<CheckOutcome> {
        (self.run)(seed, opts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub seeds: u64,
    /// Worst over all seeds; coordinate counts are totals.
    pub outcome: CheckOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.outcome.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < TOLERANCE
    }

    pub fn worst(&self) -> Option<&CaseReport> {
        self.cases
            .iter()
            .max_by(|a, b| a.outcome.max_rel_err.total_cmp(&b.outcome.max_rel_err))
    }
}

fn rand_tensor(shape: &[usize], seed: u64, key: &str, scale: f64) -> Tensor {
    Tensor::uniform(shape, -scale, scale, &mut init_rng(seed, key))
}

fn inputs(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| rand_tensor(s, seed, &format!("gradcheck/input{i}"), 1.0))
        .collect()
}

/// Moves normalization parameters and running statistics away from their
/// identity initialization so checks cover the general case.
pub fn randomize_norms<P: Parameterized>(params: &mut P, seed: u64) {
    params.visit_mut("", &mut |name, _, t| {
        let (lo, hi) = match name.rsplit_once('.').map(|(_, f)| f) {
            Some("gamma") | Some("var") => (0.5, 1.5),
            Some("beta") | Some("mean") => (-0.5, 0.5),
            _ => return,
        };
        let mut rng = init_rng(seed, &format!("gradcheck/{name}"));
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(lo..hi));
    });
}

fn op_case<F>(name: &'static str, shapes: &'static [&'static [usize]], f: F) -> Case
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Copy + 'static,
{
    Case::new(name, move |seed, opts| {
        check_gradients(&NoParams, &inputs(seed, shapes), move |t, _, v| f(t, v), opts, seed)
    })
}

fn batch_norm_case(name: &'static str, shape: &'static [usize], mode: Mode) -> Case {
    Case::new(name, move |seed, opts| {
        let feats = shape[1];
        let mut ins = inputs(seed, &[shape]);
        let gamma = rand_tensor(&[feats], seed, "gradcheck/gamma", 0.5)
            .data()
            .iter()
            .map(|v| 1.0 + v)
            .collect();
        ins.push(Tensor::new(&[feats], gamma)?);
        ins.push(rand_tensor(&[feats], seed, "gradcheck/beta", 0.5));
        let running = RunningStats {
            mean: rand_tensor(&[feats], seed, "gradcheck/mean", 0.5).into_data(),
            var: rand_tensor(&[feats], seed, "gradcheck/var", 0.5)
                .data()
                .iter()
                .map(|v| 1.0 + v)
                .collect(),
        };
        check_gradients(
            &NoParams,
            &ins,
            move |t, _, v| Ok(t.batch_norm(v[0], v[1], v[2], &running, mode)?.0),
            opts,
            seed,
        )
    })
}

fn ops_cases() -> Vec<Case> {
    vec![
        op_case("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])),
        op_case("sub", &[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1])),
        op_case("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])),
        op_case("scale", &[&[2, 5]], |t, v| Ok(t.scale(v[0], -1.7))),
        op_case("relu", &[&[4, 5]], |t, v| Ok(t.relu(v[0]))),
        op_case("softplus", &[&[4, 5]], |t, v| {
            let x = t.scale(v[0], 6.0);
            Ok(t.softplus(x))
        }),
        op_case("sum", &[&[2, 3]], |t, v| Ok(t.sum(v[0]))),
        op_case("add_bias", &[&[3, 4], &[4]], |t, v| t.add_bias(v[0], v[1])),
        op_case("mul_last", &[&[2, 3, 4], &[4]], |t, v| t.mul_last(v[0], v[1])),
        op_case("matmul", &[&[3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1])),
        op_case("linear", &[&[3, 4], &[4, 5], &[5]], |t, v| t.linear(v[0], v[1], v[2])),
        op_case("outer_product", &[&[2, 3], &[2, 4]], |t, v| t.outer_product(v[0], v[1])),
        op_case("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        op_case("concat", &[&[2, 3], &[2, 2], &[1, 5]], |t, v| {
            let wide = t.concat(&[v[0], v[1]], 1)?;
            t.concat(&[wide, v[2]], 0)
        }),
        op_case("slice", &[&[3, 5]], |t, v| t.slice(v[0], 1, 1, 3)),
        op_case("split", &[&[4, 5]], |t, v| {
            let parts = t.split(v[0], 0, &[1, 3])?;
            let top = t.scale(parts[0], 2.0);
            t.concat(&[parts[1], top], 0)
        }),
        op_case("channels_last", &[&[2, 3, 2, 3]], |t, v| t.channels_last(v[0])),
        op_case("channels_first", &[&[2, 6, 3]], |t, v| t.channels_first(v[0], 2, 3)),
        op_case("conv2d_3x3", &[&[2, 3, 5, 5], &[4, 3, 3, 3]], |t, v| {
            t.conv2d(v[0], v[1], 1, 1)
        }),
        op_case("conv2d_7x7_stride2", &[&[1, 2, 9, 9], &[3, 2, 7, 7]], |t, v| {
            t.conv2d(v[0], v[1], 2, 3)
        }),
        op_case("conv2d_1x1_stride2", &[&[2, 3, 6, 6], &[4, 3, 1, 1]], |t, v| {
            t.conv2d(v[0], v[1], 2, 0)
        }),
        op_case("max_pool2d", &[&[2, 2, 7, 7]], |t, v| {
            t.max_pool2d(
                v[0],
                PoolSpec {
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                },
            )
        }),
        op_case("global_avg_pool", &[&[2, 3, 3, 4]], |t, v| t.global_avg_pool(v[0])),
        batch_norm_case("batch_norm_train_2d", &[4, 3], Mode::Train),
        batch_norm_case("batch_norm_train_4d", &[2, 3, 3, 3], Mode::Train),
        batch_norm_case("batch_norm_eval_4d", &[2, 3, 3, 3], Mode::Eval),
        op_case("softmax", &[&[3, 4]], |t, v| {
            let x = t.scale(v[0], 3.0);
            t.softmax(x)
        }),
        op_case("cross_entropy", &[&[3, 4]], |t, v| {
            let x = t.scale(v[0], 3.0);
            t.cross_entropy(x, &[0, 3, 1])
        }),
        op_case("pairwise_sq_dist", &[&[2, 5, 3], &[4, 3]], |t, v| {
            t.pairwise_sq_dist(v[0], v[1])
        }),
        op_case("aggregate", &[&[2, 5, 3], &[4, 3], &[2, 5, 4]], |t, v| {
            t.aggregate(v[0], v[1], v[2])
        }),
    ]
}

fn lem_params(seed: u64) -> Result<LemParams> {
    let cfg = LemConfig {
        channels: 4,
        codewords: 2,
        branch_dim: 2,
        out_dim: 6,
    };
    let mut p = LemParams::init(&cfg, seed, "lem")?;
    randomize_norms(&mut p, seed);
    Ok(p)
}

fn encoding_cases() -> Vec<Case> {
    vec![
        op_case("assign_weights", &[&[2, 6, 4], &[3, 4], &[3]], |t, v| {
            assign_weights(t, v[0], v[1], v[2])
        }),
        Case::new("encode", |seed, opts| {
            let cb = Codebook::init(3, 4, seed, "lem");
            check_gradients(
                &cb,
                &inputs(seed, &[&[2, 4, 3, 3]]),
                |t, cb, v| encode(t, v[0], cb, ""),
                opts,
                seed,
            )
        }),
        Case::new("lem_train", |seed, opts| {
            let p = lem_params(seed)?;
            check_gradients(
                &p,
                &inputs(seed, &[&[3, 4, 3, 3]]),
                |t, p, v| lem_forward(t, v[0], p, "", Mode::Train),
                opts,
                seed,
            )
        }),
        Case::new("lem_eval", |seed, opts| {
            let p = lem_params(seed)?;
            check_gradients(
                &p,
                &inputs(seed, &[&[2, 4, 3, 3]]),
                |t, p, v| lem_forward(t, v[0], p, "", Mode::Eval),
                opts,
                seed,
            )
        }),
    ]
}

fn block_case(name: &'static str, inputs_c: usize, outputs: usize, stride: usize, mode: Mode) -> Case {
    Case::new(name, move |seed, opts| {
        let mut p = BasicBlockParams::init(inputs_c, outputs, stride, seed, "");
        randomize_norms(&mut p, seed);
        check_gradients(
            &p,
            &inputs(seed, &[&[2, inputs_c, 6, 6]]),
            move |t, p, v| basic_block(t, v[0], p, stride, "", mode),
            opts,
            seed,
        )
    })
}

fn block_cases() -> Vec<Case> {
    vec![
        block_case("block_identity_train", 4, 4, 1, Mode::Train),
        block_case("block_projection_train", 4, 8, 2, Mode::Train),
        block_case("block_projection_eval", 4, 8, 2, Mode::Eval),
    ]
}

/// The smallest full network: 32×32 input, stage widths 4/8/8/8, two
/// codewords, six output features per level, three classes.
pub fn tiny_config() -> MulterConfig {
    MulterConfig {
        backbone: BackboneConfig::with_widths(4, [4, 8, 8, 8]),
        levels: LevelSet::all(),
        codewords: 2,
        branch_dim: 2,
        out_dim: 6,
        classes: 3,
    }
}

/// Images per network check. With two, the deepest stage (1×1 spatial)
/// normalizes over two values per channel and the loss becomes so curved
/// that central-difference truncation error alone exceeds the tolerance.
pub const NETWORK_BATCH: usize = 4;

/// Sampled coordinates per tensor in the network suite.
pub const NETWORK_COORDS: usize = 6;

fn network_case(name: &'static str, mode: Mode) -> Case {
    Case::new(name, move |seed, opts| {
        let mut p = MulterParams::init(&tiny_config(), seed)?;
        randomize_norms(&mut p, seed);
        let opts = CheckOptions {
            max_coords: Some(opts.max_coords.unwrap_or(NETWORK_COORDS)),
            ..*opts
        };
        check_gradients(
            &p,
            &inputs(seed, &[&[NETWORK_BATCH, 3, 32, 32]]),
            move |t, p, v| multer_forward(t, v[0], p, mode),
            &opts,
            seed,
        )
    })
}

fn network_cases() -> Vec<Case> {
    vec![
        network_case("network_train", Mode::Train),
        network_case("network_eval", Mode::Eval),
    ]
}

pub const SUITES: [&str; 4] = ["ops", "encoding", "block", "network"];

pub fn suite_cases(suite: &str) -> Result<Vec<Case>> {
    match suite {
        "ops" => Ok(ops_cases()),
        "encoding" => Ok(encoding_cases()),
        "block" => Ok(block_cases()),
        "network" => Ok(network_cases()),
        other => Err(Error::Usage(format!(
            "unknown gradient suite {other:?}; expected one of {SUITES:?}"
        ))),
    }
}

pub fn run_cases(suite: &'static str, cases: &[Case], seeds: u64, opts: &CheckOptions) -> Result<SuiteReport> {
    let mut reports = Vec::with_capacity(cases.len());
    for case in cases {
        let mut total: Option<CheckOutcome> = None;
        for seed in 0..seeds {
            let o = case.run(seed, opts)?;
            match total.as_mut() {
                Some(t) => t.merge(o),
                None => total = Some(o),
            }
        }
        reports.push(CaseReport {
            name: case.name,
            seeds,
            outcome: total.ok_or_else(|| Error::Usage("gradient checks need at least one seed".into()))?,
        });
    }
    Ok(SuiteReport { suite, cases: reports })
}

pub fn run_suite(suite: &str, seeds: u64, opts: &CheckOptions) -> Result<SuiteReport> {
    let name = SUITES
        .iter()
        .find(|&&s| s == suite)
        .ok_or_else(|| Error::Usage(format!("unknown gradient suite {suite:?}; expected one of {SUITES:?}")))?;
    run_cases(name, &suite_cases(name)?, seeds, opts)
}

pub fn run_all(seeds: u64, opts: &CheckOptions) -> Result<Vec<SuiteReport>> {
    SUITES.iter().map(|s| run_suite(s, seeds, opts)).collect()
}

/// Negative control: `x²` recorded with the wrong derivative `2.5·x`. Any
/// working checker must reject it.
pub fn corrupted_cases() -> Vec<Case> {
    vec![op_case("corrupted_square", &[&[3, 3]], |t, v| {
        let x = t.value(v[0]).clone();
        let out = Tensor::new(x.shape(), x.data().iter().map(|a| a * a).collect())?;
        Ok(t.custom("corrupted_square", &[v[0]], out, |ctx| {
            let x = ctx.inputs[0].data();
            vec![Some(x.iter().zip(ctx.grad).map(|(a, g)| 2.5 * a * g).collect())]
        }))
    })]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_differences_of_a_cubic() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v * v).sum()), &x, DEFAULT_EPS).unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 3.0 * xi * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn relative_error_uses_the_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert_eq!(relative_error(1e-9, 0.0, 1e-6), 1e-3);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let r = run_cases("control", &corrupted_cases(), 2, &CheckOptions::default()).unwrap();
        assert!(!r.passed());
        assert!(r.max_rel_err() > 0.1);
    }

    #[test]
    fn unknown_suite_is_a_usage_error() {
        assert!(matches!(
            run_suite("nope", 1, &CheckOptions::default()),
            Err(Error::Usage(_))
        ));
    }
}
