//! Shape propagation through backbone, encoding modules and classifier.

use multer_core::backbone::{backbone_forward, BackboneConfig, BackboneParams};
use multer_core::network::{ablation_schemes, infer_logits, multer_features};
use multer_core::params::init_rng;
use multer_core::{LevelSet, Mode, MulterConfig, MulterParams, Tape, Tensor};
use proptest::prelude::*;

fn narrow(levels: LevelSet, out_dim: usize) -> MulterConfig {
    MulterConfig {
        backbone: BackboneConfig::with_widths(4, [4, 4, 6, 8]),
        levels,
        codewords: 3,
        branch_dim: 3,
        out_dim,
        classes: 5,
    }
}

fn image(size: usize, batch: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[batch, 3, size, size], 0.0, 1.0, &mut init_rng(seed, "image"))
}

fn features(cfg: &MulterConfig, x: &Tensor) -> Tensor {
    let params = MulterParams::init(cfg, 1).unwrap();
    let mut tape = Tape::no_grad();
    let v = tape.constant(x.clone());
    let f = multer_features(&mut tape, v, &params, Mode::Eval).unwrap();
    tape.value(f).clone()
}

#[test]
fn full_config_trace_at_224() {
    let cfg = MulterConfig::full(23);
    let t = cfg.trace(224, 224).unwrap();
    assert_eq!(t.stem, (64, 112, 112));
    assert_eq!(t.stages, [(64, 56, 56), (128, 28, 28), (256, 14, 14), (512, 7, 7)]);
    assert_eq!(t.lems.len(), 4);
    for lem in &t.lems {
        assert_eq!(lem.bilinear, 4096);
        assert_eq!(lem.output, 128);
        assert_eq!(lem.encoding.0, 8);
    }
    assert_eq!(t.lems[3].input, (7, 7, 512));
    assert_eq!(t.lems[3].descriptors, (49, 512));
    assert_eq!(t.classifier_in, 512);
    assert_eq!(t.classes, 23);
}

#[test]
fn executed_shapes_match_the_trace() {
    let cfg = narrow(LevelSet::all(), 7);
    for size in [32, 45, 64] {
        let params = BackboneParams::init(&cfg.backbone, 3).unwrap();
        let mut tape = Tape::no_grad();
        let x = tape.constant(image(size, 2, 0));
        let stages = backbone_forward(&mut tape, x, &params, Mode::Eval).unwrap();
        let trace = cfg.trace(size, size).unwrap();
        for (v, (d, h, w)) in stages.iter().zip(trace.stages) {
            assert_eq!(tape.shape(*v), &[2, d, h, w], "input {size}");
        }
    }
}

#[test]
fn feature_length_is_fixed_across_input_sizes() {
    for levels in ablation_schemes() {
        let cfg = narrow(levels, 5);
        for size in [224, 256, 320] {
            assert_eq!(cfg.trace(size, size).unwrap().classifier_in, levels.len() * 5);
        }
    }
    let cfg = narrow(LevelSet::all(), 5);
    for size in [224, 256, 320] {
        assert_eq!(features(&cfg, &image(size, 1, 2)).shape(), &[1, 20]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Every stage divides the previous extent by its stride, rounding up.
    #[test]
    fn stage_extents_follow_the_ceiling_law(h in 32usize..400, w in 32usize..400) {
        let shapes = BackboneConfig::full().stage_shapes(h, w).unwrap();
        for (i, &(_, sh, sw)) in shapes.iter().enumerate() {
            let f = 1usize << (i + 2);
            prop_assert_eq!(sh, h.div_ceil(f));
            prop_assert_eq!(sw, w.div_ceil(f));
        }
    }

    #[test]
    fn multiples_of_32_divide_exactly(m in 1usize..12) {
        let s = 32 * m;
        let shapes = BackboneConfig::reduced().stage_shapes(s, s).unwrap();
        prop_assert_eq!(shapes.map(|t| t.1), [s / 4, s / 8, s / 16, s / 32]);
    }

    #[test]
    fn executed_feature_length_is_levels_times_c(
        scheme in 0usize..10,
        out_dim in 1usize..6,
        size in 32usize..72,
        seed in 0u64..100,
    ) {
        let levels = ablation_schemes()[scheme];
        let cfg = narrow(levels, out_dim);
        let f = features(&cfg, &image(size, 2, seed));
        prop_assert_eq!(f.shape(), &[2, levels.len() * out_dim][..]);
    }

    #[test]
    fn level_order_does_not_matter(levels in proptest::sample::subsequence(vec![1u8, 2, 3, 4], 1..=4), seed in 0u64..100) {
        let mut reversed = levels.clone();
        reversed.reverse();
        let a = LevelSet::new(&levels).unwrap();
        let b = LevelSet::new(&reversed).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(a.iter().zip(a.iter().skip(1)).all(|(x, y)| x < y));
        let x = image(32, 2, seed);
        let la = infer_logits(&MulterParams::init(&narrow(a, 3), seed).unwrap(), &x).unwrap();
        let lb = infer_logits(&MulterParams::init(&narrow(b, 3), seed).unwrap(), &x).unwrap();
        prop_assert_eq!(la, lb);
    }
}

#[test]
fn rejects_levels_outside_the_backbone() {
    assert!("5".parse::<LevelSet>().is_err());
    assert!("0,1".parse::<LevelSet>().is_err());
    assert!("".parse::<LevelSet>().is_err());
    assert!(LevelSet::new(&[]).is_err());
    assert_eq!("L=4,1".parse::<LevelSet>().unwrap().to_string(), "L=1,4");
}
