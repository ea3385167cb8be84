use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

use pgan_core::evalkit::{self, C2STConfig};
use pgan_core::generator::{Generator, GeneratorConfig, NormKind};
use pgan_core::nn::{self, HasParams, Init, Track};
use pgan_core::objectives;
use pgan_core::percdisc::{DiscMode, DiscriminatorArch, DiscriminatorOutput, PerceptualDiscriminator};
use pgan_core::refnet::pretrain::toy_trunk_arch;
use pgan_core::refnet::ReferenceNet;

fn toy_disc(mode: DiscMode, patch_levels: Vec<usize>, seed: u64) -> PerceptualDiscriminator {
    let trunk = ReferenceNet::random(&toy_trunk_arch(), seed, false)
        .and_then(|t| t.apply_surgery())
        .unwrap();
    let arch = DiscriminatorArch {
        blocks: 3,
        combiner_widths: vec![4, 4],
        patch_levels,
        head_width: 8,
        patch_width: 8,
        epsilon: 1e-7,
    };
    PerceptualDiscriminator::build(&arch, mode, trunk, seed + 1).unwrap()
}

fn rows(t: &Tensor) -> Vec<f32> {
    t.to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generator_preserves_shape_and_range(
        m in 0usize..4,
        n in 0usize..3,
        res in prop::sample::select(vec![8u32, 16, 32]),
        batch in 1usize..3,
        seed in 0u64..1000,
    ) {
        let cfg = GeneratorConfig { downsamplings: m, res_blocks: n, width: 2, norm: NormKind::Instance };
        // too many downsamplings for the resolution is a config error, not a panic
        let Ok(g) = Generator::build(&cfg, res, seed) else { return Ok(()) };
        let x = Init::new(seed).uniform(&[batch, 3, res as usize, res as usize], 1.0).unwrap();
        let y = g.translate(&x, Track::InputOnly).unwrap();
        prop_assert_eq!(y.dims(), x.dims());
        prop_assert!(rows(&y).iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn log_d_adds_head_terms(
        main in prop::collection::vec(-30f64..30.0, 1..4),
        patch in prop::collection::vec(-30f64..30.0, 16),
    ) {
        let dev = Device::Cpu;
        let n = main.len();
        let main_t = Tensor::from_vec(main.clone(), n, &dev).unwrap();
        let maps: Vec<f64> = (0..n).flat_map(|i| patch.iter().map(move |p| p + i as f64)).collect();
        let patch_t = Tensor::from_vec(maps, (n, 4, 4), &dev).unwrap();
        let alone = DiscriminatorOutput::new(main_t.clone(), vec![], 1e-7);
        let both = DiscriminatorOutput::new(main_t, vec![(1, patch_t.clone())], 1e-7);
        let a = alone.log_d().unwrap().to_vec1::<f64>().unwrap();
        let b = both.log_d().unwrap().to_vec1::<f64>().unwrap();
        let extra = both.log_prob(&patch_t, true).unwrap().sum((1, 2)).unwrap().to_vec1::<f64>().unwrap();
        for i in 0..n {
            prop_assert!((b[i] - a[i] - extra[i]).abs() < 1e-9);
            prop_assert!(b[i] <= a[i]);
        }
    }

    #[test]
    fn l1_is_scale_equivariant_and_symmetric(c in -5f64..5.0, seed in 0u64..1000) {
        let mut init = Init::new(seed).with_dtype(DType::F64);
        let a = init.uniform(&[2, 3, 4, 4], 1.0).unwrap();
        let b = init.uniform(&[2, 3, 4, 4], 1.0).unwrap();
        let base = nn::scalar(&objectives::l1_mean(&a, &b).unwrap()).unwrap();
        let scaled = nn::scalar(&objectives::l1_mean(&(&a * c).unwrap(), &(&b * c).unwrap()).unwrap()).unwrap();
        let swapped = nn::scalar(&objectives::l1_mean(&b, &a).unwrap()).unwrap();
        prop_assert!((scaled - c.abs() * base).abs() <= 1e-9 * (1.0 + base));
        prop_assert_eq!(base, swapped);
    }

    #[test]
    fn parameters_split_into_trunk_and_heads(
        mode in prop::sample::select(vec![DiscMode::Perceptual, DiscMode::Plain, DiscMode::RandomTrunk]),
        levels in prop::sample::subsequence(vec![1usize, 2, 3], 0..=3),
    ) {
        let d = toy_disc(mode, levels, 5);
        let all = d.named_params();
        let trunk = d.trunk_params();
        let heads = d.head_params();
        prop_assert_eq!(all.len(), trunk.len() + heads.len());
        let mut names: Vec<&String> = trunk.iter().chain(heads.iter()).map(|(n, _)| n).collect();
        names.sort();
        names.dedup();
        prop_assert_eq!(names.len(), all.len());
        prop_assert!(heads.iter().all(|(_, p)| p.is_trainable()));
        let trunk_trainable = mode == DiscMode::Plain;
        prop_assert!(trunk.iter().all(|(_, p)| p.is_trainable() == trunk_trainable));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn samples_are_scored_independently(batch in 2usize..5, seed in 0u64..1000) {
        let d = toy_disc(DiscMode::RandomTrunk, vec![1, 3], seed);
        let g = Generator::build(
            &GeneratorConfig { downsamplings: 1, res_blocks: 1, width: 4, norm: NormKind::Instance },
            16,
            seed,
        )
        .unwrap();
        let x = Init::new(seed + 7).uniform(&[batch, 3, 16, 16], 1.0).unwrap();
        let together = d.discriminate(&x, Track::InputOnly).unwrap().log_d().unwrap();
        let translated = g.translate(&x, Track::InputOnly).unwrap();
        for i in 0..batch {
            let xi = x.narrow(0, i, 1).unwrap();
            let alone = d.discriminate(&xi, Track::InputOnly).unwrap().log_d().unwrap();
            let (a, b) = (rows(&together.narrow(0, i, 1).unwrap())[0], rows(&alone)[0]);
            prop_assert!((a - b).abs() <= 1e-4 * (1.0 + a.abs()), "sample {}: {} vs {}", i, a, b);
            let gi = rows(&g.translate(&xi, Track::InputOnly).unwrap());
            let gt = rows(&translated.narrow(0, i, 1).unwrap());
            let worst = gi.iter().zip(&gt).map(|(p, q)| (p - q).abs()).fold(0f32, f32::max);
            prop_assert!(worst <= 1e-5);
        }
    }
}

fn small_c2st(seed: u64) -> C2STConfig {
    C2STConfig {
        min_per_side: 20,
        epochs: 2,
        width: 4,
        batch_size: 16,
        lr: 1e-3,
        seed,
    }
}

#[test]
fn c2st_is_deterministic_under_seed() {
    let mut init = Init::new(3);
    let a = init.uniform(&[40, 3, 16, 16], 1.0).unwrap();
    let b = (init.uniform(&[40, 3, 16, 16], 1.0).unwrap() * 0.5).unwrap();
    let r1 = evalkit::c2st(&a, &b, &small_c2st(9)).unwrap();
    let r2 = evalkit::c2st(&a, &b, &small_c2st(9)).unwrap();
    assert_eq!(r1.log_loss, r2.log_loss);
    assert_eq!(r1.accuracy, r2.accuracy);
    assert_eq!((r1.n_train, r1.n_test), (40, 40));
    let r3 = evalkit::c2st(&a, &b, &small_c2st(10)).unwrap();
    assert_ne!(r1.config_hash, r3.config_hash);
}

#[test]
fn c2st_scores_both_orderings_alike_on_separable_sets() {
    let a = Tensor::full(0.8f32, (60, 3, 16, 16), &Device::Cpu).unwrap();
    let b = Tensor::full(-0.8f32, (60, 3, 16, 16), &Device::Cpu).unwrap();
    let cfg = C2STConfig { epochs: 10, ..small_c2st(1) };
    let ab = evalkit::c2st(&a, &b, &cfg).unwrap();
    let ba = evalkit::c2st(&b, &a, &cfg).unwrap();
    assert_eq!(ab.accuracy, 1.0);
    assert_eq!(ba.accuracy, 1.0);
}
