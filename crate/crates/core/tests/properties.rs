//! Property tests for the library invariants.

use std::time::Instant;

use proptest::prelude::*;

use evinig::features::{self, Conv2d, NeighborhoodWindow, SCALES};
use evinig::losses::{self, LossConfig, RecKind};
use evinig::metrics;
use evinig::nig::{self, MixtureMode, NigParams};
use evinig::predictor::{self, ModelConfig, ModelParams, ParamMaps, TimeSpec};
use evinig::synth::{self, Label, SynthConfig};
use evinig::tensor::{ImageTensor, Tensor3};
use evinig::trainer;

fn nig_strategy() -> impl Strategy<Value = NigParams> {
    (-5.0..5.0f64, 1e-3..50.0f64, 1.001..50.0f64, 1e-3..50.0f64)
        .prop_map(|(d, g, a, b)| NigParams::new(d, g, a, b).unwrap())
}

fn mode_strategy() -> impl Strategy<Value = MixtureMode> {
    prop_oneof![Just(MixtureMode::Symmetric), Just(MixtureMode::Verbatim)]
}

fn assert_valid(p: &NigParams) {
    assert!(p.gamma() > 0.0 && p.alpha() > 1.0 && p.beta() > 0.0, "{p:?}");
    assert!(p.to_array().iter().all(|v| v.is_finite()), "{p:?}");
}

fn image(h: usize, w: usize, seed: u64) -> ImageTensor {
    let s = seed as f64 * 0.37;
    let px = Tensor3::from_fn(h, w, 1, |i, j, _| {
        0.5 + 0.25 * ((i as f64 * 0.7 + s).sin() * (j as f64 * 0.45 - s).cos()) + 0.1 * ((i * j) as f64 * 0.13 + s).sin()
    });
    ImageTensor::new(px, 70.0).unwrap()
}

fn ulp(x: f64) -> f64 {
    let x = x.abs();
    f64::from_bits(x.to_bits() + 1) - x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mix_chains_stay_valid(chain in prop::collection::vec(nig_strategy(), 2..12), mode in mode_strategy()) {
        let mut acc = chain[0];
        for p in &chain[1..] {
            acc = nig::mix(&acc, p, mode);
            assert_valid(&acc);
        }
        if chain.len() >= 4 {
            let local = nig::fuse_local(&chain[0], &chain[1], &chain[2], mode);
            assert_valid(&local);
            assert_valid(&nig::fuse_global(&local, &chain[3], mode));
        }
    }

    #[test]
    fn mixture_moments(a in nig_strategy(), b in nig_strategy(), mode in mode_strategy()) {
        let m = nig::mix(&a, &b, mode);
        prop_assert_eq!(m.gamma(), a.gamma() + b.gamma());
        prop_assert_eq!(m.alpha(), a.alpha() + b.alpha() + 0.5);
        let lo = a.delta().min(b.delta());
        let hi = a.delta().max(b.delta());
        prop_assert!(m.delta() >= lo && m.delta() <= hi);
        let weighted = (a.gamma() * a.delta() + b.gamma() * b.delta()) / (a.gamma() + b.gamma());
        prop_assert_eq!(m.delta(), weighted);
    }

    #[test]
    fn symmetric_mix_commutes(a in nig_strategy(), b in nig_strategy()) {
        let ab = nig::mix(&a, &b, MixtureMode::Symmetric).to_array();
        let ba = nig::mix(&b, &a, MixtureMode::Symmetric).to_array();
        for (x, y) in ab.iter().zip(&ba) {
            prop_assert!((x - y).abs() <= ulp(*x), "{x} vs {y}");
        }
    }

    #[test]
    fn epistemic_times_evidence_is_aleatoric(p in nig_strategy()) {
        let u = nig::uncertainty(&p);
        prop_assert!((u.ep * p.gamma() - u.al).abs() <= ulp(u.al));
        prop_assert_eq!(u.d, p.delta());
    }

    #[test]
    fn attention_is_row_stochastic_and_field_bounded(seed in any::<u64>(), n in prop::sample::select(vec![3usize, 5, 7])) {
        let cfg = ModelConfig { window: n, channels: 4, projected: 4, decoder_hidden: 2, ..ModelConfig::default() };
        let m = ModelParams::init(cfg, seed).unwrap();
        let win = cfg.window().unwrap();
        let (i0, i1) = (image(10, 9, seed), image(10, 9, seed.wrapping_add(1)));
        let texture = features::ttcn_forward(&i0, &i1, &m.texture, &win).unwrap();
        let deformation = features::tdcn_forward(&i0, &i1, &m.deformation, &win).unwrap();
        let r = win.radius() as f64;
        for s in texture.iter().map(|t| &t.branch.attention).chain([&deformation.branch.attention]) {
            for i in 0..s.height() {
                for j in 0..s.width() {
                    let row = s.pixel(i, j);
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                }
            }
        }
        prop_assert!(deformation.field.data().iter().all(|v| v.abs() <= r));
    }

    #[test]
    fn features_are_deterministic(seed in any::<u64>()) {
        let cfg = ModelConfig { channels: 3, projected: 2, ..ModelConfig::default() };
        let m = ModelParams::init(cfg, seed).unwrap();
        let win = cfg.window().unwrap();
        let (i0, i1) = (image(8, 8, seed), image(8, 8, seed ^ 7));
        let a = features::ttcn_forward(&i0, &i1, &m.texture, &win).unwrap();
        let b = features::ttcn_forward(&i0, &i1, &m.texture, &win).unwrap();
        for k in 0..SCALES {
            prop_assert_eq!(bits(&a[k].change), bits(&b[k].change));
        }
        let a = features::tdcn_forward(&i0, &i1, &m.deformation, &win).unwrap();
        let b = features::tdcn_forward(&i0, &i1, &m.deformation, &win).unwrap();
        prop_assert_eq!(bits(&a.field), bits(&b.field));
    }

    #[test]
    fn texture_extraction_is_translation_equivariant(seed in any::<u64>(), k in 1usize..=3) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let conv = Conv2d::init(&mut rng, 2 * k - 1, 1, 3);
        let (h, w) = (12, 11);
        let base = image(h + 1, w, seed);
        let a = ImageTensor::new(Tensor3::from_fn(h, w, 1, |i, j, _| base.pixels().get(i, j, 0)), 70.0).unwrap();
        let b = ImageTensor::new(Tensor3::from_fn(h, w, 1, |i, j, _| base.pixels().get(i + 1, j, 0)), 70.0).unwrap();
        let fa = features::extract_texture(&a, k, &conv).unwrap().data;
        let fb = features::extract_texture(&b, k, &conv).unwrap().data;
        for i in 2..h - 3 {
            for j in 2..w - 2 {
                for c in 0..3 {
                    prop_assert_eq!(fb.get(i, j, c).to_bits(), fa.get(i + 1, j, c).to_bits());
                }
            }
        }
    }

    #[test]
    fn fused_maps_add_evidence(seed in any::<u64>(), t in -0.9..3.0f64, mode in mode_strategy()) {
        let cfg = ModelConfig { channels: 4, projected: 4, decoder_hidden: 4, mixture: mode, ..ModelConfig::default() };
        let m = ModelParams::init(cfg, seed).unwrap();
        let (i0, i1) = (image(9, 10, seed), image(9, 10, seed ^ 3));
        let time = TimeSpec::new(0.0, 1.0, 1.0 + t).unwrap();
        let (p, trace) = predictor::forward_traced(&i0, &i1, &time, &m).unwrap();
        prop_assert!(p.fused.is_valid());
        for idx in 0..p.fused.len() {
            let f = p.fused.at_index(idx);
            let parts: Vec<NigParams> = trace.local.iter().chain([&trace.global]).map(|pm| pm.at_index(idx)).collect();
            let g: f64 = parts.iter().map(|q| q.gamma()).sum();
            let a: f64 = parts.iter().map(|q| q.alpha()).sum();
            prop_assert!((f.gamma() - g).abs() <= 1e-12 * g);
            prop_assert!((f.alpha() - (a + 1.5)).abs() <= 1e-12 * a);
            prop_assert_eq!(p.d_map.data()[idx], f.delta());
            let u = nig::uncertainty(&f);
            prop_assert_eq!(p.al_map.data()[idx], u.al);
            prop_assert_eq!(p.ep_map.data()[idx], u.ep);
            prop_assert!(u.al >= 0.0 && u.ep >= 0.0);
            if f.gamma() >= 1.0 {
                prop_assert!(u.al >= u.ep);
            }
        }
        prop_assert!(p.image.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn prediction_is_continuous_in_time(seed in any::<u64>(), t in -0.9..3.0f64) {
        let m = ModelParams::init(ModelConfig::default(), seed).unwrap();
        let (i0, i1) = (image(8, 8, seed), image(8, 8, seed ^ 5));
        let at = |x: f64| predictor::tnig_forward(&i0, &i1, &TimeSpec::new(0.0, 1.0, 1.0 + x).unwrap(), &m).unwrap();
        let a = at(t);
        let b = at(t + 1e-4);
        prop_assert!(a.image.pixels().max_abs_diff(b.image.pixels()) <= 1e-2);
    }

    #[test]
    fn losses_are_finite_and_decompose(
        params in prop::collection::vec(nig_strategy(), 16),
        truth in prop::collection::vec(0.0..1.0f64, 16),
        pred in prop::collection::vec(0.0..1.0f64, 16),
        tau in 1e-3..10.0f64,
        mse in any::<bool>(),
    ) {
        let mut pm = ParamMaps::zeros(4, 4);
        for (idx, p) in params.iter().enumerate() {
            pm.set_index(idx, p);
        }
        let truth = Tensor3::from_vec(4, 4, 1, truth).unwrap();
        let pred = Tensor3::from_vec(4, 4, 1, pred).unwrap();
        let d = Tensor3::from_fn(4, 4, 1, |i, j, _| truth.get(i, j, 0) - 0.5);
        let cfg = LossConfig { tau, rec_kind: if mse { RecKind::Mse } else { RecKind::Mae }, ..LossConfig::default() };
        let b = losses::loss_total(&pred, &truth, &d, &pm, &cfg).unwrap();
        for v in [b.rec, b.nll, b.reg, b.uncertainty, b.total] {
            prop_assert!(v.is_finite());
        }
        prop_assert!(b.rec >= 0.0 && b.reg >= 0.0);
        prop_assert!((b.total - (b.rec + b.uncertainty)).abs() <= 1e-12 * (1.0 + b.total.abs()));
        prop_assert!((b.uncertainty - (b.nll + tau * b.reg)).abs() <= 1e-9 * (1.0 + b.uncertainty.abs()));
    }

    #[test]
    fn psnr_is_antitone_in_mse(
        a in prop::collection::vec(0.0..1.0f64, 144),
        b in prop::collection::vec(0.0..1.0f64, 144),
        c in prop::collection::vec(0.0..1.0f64, 144),
    ) {
        let t = |v: Vec<f64>| Tensor3::from_vec(12, 12, 1, v).unwrap();
        let (a, b, c) = (t(a), t(b), t(c));
        let (m1, m2) = (metrics::mse(&a, &b).unwrap(), metrics::mse(&a, &c).unwrap());
        let (p1, p2) = (metrics::psnr(&a, &b).unwrap(), metrics::psnr(&a, &c).unwrap());
        prop_assert_eq!(m1 < m2, p1 > p2);
        for s in [metrics::ssim(&a, &b).unwrap(), metrics::ssim(&a, &c).unwrap()] {
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!(s < 1.0 - 1e-9);
        }
        prop_assert!((metrics::ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn kfold_partitions_the_dataset(n in 2usize..20, k in 2usize..6, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let cfg = SynthConfig { subjects: n, height: 8, width: 8, scans_min: 2, scans_max: 2, ..SynthConfig::default() };
        let ds = synth::synth_dataset(&cfg).unwrap();
        let folds = trainer::kfold_split(&ds, k, seed).unwrap();
        let mut seen = vec![0usize; n];
        for (train, val) in &folds {
            prop_assert_eq!(train.len() + val.len(), n);
            for &v in val {
                seen[v] += 1;
                prop_assert!(!train.contains(&v));
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthetic_sequences_are_well_formed(seed in any::<u64>(), lo in 0.3..1.0f64, span in 0.1..2.0f64) {
        let cfg = SynthConfig { subjects: 6, height: 16, width: 16, interval_min: lo, interval_max: lo + span, seed, ..SynthConfig::default() };
        for seq in synth::synth_dataset(&cfg).unwrap() {
            let ages = seq.ages();
            let steps: Vec<f64> = ages.windows(2).map(|w| w[1] - w[0]).collect();
            prop_assert!(steps.iter().all(|&s| s > 0.0));
            let mean = steps.iter().sum::<f64>() / steps.len() as f64;
            let var = steps.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (steps.len() - 1) as f64;
            prop_assert!(var > 0.0);
            for s in seq.scans() {
                prop_assert!(s.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}

fn bits(t: &Tensor3) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Thresholded ventricle area: pixels of the central half whose every
/// supersample lies inside the ventricle. A pixel with even one tissue
/// subsample is at least `0.15 + (0.40 - 0.15) / 9` bright.
fn ventricle_area(img: &ImageTensor) -> usize {
    let (h, w) = (img.height(), img.width());
    let mut count = 0;
    for i in h / 4..3 * h / 4 {
        for j in w / 4..3 * w / 4 {
            if img.pixels().get(i, j, 0) < 0.16 {
                count += 1;
            }
        }
    }
    count
}

fn clean_config(subjects: usize) -> SynthConfig {
    SynthConfig {
        subjects,
        height: 64,
        width: 64,
        noise_sigma: 0.0,
        ..SynthConfig::default()
    }
}

#[test]
fn ventricle_area_never_shrinks() {
    for seq in synth::synth_dataset(&clean_config(24)).unwrap() {
        let areas: Vec<usize> = seq.scans().iter().map(ventricle_area).collect();
        assert!(areas.windows(2).all(|w| w[1] >= w[0]), "{}: {areas:?}", seq.subject_id());
    }
}

#[test]
fn atrophy_is_ordered_by_label() {
    let cfg = SynthConfig {
        scans_min: 3,
        scans_max: 3,
        interval_min: 5.0,
        interval_max: 5.0,
        ..clean_config(150)
    };
    let mut growth = [0.0f64; 3];
    let mut count = [0usize; 3];
    for seq in synth::synth_dataset(&cfg).unwrap() {
        let s = seq.scans();
        let ratio = ventricle_area(&s[2]) as f64 / ventricle_area(&s[0]) as f64;
        let k = Label::ALL.iter().position(|&l| l == seq.label()).unwrap();
        growth[k] += ratio - 1.0;
        count[k] += 1;
    }
    assert!(count.iter().all(|&c| c >= 50));
    let mean: Vec<f64> = growth.iter().zip(&count).map(|(g, &c)| g / c as f64).collect();
    assert!(mean[2] > mean[1] && mean[1] > mean[0], "CN/MCI/AD growth {mean:?}");
}

#[test]
fn forward_at_64_is_under_a_second() {
    let m = ModelParams::init(ModelConfig::default(), 0).unwrap();
    let (i0, i1) = (image(64, 64, 1), image(64, 64, 2));
    let time = TimeSpec::new(60.0, 61.0, 62.0).unwrap();
    predictor::tnig_forward(&i0, &i1, &time, &m).unwrap();
    let start = Instant::now();
    predictor::tnig_forward(&i0, &i1, &time, &m).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 1.0, "forward took {secs:.3}s");
}

#[test]
fn window_rejects_even_and_tiny_sides() {
    for n in [0, 1, 2, 4] {
        assert!(NeighborhoodWindow::new(n, 4).is_err());
    }
}
