//! Property tests over the prior, the metrics and the data helpers.

mod common;

use common::{domain_names, toy_dataset};
use gmmunit::data::{augment_mirror, build_toy_domains, load_dataset, synth_digits, LabelSource};
use gmmunit::eval::{
    diversity_score, domain_accuracy, frechet_distance, pairwise_mean, FeatureSet, Probe, ProbeTraining,
};
use gmmunit::gmm::{
    build_simplex_means, interpolate_codes, kl_diag_gaussian, AttributeCode, AttributeGmm, GmmSpec,
};
use gmmunit::nn::ImageBatch;
use gmmunit::training::BatchSource;
use gmmunit_autodiff::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FRECHET_SYMMETRY_TOL: f64 = 1e-8;
const FREQUENCY_TOL: f64 = 0.02;

fn rows(n: usize, d: usize, seed: u64, shift: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| shift + rng.random_range(-1.0..1.0)).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn simplex_is_centred_and_equidistant(z in 1usize..9, k_off in 0usize..8, radius in 0.1f64..10.0) {
        let k = 2 + k_off % z;
        let means = build_simplex_means(k, z, radius).unwrap();
        for m in &means {
            let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - radius).abs() <= 1e-9 * radius);
        }
        for j in 0..z {
            let c: f64 = means.iter().map(|m| m[j]).sum();
            prop_assert!(c.abs() <= 1e-9 * radius);
        }
        let d01: f64 = means[0].iter().zip(&means[1]).map(|(a, b)| (a - b).powi(2)).sum();
        for i in 0..k {
            for j in i + 1..k {
                let d: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).powi(2)).sum();
                prop_assert!((d / d01 - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_match(seed in 0u64..10_000, d in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lv: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sigma = rng.random_range(0.1..3.0);
        prop_assert!(kl_diag_gaussian(&m, &lv, &mu, sigma).unwrap() >= 0.0);
        let lv_match = vec![(sigma * sigma).ln(); d];
        prop_assert!(kl_diag_gaussian(&mu, &lv_match, &mu, sigma).unwrap().abs() < 1e-12);
    }

    #[test]
    fn interpolation_is_affine(seed in 0u64..10_000, t in -2.0f64..3.0) {
        let a = AttributeCode(rows(1, 5, seed, 0.0).remove(0));
        let b = AttributeCode(rows(1, 5, seed + 1, 0.5).remove(0));
        let r = interpolate_codes(&a, &b, t).unwrap();
        prop_assert_eq!(r.extrapolated, !(0.0..=1.0).contains(&t));
        for i in 0..5 {
            prop_assert!((r.code.0[i] - (a.0[i] + t * (b.0[i] - a.0[i]))).abs() < 1e-12);
        }
    }

    #[test]
    fn diversity_ignores_sample_and_input_order(seed in 0u64..10_000, s in 2usize..7, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per_input: Vec<Vec<Vec<f64>>> = (0..n).map(|i| rows(s, 6, seed * 31 + i as u64, 0.0)).collect();
        let base = diversity_score(&per_input).unwrap();
        let mut shuffled = per_input.clone();
        for samples in &mut shuffled {
            samples.shuffle(&mut rng);
        }
        shuffled.shuffle(&mut rng);
        let again = diversity_score(&shuffled).unwrap();
        prop_assert!((base.mean - again.mean).abs() <= 1e-12 * base.mean.max(1.0));
        prop_assert!((base.std - again.std).abs() <= 1e-12 * base.mean.max(1.0));
        let identical = vec![per_input[0][0].clone(); s];
        prop_assert_eq!(pairwise_mean(&identical).unwrap(), 0.0);
    }

    #[test]
    fn frechet_is_symmetric(seed in 0u64..10_000, d in 1usize..6, shift in -2.0f64..2.0) {
        let a = FeatureSet::new("t", rows(40, d, seed, 0.0)).unwrap();
        let b = FeatureSet::new("t", rows(60, d, seed + 7, shift)).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= FRECHET_SYMMETRY_TOL * ab.max(1.0));
    }
}

#[test]
fn mixture_and_component_sampling_frequencies() {
    let gmm = AttributeGmm::new(GmmSpec::categorical(&domain_names(3), 2, 1.0, 0.5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        counts[gmm.sample_mixture(&mut rng).unwrap().0] += 1;
    }
    for c in counts {
        assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < FREQUENCY_TOL, "{counts:?}");
    }
    let mut mean = [0.0; 2];
    for _ in 0..n {
        let z = gmm.sample_component(1, &mut rng).unwrap();
        mean[0] += z.0[0] / n as f64;
        mean[1] += z.0[1] / n as f64;
    }
    let mu = &gmm.components()[1].mean;
    for j in 0..2 {
        assert!((mean[j] - mu[j]).abs() < 4.0 * 0.5 / (n as f64).sqrt());
    }
}

#[test]
fn mirror_frequency() {
    let x = ImageBatch::new(Tensor::zeros(&[10_000, 3, 1, 2])).unwrap();
    let (_, flags) = augment_mirror(&x, &mut ChaCha8Rng::seed_from_u64(8), 0.5);
    let freq = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
    assert!((freq - 0.5).abs() < FREQUENCY_TOL, "{freq}");
}

#[test]
fn toy_build_is_reproducible_and_loads_as_folders() {
    let source: Vec<_> = synth_digits(30, 32, 3).into_iter().map(|(g, _)| g).collect();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = build_toy_domains(&source, 3, 3, a.path()).unwrap();
    build_toy_domains(&source, 3, 3, b.path()).unwrap();
    for name in domain_names(3) {
        for entry in std::fs::read_dir(a.path().join(&name)).unwrap() {
            let p = entry.unwrap().path();
            let q = b.path().join(&name).join(p.file_name().unwrap());
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
        }
    }
    assert_eq!(spec.labels, LabelSource::Folders);
    let loaded = load_dataset(&spec).unwrap();
    assert_eq!(loaded.names, domain_names(3));
    assert_eq!(loaded.train.len() + loaded.test.len(), 30);
    for l in loaded.train.labels.iter().chain(&loaded.test.labels) {
        assert_eq!(l.bits.iter().filter(|&&b| b == 1).count(), 1);
    }
}

#[test]
fn manifest_bits_pass_through() {
    let dir = tempfile::tempdir().unwrap();
    let img = image::RgbImage::from_pixel(8, 8, image::Rgb([255, 0, 128]));
    img.save(dir.path().join("a.png")).unwrap();
    img.save(dir.path().join("b.png")).unwrap();
    std::fs::write(dir.path().join("labels.csv"), "path,smile,hat,blond\na.png,1,0,1\nb.png,0,1,0\n").unwrap();
    let spec = gmmunit::data::DatasetSpec {
        root: dir.path().to_path_buf(),
        labels: LabelSource::Manifest {
            path: "labels.csv".into(),
        },
        height: 8,
        width: 8,
        split_seed: 0,
        test_fraction: 0.0,
    };
    let loaded = load_dataset(&spec).unwrap();
    assert_eq!(loaded.names, ["smile", "hat", "blond"]);
    let bits: Vec<Vec<u8>> = loaded.train.labels.iter().map(|l| l.bits.clone()).collect();
    assert!(bits.contains(&vec![1, 0, 1]) && bits.contains(&vec![0, 1, 0]));
    let (x, _) = loaded.train.batch(&[0]).unwrap();
    let px = &x.values().data()[..1];
    assert_eq!(px[0], 1.0);
}

#[test]
fn domain_accuracy_on_real_and_permuted_targets() {
    let train = toy_dataset(200, 32, 11);
    let test = toy_dataset(100, 32, 12);
    let mut probe = Probe::new(3, 32, 32, 0).unwrap();
    probe
        .train(&train, &ProbeTraining { steps: 200, ..Default::default() })
        .unwrap();
    let real_acc = probe.calibrate(&test).unwrap();
    assert!(real_acc >= 0.95, "probe accuracy {real_acc}");

    let idx: Vec<usize> = (0..test.len()).collect();
    let batches: Vec<ImageBatch<f32>> = idx.chunks(50).map(|c| test.batch(c).unwrap().0).collect();
    let truth: Vec<usize> = test.labels.iter().map(|l| l.hot_index().unwrap()).collect();
    let acc = domain_accuracy(&batches, &truth, &probe).unwrap();
    assert!((acc - real_acc).abs() < 1e-12, "{acc} vs {real_acc}");

    let mut permuted = truth.clone();
    permuted.shuffle(&mut ChaCha8Rng::seed_from_u64(13));
    let chance = domain_accuracy(&batches, &permuted, &probe).unwrap();
    assert!((chance - 1.0 / 3.0).abs() < 0.06, "{chance}");
}
