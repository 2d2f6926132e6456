use std::fs;

use dropens_core::data::{encode_idx_images, encode_idx_labels, gen_fake_gaussian, gen_synthetic_2d, load_idx, Synthetic2d};
use dropens_core::evaluation::accuracy;
use dropens_core::training::{train_ordinary, AugmentationPolicy, LossConfig, TrainConfig};
use dropens_core::{Ensemble, Error, LayerSpec, MaskMode, Member, Split, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// First two moments of `clip(N(mu, sd), 0, 1)` by quadrature.
fn clipped_normal_moments(mu: f64, sd: f64) -> (f64, f64) {
    let pdf = |x: f64| (-(x - mu).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
    let upper_tail = simpson(pdf, 1.0, 1.0 + 12.0 * sd, 20_000);
    let m1 = simpson(|x| x * pdf(x), 0.0, 1.0, 20_000) + upper_tail;
    let m2 = simpson(|x| x * x * pdf(x), 0.0, 1.0, 20_000) + upper_tail;
    (m1, m2 - m1 * m1)
}

#[test]
fn fake_pixels_match_clipped_normal_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (mu, sd) in [(0.5, 0.25), (0.3, 0.4)] {
        let d = gen_fake_gaussian(1000, &[1, 1000], mu, sd, &mut rng).unwrap();
        let px = d.images().data();
        assert_eq!(px.len(), 1_000_000);
        let mean = px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64;
        let (m, var) = clipped_normal_moments(mu, sd);
        let three_sigma = 3.0 * (var / px.len() as f64).sqrt();
        assert!((mean - m).abs() <= three_sigma, "mean {mean} vs {m} (3 sigma {three_sigma})");
        assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn fake_data_rejects_empty_request() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(gen_fake_gaussian(0, &[1, 2, 2], 0.5, 0.25, &mut rng), Err(Error::Config(_))));
}

#[test]
fn inverted_dropout_preserves_expectation() {
    let mut member = Member::<f64>::from_layers(
        "dropout-only",
        vec![LayerSpec::Flatten, LayerSpec::Dropout { rate: 0.3 }],
        &[5],
        5,
        9,
    )
    .unwrap();
    let x = Tensor::new(&[1, 5], vec![0.2, -1.0, 3.0, 0.7, 1.5]).unwrap();
    let draws = 20_000;
    let mut acc = [0.0; 5];
    for _ in 0..draws {
        let y = member.logits(&x, MaskMode::SampleNew).unwrap();
        for (a, v) in acc.iter_mut().zip(y.data()) {
            *a += v;
        }
    }
    for (a, v) in acc.iter().zip(x.data()) {
        let mean = a / draws as f64;
        assert!((mean - v).abs() <= 0.02 * v.abs(), "{mean} vs {v}");
    }
    let y = member.logits(&x, MaskMode::Disabled).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn two_gaussians_are_linearly_separable() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = gen_synthetic_2d(Synthetic2d::TwoGaussians, 2000, 0.05, &mut rng).unwrap();
    let labels = d.labels().unwrap();
    assert!(d.images().data().iter().all(|v| (0.0..=1.0).contains(v)));

    // nearest class mean, i.e. the closed-form linear rule for equal isotropic covariances
    let mut means = [[0.0f64; 2]; 2];
    for (p, &l) in d.images().data().chunks(2).zip(labels) {
        means[l][0] += p[0] as f64 / 2000.0;
        means[l][1] += p[1] as f64 / 2000.0;
    }
    let dist = |p: &[f32], m: &[f64; 2]| (p[0] as f64 - m[0]).powi(2) + (p[1] as f64 - m[1]).powi(2);
    let correct = d
        .images()
        .data()
        .chunks(2)
        .zip(labels)
        .filter(|(p, &l)| (dist(p, &means[1]) < dist(p, &means[0])) == (l == 1))
        .count();
    assert!(correct as f64 / 4000.0 >= 0.99, "nearest-mean accuracy {}", correct as f64 / 4000.0);

    let mut ens = Ensemble::<f32>::new("mlp2", &[2], 2, &[1]).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 64,
        lr: 1e-2,
        seed: 3,
        augmentation: AugmentationPolicy::NONE,
        samples: 1,
        loss: LossConfig::new(0.0, 0.1, 2).unwrap(),
    };
    train_ordinary(&mut ens, &d, &cfg, None).unwrap();
    let test = gen_synthetic_2d(Synthetic2d::TwoGaussians, 500, 0.05, &mut rng).unwrap();
    let acc = accuracy(&mut ens, &test, 250).unwrap();
    assert!(acc >= 0.99, "mlp2 accuracy {acc}");
}

#[test]
fn idx_files_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 17;
    let images = Tensor::new(&[n, 1, 4, 3], (0..n * 12).map(|_| rng.random_range(0..256) as f32 / 255.0).collect()).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    fs::write(&ip, encode_idx_images(&images).unwrap()).unwrap();
    fs::write(&lp, encode_idx_labels(&labels).unwrap()).unwrap();

    let d = load_idx(&ip, Some(&lp), "rt", Split::Test).unwrap();
    assert_eq!(d.images(), &images);
    assert_eq!(d.labels(), Some(&labels[..]));
    assert_eq!(d.sample_shape(), &[1, 4, 3]);
    let unlabelled = load_idx(&ip, None, "rt", Split::Test).unwrap();
    assert!(unlabelled.labels().is_none());

    let bytes = fs::read(&ip).unwrap();
    fs::write(&ip, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(load_idx(&ip, Some(&lp), "rt", Split::Test), Err(Error::Format(_))));
    fs::write(&lp, encode_idx_labels(&labels[..n - 1]).unwrap()).unwrap();
    fs::write(&ip, &bytes).unwrap();
    assert!(matches!(load_idx(&ip, Some(&lp), "rt", Split::Test), Err(Error::Data(_))));
}
