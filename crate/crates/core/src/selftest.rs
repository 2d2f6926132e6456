//! Quick randomised property checks, runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attacks::ufgsm_with_masks;
use crate::ensemble::{Ensemble, PredictiveSampleSet};
use crate::evaluation::{auc, roc_curve, standardized_partial_auc, ScoredDataset};
use crate::gradcheck::finite_difference_check;
use crate::tensor::Tensor;
use crate::uncertainty::{decompose, grad_mi_with_masks};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, failures: usize, trials: usize) -> Check {
    Check { name, passed: failures == 0, detail: format!("{failures} failures in {trials} trials") }
}

fn random_scores(rng: &mut ChaCha8Rng) -> ScoredDataset {
    let n = rng.random_range(2..60);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    labels[0] = false;
    labels[1] = true;
    let scores = (0..n).map(|_| (rng.random_range(0..12) as f64) / 4.0).collect();
    ScoredDataset::new(scores, labels, "selftest").expect("valid scores")
}

fn roc_properties(rng: &mut ChaCha8Rng, trials: usize) -> Check {
    let mut failures = 0;
    for _ in 0..trials {
        let d = random_scores(rng);
        let c = roc_curve(&d).expect("two classes");
        let monotone = c.fpr.windows(2).all(|w| w[0] <= w[1]) && c.tpr.windows(2).all(|w| w[0] <= w[1]);
        let ends = c.points().next() == Some((0.0, 0.0)) && c.points().last() == Some((1.0, 1.0));
        let a = auc(&c);
        let full = standardized_partial_auc(&c, 1.0).expect("valid fpr_max");
        let flipped = ScoredDataset::new(d.scores().to_vec(), d.labels().iter().map(|l| !l).collect(), "flip").unwrap();
        let a_flip = auc(&roc_curve(&flipped).unwrap());
        let shifted = ScoredDataset::new(d.scores().iter().map(|s| (s * 3.0).exp()).collect(), d.labels().to_vec(), "exp").unwrap();
        let a_shift = auc(&roc_curve(&shifted).unwrap());
        if !(monotone && ends && (a - full).abs() < 1e-12 && (a + a_flip - 1.0).abs() < 1e-12 && (a - a_shift).abs() < 1e-12) {
            failures += 1;
        }
    }
    check("roc monotonicity, label swap and monotone invariance", failures, trials)
}

fn random_set(rng: &mut ChaCha8Rng) -> PredictiveSampleSet<f64> {
    let (s, m, b, k) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..4), rng.random_range(2..8));
    let mut probs = Vec::with_capacity(s * m * b * k);
    for _ in 0..s * m * b {
        let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(3)).collect();
        let z: f64 = raw.iter().sum::<f64>().max(1e-300);
        probs.extend(raw.iter().map(|v| v / z));
    }
    PredictiveSampleSet::new(probs, s, m, b, k).expect("normalised")
}

fn uncertainty_bounds(rng: &mut ChaCha8Rng, trials: usize) -> Check {
    let mut failures = 0;
    for _ in 0..trials {
        let r = decompose(&random_set(rng));
        for i in 0..r.total.len() {
            let ok = r.epistemic[i] >= -1e-12
                && r.epistemic[i] <= r.h_max + 1e-6
                && r.total[i] == r.epistemic[i] + r.aleatoric[i];
            failures += (!ok) as usize;
        }
    }
    check("mutual information bounds and additivity", failures, trials)
}

fn attack_contracts(rng: &mut ChaCha8Rng, trials: usize) -> Check {
    let mut failures = 0;
    let mut ens = Ensemble::<f64>::new("mlp2", &[4], 3, &[1, 2]).expect("mlp2");
    for _ in 0..trials {
        let x = Tensor::new(&[3, 4], (0..12).map(|_| rng.random::<f64>()).collect()).unwrap();
        let eps = rng.random_range(0.0..0.1);
        let masks = ens.sample_masks(3, 3).unwrap();
        let (grad, _) = grad_mi_with_masks(&ens, &x, &masks).unwrap();
        let adv = ufgsm_with_masks(&ens, &x, eps, &masks).unwrap();
        let bounded = adv.data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() <= eps + 1e-15 && (0.0..=1.0).contains(a));
        let descent: f64 = grad.data().iter().map(|g| -g.signum() * g).sum();
        failures += (!(bounded && descent <= 0.0)) as usize;
    }
    check("uncertainty attack bounds and descent direction", failures, trials)
}

fn gradient_fidelity(rng: &mut ChaCha8Rng, trials: usize) -> Check {
    let mut failures = 0;
    for _ in 0..trials {
        let x = Tensor::new(&[2, 3], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = finite_difference_check(
            |g, v| {
                let wv = g.constant(&[3, 3], w.clone())?;
                let y = g.matmul(v, wv)?;
                let p = g.log_softmax(y)?;
                let e = g.exp(p)?;
                let s = g.mul(e, p)?;
                g.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        failures += (err > 1e-6) as usize;
    }
    check("autodiff vs central differences", failures, trials)
}

/// Runs every check with a fixed seed.
pub fn run_all() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    vec![
        roc_properties(&mut rng, 200),
        uncertainty_bounds(&mut rng, 500),
        attack_contracts(&mut rng, 50),
        gradient_fidelity(&mut rng, 50),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run_all() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
