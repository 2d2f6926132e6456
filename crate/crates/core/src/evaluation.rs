//! OOD scoring, ROC curves, AUC and McClish-standardised partial AUC.

use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{sample_epsilon, ufgsm};
use crate::data::Dataset;
use crate::ensemble::{Ensemble, PredictMode};
use crate::error::{config_err, data_err, shape_err, Error, Result};
use crate::nn::{softmax_rows, MaskMode};
use crate::tensor::Tensor;
use crate::uncertainty::{decompose, UncertaintyReport};

/// Scores (higher = more OOD) with labels `false` = ID, `true` = OOD.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredDataset {
    scores: Vec<f64>,
    labels: Vec<bool>,
    tag: String,
}

impl ScoredDataset {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>, tag: &str) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(shape_err!("{} scores but {} labels", scores.len(), labels.len()));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(data_err!("non-finite OOD score {bad}"));
        }
        Ok(ScoredDataset { scores, labels, tag: tag.to_string() })
    }

    /// ID scores labelled negative, OOD scores positive.
    pub fn from_parts(id: &[f64], ood: &[f64], tag: &str) -> Result<Self> {
        let scores = id.iter().chain(ood).copied().collect();
        let labels = std::iter::repeat_n(false, id.len()).chain(std::iter::repeat_n(true, ood.len())).collect();
        Self::new(scores, labels, tag)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }
}

/// ROC points from `(0, 0)` to `(1, 1)`; `thresholds[i]` is the score cutoff
/// (flag as OOD when `score >= threshold`) producing point `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub thresholds: Vec<f64>,
}

impl RocCurve {
    pub fn len(&self) -> usize {
        self.fpr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fpr.is_empty()
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.fpr.iter().copied().zip(self.tpr.iter().copied())
    }
}

/// One point per distinct score, swept from the highest score down.
pub fn roc_curve(data: &ScoredDataset) -> Result<RocCurve> {
    let (pos, neg) = (data.positives(), data.negatives());
    if pos == 0 || neg == 0 {
        return Err(data_err!("ROC of `{}` needs both ID and OOD samples ({neg} ID, {pos} OOD)", data.tag));
    }
    let mut order: Vec<usize> = (0..data.scores.len()).collect();
    order.sort_by(|&a, &b| data.scores[b].total_cmp(&data.scores[a]));
    let mut curve = RocCurve { fpr: vec![0.0], tpr: vec![0.0], thresholds: vec![f64::INFINITY] };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = data.scores[order[i]];
        while i < order.len() && data.scores[order[i]] == s {
            if data.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.fpr.push(fp as f64 / neg as f64);
        curve.tpr.push(tp as f64 / pos as f64);
        curve.thresholds.push(s);
    }
    Ok(curve)
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    partial_area(curve, 1.0)
}

fn partial_area(curve: &RocCurve, fpr_max: f64) -> f64 {
    let mut area = 0.0;
    for i in 1..curve.len() {
        let (x0, y0, x1, y1) = (curve.fpr[i - 1], curve.tpr[i - 1], curve.fpr[i], curve.tpr[i]);
        if x0 >= fpr_max {
            break;
        }
        if x1 <= fpr_max {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_cut = y0 + (y1 - y0) * (fpr_max - x0) / (x1 - x0);
            area += (fpr_max - x0) * (y0 + y_cut) / 2.0;
            break;
        }
    }
    area
}

/// McClish-standardised partial AUC over `FPR <= fpr_max`: 0.5 for chance,
/// 1 for a perfect ranking.
pub fn standardized_partial_auc(curve: &RocCurve, fpr_max: f64) -> Result<f64> {
    if !(fpr_max > 0.0 && fpr_max <= 1.0) {
        return Err(config_err!("fpr_max must lie in (0, 1], got {fpr_max}"));
    }
    let a = partial_area(curve, fpr_max);
    let a_min = fpr_max * fpr_max / 2.0;
    let a_max = fpr_max;
    Ok(0.5 * (1.0 + (a - a_min) / (a_max - a_min)))
}

/// OOD score to compute from the ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMethod {
    /// Mutual information over `S x M` dropout samples.
    Mi,
    /// Mutual information over the `M` members with dropout disabled.
    De,
    /// `1 - max softmax` of the first member with dropout disabled.
    Sm,
}

impl ScoreMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreMethod::Mi => "mi",
            ScoreMethod::De => "de",
            ScoreMethod::Sm => "sm",
        }
    }
}

impl FromStr for ScoreMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mi" => Ok(ScoreMethod::Mi),
            "de" => Ok(ScoreMethod::De),
            "sm" => Ok(ScoreMethod::Sm),
            other => Err(config_err!("unknown scoring method `{other}` (expected mi, de or sm)")),
        }
    }
}

impl std::fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-sample scores together with the uncertainty decomposition of the
/// predictive samples they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchScores {
    pub scores: Vec<f64>,
    pub report: UncertaintyReport,
}

/// Scores one batch. `sm` uses member 0; its report is that of the single
/// deterministic member.
pub fn score_samples(ens: &mut Ensemble<f32>, x: &Tensor<f32>, method: ScoreMethod, samples: usize) -> Result<BatchScores> {
    if samples == 0 {
        return Err(config_err!("number of dropout samples must be at least 1"));
    }
    match method {
        ScoreMethod::Mi | ScoreMethod::De => {
            let mode = if method == ScoreMethod::Mi { PredictMode::McDropout } else { PredictMode::Deterministic };
            let set = ens.predict_samples(x, samples, mode)?;
            let report = decompose(&set);
            Ok(BatchScores { scores: report.epistemic.clone(), report })
        }
        ScoreMethod::Sm => {
            let member = ens.members_mut().first_mut().ok_or_else(|| config_err!("empty ensemble"))?;
            let k = member.classes();
            let logits = member.logits(x, MaskMode::Disabled)?;
            let probs = softmax_rows(logits.data(), k);
            let scores = probs
                .chunks_exact(k)
                .map(|row| 1.0 - row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64)
                .collect();
            let single = crate::ensemble::PredictiveSampleSet::new(probs, 1, 1, x.shape()[0], k)?;
            Ok(BatchScores { scores, report: decompose(&single) })
        }
    }
}

/// Scores for a whole dataset, evaluated in chunks of `batch_size`.
/// With `attack = Some(epsilon_max)` every chunk is first perturbed by the
/// uncertainty attack with a budget drawn from `U(0, epsilon_max)`.
pub fn score_dataset(
    ens: &mut Ensemble<f32>,
    data: &Dataset,
    method: ScoreMethod,
    samples: usize,
    batch_size: usize,
    attack: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<BatchScores> {
    if batch_size == 0 {
        return Err(config_err!("evaluation batch size must be at least 1"));
    }
    if data.is_empty() {
        return Err(data_err!("dataset `{}` is empty", data.tag()));
    }
    let mut attack = attack;
    let (mut scores, mut total, mut epistemic, mut aleatoric) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut classes = ens.classes();
    let n = data.len();
    for start in (0..n).step_by(batch_size) {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        let (mut x, _) = data.batch(&idx);
        if let Some((eps_max, rng)) = attack.as_mut() {
            let eps = sample_epsilon(*rng, *eps_max)?;
            x = ufgsm(ens, &x, eps, samples)?;
        }
        let b = score_samples(ens, &x, method, samples)?;
        scores.extend(b.scores);
        total.extend(b.report.total);
        epistemic.extend(b.report.epistemic);
        aleatoric.extend(b.report.aleatoric);
        classes = b.report.classes;
    }
    let report = UncertaintyReport { total, epistemic, aleatoric, classes, h_max: (classes as f64).ln() };
    Ok(BatchScores { scores, report })
}

/// Fraction of labelled samples whose argmax of the member-averaged
/// deterministic prediction matches the label.
pub fn accuracy(ens: &mut Ensemble<f32>, data: &Dataset, batch_size: usize) -> Result<f64> {
    let labels = data.labels().ok_or_else(|| data_err!("dataset `{}` has no labels", data.tag()))?;
    if labels.is_empty() || batch_size == 0 {
        return Err(data_err!("accuracy needs a non-empty dataset and batch size"));
    }
    let k = ens.classes();
    let mut correct = 0usize;
    for start in (0..labels.len()).step_by(batch_size) {
        let idx: Vec<usize> = (start..(start + batch_size).min(labels.len())).collect();
        let (x, _) = data.batch(&idx);
        let set = ens.predict_samples(&x, 1, PredictMode::Deterministic)?;
        for (row, &i) in set.mean_distribution().chunks_exact(k).zip(&idx) {
            let pred = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (j, &p)| if p > best.1 { (j, p) } else { best }).0;
            correct += (pred == labels[i]) as usize;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Outcome of one ID-vs-OOD comparison.
#[derive(Clone, Debug)]
pub struct OodEvaluation {
    pub method: ScoreMethod,
    pub attacked: bool,
    pub id_tag: String,
    pub ood_tag: String,
    pub roc: RocCurve,
    pub auc: f64,
    pub pauc: f64,
    pub fpr_max: f64,
    pub id: BatchScores,
    pub ood: BatchScores,
}

/// Metrics from precomputed ID and OOD scores.
pub fn evaluate_scores(id: &[f64], ood: &[f64], fpr_max: f64) -> Result<(RocCurve, f64, f64)> {
    let roc = roc_curve(&ScoredDataset::from_parts(id, ood, "eval")?)?;
    let pauc = standardized_partial_auc(&roc, fpr_max)?;
    Ok((roc.clone(), auc(&roc), pauc))
}

/// Evaluation knobs shared by every comparison in a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub samples: usize,
    pub batch_size: usize,
    pub fpr_max: f64,
    /// Restarts the ensemble's mask streams so results do not depend on prior use.
    pub mask_seed: u64,
    pub attack_seed: u64,
}

/// Scores clean ID data and (optionally attacked) OOD data and computes the
/// ROC, AUC and partial AUC. Only OOD samples are attacked.
pub fn run_ood_eval(
    ens: &mut Ensemble<f32>,
    id_test: &Dataset,
    ood_test: &Dataset,
    method: ScoreMethod,
    attack_epsilon_max: Option<f64>,
    settings: &EvalSettings,
) -> Result<OodEvaluation> {
    ens.reseed_masks(settings.mask_seed);
    let id = score_dataset(ens, id_test, method, settings.samples, settings.batch_size, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.attack_seed);
    let attack = attack_epsilon_max.map(|e| (e, &mut rng));
    let ood = score_dataset(ens, ood_test, method, settings.samples, settings.batch_size, attack)?;
    let (roc, auc, pauc) = evaluate_scores(&id.scores, &ood.scores, settings.fpr_max)?;
    Ok(OodEvaluation {
        method,
        attacked: attack_epsilon_max.is_some(),
        id_tag: id_test.tag().to_string(),
        ood_tag: ood_test.tag().to_string(),
        roc,
        auc,
        pauc,
        fpr_max: settings.fpr_max,
        id,
        ood,
    })
}

/// CSV with header `fpr,tpr,threshold`.
pub fn write_roc_csv<W: Write>(w: &mut W, curve: &RocCurve) -> Result<()> {
    writeln!(w, "fpr,tpr,threshold")?;
    for ((f, t), th) in curve.fpr.iter().zip(&curve.tpr).zip(&curve.thresholds) {
        writeln!(w, "{f:e},{t:e},{th:e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scored(scores: &[f64], labels: &[u8]) -> ScoredDataset {
        ScoredDataset::new(scores.to_vec(), labels.iter().map(|&l| l == 1).collect(), "t").unwrap()
    }

    #[test]
    fn hand_traced_curve() {
        let c = roc_curve(&scored(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0])).unwrap();
        let pts: Vec<(f64, f64)> = c.points().collect();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]);
        assert_eq!(auc(&c), 0.75);
    }

    #[test]
    fn degenerate_curves() {
        let perfect = roc_curve(&scored(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0])).unwrap();
        assert!(perfect.points().any(|p| p == (0.0, 1.0)));
        assert_eq!(auc(&perfect), 1.0);
        for f in [0.01, 0.3, 1.0] {
            assert_eq!(standardized_partial_auc(&perfect, f).unwrap(), 1.0);
        }
        let flat = roc_curve(&scored(&[0.5; 6], &[1, 0, 1, 0, 0, 1])).unwrap();
        assert_eq!(flat.points().collect::<Vec<_>>(), vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(auc(&flat), 0.5);
        for f in [0.01, 0.5, 1.0] {
            assert!((standardized_partial_auc(&flat, f).unwrap() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(roc_curve(&scored(&[0.1, 0.2], &[1, 1])), Err(Error::Data(_))));
        assert!(ScoredDataset::new(vec![f64::NAN], vec![true], "x").is_err());
        let c = roc_curve(&scored(&[0.1, 0.2], &[0, 1])).unwrap();
        for f in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(standardized_partial_auc(&c, f), Err(Error::Config(_))));
        }
        assert!("xx".parse::<ScoreMethod>().is_err());
        assert_eq!("de".parse::<ScoreMethod>().unwrap(), ScoreMethod::De);
    }

    #[test]
    fn full_range_partial_auc_is_auc() {
        let c = roc_curve(&scored(&[0.3, 0.8, 0.8, 0.1, 0.5], &[0, 1, 0, 0, 1])).unwrap();
        assert!((standardized_partial_auc(&c, 1.0).unwrap() - auc(&c)).abs() < 1e-15);
    }

    #[test]
    fn scoring_examples() {
        // a single member without dropout sampled once has zero mutual information
        let mut ens = Ensemble::<f32>::new("mlp2", &[2], 10, &[1]).unwrap();
        let x = Tensor::from_f64(&[3, 2], &[0.1, 0.2, 0.5, 0.5, 0.9, 0.3]).unwrap();
        let s = score_samples(&mut ens, &x, ScoreMethod::Mi, 1).unwrap();
        assert!(s.scores.iter().all(|&v| v.abs() < 1e-6));
        // zero final layer: uniform softmax gives 1 - 1/K
        let last = ens.members()[0].params().len() - 2;
        for p in &mut ens.members_mut()[0].params_mut()[last..] {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let s = score_samples(&mut ens, &x, ScoreMethod::Sm, 10).unwrap();
        assert!(s.scores.iter().all(|&v| (v - 0.9).abs() < 1e-6));
        assert!(score_samples(&mut ens, &x, ScoreMethod::Mi, 0).is_err());
    }

    #[test]
    fn dropout_free_de_equals_mi() {
        let layers = vec![
            crate::nn::LayerSpec::Linear { inputs: 2, outputs: 8 },
            crate::nn::LayerSpec::Relu,
            crate::nn::LayerSpec::Linear { inputs: 8, outputs: 3 },
        ];
        let members = (0..3)
            .map(|s| crate::nn::Member::from_layers("plain", layers.clone(), &[2], 3, s).unwrap())
            .collect();
        let mut ens = Ensemble::from_members(members).unwrap();
        let x = Tensor::from_f64(&[2, 2], &[0.1, 0.7, 0.4, 0.2]).unwrap();
        let de = score_samples(&mut ens, &x, ScoreMethod::De, 1).unwrap();
        let mi = score_samples(&mut ens, &x, ScoreMethod::Mi, 7).unwrap();
        for (a, b) in de.scores.iter().zip(&mi.scores) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn roc_csv_layout() {
        let c = roc_curve(&scored(&[0.9, 0.1], &[1, 0])).unwrap();
        let mut out = Vec::new();
        write_roc_csv(&mut out, &c).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next(), Some("fpr,tpr,threshold"));
        assert_eq!(text.lines().count(), 1 + c.len());
    }
}
