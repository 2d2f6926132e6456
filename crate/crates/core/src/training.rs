//! Ordinary, FGSM-adversarial and uncertainty-adversarial training.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{cross_entropy_input_grad, sample_epsilon, signed_step, ufgsm_with_masks};
use crate::autodiff::{Graph, Var};
use crate::data::{batch_iter, Dataset};
use crate::ensemble::Ensemble;
use crate::error::{config_err, data_err, shape_err, Error, Result};
use crate::nn::{softmax_cross_entropy, DropoutMask, MaskMode, Member};
use crate::tensor::{Real, Tensor};
use crate::uncertainty::ensemble_mi_graph;

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Reject non-finite gradients with a numerics error.
    pub checked: bool,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, checked: false, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn checked(mut self, flag: bool) -> Self {
        self.checked = flag;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err!("{} parameters but {} gradients", params.len(), grads.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(shape_err!("gradient of length {} for parameter {:?}", g.len(), p.shape()));
            }
        }
        if self.checked && grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!("non-finite gradient at Adam step {}", self.step + 1)));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() || self.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(shape_err!("parameter layout changed between Adam steps"));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// How the attacked-vs-clean uncertainty gap is aggregated over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscrepancyMode {
    /// `mean_i (d_i - e)^2`.
    #[default]
    PerSample,
    /// `(mean_i d_i - e)^2`.
    BatchMean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub beta: f64,
    pub epsilon_max: f64,
    pub classes: usize,
    pub h_max: f64,
    pub mode: DiscrepancyMode,
}

impl LossConfig {
    pub fn new(beta: f64, epsilon_max: f64, classes: usize) -> Result<Self> {
        if !(beta >= 0.0) {
            return Err(config_err!("beta must be non-negative, got {beta}"));
        }
        if !(epsilon_max > 0.0) {
            return Err(config_err!("epsilon_max must be positive, got {epsilon_max}"));
        }
        if classes < 2 {
            return Err(config_err!("need at least two classes, got {classes}"));
        }
        Ok(LossConfig { beta, epsilon_max, classes, h_max: (classes as f64).ln(), mode: DiscrepancyMode::PerSample })
    }

    pub fn with_mode(mut self, mode: DiscrepancyMode) -> Self {
        self.mode = mode;
        self
    }
}

/// `(U(x'_i) - U(x_i)) / H_max` from per-sample uncertainties.
pub fn uncertainty_discrepancy(u_clean: &[f64], u_attacked: &[f64], h_max: f64) -> Result<Vec<f64>> {
    if u_clean.len() != u_attacked.len() {
        return Err(shape_err!("{} clean vs {} attacked uncertainties", u_clean.len(), u_attacked.len()));
    }
    Ok(u_clean.iter().zip(u_attacked).map(|(c, a)| (a - c) / h_max).collect())
}

/// Graph nodes of one uncertainty-adversarial objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct UatTerms {
    pub loss: Var,
    pub cross_entropy: Var,
    /// `beta` times the squared discrepancy term.
    pub uncertainty: Var,
    /// Per-sample `U(x)`.
    pub u_clean: Var,
}

fn uat_terms_from_clean<T: Real>(
    g: &mut Graph<T>,
    ens: &Ensemble<T>,
    params: &[Vec<Var>],
    u_clean: Var,
    member_logits: &[Var],
    x_adv: &Tensor<T>,
    labels: &[usize],
    eps_norm: f64,
    masks: &[DropoutMask<T>],
    cfg: &LossConfig,
) -> Result<UatTerms> {
    let batch = labels.len();
    let mut ce_sum = None;
    for &logits in member_logits {
        // cross-entropy under the first dropout sample's mask
        let first = g.slice_rows(logits, 0, batch)?;
        let ce = softmax_cross_entropy(g, first, labels)?;
        ce_sum = Some(match ce_sum {
            None => ce,
            Some(acc) => g.add(acc, ce)?,
        });
    }
    let ce_sum = ce_sum.ok_or_else(|| config_err!("ensemble has no members"))?;
    let cross_entropy = g.scale(ce_sum, T::lit(1.0 / member_logits.len() as f64))?;

    let xa = g.input(x_adv.shape(), x_adv.data().to_vec(), false)?;
    let (u_adv, _) = ensemble_mi_graph(g, ens, params, xa, masks)?;
    let diff = g.sub(u_adv, u_clean)?;
    let delta = g.scale(diff, T::lit(1.0 / cfg.h_max))?;
    let gap = match cfg.mode {
        DiscrepancyMode::PerSample => {
            let d = g.add_scalar(delta, T::lit(-eps_norm))?;
            let sq = g.square(d)?;
            g.mean(sq)?
        }
        DiscrepancyMode::BatchMean => {
            let m = g.mean(delta)?;
            let d = g.add_scalar(m, T::lit(-eps_norm))?;
            g.square(d)?
        }
    };
    let uncertainty = g.scale(gap, T::lit(cfg.beta))?;
    let loss = g.add(cross_entropy, uncertainty)?;
    Ok(UatTerms { loss, cross_entropy, uncertainty, u_clean })
}

/// The uncertainty-adversarial objective with the attacked batch `x_adv`
/// supplied (and therefore held constant):
/// `mean_m CE_m(x, y) + beta * mean_i (dU_i / H_max - eps_norm)^2`.
///
/// `params[m]` are member `m`'s bound parameters; `masks` are frozen and
/// shared by the clean and attacked evaluations. Cross-entropy uses the
/// first dropout sample of each member.
pub fn uat_objective<T: Real>(
    g: &mut Graph<T>,
    ens: &Ensemble<T>,
    params: &[Vec<Var>],
    x: Var,
    x_adv: &Tensor<T>,
    labels: &[usize],
    eps_norm: f64,
    masks: &[DropoutMask<T>],
    cfg: &LossConfig,
) -> Result<UatTerms> {
    if g.shape(x) != x_adv.shape() {
        return Err(shape_err!("attacked batch {:?} vs clean {:?}", x_adv.shape(), g.shape(x)));
    }
    let (u_clean, logits) = ensemble_mi_graph(g, ens, params, x, masks)?;
    uat_terms_from_clean(g, ens, params, u_clean, &logits, x_adv, labels, eps_norm, masks, cfg)
}

/// Values of one uncertainty-adversarial loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct UatValue {
    pub loss: f64,
    pub cross_entropy: f64,
    pub uncertainty: f64,
}

/// Draws masks, crafts the attacked batch with budget `eps`, and evaluates
/// the objective without updating anything.
pub fn uat_loss<T: Real>(
    ens: &mut Ensemble<T>,
    x: &Tensor<T>,
    labels: &[usize],
    eps: crate::attacks::AttackMagnitude,
    cfg: &LossConfig,
    samples: usize,
) -> Result<UatValue> {
    let masks = ens.sample_masks(samples, labels.len())?;
    let x_adv = ufgsm_with_masks(ens, x, eps.epsilon(), &masks)?;
    let mut g = Graph::new();
    let params = ens.members().iter().map(|m| m.bind(&mut g, false)).collect::<Result<Vec<_>>>()?;
    let xv = g.input(x.shape(), x.data().to_vec(), false)?;
    let t = uat_objective(&mut g, ens, &params, xv, &x_adv, labels, eps.normalized(), &masks, cfg)?;
    Ok(UatValue {
        loss: g.value(t.loss)[0].as_f64(),
        cross_entropy: g.value(t.cross_entropy)[0].as_f64(),
        uncertainty: g.value(t.uncertainty)[0].as_f64(),
    })
}

/// Zero padding, random crop, rotation and optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub pad: usize,
    pub rotation_max_deg: f64,
    pub hflip: bool,
}

impl AugmentationPolicy {
    pub const NONE: AugmentationPolicy = AugmentationPolicy { pad: 0, rotation_max_deg: 0.0, hflip: false };

    /// Pad 2, crop, rotate up to 10 degrees; flips only for natural-image data.
    pub fn digits() -> Self {
        AugmentationPolicy { pad: 2, rotation_max_deg: 10.0, hflip: false }
    }

    pub fn is_identity(&self) -> bool {
        self.pad == 0 && self.rotation_max_deg == 0.0 && !self.hflip
    }
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self::digits()
    }
}

/// Applies `policy` independently to every image of an `[n, C, H, W]` batch.
/// Batches of other ranks are returned unchanged.
pub fn augment<R: Rng>(x: &Tensor<f32>, policy: &AugmentationPolicy, rng: &mut R) -> Result<Tensor<f32>> {
    let s = x.shape();
    if s.len() != 4 || policy.is_identity() {
        return Ok(x.clone());
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let mut out = vec![0f32; x.numel()];
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    for i in 0..n {
        let dy = if policy.pad > 0 { rng.random_range(0..=2 * policy.pad) } else { 0 } as isize - policy.pad as isize;
        let dx = if policy.pad > 0 { rng.random_range(0..=2 * policy.pad) } else { 0 } as isize - policy.pad as isize;
        let theta = if policy.rotation_max_deg > 0.0 {
            rng.random_range(-policy.rotation_max_deg..=policy.rotation_max_deg).to_radians()
        } else {
            0.0
        };
        let flip = policy.hflip && rng.random_bool(0.5);
        let (sin, cos) = theta.sin_cos();
        for y in 0..h {
            for xo in 0..w {
                let xf = if flip { w - 1 - xo } else { xo };
                // inverse rotation about the image centre, nearest neighbour
                let (ry, rx) = (y as f64 - cy, xf as f64 - cx);
                let sy = (cos * ry - sin * rx + cy).round() as isize + dy;
                let sx = (sin * ry + cos * rx + cx).round() as isize + dx;
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                for ch in 0..c {
                    let base = (i * c + ch) * plane;
                    out[base + y * w + xo] = x.data()[base + sy as usize * w + sx as usize];
                }
            }
        }
    }
    Tensor::new(s, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seeds data order, augmentation and attack budgets.
    pub seed: u64,
    pub augmentation: AugmentationPolicy,
    /// Dropout samples per member in the uncertainty-adversarial loss.
    pub samples: usize,
    pub loss: LossConfig,
}

impl TrainConfig {
    fn validate(&self, data: &Dataset) -> Result<Vec<usize>> {
        if data.is_empty() {
            return Err(data_err!("training dataset `{}` is empty", data.tag()));
        }
        if self.batch_size == 0 || self.samples == 0 {
            return Err(config_err!("batch_size and samples must be at least 1"));
        }
        let labels = data.labels().ok_or_else(|| data_err!("training dataset `{}` has no labels", data.tag()))?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.loss.classes) {
            return Err(data_err!("label {bad} out of range for {} classes", self.loss.classes));
        }
        Ok(labels.to_vec())
    }
}

/// Per-epoch training summary, written as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub regime: String,
    pub epoch: usize,
    pub mean_cross_entropy: f64,
    /// `None` for regimes without an uncertainty term.
    pub mean_uncertainty_term: Option<f64>,
    pub wall_time_s: f64,
}

fn log_epoch(log: &mut Option<&mut dyn Write>, record: &EpochRecord) -> Result<()> {
    if let Some(w) = log.as_mut() {
        serde_json::to_writer(&mut **w, record).map_err(|e| Error::Io(e.into()))?;
        writeln!(w)?;
    }
    log::info!(
        "{} epoch {}: ce {:.4} unc {:?} ({:.1}s)",
        record.regime,
        record.epoch,
        record.mean_cross_entropy,
        record.mean_uncertainty_term,
        record.wall_time_s
    );
    Ok(())
}

fn member_stream(seed: u64, member_seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ member_seed.rotate_left(17));
    rng.set_stream(2);
    rng
}

/// One cross-entropy step of a single member under a fresh dropout mask.
fn member_ce_step(member: &mut Member<f32>, adam: &mut AdamState<f32>, x: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let mask = member.sample_mask(1, labels.len())?;
    let mut g = Graph::new();
    let params = member.bind(&mut g, true)?;
    let xv = g.input(x.shape(), x.data().to_vec(), false)?;
    let logits = member.forward_bound(&mut g, &params, xv, Some(&mask))?;
    let loss = softmax_cross_entropy(&mut g, logits, labels)?;
    let grads = g.backward(loss)?;
    let grads: Vec<Vec<f32>> = params
        .iter()
        .zip(member.params())
        .map(|(&v, p)| grads.wrt(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let mut refs: Vec<&mut Tensor<f32>> = member.params_mut().iter_mut().collect();
    adam.step(&mut refs, &grads)?;
    Ok(g.value(loss)[0] as f64)
}

struct MemberState {
    adam: AdamState<f32>,
    rng: ChaCha8Rng,
}

fn train_independent(
    ens: &mut Ensemble<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    adversarial: bool,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<EpochRecord>> {
    let labels = cfg.validate(data)?;
    let regime = if adversarial { "lat" } else { "ordinary" };
    let mut states: Vec<MemberState> = ens
        .members()
        .iter()
        .map(|m| MemberState { adam: AdamState::new(cfg.lr).checked(true), rng: member_stream(cfg.seed, m.seed()) })
        .collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let results: Vec<(f64, usize)> = ens
            .members_mut()
            .par_iter_mut()
            .zip(states.par_iter_mut())
            .map(|(member, st)| -> Result<(f64, usize)> {
                let mut ce_total = 0.0;
                let mut steps = 0;
                for idx in batch_iter(data.len(), cfg.batch_size, true, &mut st.rng)? {
                    let (x, _) = data.batch(&idx);
                    let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                    let x = augment(&x, &cfg.augmentation, &mut st.rng)?;
                    ce_total += member_ce_step(member, &mut st.adam, &x, &y)?;
                    steps += 1;
                    if adversarial {
                        let eps = sample_epsilon(&mut st.rng, cfg.loss.epsilon_max)?;
                        let grad = cross_entropy_input_grad(member, &x, &y, MaskMode::SampleNew)?;
                        let x_adv = signed_step(&x, &grad, eps.epsilon())?;
                        ce_total += member_ce_step(member, &mut st.adam, &x_adv, &y)?;
                        steps += 1;
                    }
                }
                Ok((ce_total, steps))
            })
            .collect::<Result<_>>()?;
        let (ce, steps) = results.iter().fold((0.0, 0), |(a, n), (c, s)| (a + c, n + s));
        let record = EpochRecord {
            regime: regime.to_string(),
            epoch: epoch + 1,
            mean_cross_entropy: ce / steps.max(1) as f64,
            mean_uncertainty_term: None,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log_epoch(&mut log, &record)?;
        records.push(record);
    }
    Ok(records)
}

/// Each member trained independently on shuffled, augmented clean batches.
pub fn train_ordinary(
    ens: &mut Ensemble<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<Vec<EpochRecord>> {
    train_independent(ens, data, cfg, false, log)
}

/// Each member takes a clean step and then an FGSM step (budget drawn per
/// batch from `U(0, epsilon_max)`) on every batch.
pub fn train_lat(
    ens: &mut Ensemble<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<Vec<EpochRecord>> {
    train_independent(ens, data, cfg, true, log)
}

/// One joint update of the uncertainty-adversarial objective. Returns the
/// cross-entropy and uncertainty-term values before the update.
pub fn uat_step(
    ens: &mut Ensemble<f32>,
    adam: &mut AdamState<f32>,
    x: &Tensor<f32>,
    labels: &[usize],
    eps: crate::attacks::AttackMagnitude,
    cfg: &LossConfig,
    samples: usize,
) -> Result<(f64, f64)> {
    let masks = ens.sample_masks(samples, labels.len())?;
    let mut g = Graph::new();
    let params = ens.members().iter().map(|m| m.bind(&mut g, true)).collect::<Result<Vec<_>>>()?;
    let xv = g.input(x.shape(), x.data().to_vec(), true)?;
    let (u_clean, logits) = ensemble_mi_graph(&mut g, ens, &params, xv, &masks)?;

    // the attack reuses the clean forward pass; its result enters as a constant
    let u_sum = g.sum(u_clean)?;
    let gx = g.backward_wrt(u_sum, &[xv])?;
    let grad = Tensor::new(x.shape(), gx.wrt(xv).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]))?;
    drop(gx);
    let x_adv = signed_step(x, &grad, -eps.epsilon())?;

    let t = uat_terms_from_clean(&mut g, ens, &params, u_clean, &logits, &x_adv, labels, eps.normalized(), &masks, cfg)?;
    let grads = g.backward(t.loss)?;
    let flat: Vec<Vec<f32>> = params
        .iter()
        .flatten()
        .map(|&v| grads.wrt(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        .collect();
    let mut refs: Vec<&mut Tensor<f32>> = ens.members_mut().iter_mut().flat_map(|m| m.params_mut().iter_mut()).collect();
    adam.step(&mut refs, &flat)?;
    Ok((g.value(t.cross_entropy)[0] as f64, g.value(t.uncertainty)[0] as f64))
}

/// Joint training of all members on `mean CE + beta * discrepancy`, with a
/// single Adam instance over every parameter.
pub fn train_uat(
    ens: &mut Ensemble<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<EpochRecord>> {
    let labels = cfg.validate(data)?;
    let mut adam = AdamState::new(cfg.lr).checked(true);
    let mut rng = member_stream(cfg.seed, 0x5541_5400);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let (mut ce, mut unc, mut steps) = (0.0, 0.0, 0usize);
        for idx in batch_iter(data.len(), cfg.batch_size, true, &mut rng)? {
            let (x, _) = data.batch(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let x = augment(&x, &cfg.augmentation, &mut rng)?;
            let eps = sample_epsilon(&mut rng, cfg.loss.epsilon_max)?;
            let (c, u) = uat_step(ens, &mut adam, &x, &y, eps, &cfg.loss, cfg.samples)?;
            ce += c;
            unc += u;
            steps += 1;
        }
        let record = EpochRecord {
            regime: "uat".to_string(),
            epoch: epoch + 1,
            mean_cross_entropy: ce / steps as f64,
            mean_uncertainty_term: Some(unc / steps as f64),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log_epoch(&mut log, &record)?;
        records.push(record);
    }
    Ok(records)
}
