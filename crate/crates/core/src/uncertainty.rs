//! Entropy-based uncertainty over predictive sample sets.
//!
//! All quantities are in nats. The epistemic part is the Monte-Carlo mutual
//! information `U = H[p_mean] - mean_{s,m} H[p_{s,m}]`.

use std::io::Write;

use crate::autodiff::{Graph, Var};
use crate::ensemble::{Ensemble, PredictiveSampleSet, PROB_TOLERANCE};
use crate::error::{data_err, shape_err, Result};
use crate::nn::DropoutMask;
use crate::tensor::{Real, Tensor};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Shannon entropy (nats) of a probability vector, `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > PROB_TOLERANCE {
        return Err(data_err!("not a probability vector (sum {sum})"));
    }
    Ok(entropy_unchecked(p.iter().copied()))
}

fn entropy_unchecked(p: impl Iterator<Item = f64>) -> f64 {
    -p.map(|v| v * v.max(PROB_FLOOR).ln()).sum::<f64>()
}

/// Per-sample decomposition of predictive uncertainty.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyReport {
    /// `epistemic + aleatoric`, i.e. the entropy of the mean distribution.
    pub total: Vec<f64>,
    pub epistemic: Vec<f64>,
    pub aleatoric: Vec<f64>,
    pub classes: usize,
    /// `ln K`.
    pub h_max: f64,
}

fn entropy_of_mean<T: Real>(set: &PredictiveSampleSet<T>) -> Vec<f64> {
    let k = set.classes();
    set.mean_distribution().chunks_exact(k).map(|row| entropy_unchecked(row.iter().copied())).collect()
}

fn mean_member_entropy<T: Real>(set: &PredictiveSampleSet<T>) -> Vec<f64> {
    let [s, m, b, _] = set.shape();
    let n = (s * m) as f64;
    (0..b)
        .map(|bi| {
            let mut acc = 0.0;
            for si in 0..s {
                for mi in 0..m {
                    acc += entropy_unchecked(set.dist(si, mi, bi).iter().map(|v| v.as_f64()));
                }
            }
            acc / n
        })
        .collect()
}

/// Per-sample mutual information.
pub fn mutual_information<T: Real>(set: &PredictiveSampleSet<T>) -> Vec<f64> {
    entropy_of_mean(set).iter().zip(mean_member_entropy(set)).map(|(h, a)| h - a).collect()
}

pub fn decompose<T: Real>(set: &PredictiveSampleSet<T>) -> UncertaintyReport {
    let aleatoric = mean_member_entropy(set);
    let epistemic: Vec<f64> = entropy_of_mean(set).iter().zip(&aleatoric).map(|(h, a)| h - a).collect();
    let total = epistemic.iter().zip(&aleatoric).map(|(e, a)| e + a).collect();
    let classes = set.classes();
    UncertaintyReport { total, epistemic, aleatoric, classes, h_max: (classes as f64).ln() }
}

/// Differentiable mutual information from stacked logits `[n, batch, K]`
/// (`n` = number of member/sample draws, in any order). Returns `[batch]`.
pub fn mutual_information_graph<T: Real>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 {
        return Err(shape_err!("stacked logits must be [draws, batch, K], got {:?}", s));
    }
    let (n, b, k) = (s[0], s[1], s[2]);
    let flat = g.reshape(logits, &[n * b, k])?;
    let logp = g.log_softmax(flat)?;
    let p = g.exp(logp)?;
    let plogp = g.mul(p, logp)?;
    let neg_h = g.sum_rows(plogp)?;
    let neg_h = g.reshape(neg_h, &[n, b])?;
    let neg_aleatoric = g.mean_leading(neg_h)?;
    let p_draws = g.reshape(p, &[n, b * k])?;
    let p_mean = g.mean_leading(p_draws)?;
    let log_mean = g.log_clamped(p_mean, T::lit(PROB_FLOOR))?;
    let t = g.mul(p_mean, log_mean)?;
    let t = g.reshape(t, &[b, k])?;
    let neg_total = g.sum_rows(t)?;
    g.sub(neg_aleatoric, neg_total)
}

/// Per-sample mutual information of the ensemble at `x` under frozen masks,
/// as a graph node `[batch]`. `params[m]` are the bound parameters of member `m`.
pub fn ensemble_mi_graph<T: Real>(
    g: &mut Graph<T>,
    ens: &Ensemble<T>,
    params: &[Vec<Var>],
    x: Var,
    masks: &[DropoutMask<T>],
) -> Result<(Var, Vec<Var>)> {
    let mut parts = Vec::with_capacity(ens.len());
    for ((member, p), mask) in ens.members().iter().zip(params).zip(masks) {
        parts.push(member.forward_bound(g, p, x, Some(mask))?);
    }
    let stacked = g.concat(&parts)?;
    let rows = g.shape(stacked)[0];
    let batch = g.shape(x)[0];
    let k = ens.classes();
    let stacked = g.reshape(stacked, &[rows / batch, batch, k])?;
    Ok((mutual_information_graph(g, stacked)?, parts))
}

/// Mutual information at `x` with the given frozen masks.
pub fn mi_with_masks<T: Real>(ens: &Ensemble<T>, x: &Tensor<T>, masks: &[DropoutMask<T>]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let params = ens.members().iter().map(|m| m.bind(&mut g, false)).collect::<Result<Vec<_>>>()?;
    let xv = g.input(x.shape(), x.data().to_vec(), false)?;
    let (u, _) = ensemble_mi_graph(&mut g, ens, &params, xv, masks)?;
    Ok(g.value(u).iter().map(|v| v.as_f64()).collect())
}

/// Gradient of `sum_batch U(x)` with respect to `x` under frozen masks.
/// Also returns the per-sample `U(x)`.
pub fn grad_mi_with_masks<T: Real>(
    ens: &Ensemble<T>,
    x: &Tensor<T>,
    masks: &[DropoutMask<T>],
) -> Result<(Tensor<T>, Vec<f64>)> {
    let mut g = Graph::new();
    let params = ens.members().iter().map(|m| m.bind(&mut g, false)).collect::<Result<Vec<_>>>()?;
    let xv = g.input(x.shape(), x.data().to_vec(), true)?;
    let (u, _) = ensemble_mi_graph(&mut g, ens, &params, xv, masks)?;
    let total = g.sum(u)?;
    let grads = g.backward_wrt(total, &[xv])?;
    let grad = grads.wrt(xv).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); x.numel()]);
    let values = g.value(u).iter().map(|v| v.as_f64()).collect();
    Ok((Tensor::new(x.shape(), grad)?, values))
}

/// Samples `S` masks per member once, freezes them, and differentiates `U` at `x`.
pub fn grad_mi_wrt_input<T: Real>(ens: &mut Ensemble<T>, x: &Tensor<T>, samples: usize) -> Result<Tensor<T>> {
    let batch = *x.shape().first().ok_or_else(|| shape_err!("input needs a batch axis"))?;
    let masks = ens.sample_masks(samples, batch)?;
    Ok(grad_mi_with_masks(ens, x, &masks)?.0)
}

/// One row of the uncertainty density export.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityRow {
    pub dataset_tag: String,
    pub sample_index: usize,
    pub total: f64,
    pub epistemic: f64,
    pub aleatoric: f64,
}

pub fn density_rows(tag: &str, report: &UncertaintyReport) -> Vec<DensityRow> {
    (0..report.total.len())
        .map(|i| DensityRow {
            dataset_tag: tag.to_string(),
            sample_index: i,
            total: report.total[i],
            epistemic: report.epistemic[i],
            aleatoric: report.aleatoric[i],
        })
        .collect()
}

/// CSV with header `dataset_tag,sample_index,total,epistemic,aleatoric`.
pub fn write_density_csv<W: Write>(w: &mut W, rows: &[DensityRow]) -> Result<()> {
    writeln!(w, "dataset_tag,sample_index,total,epistemic,aleatoric")?;
    for r in rows {
        writeln!(w, "{},{},{:e},{:e},{:e}", r.dataset_tag, r.sample_index, r.total, r.epistemic, r.aleatoric)?;
    }
    Ok(())
}
