//! Ensembles of dropout members and their Monte-Carlo predictive samples.

use std::collections::HashSet;
use std::io::{Read, Write};

use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::error::{config_err, data_err, format_err, shape_err, Result};
use crate::nn::{softmax_rows, DropoutMask, Member};
use crate::tensor::{Real, Tensor};

const CHECKPOINT_MAGIC: &[u8; 8] = b"DENSEMB1";

/// `M` members sharing architecture, class count and input shape.
#[derive(Clone, Debug)]
pub struct Ensemble<T: Real = f32> {
    members: Vec<Member<T>>,
}

/// How [`Ensemble::predict_samples`] treats dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictMode {
    /// `S` fresh dropout masks per member.
    McDropout,
    /// One pass per member with dropout disabled; `S` is forced to 1.
    Deterministic,
}

impl<T: Real> Ensemble<T> {
    pub fn new(arch: &str, input_shape: &[usize], classes: usize, seeds: &[u64]) -> Result<Self> {
        let members = seeds
            .iter()
            .map(|&s| Member::new(arch, input_shape, classes, s))
            .collect::<Result<Vec<_>>>()?;
        Self::from_members(members)
    }

    pub fn from_members(members: Vec<Member<T>>) -> Result<Self> {
        let first = members.first().ok_or_else(|| config_err!("an ensemble needs at least one member"))?;
        for m in &members[1..] {
            if m.classes() != first.classes() || m.input_shape() != first.input_shape() {
                return Err(config_err!("ensemble members disagree on class count or input shape"));
            }
        }
        let seeds: HashSet<u64> = members.iter().map(Member::seed).collect();
        if seeds.len() != members.len() {
            return Err(config_err!("ensemble member seeds must be pairwise distinct"));
        }
        Ok(Ensemble { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Member<T>] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Member<T>] {
        &mut self.members
    }

    pub fn classes(&self) -> usize {
        self.members[0].classes()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.members[0].input_shape()
    }

    pub fn zero_grad(&mut self) {
        self.members.iter_mut().for_each(Member::zero_grad);
    }

    /// Restarts every member's mask stream from `base` and the member index.
    pub fn reseed_masks(&mut self, base: u64) {
        for (i, m) in self.members.iter_mut().enumerate() {
            m.reseed_masks(base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1));
        }
    }

    /// Draws one frozen mask set (`samples` passes over `batch` inputs) per member.
    pub fn sample_masks(&mut self, samples: usize, batch: usize) -> Result<Vec<DropoutMask<T>>> {
        self.members.iter_mut().map(|m| m.sample_mask(samples, batch)).collect()
    }

    /// Softmax outputs of every member and dropout sample, `(S, M, batch, K)`.
    pub fn predict_samples(&mut self, x: &Tensor<T>, samples: usize, mode: PredictMode) -> Result<PredictiveSampleSet<T>> {
        if samples == 0 {
            return Err(config_err!("number of dropout samples must be at least 1"));
        }
        let batch = *x.shape().first().ok_or_else(|| shape_err!("prediction input needs a batch axis"))?;
        let effective = match mode {
            PredictMode::McDropout => samples,
            PredictMode::Deterministic => 1,
        };
        let masks: Vec<Option<DropoutMask<T>>> = match mode {
            PredictMode::McDropout => self.sample_masks(samples, batch)?.into_iter().map(Some).collect(),
            PredictMode::Deterministic => vec![None; self.members.len()],
        };
        self.predict_with_masks(x, effective, &masks)
    }

    /// As [`Ensemble::predict_samples`] but with caller-supplied masks (`None`
    /// means dropout disabled for that member).
    pub fn predict_with_masks(
        &self,
        x: &Tensor<T>,
        samples: usize,
        masks: &[Option<DropoutMask<T>>],
    ) -> Result<PredictiveSampleSet<T>> {
        let batch = x.shape()[0];
        let k = self.classes();
        let per_member: Vec<Vec<T>> = self
            .members
            .par_iter()
            .zip(masks.par_iter())
            .map(|(member, mask)| -> Result<Vec<T>> {
                let mut g = Graph::new();
                let xv = g.input(x.shape(), x.data().to_vec(), false)?;
                let params = member.bind(&mut g, false)?;
                let y = member.forward_bound(&mut g, &params, xv, mask.as_ref())?;
                let rows = g.shape(y)[0];
                if rows != samples * batch {
                    return Err(shape_err!("member produced {rows} rows, expected {}", samples * batch));
                }
                Ok(softmax_rows(g.value(y), k))
            })
            .collect::<Result<_>>()?;
        let m_count = self.members.len();
        let mut probs = vec![T::zero(); samples * m_count * batch * k];
        for (m, p) in per_member.iter().enumerate() {
            for s in 0..samples {
                let src = &p[s * batch * k..(s + 1) * batch * k];
                probs[(s * m_count + m) * batch * k..][..batch * k].copy_from_slice(src);
            }
        }
        Ok(PredictiveSampleSet { probs, samples, members: m_count, batch, classes: k })
    }

    pub fn cast<U: Real>(&self) -> Ensemble<U> {
        Ensemble { members: self.members.iter().map(Member::cast).collect() }
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.members.len() as u32).to_le_bytes())?;
        for m in &self.members {
            m.write_checkpoint(w)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| format_err!("truncated ensemble checkpoint: {e}"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(format_err!("not an ensemble checkpoint"));
        }
        let mut n = [0u8; 4];
        r.read_exact(&mut n).map_err(|e| format_err!("truncated ensemble checkpoint: {e}"))?;
        let n = u32::from_le_bytes(n) as usize;
        let members = (0..n).map(|_| Member::read_checkpoint(r)).collect::<Result<Vec<_>>>()?;
        Self::from_members(members)
    }
}

/// Categorical distributions of shape `(S, M, batch, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSampleSet<T: Real = f32> {
    probs: Vec<T>,
    samples: usize,
    members: usize,
    batch: usize,
    classes: usize,
}

/// Row sums must be within this of 1.
pub const PROB_TOLERANCE: f64 = 1e-6;

impl<T: Real> PredictiveSampleSet<T> {
    pub fn new(probs: Vec<T>, samples: usize, members: usize, batch: usize, classes: usize) -> Result<Self> {
        if probs.len() != samples * members * batch * classes || samples == 0 || members == 0 || classes == 0 {
            return Err(shape_err!(
                "sample set ({samples}, {members}, {batch}, {classes}) with {} values",
                probs.len()
            ));
        }
        for row in probs.chunks_exact(classes) {
            let mut sum = 0.0;
            for &p in row {
                let p = p.as_f64();
                if !(p >= 0.0) || !p.is_finite() {
                    return Err(data_err!("probability {p} is not a valid mass"));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > PROB_TOLERANCE {
                return Err(data_err!("distribution sums to {sum}"));
            }
        }
        Ok(PredictiveSampleSet { probs, samples, members, batch, classes })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.samples, self.members, self.batch, self.classes]
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    /// The distribution for dropout sample `s`, member `m`, batch element `b`.
    pub fn dist(&self, s: usize, m: usize, b: usize) -> &[T] {
        let k = self.classes;
        &self.probs[((s * self.members + m) * self.batch + b) * k..][..k]
    }

    /// Mean over the `S` and `M` axes, `[batch * K]` row-major.
    pub fn mean_distribution(&self) -> Vec<f64> {
        let k = self.classes;
        let n = (self.samples * self.members) as f64;
        let mut out = vec![0.0; self.batch * k];
        for slice in self.probs.chunks_exact(self.batch * k) {
            for (o, &p) in out.iter_mut().zip(slice) {
                *o += p.as_f64();
            }
        }
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Restricts to batch elements `start..start + len`.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.batch {
            return Err(shape_err!("batch slice {start}..{} of {}", start + len, self.batch));
        }
        let k = self.classes;
        let mut probs = Vec::with_capacity(self.samples * self.members * len * k);
        for slice in self.probs.chunks_exact(self.batch * k) {
            probs.extend_from_slice(&slice[start * k..(start + len) * k]);
        }
        Ok(PredictiveSampleSet { probs, samples: self.samples, members: self.members, batch: len, classes: k })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MaskMode;

    #[test]
    fn degenerate_ensemble_is_single_softmax() {
        let mut ens = Ensemble::<f64>::new("mlp2", &[2], 3, &[4]).unwrap();
        let x = Tensor::from_f64(&[2, 2], &[0.1, 0.2, 0.7, 0.3]).unwrap();
        let mut twin = ens.members()[0].clone();
        let set = ens.predict_samples(&x, 1, PredictMode::McDropout).unwrap();
        let logits = twin.logits(&x, MaskMode::SampleNew).unwrap();
        let expected = softmax_rows(logits.data(), 3);
        for (a, b) in set.probs().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_mode_forces_one_sample_without_stream_use() {
        let mut ens = Ensemble::<f32>::new("mlp2", &[2], 3, &[1, 2]).unwrap();
        let before = ens.clone();
        let x = Tensor::from_f64(&[4, 2], &[0.5; 8]).unwrap();
        let set = ens.predict_samples(&x, 7, PredictMode::Deterministic).unwrap();
        assert_eq!(set.shape(), [1, 2, 4, 3]);
        let mut a = ens.members()[0].clone();
        let mut b = before.members()[0].clone();
        assert_eq!(a.logits(&x, MaskMode::SampleNew).unwrap(), b.logits(&x, MaskMode::SampleNew).unwrap());
    }

    #[test]
    fn five_members_ten_samples_shape() {
        let mut ens = Ensemble::<f32>::new("mlp2", &[6], 10, &[1, 2, 3, 4, 5]).unwrap();
        let x = Tensor::<f32>::zeros(&[32, 6]);
        let set = ens.predict_samples(&x, 10, PredictMode::McDropout).unwrap();
        assert_eq!(set.shape(), [10, 5, 32, 10]);
        assert!(ens.predict_samples(&x, 0, PredictMode::McDropout).is_err());
    }

    #[test]
    fn reproducible_given_seeds() {
        let x = Tensor::from_f64(&[3, 2], &[0.1, 0.9, 0.4, 0.4, 0.8, 0.2]).unwrap();
        let a = Ensemble::<f32>::new("mlp2", &[2], 4, &[7, 8, 9]).unwrap().predict_samples(&x, 5, PredictMode::McDropout);
        let b = Ensemble::<f32>::new("mlp2", &[2], 4, &[7, 8, 9]).unwrap().predict_samples(&x, 5, PredictMode::McDropout);
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn duplicate_seeds_rejected() {
        assert!(Ensemble::<f32>::new("mlp2", &[2], 4, &[7, 7]).is_err());
    }

    #[test]
    fn mean_distribution_examples() {
        let set = PredictiveSampleSet::<f64>::new(vec![1.0, 0.0, 0.0, 1.0], 2, 1, 1, 2).unwrap();
        assert_eq!(set.mean_distribution(), vec![0.5, 0.5]);
        let same = PredictiveSampleSet::<f64>::new([0.2, 0.8].repeat(6), 3, 2, 1, 2).unwrap();
        let mean = same.mean_distribution();
        assert!((mean[0] - 0.2).abs() < 1e-15 && (mean[1] - 0.8).abs() < 1e-15);
        assert!(PredictiveSampleSet::<f64>::new(vec![0.6, 0.6], 1, 1, 1, 2).is_err());
        assert!(PredictiveSampleSet::<f64>::new(vec![-0.1, 1.1], 1, 1, 1, 2).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let ens = Ensemble::<f32>::new("mlp2", &[2], 3, &[11, 12]).unwrap();
        let mut buf = Vec::new();
        ens.write_checkpoint(&mut buf).unwrap();
        let back = Ensemble::<f32>::read_checkpoint(&mut buf.as_slice()).unwrap();
        for (a, b) in back.members().iter().zip(ens.members()) {
            assert_eq!(a.params(), b.params());
        }
        assert!(Ensemble::<f32>::read_checkpoint(&mut &b"NOTACKPT"[..]).is_err());
    }
}
