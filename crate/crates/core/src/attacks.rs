//! One-step sign-gradient input perturbations.
//!
//! [`fgsm`] ascends the label loss; [`ufgsm`] descends the ensemble's mutual
//! information for positive `epsilon` (and ascends it for negative values).
//! Both clip the result back into `[0, 1]`.

use std::io::Write;

use rand::Rng;

use crate::autodiff::Graph;
use crate::ensemble::Ensemble;
use crate::error::{config_err, shape_err, Result};
use crate::nn::{softmax_cross_entropy, DropoutMask, MaskMode, Member};
use crate::tensor::{Real, Tensor};
use crate::uncertainty::grad_mi_with_masks;

/// An l-infinity attack budget together with its normalisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackMagnitude {
    epsilon: f64,
    epsilon_max: f64,
}

impl AttackMagnitude {
    pub fn new(epsilon: f64, epsilon_max: f64) -> Result<Self> {
        if !(epsilon_max > 0.0) {
            return Err(config_err!("epsilon_max must be positive, got {epsilon_max}"));
        }
        if !(0.0..=epsilon_max).contains(&epsilon) {
            return Err(config_err!("epsilon {epsilon} outside [0, {epsilon_max}]"));
        }
        Ok(AttackMagnitude { epsilon, epsilon_max })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn epsilon_max(&self) -> f64 {
        self.epsilon_max
    }

    /// `epsilon / epsilon_max`, in `[0, 1]`.
    pub fn normalized(&self) -> f64 {
        self.epsilon / self.epsilon_max
    }
}

/// One draw `epsilon ~ U(0, epsilon_max)`.
pub fn sample_epsilon<R: Rng>(rng: &mut R, epsilon_max: f64) -> Result<AttackMagnitude> {
    if !(epsilon_max > 0.0) {
        return Err(config_err!("epsilon_max must be positive, got {epsilon_max}"));
    }
    let eps = rng.random::<f64>() * epsilon_max;
    AttackMagnitude::new(eps, epsilon_max)
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `clip(x + step * sign(grad), 0, 1)` with `sign(0) = 0`.
pub fn signed_step<T: Real>(x: &Tensor<T>, grad: &Tensor<T>, step: f64) -> Result<Tensor<T>> {
    if x.shape() != grad.shape() {
        return Err(shape_err!("gradient {:?} does not match input {:?}", grad.shape(), x.shape()));
    }
    let step = T::lit(step);
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&xi, &gi)| (xi + step * sign(gi)).max(T::zero()).min(T::one()))
        .collect();
    Tensor::new(x.shape(), data)
}

/// Gradient of the mean cross-entropy of `member` on `(x, labels)` with respect to `x`.
pub fn cross_entropy_input_grad<T: Real>(
    member: &mut Member<T>,
    x: &Tensor<T>,
    labels: &[usize],
    mode: MaskMode,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.input(x.shape(), x.data().to_vec(), true)?;
    let logits = member.forward(&mut g, xv, mode)?;
    let loss = softmax_cross_entropy(&mut g, logits, labels)?;
    let grads = g.backward_wrt(loss, &[xv])?;
    let grad = grads.wrt(xv).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); x.numel()]);
    Tensor::new(x.shape(), grad)
}

/// `x' = clip(x + eps * sign(grad_x CE), 0, 1)` against one member.
pub fn fgsm<T: Real>(
    member: &mut Member<T>,
    x: &Tensor<T>,
    labels: &[usize],
    eps: AttackMagnitude,
    mode: MaskMode,
) -> Result<Tensor<T>> {
    let grad = cross_entropy_input_grad(member, x, labels, mode)?;
    signed_step(x, &grad, eps.epsilon())
}

/// `x' = clip(x - eps * sign(grad_x U), 0, 1)` under the given frozen masks.
pub fn ufgsm_with_masks<T: Real>(
    ens: &Ensemble<T>,
    x: &Tensor<T>,
    eps: f64,
    masks: &[DropoutMask<T>],
) -> Result<Tensor<T>> {
    let (grad, _) = grad_mi_with_masks(ens, x, masks)?;
    signed_step(x, &grad, -eps)
}

/// Draws `S` masks per member, freezes them, and applies the uncertainty attack.
pub fn ufgsm<T: Real>(ens: &mut Ensemble<T>, x: &Tensor<T>, eps: AttackMagnitude, samples: usize) -> Result<Tensor<T>> {
    let batch = *x.shape().first().ok_or_else(|| shape_err!("input needs a batch axis"))?;
    let masks = ens.sample_masks(samples, batch)?;
    ufgsm_with_masks(ens, x, eps.epsilon(), &masks)
}

/// Debug dump of an attacked batch: `epsilon` as little-endian `f64`
/// followed by the serialised clean and attacked tensors.
pub fn write_attack_dump<W: Write, T: Real>(w: &mut W, x: &Tensor<T>, x_adv: &Tensor<T>, eps: f64) -> Result<()> {
    w.write_all(&eps.to_le_bytes())?;
    x.write_to(w)?;
    x_adv.write_to(w)
}
