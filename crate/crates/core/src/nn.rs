//! Layers, the SCNN and MLP architectures, and dropout members.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, data_err, format_err, shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear { inputs: usize, outputs: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, pad: usize },
    Relu,
    MaxPool2x2,
    Dropout { rate: f64 },
    Flatten,
}

/// Layer stack for a named architecture.
///
/// * `scnn`: two conv(3x3, pad 1)/relu/maxpool blocks with 16 and 32 channels,
///   flatten, dropout 0.25, linear 128, relu, dropout 0.5, linear K.
/// * `mlp2`: flatten, linear 64, relu, dropout 0.5, linear K.
pub fn build_architecture(name: &str, input_shape: &[usize], classes: usize) -> Result<Vec<LayerSpec>> {
    if classes < 2 {
        return Err(config_err!("architecture needs at least 2 classes, got {classes}"));
    }
    let layers = match name {
        "scnn" => {
            if input_shape.len() != 3 {
                return Err(config_err!("scnn expects a CxHxW input shape, got {:?}", input_shape));
            }
            let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
            let flat = 32 * (h / 4) * (w / 4);
            vec![
                LayerSpec::Conv2d { in_channels: c, out_channels: 16, kernel: 3, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::Conv2d { in_channels: 16, out_channels: 32, kernel: 3, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::Flatten,
                LayerSpec::Dropout { rate: 0.25 },
                LayerSpec::Linear { inputs: flat, outputs: 128 },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Linear { inputs: 128, outputs: classes },
            ]
        }
        "mlp2" => {
            let flat: usize = input_shape.iter().product();
            vec![
                LayerSpec::Flatten,
                LayerSpec::Linear { inputs: flat, outputs: 64 },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Linear { inputs: 64, outputs: classes },
            ]
        }
        other => return Err(config_err!("unknown architecture `{other}` (expected scnn or mlp2)")),
    };
    infer_shapes(&layers, input_shape)?;
    Ok(layers)
}

/// Per-sample activation shape after each layer, validating that the stack composes.
pub fn infer_shapes(layers: &[LayerSpec], input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut cur = input_shape.to_vec();
    let mut out = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        cur = match *layer {
            LayerSpec::Linear { inputs, outputs } => {
                if cur != [inputs] {
                    return Err(shape_err!("layer {i}: linear expects [{inputs}], got {:?}", cur));
                }
                vec![outputs]
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, pad } => {
                if cur.len() != 3 || cur[0] != in_channels || cur[1] + 2 * pad < kernel || cur[2] + 2 * pad < kernel {
                    return Err(shape_err!("layer {i}: conv2d({in_channels}->{out_channels}) on {:?}", cur));
                }
                vec![out_channels, cur[1] + 2 * pad - kernel + 1, cur[2] + 2 * pad - kernel + 1]
            }
            LayerSpec::MaxPool2x2 => {
                if cur.len() != 3 || !cur[1].is_multiple_of(2) || !cur[2].is_multiple_of(2) {
                    return Err(shape_err!("layer {i}: maxpool2x2 on {:?}", cur));
                }
                vec![cur[0], cur[1] / 2, cur[2] / 2]
            }
            LayerSpec::Flatten => vec![cur.iter().product()],
            LayerSpec::Relu => cur,
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(config_err!("layer {i}: dropout rate {rate} outside [0, 1)"));
                }
                cur
            }
        };
        out.push(cur.clone());
    }
    Ok(out)
}

/// How a forward pass treats dropout layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Draw a fresh mask from the member's stream and remember it.
    SampleNew,
    /// Replay the last drawn mask.
    ReuseFixed,
    /// Identity (the expectation under inverted dropout); does not touch the stream.
    Disabled,
}

/// One realisation of every dropout layer for `samples` passes over a batch.
///
/// Entries are `0` or `1 / (1 - rate)`. Rows are ordered sample-major: row
/// `s * batch + b` belongs to dropout sample `s` of batch element `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask<T: Real = f32> {
    samples: usize,
    batch: usize,
    layers: Vec<Vec<T>>,
}

impl<T: Real> DropoutMask<T> {
    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn layer(&self, i: usize) -> &[T] {
        &self.layers[i]
    }

    /// Mask for a single dropout sample, as a one-sample mask.
    pub fn sample(&self, s: usize) -> DropoutMask<T> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let per = l.len() / self.samples;
                l[s * per..(s + 1) * per].to_vec()
            })
            .collect();
        DropoutMask { samples: 1, batch: self.batch, layers }
    }
}

/// A classifier with its own parameters and dropout-mask stream.
#[derive(Clone, Debug)]
pub struct Member<T: Real = f32> {
    arch: String,
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    classes: usize,
    seed: u64,
    params: Vec<Tensor<T>>,
    mask_rng: ChaCha8Rng,
    last_mask: Option<DropoutMask<T>>,
}

const MASK_STREAM: u64 = 1;

fn mask_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(MASK_STREAM);
    rng
}

impl<T: Real> Member<T> {
    /// Builds a named architecture with weights drawn uniformly from
    /// `+-1/sqrt(fan_in)`.
    pub fn new(arch: &str, input_shape: &[usize], classes: usize, seed: u64) -> Result<Self> {
        let layers = build_architecture(arch, input_shape, classes)?;
        Self::from_layers(arch, layers, input_shape, classes, seed)
    }

    pub fn from_layers(
        arch: &str,
        layers: Vec<LayerSpec>,
        input_shape: &[usize],
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let shapes = infer_shapes(&layers, input_shape)?;
        if shapes.last().map(Vec::as_slice) != Some(&[classes][..]) {
            return Err(shape_err!("layer stack ends in {:?}, expected [{classes}]", shapes.last()));
        }
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layer in &layers {
            let (wshape, fan_in, bias) = match *layer {
                LayerSpec::Linear { inputs, outputs } => (vec![inputs, outputs], inputs, outputs),
                LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => (
                    vec![out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                    out_channels,
                ),
                _ => continue,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::lit(init.random_range(-bound..bound))).collect() };
            let w = draw(wshape.iter().product());
            let b = draw(bias);
            params.push(Tensor::new(&wshape, w)?.with_requires_grad(true));
            params.push(Tensor::new(&[bias], b)?.with_requires_grad(true));
        }
        Ok(Member {
            arch: arch.to_string(),
            layers,
            input_shape: input_shape.to_vec(),
            classes,
            seed,
            params,
            mask_rng: mask_rng(seed),
            last_mask: None,
        })
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn last_mask(&self) -> Option<&DropoutMask<T>> {
        self.last_mask.as_ref()
    }

    /// Restarts the mask stream from a derived seed.
    pub fn reseed_masks(&mut self, seed: u64) {
        self.mask_rng = mask_rng(seed);
        self.last_mask = None;
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Dropout { .. }))
    }

    /// Draws masks for `samples` dropout passes over a batch of `batch` inputs.
    pub fn sample_mask(&mut self, samples: usize, batch: usize) -> Result<DropoutMask<T>> {
        if samples == 0 {
            return Err(config_err!("dropout sample count must be at least 1"));
        }
        let shapes = infer_shapes(&self.layers, &self.input_shape)?;
        let mut layers = Vec::new();
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            if let LayerSpec::Dropout { rate } = *layer {
                let keep = T::lit(1.0 / (1.0 - rate));
                let n = samples * batch * shape.iter().product::<usize>();
                let rng = &mut self.mask_rng;
                layers.push((0..n).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect());
            }
        }
        Ok(DropoutMask { samples, batch, layers })
    }

    /// Inserts the parameters into `g`; they are differentiated iff `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Vec<Var>> {
        self.params.iter().map(|p| g.input(p.shape(), p.data().to_vec(), trainable)).collect()
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<usize> {
        let s = g.shape(x);
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(shape_err!("input {:?} does not match architecture input {:?}", s, self.input_shape));
        }
        Ok(s[0])
    }

    /// Logits for every dropout sample in `mask` (`[samples * batch, K]`,
    /// sample-major), or a single deterministic pass when `mask` is `None`.
    ///
    /// Layers before the first dropout are evaluated once and shared by all
    /// samples.
    pub fn forward_bound(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        x: Var,
        mask: Option<&DropoutMask<T>>,
    ) -> Result<Var> {
        let batch = self.check_input(g, x)?;
        if let Some(m) = mask {
            if m.batch != batch {
                return Err(shape_err!("mask drawn for batch {} used on batch {}", m.batch, batch));
            }
        }
        let mut h = x;
        let mut tiled = false;
        let mut p = params.iter();
        let mut dropout_idx = 0;
        for layer in &self.layers {
            h = match *layer {
                LayerSpec::Linear { .. } => {
                    let (w, b) = (*p.next().expect("bound params"), *p.next().expect("bound params"));
                    let y = g.matmul(h, w)?;
                    g.add_bias(y, b)?
                }
                LayerSpec::Conv2d { pad, .. } => {
                    let (w, b) = (*p.next().expect("bound params"), *p.next().expect("bound params"));
                    let y = g.conv2d(h, w, pad)?;
                    g.add_bias(y, b)?
                }
                LayerSpec::Relu => g.relu(h)?,
                LayerSpec::MaxPool2x2 => g.maxpool2x2(h)?,
                LayerSpec::Flatten => {
                    let s = g.shape(h).to_vec();
                    let rest: usize = s[1..].iter().product();
                    g.reshape(h, &[s[0], rest])?
                }
                LayerSpec::Dropout { .. } => match mask {
                    None => h,
                    Some(m) => {
                        if !tiled && m.samples > 1 {
                            h = g.tile(h, m.samples)?;
                        }
                        tiled = true;
                        let layer_mask = m.layers[dropout_idx].clone();
                        dropout_idx += 1;
                        g.mask_mul(h, layer_mask)?
                    }
                },
            };
        }
        if let Some(m) = mask {
            if !tiled && m.samples > 1 {
                h = g.tile(h, m.samples)?;
            }
        }
        Ok(h)
    }

    /// A single pass, binding the parameters as constants.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: MaskMode) -> Result<Var> {
        let batch = self.check_input(g, x)?;
        let mask = match mode {
            MaskMode::Disabled => None,
            MaskMode::SampleNew => {
                let m = self.sample_mask(1, batch)?;
                self.last_mask = Some(m);
                self.last_mask.clone()
            }
            MaskMode::ReuseFixed => match &self.last_mask {
                Some(m) if m.samples == 1 => Some(m.clone()),
                Some(_) => return Err(config_err!("stored mask holds several samples; reuse needs one")),
                None => return Err(config_err!("reuse-fixed forward without a previously sampled mask")),
            },
        };
        let params = self.bind(g, false)?;
        self.forward_bound(g, &params, x, mask.as_ref())
    }

    /// Convenience wrapper returning logits `[batch, K]` for a tensor batch.
    pub fn logits(&mut self, x: &Tensor<T>, mode: MaskMode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.leaf(&x.clone().with_requires_grad(false))?;
        let y = self.forward(&mut g, xv, mode)?;
        Ok(g.tensor(y))
    }

    /// Copy with a different scalar type; masks and stream state are kept.
    pub fn cast<U: Real>(&self) -> Member<U> {
        Member {
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            input_shape: self.input_shape.clone(),
            classes: self.classes,
            seed: self.seed,
            params: self.params.iter().map(|p| p.cast()).collect(),
            mask_rng: self.mask_rng.clone(),
            last_mask: self.last_mask.as_ref().map(|m| DropoutMask {
                samples: m.samples,
                batch: m.batch,
                layers: m.layers.iter().map(|l| l.iter().map(|v| U::lit(v.as_f64())).collect()).collect(),
            }),
        }
    }

    /// Writes the checkpoint block: architecture name, K, seed, input shape,
    /// layer stack (JSON), then every parameter tensor in declaration order.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        write_str(w, &self.arch)?;
        w.write_all(&(self.classes as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        Tensor::<T>::new(&[self.input_shape.len()], self.input_shape.iter().map(|&d| T::lit(d as f64)).collect())?
            .write_to(w)?;
        let layers = serde_json::to_string(&self.layers).map_err(|e| format_err!("{e}"))?;
        write_str(w, &layers)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            p.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let arch = read_str(r)?;
        let classes = read_u32(r)? as usize;
        let seed = read_u64(r)?;
        let input_shape: Vec<usize> = Tensor::<f64>::read_from(r)?.data().iter().map(|&d| d as usize).collect();
        let layers: Vec<LayerSpec> =
            serde_json::from_str(&read_str(r)?).map_err(|e| format_err!("bad layer stack in checkpoint: {e}"))?;
        let mut member = Self::from_layers(&arch, layers, &input_shape, classes, seed)?;
        let count = read_u32(r)? as usize;
        if count != member.params.len() {
            return Err(format_err!("checkpoint has {count} tensors, architecture needs {}", member.params.len()));
        }
        for p in member.params.iter_mut() {
            let t = Tensor::<T>::read_from(r)?;
            if t.shape() != p.shape() {
                return Err(format_err!("checkpoint tensor {:?} where {:?} expected", t.shape(), p.shape()));
            }
            *p = t.with_requires_grad(true);
        }
        Ok(member)
    }
}

/// Mean cross-entropy of `logits` (`[batch, K]`) against integer labels.
pub fn softmax_cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(shape_err!("cross-entropy: logits {:?} with {} labels", s, labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(data_err!("label {bad} out of range for {} classes", s[1]));
    }
    let logp = g.log_softmax(logits)?;
    let picked = g.pick(logp, labels)?;
    let m = g.mean(picked)?;
    g.scale(m, -T::one())
}

/// Row-wise softmax of a `[rows, K]` buffer.
pub fn softmax_rows<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&x| (x - m).exp()).collect();
        let z: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    out
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| format_err!("truncated checkpoint: {e}"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| format_err!("truncated checkpoint: {e}"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(format_err!("implausible string length {n} in checkpoint"));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|e| format_err!("truncated checkpoint: {e}"))?;
    String::from_utf8(b).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scnn_flatten_extent() {
        let layers = build_architecture("scnn", &[1, 28, 28], 10).unwrap();
        let lin = layers.iter().find_map(|l| match l {
            LayerSpec::Linear { inputs, .. } => Some(*inputs),
            _ => None,
        });
        assert_eq!(lin, Some(32 * 7 * 7));
        assert_eq!(lin, Some(1568));
    }

    #[test]
    fn mlp2_parameter_count() {
        let m = Member::<f32>::new("mlp2", &[2], 2, 0).unwrap();
        assert_eq!(m.param_count(), 2 * 64 + 64 + 64 * 2 + 2);
        assert_eq!(m.param_count(), 322);
    }

    #[test]
    fn unknown_architecture() {
        assert!(matches!(build_architecture("resnet18", &[1, 28, 28], 10), Err(Error::Config(_))));
    }

    #[test]
    fn zero_final_layer_gives_uniform() {
        let mut m = Member::<f64>::new("mlp2", &[2], 4, 3).unwrap();
        let n = m.params().len();
        for p in &mut m.params_mut()[n - 2..] {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::from_f64(&[3, 2], &[0.1, 0.9, 0.5, 0.5, 1.0, 0.0]).unwrap();
        let logits = m.logits(&x, MaskMode::SampleNew).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        for p in softmax_rows(logits.data(), 4) {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn reuse_fixed_replays() {
        let mut m = Member::<f32>::new("mlp2", &[2], 3, 9).unwrap();
        let x = Tensor::from_f64(&[2, 2], &[0.2, 0.4, 0.6, 0.8]).unwrap();
        assert!(m.logits(&x, MaskMode::ReuseFixed).is_err());
        let a = m.logits(&x, MaskMode::SampleNew).unwrap();
        let b = m.logits(&x, MaskMode::ReuseFixed).unwrap();
        let c = m.logits(&x, MaskMode::ReuseFixed).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    #[test]
    fn disabled_does_not_advance_stream() {
        let mut a = Member::<f32>::new("mlp2", &[2], 3, 9).unwrap();
        let mut b = a.clone();
        let x = Tensor::from_f64(&[1, 2], &[0.2, 0.4]).unwrap();
        let d1 = a.logits(&x, MaskMode::Disabled).unwrap();
        let d2 = a.logits(&x, MaskMode::Disabled).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(a.logits(&x, MaskMode::SampleNew).unwrap(), b.logits(&x, MaskMode::SampleNew).unwrap());
    }

    #[test]
    fn mask_entries_are_zero_or_keep_scale() {
        let mut m = Member::<f64>::new("scnn", &[1, 8, 8], 10, 1).unwrap();
        let mask = m.sample_mask(3, 2).unwrap();
        let keep = [1.0 / 0.75, 2.0];
        for (i, &k) in keep.iter().enumerate() {
            assert!(mask.layer(i).iter().all(|&v| v == 0.0 || (v - k).abs() < 1e-12));
        }
        assert_eq!(mask.layer(0).len(), 3 * 2 * 32 * 2 * 2);
    }

    #[test]
    fn wrong_input_shape() {
        let mut m = Member::<f32>::new("scnn", &[1, 8, 8], 10, 1).unwrap();
        let x = Tensor::<f32>::zeros(&[2, 1, 8, 9]);
        assert!(matches!(m.logits(&x, MaskMode::Disabled), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_batch_is_finite() {
        for (arch, shape) in [("scnn", vec![1, 28, 28]), ("mlp2", vec![2])] {
            let mut m = Member::<f32>::new(arch, &shape, 10, 5).unwrap();
            let mut full = vec![4];
            full.extend(&shape);
            let y = m.logits(&Tensor::zeros(&full), MaskMode::SampleNew).unwrap();
            assert!(y.all_finite());
            assert_eq!(y.shape(), &[4, 10]);
        }
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(&[1, 10], vec![0.3; 10]).unwrap();
        let ce = softmax_cross_entropy(&mut g, l, &[4]).unwrap();
        assert!((g.value(ce)[0] - 10f64.ln()).abs() < 1e-12);

        let mut logits = vec![0.0; 10];
        logits[2] = 1000.0;
        let l = g.constant(&[1, 10], logits).unwrap();
        let ce = softmax_cross_entropy(&mut g, l, &[2]).unwrap();
        assert!(g.value(ce)[0].abs() < 1e-12);

        let l = g.constant(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let ce = softmax_cross_entropy(&mut g, l, &[2]).unwrap();
        let expected = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        assert!((g.value(ce)[0] - expected).abs() < 1e-12);
        assert!((g.value(ce)[0] - 0.40761).abs() < 1e-5);

        assert!(matches!(softmax_cross_entropy(&mut g, l, &[3]), Err(Error::Data(_))));
    }

    #[test]
    fn checkpoint_restores_parameters() {
        let m = Member::<f32>::new("scnn", &[1, 8, 8], 10, 77).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let back = Member::<f32>::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.seed(), 77);
        assert_eq!(back.arch(), "scnn");
        assert!(Member::<f32>::read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
    }
}
