//! Dataset ingestion and generation.
//!
//! Every dataset is fully materialised in memory with pixel values in `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, data_err, format_err, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Option<Vec<usize>>,
    tag: String,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Option<Vec<usize>>, tag: &str, split: Split) -> Result<Self> {
        if images.shape().is_empty() {
            return Err(data_err!("dataset `{tag}` images need a leading sample axis"));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(data_err!("dataset `{tag}`: {} images but {} labels", images.shape()[0], l.len()));
            }
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(data_err!("dataset `{tag}` has values outside [0, 1]"));
        }
        Ok(Dataset { images, labels, tag: tag.to_string(), split })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().and_then(|l| l.iter().max()).map(|m| m + 1)
    }

    pub fn with_tag(mut self, tag: &str) -> Self {
        self.tag = tag.to_string();
        self
    }

    /// Gathers the listed samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Option<Vec<usize>>) {
        let per: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        (Tensor::new(&shape, data).expect("gathered batch shape"), labels)
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Dataset { images, labels, tag: self.tag.clone(), split: self.split }
    }

    /// SHA-256 over the image values (as little-endian `f32`) and the labels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in self.images.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        if let Some(l) = &self.labels {
            for v in l {
                h.update((*v as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn be_u32(b: &[u8], at: usize) -> Option<u32> {
    b.get(at..at + 4).map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
}

/// Reads IDX image data (magic `0x00000803`) and optional labels (`0x00000801`).
/// Pixel bytes are scaled by `1/255`. Nothing is returned on any error.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>, tag: &str, split: Split) -> Result<Dataset> {
    let bytes = fs::read(images_path)?;
    let images = parse_idx_images(&bytes).map_err(|e| match e {
        crate::Error::Format(m) => format_err!("{}: {m}", images_path.display()),
        other => other,
    })?;
    let labels = match labels_path {
        Some(p) => Some(parse_idx_labels(&fs::read(p)?).map_err(|e| match e {
            crate::Error::Format(m) => format_err!("{}: {m}", p.display()),
            other => other,
        })?),
        None => None,
    };
    if let Some(l) = &labels {
        if l.len() != images.shape()[0] {
            return Err(data_err!("{} images but {} labels", images.shape()[0], l.len()));
        }
    }
    Dataset::new(images, labels, tag, split)
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let magic = be_u32(bytes, 0).ok_or_else(|| format_err!("truncated IDX header"))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err!("bad IDX image magic {magic:#010x}"));
    }
    let dims: Vec<usize> = (0..3)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| format_err!("truncated IDX header"))?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let payload = &bytes[16..];
    let expected = n.checked_mul(h * w).ok_or_else(|| format_err!("IDX dimensions overflow"))?;
    if payload.len() != expected {
        return Err(format_err!("IDX image payload has {} bytes, header implies {expected}", payload.len()));
    }
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(&[n, 1, h, w], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0).ok_or_else(|| format_err!("truncated IDX header"))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err!("bad IDX label magic {magic:#010x}"));
    }
    let n = be_u32(bytes, 4).ok_or_else(|| format_err!("truncated IDX header"))? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(format_err!("IDX label payload has {} bytes, header implies {n}", payload.len()));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Encodes `[n, 1, h, w]` images in `[0, 1]` as an IDX image file (values rounded to bytes).
pub fn encode_idx_images(images: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(data_err!("IDX images must be [n, 1, h, w], got {:?}", s));
    }
    let mut out = Vec::with_capacity(16 + images.numel());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [s[0], s[2], s[3]] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| data_err!("label {l} does not fit in a byte"))?);
    }
    Ok(out)
}

/// Gaussian-noise images clipped to `[0, 1]`, without labels.
pub fn gen_fake_gaussian<R: Rng>(n: usize, shape: &[usize], mean: f64, sd: f64, rng: &mut R) -> Result<Dataset> {
    if n == 0 {
        return Err(config_err!("fake dataset needs at least one sample"));
    }
    let normal = Normal::new(mean, sd).map_err(|e| config_err!("fake data distribution: {e}"))?;
    let per: usize = shape.iter().product();
    let data = (0..n * per).map(|_| normal.sample(rng).clamp(0.0, 1.0) as f32).collect();
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Dataset::new(Tensor::new(&full, data)?, None, "fake", Split::Test)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Synthetic2d {
    /// Two classes centred at (0.35, 0.5) and (0.65, 0.5); OOD is a ring of
    /// radius 0.4 around the centre.
    TwoGaussians,
    /// A central blob (class 0) inside a ring of radius 0.3 (class 1); OOD
    /// points sit near the corners.
    RingVsBlob,
}

impl std::str::FromStr for Synthetic2d {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-gaussians" => Ok(Synthetic2d::TwoGaussians),
            "ring-vs-blob" => Ok(Synthetic2d::RingVsBlob),
            other => Err(config_err!("unknown synthetic dataset `{other}`")),
        }
    }
}

fn clip_point(x: f64, y: f64) -> [f32; 2] {
    [x.clamp(0.0, 1.0) as f32, y.clamp(0.0, 1.0) as f32]
}

fn ring_point<R: Rng>(rng: &mut R, radius: f64, jitter: f64) -> [f32; 2] {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let r = radius + jitter * rng.random_range(-1.0..1.0);
    clip_point(0.5 + r * theta.cos(), 0.5 + r * theta.sin())
}

/// Labelled in-distribution points in `[0, 1]^2`; `sd` is the per-axis
/// standard deviation of the class clusters.
pub fn gen_synthetic_2d<R: Rng>(kind: Synthetic2d, n_per_class: usize, sd: f64, rng: &mut R) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(config_err!("synthetic dataset needs at least one point per class"));
    }
    let noise = Normal::new(0.0, sd).map_err(|e| config_err!("synthetic spread: {e}"))?;
    let mut data = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for class in 0..2 {
        for _ in 0..n_per_class {
            let p = match kind {
                Synthetic2d::TwoGaussians => {
                    let cx = if class == 0 { 0.35 } else { 0.65 };
                    clip_point(cx + noise.sample(rng), 0.5 + noise.sample(rng))
                }
                Synthetic2d::RingVsBlob => {
                    if class == 0 {
                        clip_point(0.5 + noise.sample(rng), 0.5 + noise.sample(rng))
                    } else {
                        let theta = rng.random_range(0.0..std::f64::consts::TAU);
                        let r = 0.3 + noise.sample(rng);
                        clip_point(0.5 + r * theta.cos(), 0.5 + r * theta.sin())
                    }
                }
            };
            data.extend_from_slice(&p);
            labels.push(class);
        }
    }
    let tag = match kind {
        Synthetic2d::TwoGaussians => "two-gaussians",
        Synthetic2d::RingVsBlob => "ring-vs-blob",
    };
    Dataset::new(Tensor::new(&[2 * n_per_class, 2], data)?, Some(labels), tag, Split::Train)
}

/// Points outside the in-distribution support of `kind`.
pub fn gen_synthetic_2d_ood<R: Rng>(kind: Synthetic2d, n: usize, rng: &mut R) -> Result<Dataset> {
    if n == 0 {
        return Err(config_err!("synthetic OOD set needs at least one point"));
    }
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let p = match kind {
            Synthetic2d::TwoGaussians => ring_point(rng, 0.4, 0.02),
            Synthetic2d::RingVsBlob => {
                let (cx, cy) = [(0.08, 0.08), (0.92, 0.08), (0.08, 0.92), (0.92, 0.92)][rng.random_range(0..4)];
                clip_point(cx + rng.random_range(-0.05..0.05), cy + rng.random_range(-0.05..0.05))
            }
        };
        data.extend_from_slice(&p);
    }
    Dataset::new(Tensor::new(&[n, 2], data)?, None, "ring", Split::Test)
}

/// Index batches for one epoch: a partition of `0..n`, permuted when
/// `shuffle` is set; the last partial batch is kept.
pub fn batch_iter<R: Rng>(n: usize, batch_size: usize, shuffle: bool, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(config_err!("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Describes an on-disk dataset: where it lives and what it should hash to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tag: String,
    pub images: PathBuf,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub sha256: Option<String>,
    #[serde(default)]
    pub count: Option<usize>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| config_err!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if m.images.is_relative() {
            m.images = base.join(&m.images);
        }
        if let Some(l) = &m.labels {
            if l.is_relative() {
                m.labels = Some(base.join(l));
            }
        }
        Ok(m)
    }

    /// Loads the IDX files and verifies the recorded count and checksum.
    pub fn load(&self, split: Split) -> Result<Dataset> {
        let ds = load_idx(&self.images, self.labels.as_deref(), &self.tag, split)?;
        if let Some(c) = self.count {
            if c != ds.len() {
                return Err(data_err!("dataset `{}` has {} samples, manifest says {c}", self.tag, ds.len()));
            }
        }
        if let Some(expected) = &self.sha256 {
            let actual = ds.content_hash();
            if &actual != expected {
                return Err(data_err!("dataset `{}` checksum mismatch: {actual} != {expected}", self.tag));
            }
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn idx_pair(n: usize) -> (Vec<u8>, Vec<u8>) {
        let images = Tensor::new(&[n, 1, 2, 3], (0..n * 6).map(|i| (i % 256) as f32 / 255.0).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        (encode_idx_images(&images).unwrap(), encode_idx_labels(&labels).unwrap())
    }

    #[test]
    fn idx_header_layout() {
        let (img, lab) = idx_pair(2);
        assert_eq!(&img[..4], &[0, 0, 8, 3]);
        assert_eq!(&img[4..8], &[0, 0, 0, 2]);
        assert_eq!(&img[8..16], &[0, 0, 0, 2, 0, 0, 0, 3]);
        assert_eq!(&lab[..8], &[0, 0, 8, 1, 0, 0, 0, 2]);
        let t = parse_idx_images(&img).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 3]);
        assert_eq!(t.data()[7], 7.0 / 255.0);
    }

    #[test]
    fn all_zero_idx() {
        let mut img = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [3u32, 4, 4] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend(std::iter::repeat_n(0u8, 48));
        let t = parse_idx_images(&img).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn truncated_and_bad_magic() {
        let (img, lab) = idx_pair(3);
        assert!(matches!(parse_idx_images(&img[..img.len() - 1]), Err(crate::Error::Format(_))));
        assert!(matches!(parse_idx_images(&img[..10]), Err(crate::Error::Format(_))));
        assert!(matches!(parse_idx_images(&lab), Err(crate::Error::Format(_))));
        assert!(matches!(parse_idx_labels(&lab[..lab.len() - 1]), Err(crate::Error::Format(_))));
    }

    #[test]
    fn count_mismatch_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = idx_pair(3);
        let (_, lab) = idx_pair(4);
        fs::write(dir.path().join("i"), img).unwrap();
        fs::write(dir.path().join("l"), lab).unwrap();
        let r = load_idx(&dir.path().join("i"), Some(&dir.path().join("l")), "t", Split::Test);
        assert!(matches!(r, Err(crate::Error::Data(_))));
    }

    #[test]
    fn fake_data_bounds_and_determinism() {
        let a = gen_fake_gaussian(50, &[1, 4, 4], 0.5, 0.25, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = gen_fake_gaussian(50, &[1, 4, 4], 0.5, 0.25, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.images(), b.images());
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.labels().is_none());
        assert!(gen_fake_gaussian(0, &[1], 0.5, 0.25, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn synthetic_zero_variance_collapses() {
        let ds = gen_synthetic_2d(Synthetic2d::TwoGaussians, 5, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let pts: Vec<[f32; 2]> = ds.images().data().chunks(2).map(|c| [c[0], c[1]]).collect();
        assert!(pts[..5].iter().all(|p| *p == [0.35, 0.5]));
        assert!(pts[5..].iter().all(|p| *p == [0.65, 0.5]));
        assert!("moons".parse::<Synthetic2d>().is_err());
    }

    #[test]
    fn batches_partition_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = batch_iter(10, 3, true, &mut rng).unwrap();
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let single = batch_iter(10, 64, true, &mut rng).unwrap();
        assert_eq!(single.len(), 1);
        assert_ne!(single[0], (0..10).collect::<Vec<_>>());
        assert!(batch_iter(10, 0, true, &mut rng).is_err());
    }
}
