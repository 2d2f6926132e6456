//! Config-driven experiments: train (or reuse a checkpoint), evaluate, and
//! write artifacts; plus a report view over finished runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Component, Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{gen_fake_gaussian, gen_synthetic_2d, gen_synthetic_2d_ood, Dataset, DatasetManifest, Split, Synthetic2d};
use crate::ensemble::Ensemble;
use crate::error::{config_err, data_err, Error, Result};
use crate::evaluation::{accuracy, evaluate_scores, score_dataset, write_roc_csv, BatchScores, RocCurve, ScoreMethod};
use crate::nn::build_architecture;
use crate::training::{
    train_lat, train_ordinary, train_uat, AugmentationPolicy, DiscrepancyMode, EpochRecord, LossConfig, TrainConfig,
};
use crate::uncertainty::{density_rows, write_density_csv};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMethod {
    Ord,
    Lat,
    Uat,
}

impl TrainMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMethod::Ord => "ord",
            TrainMethod::Lat => "lat",
            TrainMethod::Uat => "uat",
        }
    }
}

impl std::fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TrainMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ord" => Ok(TrainMethod::Ord),
            "lat" => Ok(TrainMethod::Lat),
            "uat" => Ok(TrainMethod::Uat),
            other => Err(config_err!("method: unknown training method `{other}` (expected ord, lat or uat)")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// One per member; empty means `1..=members`.
    pub members: Vec<u64>,
    /// Data order and augmentation.
    pub data: u64,
    /// Training-time and evaluation-time attack budgets.
    pub attack: u64,
    /// Dropout masks during evaluation.
    pub eval: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub methods: Vec<ScoreMethod>,
    pub clean: bool,
    pub attacked: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec { methods: vec![ScoreMethod::Mi], clean: true, attacked: true }
    }
}

fn default_sd() -> f64 {
    0.05
}

fn default_fake_n() -> usize {
    2000
}

fn default_fake_mean() -> f64 {
    0.5
}

fn default_fake_sd() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum IdSource {
    /// Dataset manifests (JSON) for the train and test splits.
    Idx {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        train_subset: Option<usize>,
        #[serde(default)]
        test_subset: Option<usize>,
    },
    Synthetic {
        dataset: Synthetic2d,
        n_per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_sd")]
        sd: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OodSource {
    Idx {
        manifest: PathBuf,
        #[serde(default)]
        subset: Option<usize>,
    },
    /// Gaussian noise images shaped like the ID data, clipped to `[0, 1]`.
    Fake {
        #[serde(default = "default_fake_n")]
        n: usize,
        #[serde(default = "default_fake_mean")]
        mean: f64,
        #[serde(default = "default_fake_sd")]
        sd: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Points outside the support of a synthetic ID task.
    SyntheticOod {
        dataset: Synthetic2d,
        n: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub id: IdSource,
    pub ood: Vec<OodSource>,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            id: IdSource::Synthetic {
                dataset: Synthetic2d::TwoGaussians,
                n_per_class: 500,
                test_per_class: 250,
                sd: default_sd(),
                seed: 0,
            },
            ood: vec![OodSource::SyntheticOod { dataset: Synthetic2d::TwoGaussians, n: 500, seed: 1 }],
        }
    }
}

/// Complete description of one training and evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub method: TrainMethod,
    pub arch: String,
    pub members: usize,
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub epsilon_max: f64,
    pub fpr_max: f64,
    pub discrepancy: DiscrepancyMode,
    pub output_dir: PathBuf,
    /// Evaluate this checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
    pub augmentation: AugmentationPolicy,
    pub seeds: Seeds,
    pub eval: EvalSpec,
    pub data: DataSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".to_string(),
            method: TrainMethod::Uat,
            arch: "scnn".to_string(),
            members: 5,
            samples: 10,
            epochs: 10,
            batch_size: 128,
            eval_batch_size: 250,
            lr: 1e-3,
            beta: 5.0,
            epsilon_max: 0.02,
            fpr_max: 0.01,
            discrepancy: DiscrepancyMode::PerSample,
            output_dir: PathBuf::from("runs/experiment"),
            checkpoint: None,
            augmentation: AugmentationPolicy::digits(),
            seeds: Seeds::default(),
            eval: EvalSpec::default(),
            data: DataSpec::default(),
        }
    }
}

/// Command-line overrides of same-named config fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub beta: Option<f64>,
    pub epsilon_max: Option<f64>,
    pub fpr_max: Option<f64>,
    pub members: Option<usize>,
    pub samples: Option<usize>,
    pub method: Option<TrainMethod>,
    pub arch: Option<String>,
    pub output_dir: Option<PathBuf>,
}

fn lexical_join(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    let mut out = base.to_path_buf();
    for c in p.components() {
        match c {
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    out
}

fn check_file(field: &str, p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(config_err!("{field}: file `{}` does not exist", p.display()));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text; relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| config_err!("{}", e.to_string().trim()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err!("config `{}`: {e}", path.display()))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        self.output_dir = lexical_join(base, &self.output_dir);
        if let Some(c) = &self.checkpoint {
            self.checkpoint = Some(lexical_join(base, c));
        }
        if let IdSource::Idx { train, test, .. } = &mut self.data.id {
            *train = lexical_join(base, train);
            *test = lexical_join(base, test);
        }
        for o in &mut self.data.ood {
            if let OodSource::Idx { manifest, .. } = o {
                *manifest = lexical_join(base, manifest);
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = &o.$f { self.$f = v.clone(); })* };
        }
        set!(epochs, batch_size, lr, beta, epsilon_max, fpr_max, members, samples, method, arch, output_dir);
    }

    pub fn member_seeds(&self) -> Vec<u64> {
        if self.seeds.members.is_empty() {
            (1..=self.members as u64).collect()
        } else {
            self.seeds.members.clone()
        }
    }

    /// Shifts every seed so that run `offset` of a repeated experiment is
    /// independent of run 0. Offset 0 leaves the config unchanged.
    pub fn offset_seeds(&mut self, offset: u64) {
        if offset == 0 {
            return;
        }
        self.seeds.members = self.member_seeds().iter().map(|s| s + 1000 * offset).collect();
        self.seeds.data += offset;
        self.seeds.attack += offset;
        self.seeds.eval += offset;
    }

    /// Checks ranges and referenced files; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        macro_rules! ensure {
            ($cond:expr, $($arg:tt)*) => { if !$cond { return Err(config_err!($($arg)*)); } };
        }
        ensure!(self.members >= 1, "members: must be at least 1, got {}", self.members);
        ensure!(self.samples >= 1, "samples: must be at least 1, got {}", self.samples);
        ensure!(self.batch_size >= 1, "batch_size: must be at least 1");
        ensure!(self.eval_batch_size >= 1, "eval_batch_size: must be at least 1");
        ensure!(self.lr.is_finite() && self.lr >= 0.0, "lr: must be a finite non-negative number, got {}", self.lr);
        ensure!(self.beta.is_finite() && self.beta >= 0.0, "beta: must be non-negative, got {}", self.beta);
        ensure!(self.epsilon_max > 0.0 && self.epsilon_max <= 1.0, "epsilon_max: must lie in (0, 1], got {}", self.epsilon_max);
        ensure!(self.fpr_max > 0.0 && self.fpr_max <= 1.0, "fpr_max: must lie in (0, 1], got {}", self.fpr_max);
        ensure!(self.augmentation.rotation_max_deg >= 0.0, "augmentation.rotation_max_deg: must be non-negative");
        let seeds = self.member_seeds();
        ensure!(seeds.len() == self.members, "seeds.members: {} seeds for {} members", seeds.len(), self.members);
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        ensure!(sorted.len() == seeds.len(), "seeds.members: member seeds must be distinct");
        ensure!(!self.eval.methods.is_empty(), "eval.methods: at least one scoring method is required");
        ensure!(self.eval.clean || self.eval.attacked, "eval: enable clean and/or attacked evaluation");
        ensure!(!self.data.ood.is_empty(), "data.ood: at least one OOD source is required");
        build_architecture(&self.arch, &[1, 28, 28], 2)
            .or_else(|_| build_architecture(&self.arch, &[2], 2))
            .map_err(|_| config_err!("arch: unknown architecture `{}`", self.arch))?;
        match &self.data.id {
            IdSource::Idx { train, test, .. } => {
                check_file("data.id.train", train)?;
                check_file("data.id.test", test)?;
            }
            IdSource::Synthetic { n_per_class, test_per_class, sd, .. } => {
                ensure!(*n_per_class >= 1 && *test_per_class >= 1, "data.id: synthetic sets need at least one point per class");
                ensure!(*sd >= 0.0, "data.id.sd: must be non-negative");
            }
        }
        for (i, o) in self.data.ood.iter().enumerate() {
            match o {
                OodSource::Idx { manifest, .. } => check_file(&format!("data.ood[{i}].manifest"), manifest)?,
                OodSource::Fake { n, sd, .. } => {
                    ensure!(*n >= 1, "data.ood[{i}].n: must be at least 1");
                    ensure!(*sd > 0.0, "data.ood[{i}].sd: must be positive");
                }
                OodSource::SyntheticOod { n, .. } => ensure!(*n >= 1, "data.ood[{i}].n: must be at least 1"),
            }
        }
        if let Some(c) = &self.checkpoint {
            check_file("checkpoint", c)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Materialised datasets of one experiment.
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
    pub ood: Vec<Dataset>,
}

impl ExperimentData {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let (train, test) = match &cfg.data.id {
            IdSource::Idx { train, test, train_subset, test_subset } => {
                let tr = DatasetManifest::read(train)?.load(Split::Train)?;
                let te = DatasetManifest::read(test)?.load(Split::Test)?;
                (train_subset.map_or(tr.clone(), |n| tr.take(n)), test_subset.map_or(te.clone(), |n| te.take(n)))
            }
            IdSource::Synthetic { dataset, n_per_class, test_per_class, sd, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let tr = gen_synthetic_2d(*dataset, *n_per_class, *sd, &mut rng)?;
                let te = gen_synthetic_2d(*dataset, *test_per_class, *sd, &mut rng)?;
                (tr, Dataset::new(te.images().clone(), te.labels().map(<[usize]>::to_vec), te.tag(), Split::Test)?)
            }
        };
        let mut ood = Vec::new();
        for o in &cfg.data.ood {
            ood.push(match o {
                OodSource::Idx { manifest, subset } => {
                    let d = DatasetManifest::read(manifest)?.load(Split::Test)?;
                    subset.map_or(d.clone(), |n| d.take(n))
                }
                OodSource::Fake { n, mean, sd, seed } => {
                    gen_fake_gaussian(*n, train.sample_shape(), *mean, *sd, &mut ChaCha8Rng::seed_from_u64(*seed))?
                }
                OodSource::SyntheticOod { dataset, n, seed } => {
                    gen_synthetic_2d_ood(*dataset, *n, &mut ChaCha8Rng::seed_from_u64(*seed))?
                }
            });
        }
        if ood.iter().any(|d| d.sample_shape() != train.sample_shape()) {
            return Err(data_err!("OOD sample shapes must match the ID shape {:?}", train.sample_shape()));
        }
        Ok(ExperimentData { train, test, ood })
    }

    pub fn hashes(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        out.insert(format!("{}/train", self.train.tag()), self.train.content_hash());
        out.insert(format!("{}/test", self.test.tag()), self.test.content_hash());
        for d in &self.ood {
            out.insert(format!("{}/ood", d.tag()), d.content_hash());
        }
        out
    }
}

/// Hash of everything that determines the trained weights.
pub fn training_hash(cfg: &ExperimentConfig, train: &Dataset) -> String {
    let key = serde_json::json!({
        "method": cfg.method,
        "arch": cfg.arch,
        "members": cfg.member_seeds(),
        "samples": cfg.samples,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "beta": cfg.beta,
        "epsilon_max": cfg.epsilon_max,
        "discrepancy": cfg.discrepancy,
        "augmentation": cfg.augmentation,
        "data_seed": cfg.seeds.data,
        "attack_seed": cfg.seeds.attack,
        "train": train.content_hash(),
    });
    hex::encode(Sha256::digest(key.to_string().as_bytes()))
}

/// One ID-vs-OOD result as stored in `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub ood: String,
    pub train_method: TrainMethod,
    pub method: ScoreMethod,
    pub attacked: bool,
    pub auc: f64,
    pub pauc: f64,
    pub fpr_max: f64,
    pub id_count: usize,
    pub ood_count: usize,
    pub mean_score_id: f64,
    pub mean_score_ood: f64,
}

impl EvalRecord {
    fn dir_name(&self) -> String {
        format!("{}_vs_{}_{}_{}", self.id, self.ood, self.method, if self.attacked { "attacked" } else { "clean" })
    }

    fn key(&self) -> (String, bool, ScoreMethod) {
        (self.ood.clone(), self.attacked, self.method)
    }
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub name: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub datasets: BTreeMap<String, String>,
    pub parameters: usize,
    pub accuracy: f64,
    pub evaluations: Vec<EvalRecord>,
}

/// What a run should do beyond training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    /// Skip evaluation entirely.
    pub train_only: bool,
    /// Replace the configured scoring methods.
    pub methods: Option<Vec<ScoreMethod>>,
    /// `Some(true)`: attacked only; `Some(false)`: clean only.
    pub attacked: Option<bool>,
    /// Refuse to train; a checkpoint must exist.
    pub require_checkpoint: bool,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub trained: bool,
    pub checkpoint: PathBuf,
    pub train_log: Vec<EpochRecord>,
    pub metrics: Option<Metrics>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Trains or loads the ensemble described by `cfg`, then runs the requested
/// evaluations and writes checkpoints, logs, ROC/density CSVs and
/// `metrics.json` under `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = ExperimentData::load(cfg)?;
    let classes = data
        .train
        .num_classes()
        .ok_or_else(|| data_err!("ID training data `{}` has no labels", data.train.tag()))?;
    let hash = training_hash(cfg, &data.train);
    fs::create_dir_all(&cfg.output_dir)?;
    let checkpoint = cfg.checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join(format!("checkpoint-{}.bin", &hash[..16])));

    let mut train_log = Vec::new();
    let (mut ens, trained) = if checkpoint.is_file() {
        log::info!("reusing checkpoint {}", checkpoint.display());
        let ens = Ensemble::<f32>::read_checkpoint(&mut std::io::BufReader::new(fs::File::open(&checkpoint)?))?;
        if ens.len() != cfg.members || ens.classes() != classes || ens.input_shape() != data.train.sample_shape() {
            return Err(config_err!(
                "checkpoint: `{}` holds {} members for {} classes, config expects {} for {}",
                checkpoint.display(),
                ens.len(),
                ens.classes(),
                cfg.members,
                classes
            ));
        }
        (ens, false)
    } else if opts.require_checkpoint {
        return Err(data_err!("no checkpoint at `{}`; run `train` first", checkpoint.display()));
    } else {
        let mut ens = Ensemble::<f32>::new(&cfg.arch, data.train.sample_shape(), classes, &cfg.member_seeds())?;
        let tc = TrainConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            seed: cfg.seeds.data ^ cfg.seeds.attack.rotate_left(32),
            augmentation: cfg.augmentation,
            samples: cfg.samples,
            loss: LossConfig::new(cfg.beta, cfg.epsilon_max, classes)?.with_mode(cfg.discrepancy),
        };
        let mut log_file = BufWriter::new(fs::File::create(cfg.output_dir.join("train_log.jsonl"))?);
        let log: Option<&mut dyn Write> = Some(&mut log_file);
        train_log = match cfg.method {
            TrainMethod::Ord => train_ordinary(&mut ens, &data.train, &tc, log)?,
            TrainMethod::Lat => train_lat(&mut ens, &data.train, &tc, log)?,
            TrainMethod::Uat => train_uat(&mut ens, &data.train, &tc, log)?,
        };
        log_file.flush()?;
        let mut bytes = Vec::new();
        ens.write_checkpoint(&mut bytes)?;
        write_atomic(&checkpoint, &bytes)?;
        (ens, true)
    };
    if opts.train_only {
        return Ok(ExperimentOutcome { trained, checkpoint, train_log, metrics: None });
    }

    let methods = opts.methods.clone().unwrap_or_else(|| cfg.eval.methods.clone());
    let flags: Vec<bool> = match opts.attacked {
        Some(a) => vec![a],
        None => [(cfg.eval.clean, false), (cfg.eval.attacked, true)].iter().filter(|f| f.0).map(|f| f.1).collect(),
    };
    let acc = accuracy(&mut ens, &data.test, cfg.eval_batch_size)?;
    log::info!("clean ID accuracy {acc:.4}");

    let metrics_path = cfg.output_dir.join("metrics.json");
    let mut records: Vec<EvalRecord> = match fs::read_to_string(&metrics_path) {
        Ok(text) => match serde_json::from_str::<Metrics>(&text) {
            Ok(m) if m.config_hash == hash => m.evaluations,
            _ => Vec::new(),
        },
        Err(_) => Vec::new(),
    };
    for &method in &methods {
        ens.reseed_masks(cfg.seeds.eval);
        let id_scores = score_dataset(&mut ens, &data.test, method, cfg.samples, cfg.eval_batch_size, None)?;
        for (oi, ood) in data.ood.iter().enumerate() {
            for &attacked in &flags {
                ens.reseed_masks(cfg.seeds.eval.wrapping_add(1 + oi as u64));
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.attack.wrapping_add(oi as u64));
                let attack = attacked.then_some((cfg.epsilon_max, &mut rng));
                let ood_scores = score_dataset(&mut ens, ood, method, cfg.samples, cfg.eval_batch_size, attack)?;
                let (roc, auc, pauc) = evaluate_scores(&id_scores.scores, &ood_scores.scores, cfg.fpr_max)?;
                let record = EvalRecord {
                    id: data.test.tag().to_string(),
                    ood: ood.tag().to_string(),
                    train_method: cfg.method,
                    method,
                    attacked,
                    auc,
                    pauc,
                    fpr_max: cfg.fpr_max,
                    id_count: id_scores.scores.len(),
                    ood_count: ood_scores.scores.len(),
                    mean_score_id: mean(&id_scores.scores),
                    mean_score_ood: mean(&ood_scores.scores),
                };
                log::info!(
                    "{} vs {} [{}{}]: auc {:.4} pauc {:.4}",
                    record.id,
                    record.ood,
                    method,
                    if attacked { ", attacked" } else { "" },
                    auc,
                    pauc
                );
                write_eval_artifacts(&cfg.output_dir.join("eval").join(record.dir_name()), &roc, &id_scores, &ood_scores, &record)?;
                records.retain(|r| r.key() != record.key());
                records.push(record);
            }
        }
    }
    records.sort_by(|a, b| {
        (a.ood.as_str(), a.attacked, a.method.as_str()).cmp(&(b.ood.as_str(), b.attacked, b.method.as_str()))
    });
    let metrics = Metrics {
        name: cfg.name.clone(),
        config_hash: hash,
        config: cfg.clone(),
        datasets: data.hashes(),
        parameters: ens.members().iter().map(|m| m.param_count()).sum(),
        accuracy: acc,
        evaluations: records,
    };
    let text = serde_json::to_string_pretty(&metrics).map_err(|e| Error::Io(e.into()))?;
    write_atomic(&metrics_path, format!("{text}\n").as_bytes())?;
    Ok(ExperimentOutcome { trained, checkpoint, train_log, metrics: Some(metrics) })
}

fn write_eval_artifacts(dir: &Path, roc: &RocCurve, id: &BatchScores, ood: &BatchScores, record: &EvalRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("roc.csv"))?);
    write_roc_csv(&mut w, roc)?;
    w.flush()?;
    let mut rows = density_rows(&record.id, &id.report);
    rows.extend(density_rows(&record.ood, &ood.report));
    let mut w = BufWriter::new(fs::File::create(dir.join("densities.csv"))?);
    write_density_csv(&mut w, &rows)?;
    w.flush()?;
    Ok(())
}

fn find_metrics(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_metrics(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "metrics.json") {
            out.push(p);
        }
    }
    Ok(())
}

fn find_roc_csvs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            find_roc_csvs(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "roc.csv") {
            out.push(p);
        }
    }
    Ok(())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Summary statistics of one report cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellStats {
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub runs: usize,
}

/// pAUC values of every finished run under `dir`, keyed by
/// `(row, column)` = (`"ID & OOD"` with an attacked marker, training/scoring method).
pub fn collect_results(dir: &Path) -> Result<BTreeMap<(String, String), CellStats>> {
    if !dir.is_dir() {
        return Err(data_err!("`{}` is not a directory", dir.display()));
    }
    let mut files = Vec::new();
    find_metrics(dir, &mut files)?;
    if files.is_empty() {
        return Err(data_err!("no metrics.json under `{}`", dir.display()));
    }
    let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for f in &files {
        let m: Metrics = serde_json::from_str(&fs::read_to_string(f)?)
            .map_err(|e| data_err!("{}: malformed metrics: {e}", f.display()))?;
        for r in &m.evaluations {
            let row = format!("{} & {}{}", r.id, r.ood, if r.attacked { " (attacked)" } else { "" });
            let col = match r.method {
                ScoreMethod::Mi => r.train_method.as_str().to_string(),
                other => format!("{}/{}", r.train_method.as_str(), other),
            };
            cells.entry((row, col)).or_default().push(r.pauc);
        }
    }
    Ok(cells
        .into_iter()
        .map(|(k, mut v)| {
            let runs = v.len();
            let min = v.iter().copied().fold(f64::INFINITY, f64::min);
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (k, CellStats { min, median: median(&mut v), max, runs })
        })
        .collect())
}

/// Text table of pAUC per ID/OOD pair (rows) and method (columns); cells
/// over several runs show `median [min, max]`. Also renders `roc.svg` next
/// to every `roc.csv`. Metric files are only read.
pub fn emit_report(dir: &Path) -> Result<String> {
    let cells = collect_results(dir)?;
    let mut rows: Vec<&String> = cells.keys().map(|(r, _)| r).collect();
    rows.dedup();
    let mut cols: Vec<&String> = cells.keys().map(|(_, c)| c).collect();
    cols.sort();
    cols.dedup();
    let fmt = |s: &CellStats| {
        if s.runs == 1 {
            format!("{:.3}", s.median)
        } else {
            format!("{:.3} [{:.3}, {:.3}]", s.median, s.min, s.max)
        }
    };
    let first_w = rows.iter().map(|r| r.len()).max().unwrap_or(0).max("pAUC".len());
    let col_w: Vec<usize> = cols
        .iter()
        .map(|c| {
            cells.iter().filter(|((_, cc), _)| cc == *c).map(|(_, s)| fmt(s).len()).max().unwrap_or(0).max(c.len())
        })
        .collect();
    let mut out = String::new();
    write!(out, "{:<first_w$}", "pAUC").unwrap();
    for (c, w) in cols.iter().zip(&col_w) {
        write!(out, " | {c:>w$}").unwrap();
    }
    out.push('\n');
    out.push_str(&"-".repeat(first_w + col_w.iter().map(|w| w + 3).sum::<usize>()));
    out.push('\n');
    for r in rows {
        write!(out, "{r:<first_w$}").unwrap();
        for (c, w) in cols.iter().zip(&col_w) {
            let cell = cells.get(&(r.clone(), (*c).clone())).map(fmt).unwrap_or_else(|| "-".to_string());
            write!(out, " | {cell:>w$}").unwrap();
        }
        out.push('\n');
    }
    let mut rocs = Vec::new();
    find_roc_csvs(dir, &mut rocs)?;
    for p in rocs {
        let curve = read_roc_csv(&p)?;
        fs::write(p.with_extension("svg"), roc_svg(&curve, &p.parent().and_then(|d| d.file_name()).map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()))?;
    }
    Ok(out)
}

fn read_roc_csv(path: &Path) -> Result<RocCurve> {
    let text = fs::read_to_string(path)?;
    let mut curve = RocCurve { fpr: Vec::new(), tpr: Vec::new(), thresholds: Vec::new() };
    for (i, line) in text.lines().enumerate().skip(1) {
        let parts: Vec<f64> = line
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| data_err!("{}:{}: {e}", path.display(), i + 1))?;
        if parts.len() != 3 {
            return Err(data_err!("{}:{}: expected 3 columns", path.display(), i + 1));
        }
        curve.fpr.push(parts[0]);
        curve.tpr.push(parts[1]);
        curve.thresholds.push(parts[2]);
    }
    Ok(curve)
}

/// ROC plot with a logarithmic FPR axis from `1e-4` to `1`.
pub fn roc_svg(curve: &RocCurve, title: &str) -> String {
    let (w, h, m) = (480.0, 360.0, 48.0);
    let (lo, hi) = (-4.0f64, 0.0f64);
    let sx = |f: f64| m + (f.max(1e-4).log10() - lo) / (hi - lo) * (w - 2.0 * m);
    let sy = |t: f64| h - m - t * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s += &format!("<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>\n", w / 2.0, title);
    s += &format!(
        "<rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        w - 2.0 * m,
        h - 2.0 * m
    );
    for e in -4..=0 {
        let x = sx(10f64.powi(e));
        s += &format!("<line x1=\"{x:.1}\" y1=\"{}\" x2=\"{x:.1}\" y2=\"{}\" stroke=\"#ccc\"/>\n", m, h - m);
        s += &format!("<text x=\"{x:.1}\" y=\"{}\" text-anchor=\"middle\">1e{e}</text>\n", h - m + 16.0);
    }
    for t in [0.0, 0.5, 1.0] {
        s += &format!("<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{t}</text>\n", m - 6.0, sy(t) + 4.0);
    }
    s += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">FPR</text>\n", w / 2.0, h - 8.0);
    s += &format!("<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">TPR</text>\n", h / 2.0, h / 2.0);
    let pts: Vec<String> = curve.points().map(|(f, t)| format!("{:.2},{:.2}", sx(f), sy(t))).collect();
    s += &format!("<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{}\"/>\n", pts.join(" "));
    s += "</svg>\n";
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = ExperimentConfig::from_toml("", Path::new("/base")).unwrap();
        assert_eq!((cfg.members, cfg.samples, cfg.epochs, cfg.batch_size), (5, 10, 10, 128));
        assert_eq!((cfg.beta, cfg.epsilon_max, cfg.lr, cfg.fpr_max), (5.0, 0.02, 1e-3, 0.01));
        assert_eq!(cfg.output_dir, PathBuf::from("/base/runs/experiment"));
        let mut cfg = cfg;
        cfg.apply(&Overrides { epochs: Some(2), method: Some(TrainMethod::Ord), ..Default::default() });
        assert_eq!((cfg.epochs, cfg.method), (2, TrainMethod::Ord));
        assert_eq!(cfg.member_seeds(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn parse_nested_config() {
        let text = r#"
            method = "ord"
            arch = "mlp2"
            members = 2
            [seeds]
            members = [7, 9]
            [augmentation]
            pad = 0
            rotation_max_deg = 0.0
            [data.id]
            kind = "synthetic"
            dataset = "ring-vs-blob"
            n_per_class = 10
            test_per_class = 5
            [[data.ood]]
            kind = "fake"
            n = 20
        "#;
        let cfg = ExperimentConfig::from_toml(text, Path::new(".")).unwrap();
        assert_eq!(cfg.member_seeds(), vec![7, 9]);
        assert!(matches!(cfg.data.id, IdSource::Synthetic { dataset: Synthetic2d::RingVsBlob, .. }));
        assert!(matches!(cfg.data.ood[0], OodSource::Fake { n: 20, .. }));
        cfg.validate().unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml(), Path::new(".")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn validation_names_fields() {
        let err = |text: &str| match ExperimentConfig::from_toml(text, Path::new(".")).and_then(|c| c.validate()) {
            Err(Error::Config(m)) => m,
            other => panic!("expected config error, got {other:?}"),
        };
        assert!(err("members = 0").starts_with("members"));
        assert!(err("fpr_max = 1.5").starts_with("fpr_max"));
        assert!(err("arch = \"resnet\"").starts_with("arch"));
        assert!(err("members = 2\n[seeds]\nmembers = [1, 1]").starts_with("seeds.members"));
        assert!(err("[data.id]\nkind = \"idx\"\ntrain = \"nope.json\"\ntest = \"nope.json\"\n[[data.ood]]\nkind = \"fake\"")
            .starts_with("data.id.train"));
        assert!(err("bogus = 1").contains("bogus"));
        assert!(err("epochs = \"ten\"").contains("epochs"));
    }

    #[test]
    fn report_of_empty_dir_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_report(dir.path()), Err(Error::Data(_))));
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn svg_is_well_formed() {
        let curve = RocCurve { fpr: vec![0.0, 0.001, 1.0], tpr: vec![0.0, 0.8, 1.0], thresholds: vec![f64::INFINITY, 0.5, 0.1] };
        let s = roc_svg(&curve, "t");
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("polyline"));
    }
}
