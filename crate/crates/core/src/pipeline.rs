//! The outer loop: DA, then repeated Di, synthesis, pool refresh and DA on the
//! augmented pool. Also the equal-budget control arm.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    self, cache, idx_samples, load_idx, make_desk_benchmark, make_mnistm, resize_to, sample_protocol_usps,
    DataError, DatasetSplit, DeskConfig, Domain, Sample, TextureCorpus,
};
use crate::eval::{
    export_features, metrics_csv, probe_disentanglement, render_synth_grid, target_accuracy, EvalError,
    FeatureKind, ProbeConfig,
};
use crate::models::{Checkpoint, Component, ModelBundle, ModelConfig, ModelError};
use crate::stages::{
    pseudo_label, reconstruction_mse, train_da_stage, train_di_stage, Backbone, StageConfig, StageError,
    StageMetrics,
};
use crate::substrate::{OptimizerKind, Tensor};
use crate::synthesis::{refresh_pool, synthesize, write_provenance, Pairing, PoolPolicy, SynthesisError, SyntheticSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    #[default]
    Desk,
    MnistMnistm,
    MnistUsps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub name: DatasetName,
    /// Generation/sampling seed; `seeds.data` when absent.
    pub seed: Option<u64>,
    /// `[train, test]` samples per domain.
    pub sizes: [usize; 2],
    pub num_classes: usize,
    pub image_size: usize,
    pub texture_amplitude: f32,
    pub texture_count: usize,
    pub texture_size: usize,
    /// Directory of real texture images; procedural noise when absent.
    pub texture_dir: Option<String>,
    /// Directory holding the MNIST IDX files.
    pub mnist_dir: Option<String>,
    /// Directory holding USPS converted to IDX (`usps-{train,test}-{images,labels}.idx`).
    pub usps_dir: Option<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let d = DeskConfig::default();
        Self {
            name: DatasetName::Desk,
            seed: None,
            sizes: [d.train_per_domain, d.test_per_domain],
            num_classes: d.num_classes,
            image_size: d.image_size,
            texture_amplitude: d.texture_amplitude,
            texture_count: d.texture_count,
            texture_size: d.texture_size,
            texture_dir: None,
            mnist_dir: None,
            usps_dir: None,
        }
    }
}

impl DatasetConfig {
    pub fn desk(&self) -> DeskConfig {
        DeskConfig {
            num_classes: self.num_classes,
            train_per_domain: self.sizes[0],
            test_per_domain: self.sizes[1],
            image_size: self.image_size,
            texture_amplitude: self.texture_amplitude,
            texture_count: self.texture_count,
            texture_size: self.texture_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_c: usize,
    pub d_s: usize,
    pub channels: [usize; 2],
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_c: m.d_c,
            d_s: m.d_s,
            channels: m.channels,
            hidden: m.hidden,
        }
    }
}

/// Per-stage schedule; loss weights live at the top level of [`RunConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub adversary_lr: f32,
    pub update_ratio: usize,
}

impl StageSchedule {
    fn da_default() -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            adversary_lr: 1e-3,
            update_ratio: 1,
        }
    }

    fn di_default() -> Self {
        Self {
            epochs: 10,
            ..Self::da_default()
        }
    }
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self::da_default()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    /// Synthetic samples per iteration; the source training size when absent.
    pub pool_size: Option<usize>,
    pub pairing: Pairing,
    pub policy: PoolPolicy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlVariant {
    /// Pool synthesized once after iteration 1 and never refreshed.
    #[default]
    Stale,
    /// No synthetic data at all.
    None,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub variant: ControlVariant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub pairing: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { init: 1, data: 1, pairing: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    /// Probe every iteration; otherwise probes are left empty.
    pub probes: bool,
    pub grid_size: usize,
    pub export_features: bool,
    pub checkpoints: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            probes: true,
            grid_size: 8,
            export_features: true,
            checkpoints: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub backbone: Backbone,
    /// Domain-loss weight; 0.1 for dann/coral and 1.0 for mmd when absent.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub lambda: f32,
    pub dida_iterations: usize,
    /// Keep E_c between iterations (otherwise it is re-initialized too).
    pub warm_start: bool,
    pub deterministic: bool,
    pub output_dir: Option<String>,
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub da: StageSchedule,
    pub di: StageSchedule,
    pub synthesis: SynthesisConfig,
    pub control: ControlConfig,
    pub seeds: Seeds,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "dida".into(),
            backbone: Backbone::Dann,
            alpha: None,
            beta: 0.5,
            lambda: 1.0,
            dida_iterations: 4,
            warm_start: true,
            deterministic: true,
            output_dir: None,
            dataset: DatasetConfig::default(),
            model: ModelSection::default(),
            da: StageSchedule::da_default(),
            di: StageSchedule::di_default(),
            synthesis: SynthesisConfig::default(),
            control: ControlConfig::default(),
            seeds: Seeds::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or_else(|| self.backbone.default_alpha())
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seeds.data)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seeds = Seeds { init: seed, data: seed, pairing: seed };
    }

    fn stage(&self, s: &StageSchedule) -> StageConfig {
        StageConfig {
            epochs: s.epochs,
            batch_size: s.batch_size,
            optimizer: s.optimizer,
            lr: s.lr,
            adversary_lr: s.adversary_lr,
            backbone: self.backbone,
            alpha: self.alpha(),
            beta: self.beta,
            update_ratio: s.update_ratio,
        }
    }

    pub fn da_stage(&self) -> StageConfig {
        self.stage(&self.da)
    }

    pub fn di_stage(&self) -> StageConfig {
        self.stage(&self.di)
    }

    pub fn model_config(&self, num_classes: usize, image_shape: [usize; 3]) -> ModelConfig {
        ModelConfig {
            num_classes,
            image_shape,
            d_c: self.model.d_c,
            d_s: self.model.d_s,
            channels: self.model.channels,
            hidden: self.model.hidden,
            grl_lambda: self.lambda,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.da_stage().validate().map_err(|e| PipelineError::Config(format!("da: {e}")))?;
        self.di_stage().validate().map_err(|e| PipelineError::Config(format!("di: {e}")))?;
        if self.dataset.name == DatasetName::Desk {
            self.dataset.desk().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        self.model_config(self.dataset.num_classes.max(2), [3, 16, 16])
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.synthesis.pool_size == Some(0) {
            return bad("synthesis.pool_size must be >= 1".into());
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return bad(format!("run_id {:?} is not a plain name", self.run_id));
        }
        Ok(())
    }

    /// Effective config as TOML; written next to every run.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{source} (partial report at {report})")]
    Partial {
        #[source]
        source: Box<PipelineError>,
        report: String,
    },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub i: usize,
    pub target_acc: f64,
    pub source_acc: f64,
    pub probe_common: Option<f64>,
    pub probe_specific: Option<f64>,
    pub pool_size: usize,
    pub da: StageMetrics,
    pub di: Option<StageMetrics>,
    /// Held-out reconstruction MSE right after this iteration's Di stage.
    pub recon_heldout: Option<f64>,
    /// MSE of held-out source samples synthesized with themselves as partner,
    /// with the same bundle state that produced the pool.
    pub self_swap: Option<f64>,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub arm: String,
    pub records: Vec<IterationRecord>,
    pub total_da_epochs: usize,
    pub config_echo: String,
    pub total_wall_time_s: f64,
    pub error: Option<String>,
}

/// Source and target splits ready for training.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub source: DatasetSplit,
    pub target: DatasetSplit,
}

/// Deterministic sub-seed for one named use at one iteration.
pub fn derive_seed(seed: u64, tag: &str, i: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update((i as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn cache_key(cfg: &RunConfig) -> String {
    let json = serde_json::to_string(&cfg.dataset).expect("dataset serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    h.update(cfg.dataset_seed().to_le_bytes());
    let hex: String = h.finalize()[..6].iter().map(|b| format!("{b:02x}")).collect();
    let name = serde_json::to_value(cfg.dataset.name).expect("name serializes");
    format!("{}-{}", name.as_str().unwrap_or("dataset"), hex)
}

/// Cache directory for this config's dataset under `root`.
pub fn dataset_cache_dir(cfg: &RunConfig, root: &Path) -> PathBuf {
    root.join(cache_key(cfg))
}

fn take_first(samples: &[Sample], n: usize) -> Vec<Sample> {
    samples.iter().take(n).cloned().collect()
}

fn to_rgb(split: DatasetSplit) -> DatasetSplit {
    if split.image_shape[0] == 3 {
        return split;
    }
    let rgb = |v: Vec<Sample>| {
        v.into_iter()
            .map(|s| {
                let d = s.image.data();
                let mut out = Vec::with_capacity(3 * d.len());
                (0..3).for_each(|_| out.extend_from_slice(d));
                let [_, h, w] = s.shape();
                Sample { image: Tensor::new(vec![3, h, w], out).expect("shape"), ..s }
            })
            .collect()
    };
    DatasetSplit {
        train: rgb(split.train),
        test: rgb(split.test),
        image_shape: [3, split.image_shape[1], split.image_shape[2]],
        ..split
    }
}

fn idx_split(dir: &Path, files: [&str; 4], prefix: &str, k: usize) -> Result<DatasetSplit, PipelineError> {
    let train = load_idx(&dir.join(files[0]), &dir.join(files[1]))?;
    let test = load_idx(&dir.join(files[2]), &dir.join(files[3]))?;
    Ok(DatasetSplit::labeled(
        idx_samples(&train, &format!("{prefix}-train-"), Domain::Source),
        idx_samples(&test, &format!("{prefix}-test-"), Domain::Source),
        k,
    )?)
}

const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];
const USPS_FILES: [&str; 4] = [
    "usps-train-images.idx",
    "usps-train-labels.idx",
    "usps-test-images.idx",
    "usps-test-labels.idx",
];

/// Builds the configured dataset without touching any cache.
pub fn build_dataset(cfg: &RunConfig) -> Result<Prepared, PipelineError> {
    let seed = cfg.dataset_seed();
    let need = |d: &Option<String>, key: &str| {
        d.as_ref()
            .map(PathBuf::from)
            .ok_or_else(|| PipelineError::Config(format!("dataset.{key} is required for {:?}", cfg.dataset.name)))
    };
    let (source, target) = match cfg.dataset.name {
        DatasetName::Desk => make_desk_benchmark(&cfg.dataset.desk(), seed)?,
        DatasetName::MnistMnistm => {
            let mnist = idx_split(&need(&cfg.dataset.mnist_dir, "mnist_dir")?, MNIST_FILES, "mnist", 10)?;
            let [ntr, nte] = cfg.dataset.sizes;
            let corpus = match &cfg.dataset.texture_dir {
                Some(d) => TextureCorpus::from_dir(Path::new(d))?,
                None => TextureCorpus::procedural(cfg.dataset.texture_count, cfg.dataset.texture_size.max(28), seed)?,
            };
            // Disjoint halves of MNIST feed the two domains.
            let half = mnist.train.len() / 2;
            let src = DatasetSplit::labeled(
                take_first(&mnist.train[..half], ntr),
                take_first(&mnist.test, nte),
                10,
            )?;
            let digits = DatasetSplit::labeled(
                take_first(&mnist.train[half..], ntr),
                take_first(&mnist.test[mnist.test.len().saturating_sub(nte)..], nte),
                10,
            )?;
            let mut tgt = make_mnistm(&digits, &corpus, seed)?;
            for s in tgt.train.iter_mut().chain(tgt.test.iter_mut()) {
                s.id = format!("mnistm{}", &s.id[5..]);
            }
            let tgt = DatasetSplit::labeled(tgt.train, tgt.test, 10)?;
            (to_rgb(src), tgt.into_target())
        }
        DatasetName::MnistUsps => {
            let mnist = idx_split(&need(&cfg.dataset.mnist_dir, "mnist_dir")?, MNIST_FILES, "mnist", 10)?;
            let usps = idx_split(&need(&cfg.dataset.usps_dir, "usps_dir")?, USPS_FILES, "usps", 10)?;
            let (s, t) = sample_protocol_usps(&mnist, &usps, seed)?;
            let s = resize_to(&s, 16, 16)?;
            (s, t.into_target())
        }
    };
    Ok(Prepared { source, target })
}

/// Reads the dataset from `cache_root` when present, otherwise builds and
/// stores it there.
pub fn load_dataset(cfg: &RunConfig, cache_root: Option<&Path>) -> Result<Prepared, PipelineError> {
    let Some(root) = cache_root else {
        return build_dataset(cfg);
    };
    let dir = dataset_cache_dir(cfg, root);
    if cache::exists(&dir) {
        let (_, source, target) = cache::read(&dir)?;
        return Ok(Prepared { source, target });
    }
    let p = build_dataset(cfg)?;
    write_cache(cfg, &dir, &p)?;
    Ok(p)
}

pub fn write_cache(cfg: &RunConfig, dir: &Path, p: &Prepared) -> Result<(), PipelineError> {
    let manifest = cache::Manifest {
        name: cache_key(cfg),
        seed: cfg.dataset_seed(),
        num_classes: p.source.num_classes,
        image_shape: p.source.image_shape,
        counts: [p.source.train.len(), p.source.test.len(), p.target.train.len(), p.target.test.len()],
        config: serde_json::to_value(&cfg.dataset).expect("dataset serializes"),
    };
    Ok(cache::write(dir, &manifest, &p.source, &p.target)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Arm {
    Dida,
    Control(ControlVariant),
}

impl Arm {
    fn name(self) -> &'static str {
        match self {
            Arm::Dida => "dida",
            Arm::Control(ControlVariant::Stale) => "control-stale",
            Arm::Control(ControlVariant::None) => "control-none",
        }
    }
}

/// Output locations of one run.
struct Sink {
    dir: PathBuf,
    run_id: String,
}

impl Sink {
    fn new(dir: &Path, run_id: &str, echo: &str) -> Result<Self, PipelineError> {
        for sub in ["", "checkpoints", "synth", "features"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| io_err(&d, e))?;
        }
        let p = dir.join("config.toml");
        fs::write(&p, echo).map_err(|e| io_err(&p, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            run_id: run_id.to_string(),
        })
    }

    fn path(&self, sub: &str, i: usize, suffix: &str) -> PathBuf {
        self.dir.join(sub).join(format!("{}_i{}_{}", self.run_id, i, suffix))
    }

    fn write_report(&self, report: &RunReport) -> Result<(), PipelineError> {
        let p = self.dir.join("metrics.csv");
        fs::write(&p, metrics_csv(&report.records)).map_err(|e| io_err(&p, e))?;
        let p = self.dir.join("report.json");
        let json = serde_json::to_string_pretty(report).expect("report serializes");
        fs::write(&p, json + "\n").map_err(|e| io_err(&p, e))
    }
}

#[derive(Clone)]
struct RunState {
    bundle: ModelBundle,
    pool: SyntheticSet,
    records: Vec<IterationRecord>,
    /// Target samples with the labels used by the latest Di stage.
    pseudo: Vec<Sample>,
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    data: &'a Prepared,
    echo: String,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a RunConfig, data: &'a Prepared) -> Result<Self, PipelineError> {
        cfg.validate()?;
        if data.source.image_shape != data.target.image_shape {
            return Err(PipelineError::Config(format!(
                "source shape {:?} differs from target {:?}",
                data.source.image_shape, data.target.image_shape
            )));
        }
        Ok(Self { cfg, data, echo: cfg.echo() })
    }

    fn init(&self) -> Result<RunState, PipelineError> {
        let mc = self.cfg.model_config(self.data.source.num_classes, self.data.source.image_shape);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seeds.init, "bundle", 0));
        Ok(RunState {
            bundle: ModelBundle::new(mc, &mut rng)?,
            pool: SyntheticSet::default(),
            records: Vec::new(),
            pseudo: Vec::new(),
        })
    }

    fn pool_size(&self) -> usize {
        self.cfg.synthesis.pool_size.unwrap_or(self.data.source.train.len())
    }

    fn step(&self, st: &mut RunState, i: usize, arm: Arm, sinks: &[&Sink]) -> Result<(), PipelineError> {
        let cfg = self.cfg;
        let (source, target) = (&self.data.source, &self.data.target);
        let mut di_metrics = None;
        let mut recon_heldout = None;
        let mut self_swap = None;
        let mut new_synth = false;
        let regenerate = match arm {
            Arm::Dida => i >= 1,
            Arm::Control(ControlVariant::Stale) => i == 1,
            Arm::Control(ControlVariant::None) => false,
        };
        if regenerate {
            st.pseudo = pseudo_label(&st.bundle, &target.train)?;
            let mut di_pool: Vec<Sample> = source.train.clone();
            di_pool.extend(st.pseudo.iter().cloned());
            st.bundle.set_frozen(&[Component::CommonEncoder], true);
            let m = train_di_stage(&mut st.bundle, &di_pool, &cfg.di_stage(), derive_seed(cfg.seeds.data, "di", i));
            st.bundle.set_frozen(&[Component::CommonEncoder], false);
            di_metrics = Some(m?);
            let held: Vec<Sample> = source.test.iter().chain(&target.test).cloned().collect();
            recon_heldout = Some(reconstruction_mse(&st.bundle, &held)?);
            self_swap = Some(self_swap_mse(&st.bundle, &source.test)?);
            let fresh = synthesize(
                &st.bundle,
                &source.train,
                &target.train,
                cfg.synthesis.pairing,
                self.pool_size(),
                derive_seed(cfg.seeds.pairing, "synth", i),
                i,
            )?;
            st.pool = refresh_pool(std::mem::take(&mut st.pool), fresh, cfg.synthesis.policy);
            new_synth = true;
        }
        if i >= 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seeds.init, "heads", i));
            st.bundle.reinit(Component::Classifier, &mut rng)?;
            st.bundle.reinit(Component::Discriminator, &mut rng)?;
            if !cfg.warm_start {
                st.bundle.reinit(Component::CommonEncoder, &mut rng)?;
            }
        }
        let mut labeled = source.train.clone();
        labeled.extend(st.pool.samples.iter().cloned());
        let da = train_da_stage(
            &mut st.bundle,
            &labeled,
            &target.train,
            &cfg.da_stage(),
            derive_seed(cfg.seeds.data, "da", i),
        )?;

        let target_acc = target_accuracy(&st.bundle, &target.test, &target.truth)?;
        let source_acc = target_accuracy(&st.bundle, &source.test, &source.truth)?;
        let (probe_common, probe_specific) = if cfg.eval.probes {
            let (c, s) = probe_pair(&st.bundle, self.data, &cfg.eval.probe)?;
            (Some(c), Some(s))
        } else {
            (None, None)
        };
        let mut record = IterationRecord {
            i,
            target_acc,
            source_acc,
            probe_common,
            probe_specific,
            pool_size: st.pool.len(),
            da,
            di: di_metrics,
            recon_heldout,
            self_swap,
            checkpoint: None,
        };
        for sink in sinks {
            if cfg.eval.checkpoints {
                let p = sink.path("checkpoints", i, "bundle.ckpt");
                let rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seeds.init, "heads", i + 1));
                Checkpoint {
                    bundle: st.bundle.clone(),
                    config_echo: self.echo.clone(),
                    rng: Some(crate::models::RngState::capture(&rng)),
                }
                .save(&p)?;
                record.checkpoint = Some(format!("checkpoints/{}", p.file_name().unwrap().to_string_lossy()));
            }
            if new_synth {
                write_provenance(&sink.path("synth", i, "provenance.csv"), &st.pool)?;
                let n = cfg.eval.grid_size.min(st.pool.len());
                if n > 0 {
                    let triples = grid_triples(&st.pool, source, target, n);
                    render_synth_grid(&sink.path("synth", i, "grid.png"), &triples)?;
                }
            }
            if cfg.eval.export_features {
                let pseudo_test = pseudo_label(&st.bundle, &target.test)?;
                let synth: Vec<Sample> = st.pool.samples.iter().take(1000).cloned().collect();
                export_features(
                    &sink.path("features", i, "features.csv"),
                    &st.bundle,
                    &[&source.test, &pseudo_test, &synth],
                )?;
            }
        }
        st.records.push(record);
        Ok(())
    }

    fn report(&self, st: &RunState, arm: Arm, start: Instant, error: Option<String>) -> RunReport {
        RunReport {
            run_id: self.cfg.run_id.clone(),
            arm: arm.name().into(),
            records: st.records.clone(),
            total_da_epochs: st.records.len() * self.cfg.da.epochs,
            config_echo: self.echo.clone(),
            total_wall_time_s: start.elapsed().as_secs_f64(),
            error,
        }
    }

    /// Runs iterations `from..=dida_iterations` and persists after each one.
    fn drive(
        &self,
        st: &mut RunState,
        from: usize,
        arm: Arm,
        sink: Option<&Sink>,
        start: Instant,
    ) -> Result<RunReport, PipelineError> {
        for i in from..=self.cfg.dida_iterations {
            let sinks: Vec<&Sink> = sink.into_iter().collect();
            if let Err(e) = self.step(st, i, arm, &sinks) {
                let report = self.report(st, arm, start, Some(e.to_string()));
                return Err(match sink {
                    Some(s) => {
                        s.write_report(&report)?;
                        PipelineError::Partial {
                            source: Box::new(e),
                            report: s.dir.join("report.json").display().to_string(),
                        }
                    }
                    None => e,
                });
            }
            if let Some(s) = sink {
                s.write_report(&self.report(st, arm, start, None))?;
            }
        }
        Ok(self.report(st, arm, start, None))
    }

    fn sink(&self, out: Option<&Path>) -> Result<Option<Sink>, PipelineError> {
        out.map(|d| Sink::new(d, &self.cfg.run_id, &self.echo)).transpose()
    }

    fn run(&self, arm: Arm, out: Option<&Path>) -> Result<RunReport, PipelineError> {
        let start = Instant::now();
        let sink = self.sink(out)?;
        let mut st = self.init()?;
        self.drive(&mut st, 0, arm, sink.as_ref(), start)
    }
}

fn grid_triples(pool: &SyntheticSet, source: &DatasetSplit, target: &DatasetSplit, n: usize) -> Vec<(Tensor, Tensor, Tensor)> {
    let find = |split: &DatasetSplit, id: &str| {
        split
            .train
            .iter()
            .find(|s| s.id == id)
            .map(|s| s.image.clone())
            .unwrap_or_else(|| Tensor::zeros(split.image_shape.to_vec()))
    };
    pool.samples
        .iter()
        .zip(&pool.provenance)
        .take(n)
        .map(|(s, p)| (find(source, &p.source_id), s.image.clone(), find(target, &p.target_id)))
        .collect()
}

/// Decodes each sample from its own common and specific features, through
/// the synthesis path, and returns the mean squared error.
pub fn self_swap_mse(bundle: &ModelBundle, samples: &[Sample]) -> Result<f64, PipelineError> {
    let set = synthesize(bundle, samples, samples, Pairing::Cyclic, samples.len(), 0, 0)?;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (s, p) in set.samples.iter().zip(samples) {
        for (a, b) in s.image.data().iter().zip(p.image.data()) {
            sum += ((a - b) as f64).powi(2);
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}

/// Probes common and specific features of both test halves with ground truth.
pub fn probe_pair(bundle: &ModelBundle, data: &Prepared, cfg: &ProbeConfig) -> Result<(f64, f64), PipelineError> {
    let samples: Vec<&Sample> = data.source.test.iter().chain(&data.target.test).collect();
    let labels: Vec<usize> = samples
        .iter()
        .map(|s| {
            data.source
                .truth
                .label(&s.id)
                .or_else(|| data.target.truth.label(&s.id))
                .ok_or_else(|| EvalError::MissingLabel(s.id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let f = bundle.encode(&data::to_nhwc(&samples))?;
    let k = data.source.num_classes;
    let c = probe_disentanglement(&f.common, &labels, k, FeatureKind::Common, cfg)?;
    let s = probe_disentanglement(&f.specific, &labels, k, FeatureKind::Specific, cfg)?;
    Ok((c.accuracy, s.accuracy))
}

/// i=0 DA on source only, then `dida_iterations` rounds of Di, synthesis,
/// pool refresh and DA on source plus pool.
pub fn run_dida(cfg: &RunConfig, data: &Prepared, out: Option<&Path>) -> Result<RunReport, PipelineError> {
    Runner::new(cfg, data)?.run(Arm::Dida, out)
}

/// Same DA epoch budget as [`run_dida`] without fresh synthetic data.
pub fn run_control(cfg: &RunConfig, data: &Prepared, out: Option<&Path>) -> Result<RunReport, PipelineError> {
    Runner::new(cfg, data)?.run(Arm::Control(cfg.control.variant), out)
}

/// Both arms. With the stale-pool control the arms are identical through
/// iteration 1, so that prefix is computed once and forked.
pub fn run_paired(
    cfg: &RunConfig,
    data: &Prepared,
    out_dida: Option<&Path>,
    out_control: Option<&Path>,
) -> Result<(RunReport, RunReport), PipelineError> {
    let runner = Runner::new(cfg, data)?;
    if cfg.control.variant != ControlVariant::Stale || cfg.dida_iterations == 0 {
        return Ok((runner.run(Arm::Dida, out_dida)?, runner.run(Arm::Control(cfg.control.variant), out_control)?));
    }
    let start = Instant::now();
    let sd = runner.sink(out_dida)?;
    let sc = runner.sink(out_control)?;
    let mut st = runner.init()?;
    let shared: Vec<&Sink> = sd.iter().chain(sc.iter()).collect();
    for i in 0..=1 {
        runner.step(&mut st, i, Arm::Dida, &shared)?;
        for s in &shared {
            s.write_report(&runner.report(&st, Arm::Dida, start, None))?;
        }
    }
    let mut control = st.clone();
    let arm_c = Arm::Control(ControlVariant::Stale);
    let rd = runner.drive(&mut st, 2, Arm::Dida, sd.as_ref(), start)?;
    let mut rc = runner.drive(&mut control, 2, arm_c, sc.as_ref(), start)?;
    rc.arm = arm_c.name().into();
    if let Some(s) = &sc {
        s.write_report(&rc)?;
    }
    Ok((rd, rc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_tag_and_iteration() {
        assert_ne!(derive_seed(1, "da", 0), derive_seed(1, "di", 0));
        assert_ne!(derive_seed(1, "da", 0), derive_seed(1, "da", 1));
        assert_eq!(derive_seed(5, "x", 2), derive_seed(5, "x", 2));
    }

    #[test]
    fn alpha_defaults_follow_backbone() {
        let mut c = RunConfig::default();
        assert_eq!(c.alpha(), 0.1);
        c.backbone = Backbone::Mmd;
        assert_eq!(c.alpha(), 1.0);
        c.alpha = Some(0.3);
        assert_eq!(c.alpha(), 0.3);
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.echo()).unwrap();
        assert_eq!(back, c);
    }
}
