//! Datasets: IDX ingestion, texture blending, the procedural glyph benchmark,
//! resizing, sampling protocols, batching and the on-disk cache.

mod batch;
pub mod cache;
mod desk;
pub mod idx;
mod resize;
mod texture;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::substrate::Tensor;

pub use batch::BatchOrder;
pub use desk::{make_desk_benchmark, DeskConfig};
pub use idx::{encode_idx_pair, load_idx, parse_idx_pair, IdxDataset};
pub use resize::{resize_image, resize_to};
pub use texture::{make_mnistm, TextureCorpus};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("bad IDX magic {found:#010x}{}", expected.map(|e| format!(" (expected {e:#010x})")).unwrap_or_default())]
    BadMagic { expected: Option<u32>, found: u32 },
    #[error("truncated file: need {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} outside [0, {classes})")]
    InvalidLabel { label: usize, classes: usize },
    #[error("texture corpus is empty")]
    EmptyCorpus,
    #[error("texture patch {patch:?} smaller than image {image:?}")]
    PatchTooSmall { patch: [usize; 2], image: [usize; 2] },
    #[error("empty sample set")]
    EmptySplit,
    #[error("pool of {available} cannot supply {requested} samples")]
    InsufficientPool { requested: usize, available: usize },
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("image shape {found:?} differs from {expected:?}")]
    ShapeMismatch { expected: [usize; 3], found: [usize; 3] },
}

impl DataError {
    pub(crate) fn io(path: &Path, e: impl fmt::Display) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Source,
    Target,
    SyntheticTarget,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
            Domain::SyntheticTarget => "synthetic-target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One image, `[C, H, W]` in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub label: Option<usize>,
    pub domain: Domain,
}

impl Sample {
    pub fn shape(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[0], s[1], s[2]]
    }
}

/// Evaluation-only labels, keyed by sample id. Training routines take sample
/// slices and never see this structure.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    labels: HashMap<String, usize>,
}

impl GroundTruth {
    pub fn insert(&mut self, id: &str, label: usize) {
        self.labels.insert(id.to_string(), label);
    }

    pub fn label(&self, id: &str) -> Option<usize> {
        self.labels.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Labels for `samples` in order; fails if any id is unknown.
    pub fn labels_for(&self, samples: &[Sample]) -> Option<Vec<usize>> {
        samples.iter().map(|s| self.label(&s.id)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub num_classes: usize,
    /// `[C, H, W]`.
    pub image_shape: [usize; 3],
    /// Labels of every sample in both halves, including unlabeled ones.
    pub truth: GroundTruth,
}

impl DatasetSplit {
    /// Builds a labeled split; every sample must carry a label.
    pub fn labeled(
        train: Vec<Sample>,
        test: Vec<Sample>,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        let first = train.first().or(test.first()).ok_or(DataError::EmptySplit)?;
        let image_shape = first.shape();
        let mut truth = GroundTruth::default();
        let mut seen = HashSet::new();
        for s in train.iter().chain(&test) {
            if s.shape() != image_shape {
                return Err(DataError::ShapeMismatch {
                    expected: image_shape,
                    found: s.shape(),
                });
            }
            if !seen.insert(s.id.as_str()) {
                return Err(DataError::InvalidConfig(format!("duplicate sample id {}", s.id)));
            }
            match s.label {
                Some(l) if l < num_classes => truth.insert(&s.id, l),
                Some(l) => return Err(DataError::InvalidLabel { label: l, classes: num_classes }),
                None => return Err(DataError::InvalidConfig(format!("sample {} unlabeled", s.id))),
            }
        }
        Ok(Self {
            train,
            test,
            num_classes,
            image_shape,
            truth,
        })
    }

    /// Moves labels into the quarantined ground truth and retags every sample
    /// as target domain.
    pub fn into_target(mut self) -> Self {
        for s in self.train.iter_mut().chain(self.test.iter_mut()) {
            s.label = None;
            s.domain = Domain::Target;
        }
        self
    }

    pub fn class_histogram(samples: &[Sample], truth: &GroundTruth, k: usize) -> Vec<usize> {
        let mut h = vec![0; k];
        for s in samples {
            if let Some(l) = s.label.or_else(|| truth.label(&s.id)) {
                h[l] += 1;
            }
        }
        h
    }
}

/// Converts IDX digits into labeled `[1, H, W]` samples with ids `{prefix}{i}`.
pub fn idx_samples(ds: &IdxDataset, prefix: &str, domain: Domain) -> Vec<Sample> {
    ds.images
        .iter()
        .zip(&ds.labels)
        .enumerate()
        .map(|(i, (img, &l))| Sample {
            id: format!("{prefix}{i}"),
            image: Tensor::new(vec![1, ds.rows, ds.cols], img.clone()).expect("idx image size"),
            label: Some(l),
            domain,
        })
        .collect()
}

/// Draws 2000 source and 1800 target training samples without replacement.
/// Test halves are passed through unchanged.
pub fn sample_protocol_usps(
    mnist: &DatasetSplit,
    usps: &DatasetSplit,
    seed: u64,
) -> Result<(DatasetSplit, DatasetSplit), DataError> {
    const SOURCE_N: usize = 2000;
    const TARGET_N: usize = 1800;
    let draw = |split: &DatasetSplit, n: usize, stream: u64| -> Result<DatasetSplit, DataError> {
        if split.train.len() < n {
            return Err(DataError::InsufficientPool {
                requested: n,
                available: split.train.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut picked: Vec<usize> = sample(&mut rng, split.train.len(), n).into_vec();
        picked.sort_unstable();
        let train: Vec<Sample> = picked.iter().map(|&i| split.train[i].clone()).collect();
        let mut truth = GroundTruth::default();
        for s in train.iter().chain(&split.test) {
            if let Some(l) = split.truth.label(&s.id) {
                truth.insert(&s.id, l);
            }
        }
        Ok(DatasetSplit {
            train,
            test: split.test.clone(),
            num_classes: split.num_classes,
            image_shape: split.image_shape,
            truth,
        })
    };
    Ok((draw(mnist, SOURCE_N, 1)?, draw(usps, TARGET_N, 2)?))
}

/// Stacks `[C, H, W]` samples into an NHWC batch.
pub fn to_nhwc(samples: &[&Sample]) -> Tensor {
    let [c, h, w] = samples.first().map(|s| s.shape()).unwrap_or([0, 0, 0]);
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        let src = s.image.data();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(src[(ch * h + y) * w + x]);
                }
            }
        }
    }
    Tensor::new(vec![samples.len(), h, w, c], data).expect("uniform sample shapes")
}

/// Splits an NHWC batch back into `[C, H, W]` images.
pub fn from_nhwc(batch: &Tensor) -> Vec<Tensor> {
    let s = batch.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let src = batch.data();
    (0..n)
        .map(|i| {
            let mut out = vec![0.0; c * h * w];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        out[(ch * h + y) * w + x] = src[((i * h + y) * w + x) * c + ch];
                    }
                }
            }
            Tensor::new(vec![c, h, w], out).expect("shape")
        })
        .collect()
}

/// Count per class, as an ordered map for printing.
pub fn histogram_map(hist: &[usize]) -> BTreeMap<usize, usize> {
    hist.iter().copied().enumerate().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digit(id: &str, label: usize, v: f32) -> Sample {
        Sample {
            id: id.into(),
            image: Tensor::filled(vec![1, 4, 4], v),
            label: Some(label),
            domain: Domain::Source,
        }
    }

    fn pool(prefix: &str, n: usize) -> DatasetSplit {
        let train = (0..n).map(|i| digit(&format!("{prefix}{i}"), i % 10, 0.5)).collect();
        let test = vec![digit(&format!("{prefix}test"), 0, 0.5)];
        DatasetSplit::labeled(train, test, 10).unwrap()
    }

    #[test]
    fn usps_protocol_sizes_and_determinism() {
        let m = pool("m", 2500);
        let u = pool("u", 2000);
        let (s, t) = sample_protocol_usps(&m, &u, 3).unwrap();
        assert_eq!((s.train.len(), t.train.len()), (2000, 1800));
        let ids: HashSet<_> = s.train.iter().map(|x| &x.id).collect();
        assert_eq!(ids.len(), 2000);
        let (s2, _) = sample_protocol_usps(&m, &u, 3).unwrap();
        assert_eq!(s.train, s2.train);
        assert_eq!(t.image_shape, [1, 4, 4]);
        let small = pool("x", 100);
        assert!(matches!(
            sample_protocol_usps(&small, &u, 0),
            Err(DataError::InsufficientPool { requested: 2000, available: 100 })
        ));
    }

    #[test]
    fn target_quarantine() {
        let t = pool("t", 5).into_target();
        assert!(t.train.iter().all(|s| s.label.is_none() && s.domain == Domain::Target));
        assert_eq!(t.truth.label("t3"), Some(3));
    }

    #[test]
    fn nhwc_round_trip() {
        let img = Tensor::new(vec![3, 2, 2], (0..12).map(|v| v as f32).collect()).unwrap();
        let s = Sample {
            id: "a".into(),
            image: img.clone(),
            label: None,
            domain: Domain::Target,
        };
        let b = to_nhwc(&[&s, &s]);
        assert_eq!(b.shape(), &[2, 2, 2, 3]);
        assert_eq!(&b.data()[..3], &[0.0, 4.0, 8.0]);
        assert_eq!(from_nhwc(&b)[1], img);
    }

    #[test]
    fn labeled_split_rejects_duplicates() {
        let r = DatasetSplit::labeled(vec![digit("a", 0, 0.0), digit("a", 1, 0.0)], vec![], 2);
        assert!(matches!(r, Err(DataError::InvalidConfig(_))));
    }
}
