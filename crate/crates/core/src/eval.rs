//! Measurement: accuracy, feature probes, feature dumps, image grids, metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{to_nhwc, BatchOrder, GroundTruth, Sample};
use crate::losses::class_nll_var;
use crate::models::{ModelBundle, ModelError};
use crate::substrate::{Graph, Layer, Optimizer, OptimizerKind, Sequential, SubstrateError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty evaluation set")]
    Empty,
    #[error("no ground-truth label for sample {0}")]
    MissingLabel(String),
    #[error("degenerate probe split: {0}")]
    DegenerateSplit(String),
    #[error("image shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Percent of `samples` whose prediction equals the ground-truth label.
pub fn target_accuracy(bundle: &ModelBundle, samples: &[Sample], truth: &GroundTruth) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let labels: Vec<usize> = samples
        .iter()
        .map(|s| truth.label(&s.id).ok_or_else(|| EvalError::MissingLabel(s.id.clone())))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let pred = bundle.predict(&to_nhwc(&refs))?;
    let hits = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / samples.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Common,
    Specific,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub kind: FeatureKind,
    pub accuracy: f64,
    pub chance: f64,
    pub epochs: usize,
}

/// Trains a fresh one-hidden-layer probe on a seeded 80/20 split of
/// `features` and reports held-out accuracy. Features are standardized with
/// the training-split statistics.
pub fn probe_disentanglement(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
    kind: FeatureKind,
    cfg: &ProbeConfig,
) -> Result<ProbeResult, EvalError> {
    let n = features.rows();
    if n != labels.len() {
        return Err(EvalError::DegenerateSplit(format!("{n} rows, {} labels", labels.len())));
    }
    let n_train = (n as f64 * cfg.train_fraction).round() as usize;
    if n_train < 2 || n_train >= n || num_classes < 2 || cfg.epochs == 0 {
        return Err(EvalError::DegenerateSplit(format!("{n} samples, {n_train} for training")));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(EvalError::DegenerateSplit(format!("label {l} >= {num_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (tr, te) = order.split_at(n_train);

    let d = features.row_len();
    let mut mean = vec![0.0f64; d];
    let mut var = vec![0.0f64; d];
    for &i in tr {
        for (m, &v) in mean.iter_mut().zip(features.row(i)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= tr.len() as f64);
    for &i in tr {
        for ((s, &v), m) in var.iter_mut().zip(features.row(i)).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let scale: Vec<f32> = var.iter().map(|s| 1.0 / ((s / tr.len() as f64).sqrt() + 1e-6) as f32).collect();
    let standardize = |idx: &[usize]| {
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            for ((&v, m), s) in features.row(i).iter().zip(&mean).zip(&scale) {
                out.push((v - *m as f32) * s);
            }
        }
        Tensor::new(vec![idx.len(), d], out).expect("shape")
    };
    let xtr = standardize(tr);
    let xte = standardize(te);
    let ytr: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
    let yte: Vec<usize> = te.iter().map(|&i| labels[i]).collect();

    let mut probe = Sequential::new(
        "probe",
        vec![
            Layer::Dense { in_dim: d, out_dim: cfg.hidden },
            Layer::Relu,
            Layer::Dense { in_dim: cfg.hidden, out_dim: num_classes },
            Layer::Softmax,
        ],
        &mut rng,
    )?;
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.lr);
    let batches = BatchOrder::new(tr.len(), cfg.batch_size.max(1), cfg.seed ^ 0x9e37)
        .map_err(|e| EvalError::DegenerateSplit(e.to_string()))?;
    for epoch in 0..cfg.epochs {
        for idx in batches.epoch(epoch as u64) {
            let mut g = Graph::new();
            let x = g.input(xtr.gather_rows(&idx));
            let p = probe.forward(&mut g, x, 0)?;
            let y: Vec<usize> = idx.iter().map(|&i| ytr[i]).collect();
            let l = class_nll_var(&mut g, p, &y).map_err(|e| EvalError::DegenerateSplit(e.to_string()))?;
            g.backward(l)?;
            probe.accumulate_grads(&g, 0);
            opt.step(&mut probe.params_mut().iter_mut().collect::<Vec<_>>())?;
        }
    }
    let pred = probe.infer(&xte)?.argmax_rows();
    let hits = pred.iter().zip(&yte).filter(|(p, y)| p == y).count();
    Ok(ProbeResult {
        kind,
        accuracy: 100.0 * hits as f64 / yte.len() as f64,
        chance: 100.0 / num_classes as f64,
        epochs: cfg.epochs,
    })
}

/// Writes `id,domain,label,fc_0..,fs_0..` rows. `label` is the sample's own
/// (possibly pseudo) label, or empty.
pub fn export_features(path: &Path, bundle: &ModelBundle, sets: &[&[Sample]]) -> Result<usize, EvalError> {
    let (dc, ds) = (bundle.config().d_c, bundle.config().d_s);
    let mut out = String::from("id,domain,label");
    (0..dc).for_each(|i| {
        let _ = write!(out, ",fc_{i}");
    });
    (0..ds).for_each(|i| {
        let _ = write!(out, ",fs_{i}");
    });
    out.push('\n');
    let mut rows = 0;
    for set in sets {
        if set.is_empty() {
            continue;
        }
        let refs: Vec<&Sample> = set.iter().collect();
        let f = bundle.encode(&to_nhwc(&refs))?;
        for (i, s) in set.iter().enumerate() {
            let label = s.label.map(|l| l.to_string()).unwrap_or_default();
            let _ = write!(out, "{},{},{}", s.id, s.domain, label);
            for v in f.common.row(i).iter().chain(f.specific.row(i)) {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
            rows += 1;
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))?;
    Ok(rows)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Three rows of tiles (source, synthetic, target), one column per triple,
/// written as PNG. Images are `[C, H, W]` with 1 or 3 channels.
pub fn render_synth_grid(path: &Path, triples: &[(Tensor, Tensor, Tensor)]) -> Result<(), EvalError> {
    let first = triples.first().ok_or(EvalError::Empty)?.0.shape().to_vec();
    for (a, b, c) in triples {
        for t in [a, b, c] {
            if t.shape() != first.as_slice() {
                return Err(EvalError::ShapeMismatch(first.clone(), t.shape().to_vec()));
            }
        }
    }
    let (ch, h, w) = (first[0], first[1], first[2]);
    let mut img = image::RgbImage::new((triples.len() * w) as u32, (3 * h) as u32);
    for (col, (a, b, c)) in triples.iter().enumerate() {
        for (row, t) in [a, b, c].into_iter().enumerate() {
            let d = t.data();
            for y in 0..h {
                for x in 0..w {
                    let px = |k: usize| to_u8(d[((if ch == 1 { 0 } else { k }) * h + y) * w + x]);
                    img.put_pixel((col * w + x) as u32, (row * h + y) as u32, image::Rgb([px(0), px(1), px(2)]));
                }
            }
        }
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| io_err(path, e))
}

/// One row per completed iteration; fixed column order and precision.
pub fn metrics_csv(records: &[crate::pipeline::IterationRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.2}")).unwrap_or_default();
    let mut out = String::from("i,target_acc,source_acc,probe_common,probe_specific,pool_size\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{:.2},{:.2},{},{},{}",
            r.i,
            r.target_acc,
            r.source_acc,
            opt(r.probe_common),
            opt(r.probe_specific),
            r.pool_size
        );
    }
    out
}

pub fn emit_metrics(path: &Path, report: &crate::pipeline::RunReport) -> Result<(), EvalError> {
    fs::write(path, metrics_csv(&report.records)).map_err(|e| io_err(path, e))
}
