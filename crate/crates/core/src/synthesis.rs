//! Disentangled synthesis: decode source common features with target specific
//! features, keeping the source label.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{from_nhwc, to_nhwc, Domain, Sample};
use crate::models::{ModelBundle, ModelError, INFER_CHUNK};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    /// Target partner drawn uniformly with replacement.
    #[default]
    Random,
    /// Target partner `k mod |T|`.
    Cyclic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolPolicy {
    #[default]
    Replace,
    Append,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub synth_id: String,
    pub source_id: String,
    pub target_id: String,
    pub label: usize,
    pub iteration: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SyntheticSet {
    pub samples: Vec<Sample>,
    /// Row-aligned with `samples`.
    pub provenance: Vec<Provenance>,
    /// Iteration of the bundle that produced the newest samples.
    pub iteration: usize,
}

impl SyntheticSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthesisError {
    #[error("{0} pool is empty")]
    EmptyPool(&'static str),
    #[error("source sample {0} has no label")]
    Unlabeled(String),
    #[error("synthesis count must be >= 1")]
    ZeroCount,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Source/target index pairs: source `k mod |S|`, target per `pairing`.
pub fn pair_indices(n: usize, n_source: usize, n_target: usize, pairing: Pairing, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let t = match pairing {
                Pairing::Random => rng.random_range(0..n_target),
                Pairing::Cyclic => k % n_target,
            };
            (k % n_source, t)
        })
        .collect()
}

/// Produces `n` images `decode(E_c(x_s), E_s(x_t))` labeled `y_s`.
pub fn synthesize(
    bundle: &ModelBundle,
    source: &[Sample],
    target: &[Sample],
    pairing: Pairing,
    n: usize,
    seed: u64,
    iteration: usize,
) -> Result<SyntheticSet, SynthesisError> {
    if source.is_empty() {
        return Err(SynthesisError::EmptyPool("source"));
    }
    if target.is_empty() {
        return Err(SynthesisError::EmptyPool("target"));
    }
    if n == 0 {
        return Err(SynthesisError::ZeroCount);
    }
    if let Some(s) = source.iter().find(|s| s.label.is_none()) {
        return Err(SynthesisError::Unlabeled(s.id.clone()));
    }
    let pairs = pair_indices(n, source.len(), target.len(), pairing, seed);
    let mut samples = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    for chunk in pairs.chunks(INFER_CHUNK) {
        let xs: Vec<&Sample> = chunk.iter().map(|&(s, _)| &source[s]).collect();
        let xt: Vec<&Sample> = chunk.iter().map(|&(_, t)| &target[t]).collect();
        let fc = bundle.encode_common(&to_nhwc(&xs))?;
        let fs = bundle.encode(&to_nhwc(&xt))?.specific;
        let images = from_nhwc(&bundle.decode(&fc, &fs)?);
        for ((s, t), image) in xs.iter().zip(&xt).zip(images) {
            let k = samples.len();
            let label = s.label.expect("checked above");
            let synth_id = format!("syn-{iteration}-{k}");
            provenance.push(Provenance {
                synth_id: synth_id.clone(),
                source_id: s.id.clone(),
                target_id: t.id.clone(),
                label,
                iteration,
            });
            samples.push(Sample {
                id: synth_id,
                image,
                label: Some(label),
                domain: Domain::SyntheticTarget,
            });
        }
    }
    Ok(SyntheticSet {
        samples,
        provenance,
        iteration,
    })
}

pub fn refresh_pool(old: SyntheticSet, new: SyntheticSet, policy: PoolPolicy) -> SyntheticSet {
    match policy {
        PoolPolicy::Replace => new,
        PoolPolicy::Append => {
            let mut pool = old;
            pool.samples.extend(new.samples);
            pool.provenance.extend(new.provenance);
            pool.iteration = new.iteration;
            pool
        }
    }
}

/// `synth_id,source_id,target_id,label,iteration`, one row per sample.
pub fn write_provenance(path: &Path, set: &SyntheticSet) -> Result<(), SynthesisError> {
    let mut out = String::from("synth_id,source_id,target_id,label,iteration\n");
    for p in &set.provenance {
        let _ = writeln!(out, "{},{},{},{},{}", p.synth_id, p.source_id, p.target_id, p.label, p.iteration);
    }
    fs::write(path, out).map_err(|e| SynthesisError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(tag: &str, n: usize, it: usize) -> SyntheticSet {
        SyntheticSet {
            samples: Vec::new(),
            provenance: (0..n)
                .map(|k| Provenance {
                    synth_id: format!("{tag}{k}"),
                    source_id: "s".into(),
                    target_id: "t".into(),
                    label: 0,
                    iteration: it,
                })
                .collect(),
            iteration: it,
        }
    }

    #[test]
    fn pool_policies() {
        let r = refresh_pool(set("a", 5, 1), set("b", 3, 2), PoolPolicy::Replace);
        assert_eq!(r.provenance.len(), 3);
        let a = refresh_pool(set("a", 5, 1), set("b", 5, 2), PoolPolicy::Append);
        assert_eq!(a.provenance.len(), 10);
        assert_eq!(a.provenance[0].synth_id, "a0");
        assert_eq!(a.iteration, 2);
        assert_eq!(PoolPolicy::default(), PoolPolicy::Replace);
    }

    #[test]
    fn pairing_rules() {
        let p = pair_indices(7, 3, 4, Pairing::Cyclic, 0);
        assert_eq!(p, vec![(0, 0), (1, 1), (2, 2), (0, 3), (1, 0), (2, 1), (0, 2)]);
        let r1 = pair_indices(50, 10, 6, Pairing::Random, 9);
        assert_eq!(r1, pair_indices(50, 10, 6, Pairing::Random, 9));
        assert!(r1.iter().all(|&(s, t)| s < 10 && t < 6));
    }
}
