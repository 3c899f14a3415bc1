//! Domain adaptation and disentanglement training stages, plus pseudo-labeling.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{to_nhwc, BatchOrder, DataError, Domain, Sample};
use crate::losses::{
    class_nll_var, coral_loss_var, da_total_var, dann_domain_loss_var, di_total_var,
    median_heuristic_bandwidths, mmd_loss_var, recon_mse_var, LossError,
};
use crate::models::{Component, ModelBundle, ModelError};
use crate::substrate::{Graph, Optimizer, OptimizerKind, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Dann,
    Coral,
    Mmd,
}

impl Backbone {
    pub fn default_alpha(self) -> f64 {
        match self {
            Backbone::Dann | Backbone::Coral => 0.1,
            Backbone::Mmd => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Learning rate of the feature path (E_c and C, or E_s and G).
    pub lr: f32,
    /// Learning rate of the adversaries (D or A).
    pub adversary_lr: f32,
    pub backbone: Backbone,
    pub alpha: f64,
    pub beta: f64,
    /// Adversary steps per feature-path step in the Di stage.
    pub update_ratio: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            adversary_lr: 1e-3,
            backbone: Backbone::Dann,
            alpha: 0.1,
            beta: 0.5,
            update_ratio: 1,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<(), StageError> {
        let bad = |m: &str| Err(StageError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if !(self.lr > 0.0) || !(self.adversary_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.update_ratio == 0 {
            return bad("update_ratio must be >= 1");
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return bad("alpha and beta must be finite");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    /// Per-epoch mean of each named loss term.
    pub series: BTreeMap<String, Vec<f64>>,
    /// Accuracy (%) on the labeled training pool after the stage, DA only.
    pub labeled_accuracy: Option<f64>,
    pub wall_time_s: f64,
}

impl StageMetrics {
    pub fn last(&self, name: &str) -> Option<f64> {
        self.series.get(name).and_then(|s| s.last().copied())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error("{0} pool is empty")]
    EmptyPool(&'static str),
    #[error("sample {0} has no label")]
    Unlabeled(String),
    #[error("non-finite {stage} loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        stage: &'static str,
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("common encoder must be frozen during disentanglement")]
    EncoderNotFrozen,
    #[error("invalid stage config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<crate::substrate::SubstrateError> for StageError {
    fn from(e: crate::substrate::SubstrateError) -> Self {
        StageError::Model(e.into())
    }
}

fn labels_of(samples: &[&Sample]) -> Result<Vec<usize>, StageError> {
    samples
        .iter()
        .map(|s| s.label.ok_or_else(|| StageError::Unlabeled(s.id.clone())))
        .collect()
}

/// Running per-epoch means.
#[derive(Default)]
struct Tally {
    sums: BTreeMap<String, (f64, usize)>,
    series: BTreeMap<String, Vec<f64>>,
}

impl Tally {
    fn add(&mut self, name: &str, v: f64) {
        let e = self.sums.entry(name.to_string()).or_default();
        e.0 += v;
        e.1 += 1;
    }

    fn close_epoch(&mut self) {
        for (k, (s, n)) in std::mem::take(&mut self.sums) {
            self.series.entry(k).or_default().push(s / n as f64);
        }
    }
}

fn step(bundle: &mut ModelBundle, opt: &mut Optimizer, c: Component) -> Result<(), StageError> {
    opt.step(&mut bundle.params_mut(c))?;
    Ok(())
}

/// Fraction (%) of samples whose predicted class equals their label.
pub fn labeled_accuracy(bundle: &ModelBundle, samples: &[Sample]) -> Result<f64, StageError> {
    if samples.is_empty() {
        return Err(StageError::EmptyPool("evaluation"));
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let labels = labels_of(&refs)?;
    let pred = bundle.predict(&to_nhwc(&refs))?;
    let hits = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / samples.len() as f64)
}

/// Trains E_c and C (and D for the adversarial backbone) on `labeled` with a
/// domain term against `target`. Other components are never touched.
///
/// Synthetic samples in `labeled` count as target-side for the discriminator.
pub fn train_da_stage(
    bundle: &mut ModelBundle,
    labeled: &[Sample],
    target: &[Sample],
    cfg: &StageConfig,
    seed: u64,
) -> Result<StageMetrics, StageError> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(StageError::EmptyPool("labeled"));
    }
    if target.is_empty() {
        return Err(StageError::EmptyPool("target"));
    }
    if let Some(s) = labeled.iter().find(|s| s.label.is_none()) {
        return Err(StageError::Unlabeled(s.id.clone()));
    }
    let start = Instant::now();
    let lab_order = BatchOrder::new(labeled.len(), cfg.batch_size, seed)?;
    let tgt_order = BatchOrder::new(target.len(), cfg.batch_size, seed ^ 0x7467_7400)?;
    let mut tgt_epoch = 0u64;
    let mut tgt_queue: Vec<usize> = Vec::new();

    let mut opt_e = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut opt_c = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut opt_d = Optimizer::new(cfg.optimizer, cfg.adversary_lr);
    let adversarial = cfg.backbone == Backbone::Dann;
    let mut tally = Tally::default();

    for epoch in 0..cfg.epochs {
        for (bi, idx) in lab_order.epoch(epoch as u64).into_iter().enumerate() {
            let lb: Vec<&Sample> = idx.iter().map(|&i| &labeled[i]).collect();
            let labels = labels_of(&lb)?;
            while tgt_queue.len() < cfg.batch_size {
                let mut next = tgt_order.permutation(tgt_epoch);
                tgt_epoch += 1;
                next.append(&mut tgt_queue);
                tgt_queue = next;
            }
            let tb: Vec<&Sample> = tgt_queue.split_off(tgt_queue.len() - cfg.batch_size)
                .into_iter()
                .map(|i| &target[i])
                .collect();
            let (ns, nt) = (lb.len(), tb.len());
            let all: Vec<&Sample> = lb.iter().chain(&tb).copied().collect();

            let mut g = Graph::new();
            let x = g.input(to_nhwc(&all));
            let fc = bundle.forward(&mut g, Component::CommonEncoder, x)?;
            let fc_s = g.slice_rows(fc, 0, ns)?;
            let probs = bundle.forward(&mut g, Component::Classifier, fc_s)?;
            let class = class_nll_var(&mut g, probs, &labels)?;
            let domain = match cfg.backbone {
                Backbone::Dann => {
                    let d = bundle.forward(&mut g, Component::Discriminator, fc)?;
                    let dl: Vec<f32> = all
                        .iter()
                        .map(|s| if s.domain == Domain::Source { 0.0 } else { 1.0 })
                        .collect();
                    Some(dann_domain_loss_var(&mut g, d, &dl)?)
                }
                Backbone::Coral | Backbone::Mmd if ns >= 2 => {
                    let fc_t = g.slice_rows(fc, ns, ns + nt)?;
                    Some(if cfg.backbone == Backbone::Coral {
                        coral_loss_var(&mut g, fc_s, fc_t)?
                    } else {
                        let bw = median_heuristic_bandwidths(g.value(fc_s), g.value(fc_t));
                        mmd_loss_var(&mut g, fc_s, fc_t, &bw)?
                    })
                }
                _ => None,
            };
            let total = match domain {
                Some(d) => da_total_var(&mut g, class, d, cfg.alpha)?,
                None => class,
            };
            let (lc, lt) = (g.scalar(class), g.scalar(total));
            let ld = domain.map(|d| g.scalar(d));
            if !lt.is_finite() {
                return Err(StageError::NonFinite {
                    stage: "da",
                    epoch,
                    batch: bi,
                    detail: format!("class {lc}, domain {ld:?}"),
                });
            }
            tally.add("class", lc);
            if let Some(ld) = ld {
                tally.add("domain", ld);
            }
            tally.add("total", lt);

            g.backward(total)?;
            let mut comps = vec![Component::CommonEncoder, Component::Classifier];
            if adversarial {
                comps.push(Component::Discriminator);
            }
            bundle.accumulate_grads(&g, &comps);
            step(bundle, &mut opt_e, Component::CommonEncoder)?;
            step(bundle, &mut opt_c, Component::Classifier)?;
            if adversarial {
                step(bundle, &mut opt_d, Component::Discriminator)?;
            }
        }
        tally.close_epoch();
    }
    Ok(StageMetrics {
        series: tally.series,
        labeled_accuracy: Some(labeled_accuracy(bundle, labeled)?),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Labels every target sample with `argmax C(E_c(x))`, ties to the lowest class.
pub fn pseudo_label(bundle: &ModelBundle, target: &[Sample]) -> Result<Vec<Sample>, StageError> {
    if target.is_empty() {
        return Err(StageError::EmptyPool("target"));
    }
    let refs: Vec<&Sample> = target.iter().collect();
    let pred = bundle.predict(&to_nhwc(&refs))?;
    Ok(target
        .iter()
        .zip(pred)
        .map(|(s, p)| Sample {
            label: Some(p),
            ..s.clone()
        })
        .collect())
}

/// Trains E_s, G and A with E_c frozen. Each batch takes `update_ratio` steps
/// of A on `L_AClass`, then one step of E_s and G on `recon - beta * L_AClass`.
pub fn train_di_stage(
    bundle: &mut ModelBundle,
    samples: &[Sample],
    cfg: &StageConfig,
    seed: u64,
) -> Result<StageMetrics, StageError> {
    cfg.validate()?;
    if !bundle.is_frozen(Component::CommonEncoder) {
        return Err(StageError::EncoderNotFrozen);
    }
    if samples.is_empty() {
        return Err(StageError::EmptyPool("disentanglement"));
    }
    if let Some(s) = samples.iter().find(|s| s.label.is_none()) {
        return Err(StageError::Unlabeled(s.id.clone()));
    }
    let start = Instant::now();
    let order = BatchOrder::new(samples.len(), cfg.batch_size, seed)?;
    let mut opt_a = Optimizer::new(cfg.optimizer, cfg.adversary_lr);
    let mut opt_s = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut opt_g = Optimizer::new(cfg.optimizer, cfg.lr);
    let a_was_frozen = bundle.is_frozen(Component::AdversarialClassifier);
    let mut tally = Tally::default();

    for epoch in 0..cfg.epochs {
        for (bi, idx) in order.epoch(epoch as u64).into_iter().enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let labels = labels_of(&batch)?;
            let x = to_nhwc(&batch);
            let fc = bundle.infer(Component::CommonEncoder, &x)?;

            let fs = bundle.infer(Component::SpecificEncoder, &x)?;
            for _ in 0..cfg.update_ratio {
                let mut g = Graph::new();
                let f = g.input(fs.clone());
                let p = bundle.forward(&mut g, Component::AdversarialClassifier, f)?;
                let l = class_nll_var(&mut g, p, &labels)?;
                let v = g.scalar(l);
                if !v.is_finite() {
                    return Err(StageError::NonFinite {
                        stage: "di-adversary",
                        epoch,
                        batch: bi,
                        detail: format!("aclass {v}"),
                    });
                }
                tally.add("adversary", v);
                g.backward(l)?;
                bundle.accumulate_grads(&g, &[Component::AdversarialClassifier]);
                step(bundle, &mut opt_a, Component::AdversarialClassifier)?;
            }

            // A is held fixed while its loss is pushed up through E_s.
            bundle.set_frozen(&[Component::AdversarialClassifier], true);
            let result = (|| -> Result<(f64, f64, f64), StageError> {
                let mut g = Graph::new();
                let xv = g.input(x.clone());
                let fcv = g.input(fc.clone());
                let fsv = bundle.forward(&mut g, Component::SpecificEncoder, xv)?;
                let xh = bundle.forward_decode(&mut g, fcv, fsv)?;
                let rec = recon_mse_var(&mut g, xv, xh)?;
                let p = bundle.forward(&mut g, Component::AdversarialClassifier, fsv)?;
                let ac = class_nll_var(&mut g, p, &labels)?;
                let total = di_total_var(&mut g, rec, ac, cfg.beta)?;
                let (r, a, t) = (g.scalar(rec), g.scalar(ac), g.scalar(total));
                if !t.is_finite() {
                    return Err(StageError::NonFinite {
                        stage: "di",
                        epoch,
                        batch: bi,
                        detail: format!("recon {r}, aclass {a}"),
                    });
                }
                g.backward(total)?;
                bundle.accumulate_grads(&g, &[Component::SpecificEncoder, Component::Decoder]);
                step(bundle, &mut opt_s, Component::SpecificEncoder)?;
                step(bundle, &mut opt_g, Component::Decoder)?;
                Ok((r, a, t))
            })();
            bundle.set_frozen(&[Component::AdversarialClassifier], a_was_frozen);
            let (r, a, t) = result?;
            tally.add("recon", r);
            tally.add("aclass", a);
            tally.add("total", t);
        }
        tally.close_epoch();
    }
    Ok(StageMetrics {
        series: tally.series,
        labeled_accuracy: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Mean reconstruction MSE of `decode(E_c(x), E_s(x))` over `samples`.
pub fn reconstruction_mse(bundle: &ModelBundle, samples: &[Sample]) -> Result<f64, StageError> {
    if samples.is_empty() {
        return Err(StageError::EmptyPool("reconstruction"));
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let x = to_nhwc(&refs);
    let f = bundle.encode(&x)?;
    let xh = bundle.decode(&f.common, &f.specific)?;
    Ok(mse(&x, &xh))
}

pub(crate) fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    s / a.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_bundle() -> ModelBundle {
        let cfg = ModelConfig {
            num_classes: 2,
            image_shape: [3, 8, 8],
            d_c: 4,
            d_s: 2,
            channels: [2, 4],
            hidden: 8,
            grl_lambda: 1.0,
        };
        ModelBundle::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn toy(n: usize, domain: Domain) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                id: format!("{domain}-{i}"),
                image: Tensor::filled(vec![3, 8, 8], if i % 2 == 0 { 0.1 } else { 0.9 }),
                label: (domain == Domain::Source).then_some(i % 2),
                domain,
            })
            .collect()
    }

    #[test]
    fn pseudo_label_keeps_size_and_labels_all() {
        let b = tiny_bundle();
        let t = toy(7, Domain::Target);
        let p = pseudo_label(&b, &t).unwrap();
        assert_eq!(p.len(), 7);
        assert!(p.iter().all(|s| s.label.is_some()));
        assert!(matches!(pseudo_label(&b, &[]), Err(StageError::EmptyPool(_))));
    }

    #[test]
    fn di_requires_frozen_encoder() {
        let mut b = tiny_bundle();
        let cfg = StageConfig { epochs: 1, ..StageConfig::default() };
        let r = train_di_stage(&mut b, &toy(4, Domain::Source), &cfg, 0);
        assert!(matches!(r, Err(StageError::EncoderNotFrozen)));
    }

    #[test]
    fn da_rejects_unlabeled_and_empty() {
        let mut b = tiny_bundle();
        let cfg = StageConfig { epochs: 1, ..StageConfig::default() };
        let t = toy(4, Domain::Target);
        assert!(matches!(train_da_stage(&mut b, &t, &t, &cfg, 0), Err(StageError::Unlabeled(_))));
        assert!(matches!(train_da_stage(&mut b, &[], &t, &cfg, 0), Err(StageError::EmptyPool(_))));
    }

    #[test]
    fn series_lengths_match_epochs() {
        let mut b = tiny_bundle();
        let cfg = StageConfig { epochs: 3, batch_size: 4, ..StageConfig::default() };
        let m = train_da_stage(&mut b, &toy(10, Domain::Source), &toy(6, Domain::Target), &cfg, 1).unwrap();
        for s in m.series.values() {
            assert_eq!(s.len(), 3);
        }
        b.set_frozen(&[Component::CommonEncoder], true);
        let m = train_di_stage(&mut b, &toy(10, Domain::Source), &cfg, 1).unwrap();
        assert_eq!(m.series["recon"].len(), 3);
    }
}
