//! Scalar training objectives.
//!
//! Each loss exists twice: as a plain function returning a [`LossValue`] and
//! as a graph op (`*_var`) with an analytic backward pass. Both routes share
//! the same double-precision evaluation code.

use serde::{Deserialize, Serialize};

use crate::substrate::{Function, Graph, Output, SubstrateError, Tensor, Value, Var};

/// Lower bound applied to probabilities before taking a log.
pub const PROB_CLAMP: f64 = 1e-12;

/// Bandwidth multipliers applied to the median pairwise distance.
pub const MMD_BANDWIDTH_SCALES: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{what}: needs at least {min} rows, got {got}")]
    TooFewRows { what: &'static str, min: usize, got: usize },
    #[error("{what}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        what: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("bandwidths must be positive and non-empty")]
    InvalidBandwidth,
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
}

/// A scalar loss with its named contributions; the terms sum to `value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub terms: Vec<(String, f64)>,
}

impl LossValue {
    pub fn single(name: &str, value: f64) -> Self {
        Self {
            value,
            terms: vec![(name.to_string(), value)],
        }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    if t.shape().len() == 1 {
        (t.shape()[0], 1)
    } else {
        (t.rows(), t.row_len())
    }
}

// ---------------------------------------------------------------- class NLL

fn check_nll(preds: &Tensor, labels: &[usize]) -> Result<(), LossError> {
    let (n, k) = as_matrix(preds);
    if n != labels.len() {
        return Err(LossError::ShapeMismatch {
            what: "class_nll",
            left: preds.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if n == 0 {
        return Err(LossError::TooFewRows { what: "class_nll", min: 1, got: 0 });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(LossError::LabelOutOfRange { label, classes: k });
    }
    Ok(())
}

fn nll_value(preds: &Tensor, labels: &[usize]) -> f64 {
    let k = as_matrix(preds).1;
    let d = preds.data();
    let sum: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -(d[i * k + y] as f64).max(PROB_CLAMP).ln())
        .sum();
    sum / labels.len() as f64
}

/// Mean negative log-likelihood of the labelled class.
pub fn class_nll(preds: &Tensor, labels: &[usize]) -> Result<LossValue, LossError> {
    check_nll(preds, labels)?;
    Ok(LossValue::single("class_nll", nll_value(preds, labels)))
}

struct ClassNll {
    labels: Vec<usize>,
}

impl Function for ClassNll {
    fn name(&self) -> &'static str {
        "class_nll"
    }

    fn forward(&self, inputs: &[Value<'_>]) -> Result<Output, SubstrateError> {
        let v = nll_value(inputs[0].tensor, &self.labels);
        Ok(Output { tensor: Tensor::scalar(v as f32), scalar: Some(v) })
    }

    fn backward(&self, inputs: &[Value<'_>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let p = inputs[0].tensor;
        let k = as_matrix(p).1;
        let scale = grad.data()[0] as f64 / self.labels.len() as f64;
        let mut d = Tensor::zeros(p.shape().to_vec());
        for (i, &y) in self.labels.iter().enumerate() {
            let pv = p.data()[i * k + y] as f64;
            if pv > PROB_CLAMP {
                d.data_mut()[i * k + y] = (-scale / pv) as f32;
            }
        }
        vec![Some(d)]
    }
}

pub fn class_nll_var(g: &mut Graph, preds: Var, labels: &[usize]) -> Result<Var, LossError> {
    check_nll(g.value(preds), labels)?;
    Ok(g.custom(&[preds], Box::new(ClassNll { labels: labels.to_vec() }))?)
}

// ------------------------------------------------------------ domain BCE

fn check_bce(probs: &Tensor, targets: &[f32]) -> Result<(), LossError> {
    if probs.len() != targets.len() || (probs.shape().len() == 2 && probs.row_len() != 1) {
        return Err(LossError::ShapeMismatch {
            what: "dann_domain_loss",
            left: probs.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    if targets.is_empty() {
        return Err(LossError::TooFewRows { what: "dann_domain_loss", min: 1, got: 0 });
    }
    Ok(())
}

fn bce_value(probs: &Tensor, targets: &[f32]) -> f64 {
    let sum: f64 = probs
        .data()
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let (p, t) = (p as f64, t as f64);
            -(t * p.max(PROB_CLAMP).ln() + (1.0 - t) * (1.0 - p).max(PROB_CLAMP).ln())
        })
        .sum();
    sum / targets.len() as f64
}

/// Mean binary cross-entropy of domain predictions (1 = target side).
pub fn dann_domain_loss(probs: &Tensor, domain_labels: &[f32]) -> Result<LossValue, LossError> {
    check_bce(probs, domain_labels)?;
    Ok(LossValue::single("domain", bce_value(probs, domain_labels)))
}

struct DomainBce {
    targets: Vec<f32>,
}

impl Function for DomainBce {
    fn name(&self) -> &'static str {
        "dann_domain_loss"
    }

    fn forward(&self, inputs: &[Value<'_>]) -> Result<Output, SubstrateError> {
        let v = bce_value(inputs[0].tensor, &self.targets);
        Ok(Output { tensor: Tensor::scalar(v as f32), scalar: Some(v) })
    }

    fn backward(&self, inputs: &[Value<'_>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let p = inputs[0].tensor;
        let scale = grad.data()[0] as f64 / self.targets.len() as f64;
        let mut d = Tensor::zeros(p.shape().to_vec());
        for ((dv, &pv), &t) in d.data_mut().iter_mut().zip(p.data()).zip(&self.targets) {
            let (pv, t) = (pv as f64, t as f64);
            let mut acc = 0.0;
            if pv > PROB_CLAMP {
                acc -= t / pv;
            }
            if 1.0 - pv > PROB_CLAMP {
                acc += (1.0 - t) / (1.0 - pv);
            }
            *dv = (acc * scale) as f32;
        }
        vec![Some(d)]
    }
}

pub fn dann_domain_loss_var(g: &mut Graph, probs: Var, domain_labels: &[f32]) -> Result<Var, LossError> {
    check_bce(g.value(probs), domain_labels)?;
    Ok(g.custom(&[probs], Box::new(DomainBce { targets: domain_labels.to_vec() }))?)
}

// ------------------------------------------------------------------ CORAL

fn check_pair(what: &'static str, fs: &Tensor, ft: &Tensor, min: usize) -> Result<(), LossError> {
    let (ns, ds) = as_matrix(fs);
    let (nt, dt) = as_matrix(ft);
    if ds != dt {
        return Err(LossError::ShapeMismatch {
            what,
            left: fs.shape().to_vec(),
            right: ft.shape().to_vec(),
        });
    }
    let got = ns.min(nt);
    if got < min {
        return Err(LossError::TooFewRows { what, min, got });
    }
    Ok(())
}

/// Mean-centred rows in f64 plus their 1/(n-1) covariance.
fn centred_cov(f: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = as_matrix(f);
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(&f.data()[i * d..(i + 1) * d]) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let xc: Vec<f64> = (0..n * d).map(|idx| f.data()[idx] as f64 - mean[idx % d]).collect();
    let mut cov = vec![0.0f64; d * d];
    for i in 0..n {
        let row = &xc[i * d..(i + 1) * d];
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += row[a] * row[b];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    (xc, cov)
}

fn coral_value(fs: &Tensor, ft: &Tensor) -> f64 {
    let d = as_matrix(fs).1;
    if d == 0 {
        return 0.0;
    }
    let (_, cs) = centred_cov(fs);
    let (_, ct) = centred_cov(ft);
    let sq: f64 = cs.iter().zip(&ct).map(|(a, b)| (a - b) * (a - b)).sum();
    sq / (4.0 * (d * d) as f64)
}

/// Squared Frobenius distance between feature covariances, over `4 d²`.
pub fn coral_loss(fs: &Tensor, ft: &Tensor) -> Result<LossValue, LossError> {
    check_pair("coral_loss", fs, ft, 2)?;
    Ok(LossValue::single("coral", coral_value(fs, ft)))
}

struct Coral;

impl Function for Coral {
    fn name(&self) -> &'static str {
        "coral_loss"
    }

    fn forward(&self, inputs: &[Value<'_>]) -> Result<Output, SubstrateError> {
        let v = coral_value(inputs[0].tensor, inputs[1].tensor);
        Ok(Output { tensor: Tensor::scalar(v as f32), scalar: Some(v) })
    }

    fn backward(&self, inputs: &[Value<'_>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (fs, ft) = (inputs[0].tensor, inputs[1].tensor);
        let d = as_matrix(fs).1;
        if d == 0 {
            return vec![Some(Tensor::zeros(fs.shape().to_vec())), Some(Tensor::zeros(ft.shape().to_vec()))];
        }
        let (xs, cs) = centred_cov(fs);
        let (xt, ct) = centred_cov(ft);
        let up = grad.data()[0] as f64;
        // dL/dCs = 2 (Cs - Ct) / (4 d²), symmetric
        let gm: Vec<f64> = cs
            .iter()
            .zip(&ct)
            .map(|(a, b)| up * 2.0 * (a - b) / (4.0 * (d * d) as f64))
            .collect();
        let side = |xc: &[f64], shape: &[usize], sign: f64| {
            let n = xc.len() / d;
            let coef = sign * 2.0 / (n - 1) as f64;
            let mut out = vec![0.0f32; n * d];
            for i in 0..n {
                for b in 0..d {
                    let mut acc = 0.0;
                    for a in 0..d {
                        acc += xc[i * d + a] * gm[a * d + b];
                    }
                    out[i * d + b] = (coef * acc) as f32;
                }
            }
            Tensor::new(shape.to_vec(), out).unwrap()
        };
        vec![Some(side(&xs, fs.shape(), 1.0)), Some(side(&xt, ft.shape(), -1.0))]
    }
}

pub fn coral_loss_var(g: &mut Graph, fs: Var, ft: Var) -> Result<Var, LossError> {
    check_pair("coral_loss", g.value(fs), g.value(ft), 2)?;
    Ok(g.custom(&[fs, ft], Box::new(Coral))?)
}

// -------------------------------------------------------------------- MMD

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| {
        let d = x as f64 - y as f64;
        d * d
    }).sum()
}

fn check_bandwidths(bw: &[f64]) -> Result<(), LossError> {
    if bw.is_empty() || bw.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(LossError::InvalidBandwidth);
    }
    Ok(())
}

/// Median pairwise Euclidean distance over the pooled rows, scaled by
/// [`MMD_BANDWIDTH_SCALES`]. Falls back to 1.0 when every row coincides.
pub fn median_heuristic_bandwidths(fs: &Tensor, ft: &Tensor) -> Vec<f64> {
    let rows: Vec<&[f32]> = (0..as_matrix(fs).0)
        .map(|i| fs.row(i))
        .chain((0..as_matrix(ft).0).map(|i| ft.row(i)))
        .collect();
    let mut dists = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            dists.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let median = dists.get(dists.len() / 2).copied().unwrap_or(0.0);
    let base = if median > 1e-12 { median } else { 1.0 };
    MMD_BANDWIDTH_SCALES.iter().map(|s| s * base).collect()
}

fn mmd_value(fs: &Tensor, ft: &Tensor, bw: &[f64]) -> f64 {
    let (ns, _) = as_matrix(fs);
    let (nt, _) = as_matrix(ft);
    let k = |a: &[f32], b: &[f32]| -> f64 {
        let d2 = sq_dist(a, b);
        bw.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum()
    };
    let mut ss = 0.0;
    for i in 0..ns {
        for j in 0..ns {
            ss += k(fs.row(i), fs.row(j));
        }
    }
    let mut tt = 0.0;
    for i in 0..nt {
        for j in 0..nt {
            tt += k(ft.row(i), ft.row(j));
        }
    }
    let mut st = 0.0;
    for i in 0..ns {
        for j in 0..nt {
            st += k(fs.row(i), ft.row(j));
        }
    }
    ss / (ns * ns) as f64 + tt / (nt * nt) as f64 - 2.0 * st / (ns * nt) as f64
}

/// Biased squared MMD with a sum of RBF kernels `exp(-|x-y|² / 2σ²)`.
pub fn mmd_loss(fs: &Tensor, ft: &Tensor, bandwidths: &[f64]) -> Result<LossValue, LossError> {
    check_pair("mmd_loss", fs, ft, 1)?;
    check_bandwidths(bandwidths)?;
    Ok(LossValue::single("mmd", mmd_value(fs, ft, bandwidths)))
}

struct Mmd {
    bandwidths: Vec<f64>,
}

impl Mmd {
    /// Adds `weight * d/da k(a, b)` into `out`.
    fn pair_grad(&self, a: &[f32], b: &[f32], weight: f64, out: &mut [f64]) {
        let d2 = sq_dist(a, b);
        let mut coef = 0.0;
        for s in &self.bandwidths {
            let s2 = s * s;
            coef += (-d2 / (2.0 * s2)).exp() / s2;
        }
        for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
            *o -= weight * coef * (x as f64 - y as f64);
        }
    }
}

impl Function for Mmd {
    fn name(&self) -> &'static str {
        "mmd_loss"
    }

    fn forward(&self, inputs: &[Value<'_>]) -> Result<Output, SubstrateError> {
        let v = mmd_value(inputs[0].tensor, inputs[1].tensor, &self.bandwidths);
        Ok(Output { tensor: Tensor::scalar(v as f32), scalar: Some(v) })
    }

    fn backward(&self, inputs: &[Value<'_>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (fs, ft) = (inputs[0].tensor, inputs[1].tensor);
        let (ns, d) = as_matrix(fs);
        let nt = as_matrix(ft).0;
        let up = grad.data()[0] as f64;
        let w_ss = up * 2.0 / (ns * ns) as f64;
        let w_tt = up * 2.0 / (nt * nt) as f64;
        let w_st = -up * 2.0 / (ns * nt) as f64;
        let mut gs = vec![0.0f64; ns * d];
        let mut gt = vec![0.0f64; nt * d];
        for i in 0..ns {
            let out = &mut gs[i * d..(i + 1) * d];
            for j in 0..ns {
                self.pair_grad(fs.row(i), fs.row(j), w_ss, out);
            }
            for j in 0..nt {
                self.pair_grad(fs.row(i), ft.row(j), w_st, out);
            }
        }
        for j in 0..nt {
            let out = &mut gt[j * d..(j + 1) * d];
            for i in 0..nt {
                self.pair_grad(ft.row(j), ft.row(i), w_tt, out);
            }
            for i in 0..ns {
                self.pair_grad(ft.row(j), fs.row(i), w_st, out);
            }
        }
        let to_t = |v: Vec<f64>, shape: &[usize]| {
            Tensor::new(shape.to_vec(), v.into_iter().map(|x| x as f32).collect()).unwrap()
        };
        vec![Some(to_t(gs, fs.shape())), Some(to_t(gt, ft.shape()))]
    }
}

pub fn mmd_loss_var(g: &mut Graph, fs: Var, ft: Var, bandwidths: &[f64]) -> Result<Var, LossError> {
    check_pair("mmd_loss", g.value(fs), g.value(ft), 1)?;
    check_bandwidths(bandwidths)?;
    Ok(g.custom(&[fs, ft], Box::new(Mmd { bandwidths: bandwidths.to_vec() }))?)
}

// ------------------------------------------------------------ reconstruction

fn check_mse(x: &Tensor, x_hat: &Tensor) -> Result<(), LossError> {
    if x.shape() != x_hat.shape() {
        return Err(LossError::ShapeMismatch {
            what: "recon_mse",
            left: x.shape().to_vec(),
            right: x_hat.shape().to_vec(),
        });
    }
    if x.is_empty() {
        return Err(LossError::TooFewRows { what: "recon_mse", min: 1, got: 0 });
    }
    Ok(())
}

fn mse_value(x: &Tensor, x_hat: &Tensor) -> f64 {
    let s: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    s / x.len() as f64
}

/// Mean squared error over every element.
pub fn recon_mse(x: &Tensor, x_hat: &Tensor) -> Result<LossValue, LossError> {
    check_mse(x, x_hat)?;
    Ok(LossValue::single("recon", mse_value(x, x_hat)))
}

struct Mse;

impl Function for Mse {
    fn name(&self) -> &'static str {
        "recon_mse"
    }

    fn forward(&self, inputs: &[Value<'_>]) -> Result<Output, SubstrateError> {
        let v = mse_value(inputs[0].tensor, inputs[1].tensor);
        Ok(Output { tensor: Tensor::scalar(v as f32), scalar: Some(v) })
    }

    fn backward(&self, inputs: &[Value<'_>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, xh) = (inputs[0].tensor, inputs[1].tensor);
        let scale = 2.0 * grad.data()[0] as f64 / x.len() as f64;
        let mut dx = Tensor::zeros(x.shape().to_vec());
        let mut dxh = Tensor::zeros(x.shape().to_vec());
        for (((a, b), da), db) in x
            .data()
            .iter()
            .zip(xh.data())
            .zip(dx.data_mut())
            .zip(dxh.data_mut())
        {
            let diff = (*b as f64 - *a as f64) * scale;
            *db = diff as f32;
            *da = -diff as f32;
        }
        vec![Some(dx), Some(dxh)]
    }
}

pub fn recon_mse_var(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var, LossError> {
    check_mse(g.value(x), g.value(x_hat))?;
    Ok(g.custom(&[x, x_hat], Box::new(Mse))?)
}

// ------------------------------------------------------------- composites

/// `l_class + alpha * l_domain`.
pub fn da_total(l_class: f64, l_domain: f64, alpha: f64) -> LossValue {
    let d = alpha * l_domain;
    LossValue {
        value: l_class + d,
        terms: vec![("class".into(), l_class), ("domain".into(), d)],
    }
}

/// `l_rec - beta * l_aclass`.
pub fn di_total(l_rec: f64, l_aclass: f64, beta: f64) -> LossValue {
    let a = -beta * l_aclass;
    LossValue {
        value: l_rec + a,
        terms: vec![("recon".into(), l_rec), ("adversary".into(), a)],
    }
}

struct WeightedSum {
    weights: Vec<f64>,
}

impl Function for WeightedSum {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn forward(&self, inputs: &[Value<'_>]) -> Result<Output, SubstrateError> {
        let v: f64 = inputs.iter().zip(&self.weights).map(|(x, w)| w * x.as_f64()).sum();
        Ok(Output { tensor: Tensor::scalar(v as f32), scalar: Some(v) })
    }

    fn backward(&self, _: &[Value<'_>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.data()[0] as f64;
        self.weights
            .iter()
            .map(|w| Some(Tensor::scalar((w * g) as f32)))
            .collect()
    }
}

fn weighted_sum(g: &mut Graph, terms: &[Var], weights: Vec<f64>) -> Result<Var, LossError> {
    for &t in terms {
        if g.value(t).len() != 1 {
            return Err(SubstrateError::NotScalar(g.value(t).shape().to_vec()).into());
        }
    }
    Ok(g.custom(terms, Box::new(WeightedSum { weights }))?)
}

pub fn da_total_var(g: &mut Graph, l_class: Var, l_domain: Var, alpha: f64) -> Result<Var, LossError> {
    weighted_sum(g, &[l_class, l_domain], vec![1.0, alpha])
}

pub fn di_total_var(g: &mut Graph, l_rec: Var, l_aclass: Var, beta: f64) -> Result<Var, LossError> {
    weighted_sum(g, &[l_rec, l_aclass], vec![1.0, -beta])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn nll_fixture_and_edge_cases() {
        let v = class_nll(&t(&[1, 3], &[0.1, 0.2, 0.7]), &[2]).unwrap();
        assert!((v.value - 0.356675).abs() < 1e-6);
        let one_hot = class_nll(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), &[0, 1]).unwrap();
        assert_eq!(one_hot.value, 0.0);
        let dup = class_nll(&t(&[2, 3], &[0.1, 0.2, 0.7, 0.1, 0.2, 0.7]), &[2, 2]).unwrap();
        assert!((dup.value - v.value).abs() < 1e-12);
        assert_eq!(
            class_nll(&t(&[1, 3], &[0.1, 0.2, 0.7]), &[3]),
            Err(LossError::LabelOutOfRange { label: 3, classes: 3 })
        );
    }

    #[test]
    fn bce_fixture() {
        let v = dann_domain_loss(&t(&[4, 1], &[0.5; 4]), &[0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((v.value - 2f64.ln()).abs() < 1e-6);
        let perfect = dann_domain_loss(&t(&[2], &[0.0, 1.0]), &[0.0, 1.0]).unwrap();
        assert!(perfect.value < 1e-9);
        let a = dann_domain_loss(&t(&[2], &[0.2, 0.9]), &[0.0, 1.0]).unwrap();
        let b = dann_domain_loss(&t(&[2], &[0.8, 0.1]), &[1.0, 0.0]).unwrap();
        assert!((a.value - b.value).abs() < 1e-7);
    }

    #[test]
    fn coral_fixture() {
        let fs = t(&[2, 2], &[1.0, 0.0, -1.0, 0.0]);
        let ft = t(&[2, 2], &[0.0, 1.0, 0.0, -1.0]);
        assert!((coral_loss(&fs, &ft).unwrap().value - 0.5).abs() < 1e-12);
        assert_eq!(coral_loss(&fs, &fs).unwrap().value, 0.0);
        let ft_perm = t(&[2, 2], &[0.0, -1.0, 0.0, 1.0]);
        assert_eq!(coral_loss(&fs, &ft_perm).unwrap().value, 0.5);
        assert!(matches!(
            coral_loss(&t(&[1, 2], &[0.0, 0.0]), &ft),
            Err(LossError::TooFewRows { .. })
        ));
    }

    #[test]
    fn mmd_fixture() {
        let v = mmd_loss(&t(&[1, 1], &[0.0]), &t(&[1, 1], &[1.0]), &[1.0]).unwrap();
        assert!((v.value - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-12);
        assert!((v.value - 0.786939).abs() < 1e-5);
        let f = t(&[3, 2], &[0.1, 0.2, -0.3, 0.5, 1.0, 0.0]);
        assert!(mmd_loss(&f, &f, &[0.5, 1.0]).unwrap().value.abs() < 1e-6);
        assert_eq!(mmd_loss(&f, &f, &[]), Err(LossError::InvalidBandwidth));
    }

    #[test]
    fn mse_fixture() {
        let v = recon_mse(&t(&[2], &[0.0, 1.0]), &t(&[2], &[1.0, 1.0])).unwrap();
        assert_eq!(v.value, 0.5);
        assert!(recon_mse(&t(&[2], &[0.0, 1.0]), &t(&[1, 2], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn composites() {
        let da = da_total(1.0, 0.5, 0.1);
        assert!((da.value - 1.05).abs() < 1e-12);
        assert_eq!(da_total(0.7, 3.0, 0.0).value, 0.7);
        let sum: f64 = da.terms.iter().map(|(_, v)| v).sum();
        assert_eq!(sum, da.value);
        let di = di_total(0.2, 2.0, 0.05);
        assert!((di.value - 0.1).abs() < 1e-12);
        assert_eq!(di_total(0.2, 2.0, 0.0).value, 0.2);
        assert!(di_total(0.2, 3.0, 0.05).value < di.value);
    }
}
