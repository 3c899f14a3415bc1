//! Procedural two-domain benchmark: jittered polyline glyphs on black (source)
//! and the same glyphs blended over colour noise (target).

use std::f32::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::texture::blend;
use super::{DataError, DatasetSplit, Domain, Sample, TextureCorpus};
use crate::substrate::Tensor;

pub const MAX_CLASSES: usize = 10;
pub const MAX_PER_DOMAIN: usize = 5000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskConfig {
    pub num_classes: usize,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub image_size: usize,
    /// Scale on the texture before blending; 0 leaves bare glyphs.
    pub texture_amplitude: f32,
    pub texture_count: usize,
    pub texture_size: usize,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_domain: 2000,
            test_per_domain: 1000,
            image_size: 16,
            texture_amplitude: 0.6,
            texture_count: 200,
            texture_size: 32,
        }
    }
}

impl DeskConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return bad(format!("num_classes must be in 1..={MAX_CLASSES}, got {}", self.num_classes));
        }
        if self.train_per_domain == 0 || self.test_per_domain == 0 {
            return bad("train and test sizes must be >= 1".into());
        }
        if self.train_per_domain + self.test_per_domain > MAX_PER_DOMAIN {
            return bad(format!("at most {MAX_PER_DOMAIN} samples per domain"));
        }
        if self.image_size < 8 {
            return bad("image_size must be >= 8".into());
        }
        if self.texture_size < self.image_size || self.texture_count == 0 {
            return bad("texture patches must be at least image_size and non-empty".into());
        }
        if !(0.0..=1.0).contains(&self.texture_amplitude) {
            return bad("texture_amplitude must be in [0, 1]".into());
        }
        Ok(())
    }
}

type Stroke = Vec<(f32, f32)>;

fn ring(cx: f32, cy: f32, rx: f32, ry: f32) -> Stroke {
    (0..=16)
        .map(|i| {
            let a = i as f32 / 16.0 * 2.0 * PI;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Digit-like strokes in unit coordinates, x right, y down.
fn glyph(class: usize) -> Vec<Stroke> {
    match class {
        0 => vec![ring(0.5, 0.5, 0.26, 0.36)],
        1 => vec![vec![(0.38, 0.26), (0.52, 0.12), (0.52, 0.88)]],
        2 => vec![vec![
            (0.26, 0.3),
            (0.36, 0.15),
            (0.6, 0.12),
            (0.72, 0.28),
            (0.64, 0.46),
            (0.26, 0.88),
            (0.78, 0.88),
        ]],
        3 => vec![vec![
            (0.25, 0.14),
            (0.72, 0.14),
            (0.46, 0.44),
            (0.7, 0.58),
            (0.7, 0.8),
            (0.5, 0.9),
            (0.25, 0.82),
        ]],
        4 => vec![vec![(0.64, 0.88), (0.64, 0.12), (0.22, 0.64), (0.8, 0.64)]],
        5 => vec![vec![
            (0.72, 0.12),
            (0.32, 0.12),
            (0.29, 0.45),
            (0.6, 0.42),
            (0.73, 0.62),
            (0.64, 0.86),
            (0.27, 0.86),
        ]],
        6 => vec![vec![
            (0.66, 0.12),
            (0.38, 0.36),
            (0.28, 0.66),
            (0.4, 0.88),
            (0.62, 0.86),
            (0.7, 0.66),
            (0.55, 0.5),
            (0.3, 0.6),
        ]],
        7 => vec![vec![(0.22, 0.12), (0.78, 0.12), (0.42, 0.88)]],
        8 => vec![ring(0.5, 0.3, 0.18, 0.17), ring(0.5, 0.69, 0.22, 0.2)],
        9 => {
            let mut loop_ = ring(0.48, 0.33, 0.21, 0.2);
            loop_.push((0.68, 0.3));
            loop_.push((0.6, 0.88));
            vec![loop_]
        }
        _ => unreachable!("class checked by config"),
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders `class` under a random affine jitter as a `[1, size, size]` image.
fn render_glyph<R: Rng>(rng: &mut R, class: usize, size: usize) -> Tensor {
    let theta = rng.random_range(-0.2f32..0.2);
    let scale = rng.random_range(0.85f32..1.05);
    let shear = rng.random_range(-0.15f32..0.15);
    let (tx, ty) = (rng.random_range(-0.07f32..0.07), rng.random_range(-0.07f32..0.07));
    let half_width = rng.random_range(0.055f32..0.085);
    // Forward map M = scale * R(theta) * [[1, shear], [0, 1]].
    let (c, s) = (theta.cos(), theta.sin());
    let m = [scale * c, scale * (c * shear - s), scale * s, scale * (s * shear + c)];
    let det = m[0] * m[3] - m[1] * m[2];
    let inv = [m[3] / det, -m[1] / det, -m[2] / det, m[0] / det];
    let strokes = glyph(class);
    let px = 1.0 / size as f32;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (vx, vy) = ((x as f32 + 0.5) * px - 0.5 - tx, (y as f32 + 0.5) * px - 0.5 - ty);
            let u = (inv[0] * vx + inv[1] * vy + 0.5, inv[2] * vx + inv[3] * vy + 0.5);
            let d = strokes
                .iter()
                .flat_map(|st| st.windows(2).map(move |w| segment_distance(u, w[0], w[1])))
                .fold(f32::INFINITY, f32::min);
            out.push(((half_width - d) / px + 0.5).clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![1, size, size], out).expect("shape")
}

fn balanced_labels<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    labels
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn render_set(
    cfg: &DeskConfig,
    n: usize,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    mut texture: Option<(&TextureCorpus, &mut ChaCha8Rng)>,
) -> Result<Vec<Sample>, DataError> {
    let size = cfg.image_size;
    balanced_labels(rng, n, cfg.num_classes)
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let g = render_glyph(rng, label, size);
            let image = match texture.as_mut() {
                Some((t, crop_rng)) => {
                    let (pi, oy, ox) = t.draw(*crop_rng, size, size)?;
                    blend(&t.patches()[pi], oy, ox, &g, cfg.texture_amplitude)
                }
                None => {
                    let d = g.data();
                    let mut rgb = Vec::with_capacity(3 * d.len());
                    (0..3).for_each(|_| rgb.extend_from_slice(d));
                    Tensor::new(vec![3, size, size], rgb).expect("shape")
                }
            };
            Ok(Sample {
                id: format!("{prefix}{i}"),
                image,
                label: Some(label),
                domain: Domain::Source,
            })
        })
        .collect()
}

/// Returns `(source, target)`. Target samples are unlabeled; their labels live
/// only in `target.truth`.
pub fn make_desk_benchmark(cfg: &DeskConfig, seed: u64) -> Result<(DatasetSplit, DatasetSplit), DataError> {
    cfg.validate()?;
    let texture_seed = stream(seed, 0).next_u64();
    let corpus = TextureCorpus::procedural(cfg.texture_count, cfg.texture_size, texture_seed)?;
    let k = cfg.num_classes;
    let source = DatasetSplit::labeled(
        render_set(cfg, cfg.train_per_domain, &mut stream(seed, 1), "src-train-", None)?,
        render_set(cfg, cfg.test_per_domain, &mut stream(seed, 2), "src-test-", None)?,
        k,
    )?;
    let target = DatasetSplit::labeled(
        render_set(
            cfg,
            cfg.train_per_domain,
            &mut stream(seed, 3),
            "tgt-train-",
            Some((&corpus, &mut stream(seed, 5))),
        )?,
        render_set(
            cfg,
            cfg.test_per_domain,
            &mut stream(seed, 4),
            "tgt-test-",
            Some((&corpus, &mut stream(seed, 6))),
        )?,
        k,
    )?
    .into_target();
    debug_assert_eq!(target.truth.len(), cfg.train_per_domain + cfg.test_per_domain);
    Ok((source, target))
}
