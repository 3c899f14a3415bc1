use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, DatasetSplit, Sample};
use crate::substrate::Tensor;

/// Lattice sizes and weights of the procedural noise octaves.
const OCTAVES: [(usize, f32); 3] = [(2, 0.5), (4, 0.3), (8, 0.2)];

/// Colour patches, each `[3, H, W]` in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct TextureCorpus {
    patches: Vec<Tensor>,
}

impl TextureCorpus {
    pub fn new(patches: Vec<Tensor>) -> Result<Self, DataError> {
        if patches.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        for p in &patches {
            if p.shape().len() != 3 || p.shape()[0] != 3 {
                return Err(DataError::InvalidConfig(format!(
                    "texture patch must be [3, H, W], got {:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self { patches })
    }

    /// Seeded multi-scale colour noise, contrast-stretched per patch.
    pub fn procedural(count: usize, size: usize, seed: u64) -> Result<Self, DataError> {
        if size < 2 {
            return Err(DataError::InvalidConfig("texture size must be >= 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches = (0..count).map(|_| noise_patch(&mut rng, size)).collect();
        Self::new(patches)
    }

    /// Every decodable image file in `dir`, in file-name order, as RGB.
    pub fn from_dir(dir: &Path) -> Result<Self, DataError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| DataError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        let mut patches = Vec::new();
        for p in paths {
            let Ok(img) = image::open(&p) else { continue };
            let rgb = img.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let mut data = vec![0.0; 3 * h * w];
            for (x, y, px) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
                }
            }
            patches.push(Tensor::new(vec![3, h, w], data).expect("shape"));
        }
        Self::new(patches)
    }

    pub fn patches(&self) -> &[Tensor] {
        &self.patches
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Picks a patch and a uniform crop offset for an `h × w` image.
    pub(crate) fn draw<R: Rng>(&self, rng: &mut R, h: usize, w: usize) -> Result<(usize, usize, usize), DataError> {
        let i = rng.random_range(0..self.patches.len());
        let s = self.patches[i].shape();
        if s[1] < h || s[2] < w {
            return Err(DataError::PatchTooSmall {
                patch: [s[1], s[2]],
                image: [h, w],
            });
        }
        let oy = rng.random_range(0..=s[1] - h);
        let ox = rng.random_range(0..=s[2] - w);
        Ok((i, oy, ox))
    }
}

fn noise_patch<R: Rng>(rng: &mut R, size: usize) -> Tensor {
    let mut data = vec![0.0f32; 3 * size * size];
    for &(cells, weight) in &OCTAVES {
        let n = cells + 1;
        let lattice: Vec<f32> = (0..3 * n * n).map(|_| rng.random::<f32>()).collect();
        let step = cells as f32 / (size - 1) as f32;
        for c in 0..3 {
            for y in 0..size {
                let gy = y as f32 * step;
                let y0 = (gy.floor() as usize).min(cells - 1);
                let fy = gy - y0 as f32;
                for x in 0..size {
                    let gx = x as f32 * step;
                    let x0 = (gx.floor() as usize).min(cells - 1);
                    let fx = gx - x0 as f32;
                    let at = |yy: usize, xx: usize| lattice[(c * n + yy) * n + xx];
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                    let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                    data[(c * size + y) * size + x] += weight * (top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-6);
    for v in &mut data {
        *v = ((*v - lo) / span).clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, size, size], data).expect("shape")
}

/// `|amplitude * patch_crop - digit|` per channel. A one-channel digit is
/// broadcast to all three.
pub(crate) fn blend(patch: &Tensor, oy: usize, ox: usize, digit: &Tensor, amplitude: f32) -> Tensor {
    let ds = digit.shape();
    let (dc, h, w) = (ds[0], ds[1], ds[2]);
    let pw = patch.shape()[2];
    let ph = patch.shape()[1];
    let (p, d) = (patch.data(), digit.data());
    let mut out = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let dch = if dc == 1 { 0 } else { c };
        for y in 0..h {
            for x in 0..w {
                let pv = p[(c * ph + oy + y) * pw + ox + x] * amplitude;
                out.push((pv - d[(dch * h + y) * w + x]).abs());
            }
        }
    }
    Tensor::new(vec![3, h, w], out).expect("shape")
}

/// Blends every digit over a random crop of a random patch. Ids, labels and
/// domains carry over.
pub fn make_mnistm(digits: &DatasetSplit, patches: &TextureCorpus, seed: u64) -> Result<DatasetSplit, DataError> {
    if patches.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let [_, h, w] = digits.image_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = |v: &[Sample]| -> Result<Vec<Sample>, DataError> {
        v.iter()
            .map(|s| {
                let (i, oy, ox) = patches.draw(&mut rng, h, w)?;
                Ok(Sample {
                    image: blend(&patches.patches[i], oy, ox, &s.image, 1.0),
                    ..s.clone()
                })
            })
            .collect()
    };
    let train = map(&digits.train)?;
    let test = map(&digits.test)?;
    Ok(DatasetSplit {
        train,
        test,
        num_classes: digits.num_classes,
        image_shape: [3, h, w],
        truth: digits.truth.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn procedural_is_deterministic_and_bounded() {
        let a = TextureCorpus::procedural(4, 24, 5).unwrap();
        let b = TextureCorpus::procedural(4, 24, 5).unwrap();
        assert_eq!(a, b);
        for p in a.patches() {
            assert_eq!(p.shape(), &[3, 24, 24]);
            assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_ne!(a, TextureCorpus::procedural(4, 24, 6).unwrap());
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(TextureCorpus::new(vec![]), Err(DataError::EmptyCorpus)));
        assert!(matches!(TextureCorpus::procedural(0, 8, 0), Err(DataError::EmptyCorpus)));
    }
}
