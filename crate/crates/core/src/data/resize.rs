use super::{DataError, DatasetSplit, Sample};
use crate::substrate::Tensor;

const MIN_SIDE: usize = 8;

/// Source coordinate and blend weight along one axis, pixel-center aligned.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(src - 1);
            (x0, x1, (x - x0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of a `[C, H, W]` image, clamped to [0,1].
pub fn resize_image(img: &Tensor, h: usize, w: usize) -> Result<Tensor, DataError> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(DataError::InvalidConfig(format!(
            "resize target {h}x{w} below {MIN_SIDE}x{MIN_SIDE}"
        )));
    }
    let s = img.shape();
    let (c, sh, sw) = (s[0], s[1], s[2]);
    if (sh, sw) == (h, w) {
        return Ok(img.clone());
    }
    let ty = taps(sh, h);
    let tx = taps(sw, w);
    let src = img.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane = &src[ch * sh * sw..(ch + 1) * sh * sw];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * sw + x0] * (1.0 - fx) + plane[y0 * sw + x1] * fx;
                let bot = plane[y1 * sw + x0] * (1.0 - fx) + plane[y1 * sw + x1] * fx;
                out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Tensor::new(vec![c, h, w], out).expect("shape"))
}

pub fn resize_to(split: &DatasetSplit, h: usize, w: usize) -> Result<DatasetSplit, DataError> {
    let map = |v: &[Sample]| -> Result<Vec<Sample>, DataError> {
        v.iter()
            .map(|s| {
                Ok(Sample {
                    image: resize_image(&s.image, h, w)?,
                    ..s.clone()
                })
            })
            .collect()
    };
    Ok(DatasetSplit {
        train: map(&split.train)?,
        test: map(&split.test)?,
        num_classes: split.num_classes,
        image_shape: [split.image_shape[0], h, w],
        truth: split.truth.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_constant() {
        let img = Tensor::new(vec![1, 8, 8], (0..64).map(|v| v as f32 / 64.0).collect()).unwrap();
        assert_eq!(resize_image(&img, 8, 8).unwrap(), img);
        let flat = Tensor::filled(vec![3, 28, 28], 0.37);
        let up = resize_image(&flat, 32, 32).unwrap();
        assert_eq!(up.shape(), &[3, 32, 32]);
        assert!(up.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn degenerate_size_rejected() {
        let img = Tensor::filled(vec![1, 16, 16], 0.0);
        assert!(resize_image(&img, 4, 16).is_err());
    }

    #[test]
    fn downsample_averages_neighbours() {
        // 2x reduction samples exactly between source pixel pairs.
        let img = Tensor::new(vec![1, 16, 16], (0..256).map(|i| ((i % 16) % 2) as f32).collect()).unwrap();
        let d = resize_image(&img, 8, 8).unwrap();
        assert!(d.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }
}
