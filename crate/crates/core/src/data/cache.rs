//! On-disk dataset cache.
//!
//! ```text
//! <dir>/manifest.json                   name, seed, classes, shape, counts, config
//! <dir>/{source,target}_{train,test}_images.idx   float32 [n, C, H, W]
//! <dir>/{source,target}_{train,test}_ids.txt      one sample id per line
//! <dir>/source_{train,test}_labels.idx            u8 [n]
//! <dir>/target_{train,test}_truth.idx             u8 [n], evaluation only
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::idx::{IdxArray, IdxData};
use super::{DataError, DatasetSplit, Domain, GroundTruth, Sample};
use crate::substrate::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub seed: u64,
    pub num_classes: usize,
    pub image_shape: [usize; 3],
    pub counts: [usize; 4],
    pub config: serde_json::Value,
}

pub fn exists(dir: &Path) -> bool {
    dir.join(MANIFEST).is_file()
}

fn write_half(dir: &Path, stem: &str, samples: &[Sample], labels: &[usize], shape: [usize; 3]) -> Result<(), DataError> {
    let mut data = Vec::with_capacity(samples.len() * shape.iter().product::<usize>());
    samples.iter().for_each(|s| data.extend_from_slice(s.image.data()));
    let mut dims = vec![samples.len()];
    dims.extend_from_slice(&shape);
    IdxArray { dims, data: IdxData::Floats(data) }.write(&dir.join(format!("{stem}_images.idx")))?;
    let ids: String = samples.iter().map(|s| format!("{}\n", s.id)).collect();
    let p = dir.join(format!("{stem}_ids.txt"));
    fs::write(&p, ids).map_err(|e| DataError::io(&p, e))?;
    let suffix = if stem.starts_with("source") { "labels" } else { "truth" };
    IdxArray {
        dims: vec![labels.len()],
        data: IdxData::Bytes(labels.iter().map(|&l| l as u8).collect()),
    }
    .write(&dir.join(format!("{stem}_{suffix}.idx")))
}

fn read_half(
    dir: &Path,
    stem: &str,
    domain: Domain,
    shape: [usize; 3],
    truth: &mut GroundTruth,
) -> Result<Vec<Sample>, DataError> {
    let images = IdxArray::read(&dir.join(format!("{stem}_images.idx")))?;
    let IdxData::Floats(pix) = images.data else {
        return Err(DataError::BadMagic { expected: Some(0x0D04), found: 0x0804 });
    };
    let p = dir.join(format!("{stem}_ids.txt"));
    let ids_text = fs::read_to_string(&p).map_err(|e| DataError::io(&p, e))?;
    let ids: Vec<&str> = ids_text.lines().collect();
    let suffix = if domain == Domain::Source { "labels" } else { "truth" };
    let labels = IdxArray::read(&dir.join(format!("{stem}_{suffix}.idx")))?;
    let IdxData::Bytes(labels) = labels.data else {
        return Err(DataError::BadMagic { expected: Some(0x0801), found: 0x0D01 });
    };
    let n = images.dims[0];
    if ids.len() != n || labels.len() != n {
        return Err(DataError::CountMismatch { images: n, labels: labels.len().min(ids.len()) });
    }
    let per = shape.iter().product::<usize>();
    Ok(pix
        .chunks_exact(per)
        .zip(ids)
        .zip(labels)
        .map(|((px, id), l)| {
            truth.insert(id, l as usize);
            Sample {
                id: id.to_string(),
                image: Tensor::new(shape.to_vec(), px.to_vec()).expect("shape"),
                label: (domain == Domain::Source).then_some(l as usize),
                domain,
            }
        })
        .collect())
}

pub fn write(dir: &Path, manifest: &Manifest, source: &DatasetSplit, target: &DatasetSplit) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    for (split, name) in [(source, "source"), (target, "target")] {
        for (half, h) in [(&split.train, "train"), (&split.test, "test")] {
            let labels = split
                .truth
                .labels_for(half)
                .ok_or_else(|| DataError::InvalidConfig(format!("{name}_{h}: missing ground truth")))?;
            write_half(dir, &format!("{name}_{h}"), half, &labels, split.image_shape)?;
        }
    }
    let p = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&p, json + "\n").map_err(|e| DataError::io(&p, e))
}

pub fn read(dir: &Path) -> Result<(Manifest, DatasetSplit, DatasetSplit), DataError> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| DataError::io(&p, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::io(&p, e))?;
    let shape = manifest.image_shape;
    let load = |name: &str, domain: Domain| -> Result<DatasetSplit, DataError> {
        let mut truth = GroundTruth::default();
        let train = read_half(dir, &format!("{name}_train"), domain, shape, &mut truth)?;
        let test = read_half(dir, &format!("{name}_test"), domain, shape, &mut truth)?;
        Ok(DatasetSplit {
            train,
            test,
            num_classes: manifest.num_classes,
            image_shape: shape,
            truth,
        })
    };
    let source = load("source", Domain::Source)?;
    let target = load("target", Domain::Target)?;
    Ok((manifest, source, target))
}
