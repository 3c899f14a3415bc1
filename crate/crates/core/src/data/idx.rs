//! IDX container format: big-endian header `00 00 <type> <ndims>`, then one
//! u32 per dimension, then the row-major payload.

use std::fs;
use std::path::Path;

use super::DataError;

pub const IDX_UBYTE: u8 = 0x08;
pub const IDX_FLOAT: u8 = 0x0D;

/// Magic for a 3-D unsigned byte image array (`n × rows × cols`).
pub const IMAGES_MAGIC: u32 = 0x0000_0803;
/// Magic for a 1-D unsigned byte label array.
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    Bytes(Vec<u8>),
    Floats(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: IdxData,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        let ty = match self.data {
            IdxData::Bytes(_) => IDX_UBYTE,
            IdxData::Floats(_) => IDX_FLOAT,
        };
        ((ty as u32) << 8) | self.dims.len() as u32
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.magic().to_be_bytes().to_vec();
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        match &self.data {
            IdxData::Bytes(b) => out.extend_from_slice(b),
            IdxData::Floats(f) => f.iter().for_each(|v| out.extend_from_slice(&v.to_be_bytes())),
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < 4 {
            return Err(DataError::Truncated { expected: 4, found: bytes.len() });
        }
        let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        let (zero, ty, ndims) = (magic >> 16, ((magic >> 8) & 0xff) as u8, (magic & 0xff) as usize);
        if zero != 0 || !(ty == IDX_UBYTE || ty == IDX_FLOAT) || ndims == 0 {
            return Err(DataError::BadMagic { expected: None, found: magic });
        }
        let header = 4 + 4 * ndims;
        if bytes.len() < header {
            return Err(DataError::Truncated { expected: header, found: bytes.len() });
        }
        let dims: Vec<usize> = (0..ndims)
            .map(|i| {
                let o = 4 + 4 * i;
                u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
            })
            .collect();
        let count: usize = dims.iter().product();
        let width = if ty == IDX_UBYTE { 1 } else { 4 };
        let expected = header + count * width;
        if bytes.len() < expected {
            return Err(DataError::Truncated { expected, found: bytes.len() });
        }
        let payload = &bytes[header..expected];
        let data = if ty == IDX_UBYTE {
            IdxData::Bytes(payload.to_vec())
        } else {
            IdxData::Floats(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        };
        Ok(Self { dims, data })
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
        Self::parse(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_bytes()).map_err(|e| DataError::io(path, e))
    }
}

/// Grayscale images scaled to [0,1] with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxDataset {
    pub rows: usize,
    pub cols: usize,
    /// One `rows * cols` buffer per image.
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

fn expect_magic(arr: &IdxArray, magic: u32) -> Result<(), DataError> {
    if arr.magic() != magic {
        return Err(DataError::BadMagic { expected: Some(magic), found: arr.magic() });
    }
    Ok(())
}

pub fn parse_idx_pair(image_bytes: &[u8], label_bytes: &[u8]) -> Result<IdxDataset, DataError> {
    let images = IdxArray::parse(image_bytes)?;
    expect_magic(&images, IMAGES_MAGIC)?;
    let labels = IdxArray::parse(label_bytes)?;
    expect_magic(&labels, LABELS_MAGIC)?;
    let (n, rows, cols) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != n {
        return Err(DataError::CountMismatch { images: n, labels: labels.dims[0] });
    }
    let (IdxData::Bytes(pix), IdxData::Bytes(lab)) = (images.data, labels.data) else {
        unreachable!("magic checked");
    };
    let labels: Vec<usize> = lab.iter().map(|&l| l as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(DataError::InvalidLabel { label: bad, classes: 10 });
    }
    let images = pix
        .chunks_exact(rows * cols)
        .map(|c| c.iter().map(|&b| b as f32 / 255.0).collect())
        .collect();
    Ok(IdxDataset { rows, cols, images, labels })
}

/// Reads an MNIST-style image/label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<IdxDataset, DataError> {
    let ib = fs::read(images_path).map_err(|e| DataError::io(images_path, e))?;
    let lb = fs::read(labels_path).map_err(|e| DataError::io(labels_path, e))?;
    parse_idx_pair(&ib, &lb)
}

/// Encodes 8-bit images and labels in the layout [`load_idx`] reads.
pub fn encode_idx_pair(rows: usize, cols: usize, images: &[Vec<u8>], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let img = IdxArray {
        dims: vec![images.len(), rows, cols],
        data: IdxData::Bytes(images.concat()),
    };
    let lab = IdxArray {
        dims: vec![labels.len()],
        data: IdxData::Bytes(labels.to_vec()),
    };
    (img.to_bytes(), lab.to_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let images: Vec<Vec<u8>> = (0..4u8).map(|i| vec![0, 255, i * 10, 128]).collect();
        encode_idx_pair(2, 2, &images, &[3, 1, 4, 1])
    }

    #[test]
    fn header_bytes() {
        let (ib, lb) = fixture();
        assert_eq!(&ib[..4], &[0, 0, 8, 3]);
        assert_eq!(&lb[..4], &[0, 0, 8, 1]);
        assert_eq!(&ib[4..8], &[0, 0, 0, 4]);
    }

    #[test]
    fn scaling_and_labels() {
        let (ib, lb) = fixture();
        let ds = parse_idx_pair(&ib, &lb).unwrap();
        assert_eq!((ds.rows, ds.cols), (2, 2));
        assert_eq!(ds.images[0][1], 1.0);
        assert_eq!(ds.images[0][0], 0.0);
        assert_eq!(ds.labels, vec![3, 1, 4, 1]);
    }

    #[test]
    fn distinct_errors() {
        let (mut ib, lb) = fixture();
        assert!(matches!(
            parse_idx_pair(&ib[..ib.len() - 1], &lb),
            Err(DataError::Truncated { .. })
        ));
        assert!(matches!(parse_idx_pair(&lb, &lb), Err(DataError::BadMagic { .. })));
        let (_, short_labels) = encode_idx_pair(2, 2, &[], &[1, 2, 3]);
        assert!(matches!(
            parse_idx_pair(&ib, &short_labels),
            Err(DataError::CountMismatch { images: 4, labels: 3 })
        ));
        ib[2] = 0x07;
        assert!(matches!(parse_idx_pair(&ib, &lb), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn float_arrays_round_trip() {
        let arr = IdxArray {
            dims: vec![2, 3],
            data: IdxData::Floats(vec![0.0, 0.25, 1.0, 0.5, 0.125, 0.75]),
        };
        assert_eq!(arr.magic(), 0x0000_0D02);
        assert_eq!(IdxArray::parse(&arr.to_bytes()).unwrap(), arr);
    }
}
