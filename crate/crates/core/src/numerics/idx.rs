//! MNIST IDX reader.
//!
//! Images: `0x00000803`, then big-endian `u32` count, rows, cols, then one
//! `u8` per pixel. Labels: `0x00000801`, big-endian `u32` count, one `u8` per
//! label.

use std::path::Path;

use super::{Dataset, NumericsError};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, NumericsError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| NumericsError::Idx("truncated header".into()))
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages, NumericsError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(NumericsError::Idx(format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(NumericsError::Idx(format!("image payload is {} bytes, header says {expected}", payload.len())));
    }
    Ok(IdxImages { count, rows, cols, pixels: payload.to_vec() })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, NumericsError> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(NumericsError::Idx(format!("bad label magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(NumericsError::Idx(format!("label payload is {} bytes, header says {count}", payload.len())));
    }
    Ok(payload.to_vec())
}

/// Builds a 10-class dataset with pixels scaled to `[0, 1]`.
pub fn dataset_from_bytes(images: &[u8], labels: &[u8]) -> Result<Dataset<f32>, NumericsError> {
    let images = parse_images(images)?;
    let labels = parse_labels(labels)?;
    if labels.len() != images.count {
        return Err(NumericsError::Idx(format!("{} images but {} labels", images.count, labels.len())));
    }
    let features = images.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let labels = labels.into_iter().map(usize::from).collect();
    Dataset::new(features, labels, images.rows * images.cols, 10)
}

pub fn load_mnist(images: &Path, labels: &Path) -> Result<Dataset<f32>, NumericsError> {
    dataset_from_bytes(&std::fs::read(images)?, &std::fs::read(labels)?)
}

/// Serializes images back to IDX; used to build fixtures.
pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_fixture() {
        let pixels: Vec<u8> = vec![0, 255, 51, 102, 0, 0, 0, 255];
        let data = dataset_from_bytes(&encode_images(2, 2, &pixels), &encode_labels(&[3, 9])).unwrap();
        assert_eq!(data.num_samples(), 2);
        assert_eq!(data.dim(), 4);
        assert_eq!(data.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(data.labels(), &[3, 9]);
    }

    #[test]
    fn header_is_big_endian() {
        let bytes = encode_images(28, 28, &vec![0; 784]);
        assert_eq!(&bytes[..8], &[0, 0, 8, 3, 0, 0, 0, 1]);
    }

    #[test]
    fn rejects_malformed() {
        let img = encode_images(2, 2, &[0; 4]);
        let lbl = encode_labels(&[1]);
        assert!(parse_images(&lbl).is_err());
        assert!(parse_labels(&img).is_err());
        assert!(parse_images(&img[..10]).is_err());
        assert!(parse_images(&img[..18]).is_err());
        assert!(dataset_from_bytes(&img, &encode_labels(&[1, 2])).is_err());
        assert!(dataset_from_bytes(&img, &encode_labels(&[10])).is_err());
    }
}
