//! Raw image files: a 16-byte header (magic, height, width, channels as
//! little-endian u32) followed by row-major 32-bit little-endian reals.

use echo_moe::error::{Error, Result};
use echo_moe::tensor::Tensor;
use std::path::Path;

const MAGIC: &[u8; 4] = b"RIMG";

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Data(format!(
            "image tensor must be H×W×C, got {shape:?}"
        )));
    }
    let mut bytes = Vec::with_capacity(16 + image.numel() * 4);
    bytes.extend_from_slice(MAGIC);
    for d in shape {
        bytes.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in image.data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("reading image {}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Data(format!(
            "{} is not an image file (bad header)",
            path.display()
        )));
    }
    let dim = |at: usize| {
        u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize
    };
    let (h, w, c) = (dim(4), dim(8), dim(12));
    let expected = 16 + h * w * c * 4;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: {} bytes for {h}×{w}×{c} image (expected {expected})",
            path.display(),
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(h * w * c);
    for chunk in bytes[16..].chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    Tensor::new(vec![h, w, c], data)
}
