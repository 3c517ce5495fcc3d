//! Raw (uncompressed) IDX fixtures.

use std::path::Path;

pub fn image_bytes(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), n * rows * cols);
    let mut b = Vec::with_capacity(16 + pixels.len());
    for v in [0x0803u32, n as u32, rows as u32, cols as u32] {
        b.extend(v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

pub fn label_bytes(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::with_capacity(8 + labels.len());
    for v in [0x0801u32, labels.len() as u32] {
        b.extend(v.to_be_bytes());
    }
    b.extend_from_slice(labels);
    b
}

/// `n` random 28×28 images with labels cycling through 0..10; each class
/// lights a distinct horizontal band so small models can separate them.
pub fn write_digits(dir: &Path, stem: &str, n: usize, seed: u64) {
    let mut rng = bm_core::rng::RngStream::new(seed, "idx-fixture", 0);
    let mut px = vec![0u8; n * 784];
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    for (i, &y) in labels.iter().enumerate() {
        let img = &mut px[i * 784..(i + 1) * 784];
        for (j, p) in img.iter_mut().enumerate() {
            let band = (j / 28) / 3 == y as usize;
            let base = if band { 200.0 } else { 10.0 };
            *p = (base + 40.0 * rng.uniform()).min(255.0) as u8;
        }
    }
    std::fs::write(dir.join(format!("{stem}-images-idx3-ubyte")), image_bytes(n, 28, 28, &px)).unwrap();
    std::fs::write(dir.join(format!("{stem}-labels-idx1-ubyte")), label_bytes(&labels)).unwrap();
}
