use std::path::Path;

use super::Dataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, offset: usize, detail: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn check_header(path: &Path, bytes: &[u8], magic: u32, header: usize) -> Result<()> {
    if bytes.len() < header {
        return Err(format_err(
            path,
            bytes.len(),
            format!(
                "truncated IDX header: expected {header} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(format_err(
            path,
            0,
            format!("bad IDX magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    Ok(())
}

fn check_body(path: &Path, bytes: &[u8], header: usize, expected: usize) -> Result<()> {
    let actual = bytes.len() - header;
    if actual != expected {
        return Err(format_err(
            path,
            bytes.len().min(header + expected),
            format!("IDX payload holds {actual} bytes, header implies {expected}"),
        ));
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Read an IDX image file and its label file. Pixels are scaled to `[0, 1]`
/// and the class count is one more than the largest label.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read(images)?;
    check_header(images, &img, IMAGES_MAGIC, 16)?;
    let (count, rows, cols) = (
        be_u32(&img, 4) as usize,
        be_u32(&img, 8) as usize,
        be_u32(&img, 12) as usize,
    );
    check_body(images, &img, 16, count * rows * cols)?;

    let lab = read(labels)?;
    check_header(labels, &lab, LABELS_MAGIC, 8)?;
    let label_count = be_u32(&lab, 4) as usize;
    if label_count != count {
        return Err(format_err(
            labels,
            4,
            format!("{label_count} labels for {count} images"),
        ));
    }
    check_body(labels, &lab, 8, count)?;

    let features: Vec<f64> = img[16..].iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&y| y as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(
        Tensor::matrix(count, rows * cols, features)?,
        labels,
        classes,
    )
}

/// `load_idx` on `<dir>/<split>-images-idx3-ubyte` and
/// `<dir>/<split>-labels-idx1-ubyte`, with `split` `train` or `t10k`.
pub fn load_idx_split(dir: &Path, split: &str) -> Result<Dataset> {
    load_idx(
        &dir.join(format!("{split}-images-idx3-ubyte")),
        &dir.join(format!("{split}-labels-idx1-ubyte")),
    )
}

/// Write `dataset` as an IDX pair of `rows x cols` images. Feature values are
/// clamped to `[0, 1]` and rounded to bytes.
pub fn write_idx(
    dataset: &Dataset,
    rows: usize,
    cols: usize,
    images: &Path,
    labels: &Path,
) -> Result<()> {
    if rows * cols != dataset.input_dim() {
        return Err(Error::shape(
            "write_idx",
            format!("{rows}x{cols} images for {} features", dataset.input_dim()),
        ));
    }
    if dataset.num_classes() > 256 {
        return Err(Error::invalid("IDX labels are single bytes"));
    }
    let n = dataset.len() as u32;
    let mut img = Vec::with_capacity(16 + dataset.features().len());
    for v in [IMAGES_MAGIC, n, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(
        dataset
            .features()
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend(dataset.labels().iter().map(|&y| y as u8));
    std::fs::write(images, img).map_err(|e| Error::io(images, e))?;
    std::fs::write(labels, lab).map_err(|e| Error::io(labels, e))
}
