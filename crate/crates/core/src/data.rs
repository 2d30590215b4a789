//! Datasets: MNIST in the IDX format, the 28→32 resize, and synthetic
//! low-rank fixtures.
//!
//! Pixel bytes map to `[-1, 1]` via `v / 127.5 − 1` to match the decoder's
//! Tanh output range.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::index;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{LoraeError, Result};
use crate::linalg::Matrix;
use crate::rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × (height·width)`, values in `[-1, 1]`.
    pub images: Matrix,
    pub labels: Option<Vec<u8>>,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

pub fn byte_to_unit(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

pub fn unit_to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

impl Dataset {
    pub fn new(images: Matrix, labels: Option<Vec<u8>>, height: usize, width: usize) -> Result<Self> {
        if images.rows() == 0 {
            return Err(LoraeError::contract("dataset must contain at least one image"));
        }
        if images.cols() != height * width {
            return Err(LoraeError::dim("Dataset::new", &images.shape(), &[height, width]));
        }
        if let Some(l) = &labels {
            if l.len() != images.rows() {
                return Err(LoraeError::dim("Dataset::new labels", &images.shape(), &[l.len()]));
            }
        }
        Ok(Dataset {
            images,
            labels,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.images.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            height: self.height,
            width: self.width,
        }
    }

    /// First `k` samples (or all of them if there are fewer).
    pub fn first(&self, k: usize) -> Dataset {
        let idx: Vec<usize> = (0..k.min(self.len())).collect();
        self.select(&idx)
    }

    /// `k` samples drawn without replacement from a seeded generator, in draw order.
    pub fn random_subset(&self, k: usize, seed: u64) -> Dataset {
        let mut r = rng::seeded(seed);
        let idx = index::sample(&mut r, self.len(), k.min(self.len())).into_vec();
        self.select(&idx)
    }

    pub fn labels_usize(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| l.iter().map(|&v| v as usize).collect())
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| LoraeError::Format {
            offset,
            message: format!("header truncated: need {} bytes, file has {}", offset + 4, bytes.len()),
        })
}

/// Parse IDX image (and optional label) payloads into a dataset.
pub fn parse_idx(images: &[u8], labels: Option<&[u8]>) -> Result<Dataset> {
    let magic = read_u32(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(LoraeError::Format {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_u32(images, 4)? as usize;
    let rows = read_u32(images, 8)? as usize;
    let cols = read_u32(images, 12)? as usize;
    let expected = 16 + n * rows * cols;
    if images.len() != expected {
        return Err(LoraeError::Format {
            offset: 16,
            message: format!(
                "image payload length mismatch: expected {expected} bytes, got {}",
                images.len()
            ),
        });
    }
    let values: Vec<f64> = images[16..].iter().map(|&b| byte_to_unit(b)).collect();
    let mat = Matrix::new(n, rows * cols, values)?;

    let labels = match labels {
        None => None,
        Some(lb) => {
            let magic = read_u32(lb, 0)?;
            if magic != IDX_LABELS_MAGIC {
                return Err(LoraeError::Format {
                    offset: 0,
                    message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
                });
            }
            let count = read_u32(lb, 4)? as usize;
            if count != n {
                return Err(LoraeError::Format {
                    offset: 4,
                    message: format!("label count {count} does not match image count {n}"),
                });
            }
            if lb.len() != 8 + count {
                return Err(LoraeError::Format {
                    offset: 8,
                    message: format!(
                        "label payload length mismatch: expected {} bytes, got {}",
                        8 + count,
                        lb.len()
                    ),
                });
            }
            Some(lb[8..].to_vec())
        }
    };
    Dataset::new(mat, labels, rows, cols)
}

/// Encode a dataset as IDX image and label payloads.
pub fn serialize_idx(ds: &Dataset) -> (Vec<u8>, Option<Vec<u8>>) {
    let mut img = Vec::with_capacity(16 + ds.images.as_slice().len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, ds.height as u32, ds.width as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.images.as_slice().iter().map(|&v| unit_to_byte(v)));
    let labels = ds.labels.as_ref().map(|l| {
        let mut out = Vec::with_capacity(8 + l.len());
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(l.len() as u32).to_be_bytes());
        out.extend_from_slice(l);
        out
    });
    (img, labels)
}

/// Read a file, transparently gunzipping it when it starts with the gzip magic.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn load_idx_files(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let img = read_maybe_gz(images)?;
    let lab = labels.map(read_maybe_gz).transpose()?;
    parse_idx(&img, lab.as_deref())
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{}: no {stem}[.gz]", dir.display()),
    )
    .into())
}

/// Load one MNIST split from a directory holding the standard file names,
/// gzip-compressed or raw.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let images = find_file(dir, &format!("{}-images-idx3-ubyte", split.prefix()))?;
    let labels = find_file(dir, &format!("{}-labels-idx1-ubyte", split.prefix()))?;
    load_idx_files(&images, Some(&labels))
}

/// Bilinear resize of every image from 28×28 to 32×32 (half-pixel centers,
/// edge clamping).
pub fn resize_to_32(ds: &Dataset) -> Result<Dataset> {
    if ds.height != 28 || ds.width != 28 {
        return Err(LoraeError::contract(format!(
            "resize_to_32 expects 28×28 images, got {}×{}",
            ds.height, ds.width
        )));
    }
    resize_bilinear(ds, 32, 32)
}

pub fn resize_bilinear(ds: &Dataset, out_h: usize, out_w: usize) -> Result<Dataset> {
    let taps_y = bilinear_taps(ds.height, out_h);
    let taps_x = bilinear_taps(ds.width, out_w);
    let mut out = Matrix::zeros(ds.len(), out_h * out_w);
    for n in 0..ds.len() {
        let src = ds.images.row(n);
        let dst = out.row_mut(n);
        for (oy, &(y0, y1, fy)) in taps_y.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                let top = src[y0 * ds.width + x0] * (1.0 - fx) + src[y0 * ds.width + x1] * fx;
                let bot = src[y1 * ds.width + x0] * (1.0 - fx) + src[y1 * ds.width + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Dataset::new(out, ds.labels.clone(), out_h, out_w)
}

/// `(lo, hi, frac)` source taps for each output coordinate.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Rows `A·c + ε` with `A` a seeded `d × r` Gaussian matrix, `c ~ N(0, I_r)`
/// and `ε ~ N(0, σ²I)`, clipped to `[-1, 1]`.
///
/// The noiseless part is scaled by one global factor so that it already lies
/// in `[-1, 1]`; with `noise_sigma = 0` clipping is then a no-op and the rows
/// span exactly an `r`-dimensional subspace.
pub fn synth_lowrank(n: usize, d: usize, r: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if r == 0 || r > d {
        return Err(LoraeError::contract(format!(
            "synth_lowrank needs 1 ≤ r ≤ d, got r = {r}, d = {d}"
        )));
    }
    if n == 0 {
        return Err(LoraeError::contract("synth_lowrank needs n ≥ 1"));
    }
    if !(noise_sigma >= 0.0) {
        return Err(LoraeError::contract(format!(
            "noise_sigma must be ≥ 0, got {noise_sigma}"
        )));
    }
    let mut rng = rng::seeded(seed);
    let a = Matrix::random_normal(d, r, &mut rng);
    let c = Matrix::random_normal(n, r, &mut rng);
    let mut x = c.matmul_t(&a)?; // n × d
    let peak = x.max_abs();
    if peak > 1.0 {
        x = x.scale(1.0 / peak);
    }
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma).map_err(|e| LoraeError::contract(e.to_string()))?;
        for v in x.as_mut_slice() {
            *v = (*v + noise.sample(&mut rng)).clamp(-1.0, 1.0);
        }
    }
    Dataset::new(x, None, 1, d)
}

/// Draw `n × d` standard normal values (test and fixture helper).
pub fn standard_normal(n: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = rng::seeded(seed);
    Matrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let ds = Dataset::new(
            Matrix::from_fn(2, 784, |i, j| byte_to_unit(((i * 131 + j * 7) % 256) as u8)),
            Some(vec![3, 9]),
            28,
            28,
        )
        .unwrap();
        let (img, lab) = serialize_idx(&ds);
        (img, lab.unwrap())
    }

    #[test]
    fn parses_two_image_fixture() {
        let (img, lab) = fixture();
        let ds = parse_idx(&img, Some(&lab)).unwrap();
        assert_eq!((ds.len(), ds.dim()), (2, 784));
        assert_eq!(ds.labels.as_deref(), Some(&[3u8, 9][..]));
    }

    #[test]
    fn byte_range_endpoints() {
        assert!((byte_to_unit(0) + 1.0).abs() < 1e-9);
        assert!((byte_to_unit(255) - 1.0).abs() < 1e-9);
        assert_eq!(unit_to_byte(byte_to_unit(128)), 128);
    }

    #[test]
    fn truncated_images_report_lengths() {
        let (img, _) = fixture();
        let err = parse_idx(&img[..img.len() - 10], None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&format!("expected {}", img.len())), "{msg}");
        assert!(msg.contains(&format!("got {}", img.len() - 10)), "{msg}");
    }

    #[test]
    fn bad_magic_and_count_mismatch() {
        let (mut img, lab) = fixture();
        let mut bad_lab = lab.clone();
        bad_lab[7] = 3; // count 3 instead of 2
        assert!(matches!(
            parse_idx(&img, Some(&bad_lab)),
            Err(LoraeError::Format { offset: 4, .. })
        ));
        img[3] = 0x01;
        assert!(matches!(
            parse_idx(&img, Some(&lab)),
            Err(LoraeError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn resize_constant_image() {
        let ds = Dataset::new(Matrix::from_fn(1, 784, |_, _| 0.25), None, 28, 28).unwrap();
        let out = resize_to_32(&ds).unwrap();
        assert_eq!((out.height, out.width), (32, 32));
        assert!(out.images.as_slice().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn resize_rejects_other_sizes() {
        let ds = Dataset::new(Matrix::zeros(1, 16), None, 4, 4).unwrap();
        assert!(resize_to_32(&ds).is_err());
    }

    #[test]
    fn synth_rejects_bad_rank() {
        assert!(synth_lowrank(10, 4, 0, 0.0, 1).is_err());
        assert!(synth_lowrank(10, 4, 5, 0.0, 1).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_bounded() {
        let a = synth_lowrank(50, 8, 3, 0.1, 9).unwrap();
        let b = synth_lowrank(50, 8, 3, 0.1, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.images.max_abs() <= 1.0);
    }

    #[test]
    fn subsets_are_deterministic() {
        let ds = synth_lowrank(40, 4, 2, 0.0, 1).unwrap();
        assert_eq!(ds.random_subset(10, 5), ds.random_subset(10, 5));
        assert_eq!(ds.first(3).images, ds.images.select_rows(&[0, 1, 2]));
    }
}
