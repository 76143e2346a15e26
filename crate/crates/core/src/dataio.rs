//! MNIST ingestion, pixel normalization, coordinate grids and patch sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Square 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    pub side: usize,
    pub pixels: Vec<u8>,
    pub label: Option<u8>,
}

impl ImageU8 {
    pub fn new(side: usize, pixels: Vec<u8>) -> Result<Self> {
        if side == 0 || pixels.len() != side * side {
            return Err(Error::Shape(format!(
                "{} pixels for a {side}x{side} image",
                pixels.len()
            )));
        }
        Ok(ImageU8 {
            side,
            pixels,
            label: None,
        })
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.pixels[r * self.side + c]
    }

    /// `m×m` bytes with top-left at `origin`.
    pub fn window(&self, origin: (usize, usize), m: usize) -> Vec<u8> {
        let (r0, c0) = origin;
        assert!(r0 + m <= self.side && c0 + m <= self.side, "window outside image");
        (0..m)
            .flat_map(|a| self.pixels[(r0 + a) * self.side + c0..(r0 + a) * self.side + c0 + m].iter().copied())
            .collect()
    }
}

/// Image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF {
    pub side: usize,
    pub pixels: Vec<f32>,
}

pub fn normalize(img: &ImageU8) -> ImageF {
    ImageF {
        side: img.side,
        pixels: img.pixels.iter().map(|&v| normalize_byte(v)).collect(),
    }
}

#[inline]
pub fn normalize_byte(v: u8) -> f32 {
    (v as f64 / 127.5 - 1.0) as f32
}

/// Inverse of [`normalize_byte`], rounding half away from zero and clamping.
#[inline]
pub fn denormalize_value(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn denormalize(img: &ImageF) -> ImageU8 {
    ImageU8 {
        side: img.side,
        pixels: img.pixels.iter().map(|&v| denormalize_value(v as f64)).collect(),
        label: None,
    }
}

/// `n×n` evenly spaced coordinate pairs in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordGrid {
    pub side: usize,
    /// Row-major `(row coordinate, column coordinate)` pairs.
    pub coords: Vec<[f64; 2]>,
}

/// Coordinate of index `k` on an `n`-point axis; the midpoint when `n = 1`.
#[inline]
pub fn axis_coord(k: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * k as f64 / (n - 1) as f64
    }
}

pub fn make_grid(n: usize) -> Result<CoordGrid> {
    if n == 0 {
        return Err(Error::InvalidArgument("grid side must be at least 1".into()));
    }
    let coords = (0..n)
        .flat_map(|r| (0..n).map(move |c| [axis_coord(r, n), axis_coord(c, n)]))
        .collect();
    Ok(CoordGrid { side: n, coords })
}

impl CoordGrid {
    pub fn window(&self, origin: (usize, usize), m: usize) -> Vec<[f64; 2]> {
        let (r0, c0) = origin;
        assert!(r0 + m <= self.side && c0 + m <= self.side, "grid window outside grid");
        (0..m)
            .flat_map(|a| (0..m).map(move |b| (a, b)))
            .map(|(a, b)| self.coords[(r0 + a) * self.side + c0 + b])
            .collect()
    }
}

/// A training patch and the matching slice of the coordinate grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub m: usize,
    pub origin: (usize, usize),
    pub patch_y: Vec<f32>,
    pub patch_g: Vec<[f64; 2]>,
}

impl PatchPair {
    pub fn extract(img: &ImageF, grid: &CoordGrid, origin: (usize, usize), m: usize) -> Result<Self> {
        check_window(img.side, m)?;
        if grid.side != img.side {
            return Err(Error::Shape(format!(
                "grid side {} differs from image side {}",
                grid.side, img.side
            )));
        }
        let (r0, c0) = origin;
        if r0 + m > img.side || c0 + m > img.side {
            return Err(Error::InvalidArgument(format!(
                "patch at {origin:?} of side {m} leaves a {0}x{0} image",
                img.side
            )));
        }
        let n = img.side;
        let patch_y = (0..m)
            .flat_map(|a| img.pixels[(r0 + a) * n + c0..(r0 + a) * n + c0 + m].iter().copied())
            .collect();
        Ok(PatchPair {
            m,
            origin,
            patch_y,
            patch_g: grid.window(origin, m),
        })
    }
}

fn check_window(n: usize, m: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!(
            "patch side {m} must be in 1..={n}"
        )));
    }
    Ok(())
}

/// Uniform top-left corner of an `m×m` window inside an `n×n` image.
pub fn sample_origin<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<(usize, usize)> {
    check_window(n, m)?;
    let span = n - m;
    Ok((rng.random_range(0..=span), rng.random_range(0..=span)))
}

pub fn sample_patch<R: Rng + ?Sized>(img: &ImageF, grid: &CoordGrid, m: usize, rng: &mut R) -> Result<PatchPair> {
    let origin = sample_origin(img.side, m, rng)?;
    PatchPair::extract(img, grid, origin, m)
}

/// Every fully contained window origin, row-major.
pub fn all_patch_origins(n: usize, m: usize) -> Vec<(usize, usize)> {
    if m == 0 || m > n {
        return Vec::new();
    }
    let k = n - m + 1;
    (0..k).flat_map(|r| (0..k).map(move |c| (r, c))).collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(Error::Truncated {
            path: path.into(),
            needed: need,
            found: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::WrongMagic {
            path: path.into(),
            expected: magic,
            found,
        });
    }
    Ok((0..dims).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect())
}

/// Parses an IDX3 image file body. `path` is only used for error messages.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Vec<ImageU8>> {
    let dims = header(bytes, path, IMAGE_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    if rows != cols || rows == 0 {
        return Err(Error::Format(format!("{}: non-square {rows}x{cols} images", path.display())));
    }
    let px = rows * cols;
    let need = 16 + count * px;
    if bytes.len() < need {
        return Err(Error::Truncated {
            path: path.into(),
            needed: need,
            found: bytes.len(),
        });
    }
    Ok(bytes[16..need]
        .chunks_exact(px)
        .map(|c| ImageU8 {
            side: rows,
            pixels: c.to_vec(),
            label: None,
        })
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let dims = header(bytes, path, LABEL_MAGIC, 1)?;
    let need = 8 + dims[0];
    if bytes.len() < need {
        return Err(Error::Truncated {
            path: path.into(),
            needed: need,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..need].to_vec())
}

/// Loads an IDX image file and its label file.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<ImageU8>> {
    let mut images = parse_idx_images(&read(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read(labels_path)?, labels_path)?;
    if images.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    for (img, l) in images.iter_mut().zip(labels) {
        img.label = Some(l);
    }
    Ok(images)
}

/// Standard MNIST file names inside one directory.
#[derive(Clone, Debug)]
pub struct MnistFiles {
    pub dir: PathBuf,
}

pub struct Mnist {
    pub train: Vec<ImageU8>,
    pub test: Vec<ImageU8>,
}

impl MnistFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        MnistFiles { dir: dir.into() }
    }

    pub fn train_paths(&self) -> (PathBuf, PathBuf) {
        (
            self.dir.join("train-images-idx3-ubyte"),
            self.dir.join("train-labels-idx1-ubyte"),
        )
    }

    pub fn test_paths(&self) -> (PathBuf, PathBuf) {
        (
            self.dir.join("t10k-images-idx3-ubyte"),
            self.dir.join("t10k-labels-idx1-ubyte"),
        )
    }

    pub fn exists(&self) -> bool {
        let (a, b) = self.train_paths();
        let (c, d) = self.test_paths();
        [a, b, c, d].iter().all(|p| p.is_file())
    }

    pub fn load(&self) -> Result<Mnist> {
        let (a, b) = self.train_paths();
        let (c, d) = self.test_paths();
        Ok(Mnist {
            train: load_idx(&a, &b)?,
            test: load_idx(&c, &d)?,
        })
    }

    pub fn load_test(&self) -> Result<Vec<ImageU8>> {
        let (c, d) = self.test_paths();
        load_idx(&c, &d)
    }
}
