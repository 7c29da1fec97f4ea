//! Datasets: MNIST in IDX format, two interleaved moons and the
//! fading-Gaussian sampler.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fading_gaussian::{self, GaussianProblem};

/// Environment variable naming the directory that holds the MNIST IDX files.
pub const DATA_DIR_ENV: &str = "LSROBUST_DATA_DIR";

pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const IMAGES_MAGIC: u32 = 0x0000_0803;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::shape("dataset labels", inputs.nrows(), labels.len()));
        }
        if class_count < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {class_count}")));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {class_count})")));
        }
        if !inputs.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dataset inputs"));
        }
        Ok(Self {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows `start..end`, clamped to the dataset length.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let end = end.min(self.len());
        let start = start.min(end);
        Dataset {
            inputs: self.inputs.slice(s![start..end, ..]).to_owned(),
            labels: self.labels[start..end].to_vec(),
            class_count: self.class_count,
        }
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!("row {bad} out of range for {} rows", self.len())));
        }
        Ok(Dataset {
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        })
    }
}

/// A parsed IDX file: dimension sizes and the raw unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset,
            message: format!("truncated header ({} bytes total)", bytes.len()),
        })
}

/// Parses an unsigned-byte IDX buffer, requiring the given magic number.
pub fn parse_idx(bytes: &[u8], expected_magic: u32) -> Result<IdxArray> {
    let magic = read_u32(bytes, 0)?;
    if magic != expected_magic {
        return Err(Error::Parse {
            offset: 0,
            message: format!("magic {magic:#010x}, expected {expected_magic:#010x}"),
        });
    }
    let rank = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(read_u32(bytes, 4 + 4 * i)? as usize);
    }
    let header = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() < len {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated body: {} of {len} bytes", body.len()),
        });
    }
    if body.len() > len {
        return Err(Error::Parse {
            offset: header + len,
            message: format!("{} trailing bytes", body.len() - len),
        });
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

pub fn write_idx(array: &IdxArray) -> Result<Vec<u8>> {
    let rank = array.dims.len();
    if rank == 0 || rank > 255 {
        return Err(Error::InvalidArgument(format!("IDX rank must be in 1..=255, got {rank}")));
    }
    if array.dims.iter().product::<usize>() != array.data.len() {
        return Err(Error::shape("IDX body", array.dims.iter().product::<usize>(), array.data.len()));
    }
    let mut out = Vec::with_capacity(4 + 4 * rank + array.data.len());
    out.extend_from_slice(&(0x0800u32 | rank as u32).to_be_bytes());
    for &d in &array.dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    Ok(out)
}

/// Builds a dataset from parsed image and label buffers, scaling bytes by
/// `1/255`. The class count is fixed at 10.
pub fn dataset_from_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let img = parse_idx(images, IMAGES_MAGIC)?;
    let lab = parse_idx(labels, LABELS_MAGIC)?;
    if img.dims[0] != lab.dims[0] {
        return Err(Error::Parse {
            offset: 4,
            message: format!("image count {} does not match label count {}", img.dims[0], lab.dims[0]),
        });
    }
    let n = img.dims[0];
    let d = img.dims[1] * img.dims[2];
    let inputs = Array2::from_shape_vec((n, d), img.data.iter().map(|&b| f64::from(b) / 255.0).collect())
        .expect("body length checked by parse_idx");
    if let Some((i, &bad)) = lab.data.iter().enumerate().find(|(_, &b)| b >= 10) {
        return Err(Error::Parse {
            offset: 8 + i,
            message: format!("label {bad} outside [0, 10)"),
        });
    }
    Dataset::new(inputs, lab.data.iter().map(|&b| usize::from(b)).collect(), 10)
}

/// Encodes a dataset with inputs in `[0, 1]` as `(images, labels)` IDX
/// buffers. Pixels are stored as `round(255 v)`; rows must have `rows * cols`
/// entries.
pub fn dataset_to_idx(ds: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != ds.dim() {
        return Err(Error::shape("IDX image size", ds.dim(), rows * cols));
    }
    if ds.class_count() > 256 {
        return Err(Error::InvalidArgument("labels must fit in one byte".into()));
    }
    if !ds.inputs.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("image values must lie in [0, 1]".into()));
    }
    let images = IdxArray {
        dims: vec![ds.len(), rows, cols],
        data: ds.inputs.iter().map(|v| (v * 255.0).round() as u8).collect(),
    };
    let labels = IdxArray {
        dims: vec![ds.len()],
        data: ds.labels.iter().map(|&y| y as u8).collect(),
    };
    Ok((write_idx(&images)?, write_idx(&labels)?))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = read_file(images_path.as_ref())?;
    let labels = read_file(labels_path.as_ref())?;
    dataset_from_idx(&images, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads one MNIST split from a directory holding the four uncompressed IDX
/// files under their usual names.
pub fn load_mnist_dir(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let (images, labels) = match split {
        Split::Train => (MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS),
        Split::Test => (MNIST_TEST_IMAGES, MNIST_TEST_LABELS),
    };
    load_mnist_idx(dir.join(images), dir.join(labels))
}

/// `$LSROBUST_DATA_DIR/mnist` if the variable is set, otherwise `data/mnist`.
pub fn default_mnist_dir() -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) => PathBuf::from(dir).join("mnist"),
        None => PathBuf::from("data").join("mnist"),
    }
}

/// Two interleaved half circles of radius 1. Class 0 is `(cos t, sin t)`,
/// class 1 is `(1 - cos t, 1/2 - sin t)`, with `t` evenly spaced on
/// `[0, pi]` and isotropic Gaussian noise added. Class 0 gets `ceil(n/2)`
/// points. Rows are shuffled.
pub fn two_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("two_moons needs n >= 2, got {n}")));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let upper = n.div_ceil(2);
    let lower = n / 2;
    let angle = |i: usize, count: usize| {
        if count == 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (count - 1) as f64
        }
    };
    let mut points: Vec<([f64; 2], usize)> = Vec::with_capacity(n);
    for i in 0..upper {
        let t = angle(i, upper);
        points.push(([t.cos(), t.sin()], 0));
    }
    for i in 0..lower {
        let t = angle(i, lower);
        points.push(([1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if noise_std > 0.0 {
        for (p, _) in &mut points {
            for v in p.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += noise_std * z;
            }
        }
    }
    rand::seq::SliceRandom::shuffle(points.as_mut_slice(), &mut rng);
    let inputs = Array2::from_shape_fn((n, 2), |(i, j)| points[i].0[j]);
    Dataset::new(inputs, points.iter().map(|p| p.1).collect(), 2)
}

/// Uniform subsample of `n` rows without replacement.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > ds.len() {
        return Err(Error::InvalidArgument(format!("subset size {n} not in 1..={}", ds.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = rand::seq::index::sample(&mut rng, ds.len(), n).into_vec();
    ds.select(&indices)
}

/// `n` draws from the fading-Gaussian problem with labels `-1 -> 0`,
/// `+1 -> 1`.
pub fn gaussian_dataset(p: &GaussianProblem, n: usize, seed: u64) -> Result<Dataset> {
    let sample = fading_gaussian::sample(p, n, seed)?;
    let labels = sample.y.iter().map(|&y| usize::from(y > 0)).collect();
    Dataset::new(sample.x, labels, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_magic_and_truncation() {
        let ok = write_idx(&IdxArray {
            dims: vec![3],
            data: vec![1, 2, 3],
        })
        .unwrap();
        assert_eq!(&ok[..4], &[0, 0, 8, 1]);
        assert_eq!(parse_idx(&ok, LABELS_MAGIC).unwrap().data, vec![1, 2, 3]);
        assert!(matches!(parse_idx(&ok, IMAGES_MAGIC), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(parse_idx(&ok[..6], LABELS_MAGIC), Err(Error::Parse { offset: 4, .. })));
        assert!(matches!(parse_idx(&ok[..10], LABELS_MAGIC), Err(Error::Parse { offset: 10, .. })));
    }

    #[test]
    fn pixel_scaling_endpoints() {
        let images = write_idx(&IdxArray {
            dims: vec![1, 1, 2],
            data: vec![0, 255],
        })
        .unwrap();
        let labels = write_idx(&IdxArray {
            dims: vec![1],
            data: vec![7],
        })
        .unwrap();
        let ds = dataset_from_idx(&images, &labels).unwrap();
        assert_eq!(ds.inputs().row(0).to_vec(), vec![0.0, 1.0]);
        assert_eq!(ds.labels(), &[7]);
    }

    #[test]
    fn count_mismatch_rejected() {
        let images = write_idx(&IdxArray {
            dims: vec![2, 1, 1],
            data: vec![0, 0],
        })
        .unwrap();
        let labels = write_idx(&IdxArray {
            dims: vec![1],
            data: vec![0],
        })
        .unwrap();
        assert!(matches!(dataset_from_idx(&images, &labels), Err(Error::Parse { .. })));
    }

    #[test]
    fn moons_balance_and_radius() {
        let ds = two_moons(101, 0.0, 3).unwrap();
        assert_eq!(ds.class_counts(), vec![51, 50]);
        for (x, &y) in ds.inputs().rows().into_iter().zip(ds.labels()) {
            let (cx, cy) = if y == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let r = ((x[0] - cx).powi(2) + (x[1] - cy).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
        }
        assert_eq!(two_moons(101, 0.1, 3).unwrap(), two_moons(101, 0.1, 3).unwrap());
    }

    #[test]
    fn subset_rules() {
        let ds = two_moons(20, 0.1, 0).unwrap();
        assert!(subset(&ds, 0, 0).is_err());
        assert!(subset(&ds, 21, 0).is_err());
        let full = subset(&ds, 20, 5).unwrap();
        let mut a: Vec<_> = full.inputs().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<_> = ds.inputs().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        assert_eq!(subset(&ds, 7, 9).unwrap(), subset(&ds, 7, 9).unwrap());
    }
}
