//! Labelled datasets: seeded synthetic image classes and IDX files.
//!
//! Synthetic images place class `c` samples in a channel subspace `Q_c`
//! (`channels x rank`, orthonormal): the channel vector at pixel `p` is
//! `Q_c (signal * m_c[p] + noise * z) + ambient * xi` with a fixed per-class
//! prototype `m_c` and fresh Gaussian `z`, `xi` per sample.

use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::orth_merge;
use crate::tensor::{DenseMatrix, DenseTensor, TensorError};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("byte {offset}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { offset: u64, found: u32, expected: u32 },
    #[error("byte {offset}: IDX file truncated, needed {needed} more bytes")]
    Truncated { offset: u64, needed: u64 },
    #[error("byte {offset}: {trailing} trailing bytes")]
    Trailing { offset: u64, trailing: u64 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error("label {label} at index {index} exceeds class count {classes}")]
    BadLabel { index: usize, label: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, DataError>;

/// Samples stacked along mode 0 with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: DenseTensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: DenseTensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.dims()[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: inputs.dims()[0],
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(DataError::BadLabel { index, label, classes });
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &DenseTensor {
        &self.inputs
    }

    /// Per-sample shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.dims()[1..]
    }

    /// Same samples viewed with another per-sample shape of equal size.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let dims: Vec<usize> = std::iter::once(self.len()).chain(shape.iter().copied()).collect();
        self.inputs = self.inputs.reshape(dims)?;
        Ok(self)
    }

    pub fn gather(&self, indices: &[usize]) -> (DenseTensor, Vec<usize>) {
        (
            self.inputs.gather_outer(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Full batches of `batch_size` indices; a trailing short batch is dropped.
    pub fn batch_indices(&self, batch_size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(rng) = rng {
            order.shuffle(rng);
        }
        if batch_size == 0 {
            return Vec::new();
        }
        order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Inputs of the first `count` full batches in sample order.
    pub fn leading_batches(&self, batch_size: usize, count: usize) -> Vec<DenseTensor> {
        self.batch_indices(batch_size, None)
            .into_iter()
            .take(count)
            .map(|idx| self.inputs.gather_outer(&idx))
            .collect()
    }

    /// Inputs of full batches drawn in a seeded shuffled order, cycling
    /// through fresh shuffles until `count` batches are produced.
    pub fn calibration_batches(&self, batch_size: usize, count: usize, seed: u64) -> Vec<DenseTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let round = self.batch_indices(batch_size, Some(&mut rng));
            if round.is_empty() {
                break;
            }
            for idx in round.into_iter().take(count - out.len()) {
                out.push(self.inputs.gather_outer(&idx));
            }
        }
        out
    }
}

/// How class channel subspaces relate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubspaceLayout {
    /// One subspace shared by every class.
    Shared,
    /// Independent random subspace per class.
    PerClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    /// Subspace dimension per class.
    pub rank: usize,
    #[serde(default = "default_signal")]
    pub signal: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub ambient: f64,
    #[serde(default = "default_layout")]
    pub layout: SubspaceLayout,
    /// Seeds the prototypes and subspaces.
    pub seed: u64,
}

fn default_signal() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.5
}

fn default_layout() -> SubspaceLayout {
    SubspaceLayout::PerClass
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let positive = [self.height, self.width, self.channels, self.classes, self.rank];
        if positive.contains(&0) {
            return Err(DataError::BadSpec("sizes must be positive".into()));
        }
        if self.rank > self.channels {
            return Err(DataError::BadSpec(format!("rank {} exceeds {} channels", self.rank, self.channels)));
        }
        for (name, v) in [("signal", self.signal), ("noise", self.noise), ("ambient", self.ambient)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DataError::BadSpec(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// A fixed class-conditional image distribution.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    spec: SyntheticSpec,
    /// Per class, `channels x rank`.
    bases: Vec<DenseMatrix>,
    /// Per class, `(height * width) x rank`.
    prototypes: Vec<DenseMatrix>,
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Orthonormal columns spanning a Gaussian random `n x k` matrix.
pub fn random_orthonormal(n: usize, k: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let raw = gaussian_matrix(n, k, rng);
    orth_merge(&DenseMatrix::zeros(n, 0), &raw).expect("row counts agree")
}

impl SyntheticTask {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let bases = match spec.layout {
            SubspaceLayout::Shared => vec![random_orthonormal(spec.channels, spec.rank, &mut rng); spec.classes],
            SubspaceLayout::PerClass => (0..spec.classes)
                .map(|_| random_orthonormal(spec.channels, spec.rank, &mut rng))
                .collect(),
        };
        Self::with_bases(spec, bases)
    }

    /// Uses caller-provided class subspaces (each `channels x rank`, orthonormal).
    pub fn with_bases(spec: SyntheticSpec, bases: Vec<DenseMatrix>) -> Result<Self> {
        spec.validate()?;
        if bases.len() != spec.classes || bases.iter().any(|b| b.rows() != spec.channels || b.cols() != spec.rank) {
            return Err(DataError::BadSpec("class bases do not match the class count, channels or rank".into()));
        }
        // offset keeps prototypes independent of the subspace draws
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
        let pixels = spec.height * spec.width;
        let prototypes = (0..spec.classes).map(|_| gaussian_matrix(pixels, spec.rank, &mut rng)).collect();
        Ok(Self {
            spec,
            bases,
            prototypes,
        })
    }

    /// A related task with the same subspaces and prototypes drifted to
    /// `sqrt(1 - rho^2) m_c + rho g_c` for fresh Gaussian `g_c`.
    pub fn drifted(&self, rho: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(DataError::BadSpec(format!("drift {rho} outside [0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = (1.0 - rho * rho).sqrt();
        let prototypes = self
            .prototypes
            .iter()
            .map(|m| {
                let g = gaussian_matrix(m.rows(), m.cols(), &mut rng);
                DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| keep * m.get(i, j) + rho * g.get(i, j))
            })
            .collect();
        Ok(Self {
            spec: self.spec.clone(),
            bases: self.bases.clone(),
            prototypes,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn bases(&self) -> &[DenseMatrix] {
        &self.bases
    }

    /// `n` samples with labels cycling through the classes, then shuffled.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        let s = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<usize> = (0..n).map(|i| i % s.classes).collect();
        labels.shuffle(&mut rng);
        let pixels = s.height * s.width;
        let mut data = Vec::with_capacity(n * pixels * s.channels);
        let mut coef = vec![0.0; s.rank];
        for &c in &labels {
            let (q, m) = (&self.bases[c], &self.prototypes[c]);
            for p in 0..pixels {
                for (j, v) in coef.iter_mut().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = s.signal * m.get(p, j) + s.noise * z;
                }
                for ch in 0..s.channels {
                    let xi: f64 = if s.ambient > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                    let signal: f64 = q.row(ch).iter().zip(&coef).map(|(a, b)| a * b).sum();
                    data.push(signal + s.ambient * xi);
                }
            }
        }
        let inputs = DenseTensor::new(vec![n, s.height, s.width, s.channels], data)?;
        Dataset::new(inputs, labels, s.classes)
    }
}

fn need(bytes: &[u8], offset: usize, n: usize) -> Result<()> {
    if bytes.len() < offset + n {
        return Err(DataError::Truncated {
            offset: bytes.len() as u64,
            needed: (offset + n - bytes.len()) as u64,
        });
    }
    Ok(())
}

fn idx_header(bytes: &[u8], magic: u32, ndims: usize) -> Result<Vec<usize>> {
    need(bytes, 0, 4)?;
    let found = BigEndian::read_u32(&bytes[0..4]);
    if found != magic {
        return Err(DataError::BadMagic {
            offset: 0,
            found,
            expected: magic,
        });
    }
    need(bytes, 4, 4 * ndims)?;
    Ok((0..ndims)
        .map(|i| BigEndian::read_u32(&bytes[4 + 4 * i..8 + 4 * i]) as usize)
        .collect())
}

fn idx_payload(bytes: &[u8], header: usize, len: usize) -> Result<&[u8]> {
    need(bytes, header, len)?;
    if bytes.len() > header + len {
        return Err(DataError::Trailing {
            offset: (header + len) as u64,
            trailing: (bytes.len() - header - len) as u64,
        });
    }
    Ok(&bytes[header..])
}

/// Parses an unsigned-byte image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let dims = idx_header(bytes, IDX_IMAGES_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let len = n.saturating_mul(rows).saturating_mul(cols);
    Ok((n, rows, cols, idx_payload(bytes, 16, len)?.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let n = idx_header(bytes, IDX_LABELS_MAGIC, 1)?[0];
    Ok(idx_payload(bytes, 8, n)?.to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols).max(1);
    let mut out = vec![0u8; 16];
    for (i, v) in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32].into_iter().enumerate() {
        BigEndian::write_u32(&mut out[4 * i..4 * i + 4], v);
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; 8];
    BigEndian::write_u32(&mut out[0..4], IDX_LABELS_MAGIC);
    BigEndian::write_u32(&mut out[4..8], labels.len() as u32);
    out.extend_from_slice(labels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads an image/label IDX pair as `(N, rows, cols, 1)` with pixels in `[0, 1]`.
/// The class count is one more than the largest label.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read(images)?)?;
    let raw = parse_idx_labels(&read(labels)?)?;
    if raw.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: raw.len(),
        });
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let inputs = DenseTensor::new(vec![n, rows, cols, 1], data)?;
    let labels: Vec<usize> = raw.iter().map(|&y| y as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, labels, classes)
}
