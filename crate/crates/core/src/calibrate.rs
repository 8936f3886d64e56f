//! One-shot subspace calibration and continual-learning memory.
//!
//! Calibration streams batches through a frozen network, keeps a running
//! per-mode covariance of every trainable layer's input, and truncates each
//! covariance's eigenbasis at an energy threshold. With a [`MemoryBank`] the
//! last-mode factor is restricted to the orthogonal complement of the stored
//! directions.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::autograd::{AutogradError, Network};
use crate::linalg::{
    energy_rank, energy_rank_cl, orth_merge, orthogonal_complement, orthonormality_error, psd_eig, LinalgError,
};
use crate::tensor::{mode_gram, mode_product, DenseMatrix, DenseTensor, TensorError};

/// Orthonormality tolerance for factors handed to [`LayerSubspace::new`].
pub const ORTHONORMAL_TOL: f64 = 1e-8;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum CalibrateError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("layer {layer}, mode {mode}: {source}")]
    Linalg {
        layer: usize,
        mode: usize,
        source: LinalgError,
    },
    #[error("calibration stream is empty")]
    EmptyStream,
    #[error("requested {wanted} batches but the stream held {got}")]
    NotEnoughBatches { wanted: usize, got: usize },
    #[error("batch {index} has {got} samples, expected {expected}")]
    NonUniformBatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("batch count must be at least 1")]
    ZeroCount,
    #[error("invalid subspace: {0}")]
    InvalidSubspace(String),
    #[error("accumulators disagree: {0}")]
    MergeMismatch(String),
}

type Result<T> = std::result::Result<T, CalibrateError>;

/// Running per-mode covariance `B_i[t]` of a stream of equally shaped tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceAccumulator {
    dims: Vec<usize>,
    /// `None` for modes that are not tracked.
    covs: Vec<Option<DenseMatrix>>,
    t: usize,
}

impl CovarianceAccumulator {
    /// Tracks every mode.
    pub fn new(dims: &[usize]) -> Self {
        Self::with_modes(dims, &(0..dims.len()).collect::<Vec<_>>())
    }

    /// Tracks only the last mode.
    pub fn last_mode(dims: &[usize]) -> Self {
        Self::with_modes(dims, &[dims.len() - 1])
    }

    fn with_modes(dims: &[usize], modes: &[usize]) -> Self {
        let covs = (0..dims.len())
            .map(|i| modes.contains(&i).then(|| DenseMatrix::zeros(dims[i], dims[i])))
            .collect();
        Self {
            dims: dims.to_vec(),
            covs,
            t: 0,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Completed updates.
    pub fn count(&self) -> usize {
        self.t
    }

    pub fn covariance(&self, mode: usize) -> Option<&DenseMatrix> {
        self.covs.get(mode).and_then(Option::as_ref)
    }

    /// `B_i <- ((t-1) B_i + X_(i) X_(i)^T / prod_{j != i} n_j) / t` for each tracked mode.
    pub fn update(&mut self, x: &DenseTensor) -> Result<()> {
        if x.dims() != self.dims.as_slice() {
            return Err(TensorError::ShapeMismatch(format!(
                "accumulator dims {:?}, batch dims {:?}",
                self.dims,
                x.dims()
            ))
            .into());
        }
        self.t += 1;
        let t = self.t as f64;
        let total: usize = self.dims.iter().product();
        for (mode, cov) in self.covs.iter_mut().enumerate() {
            let Some(b) = cov else { continue };
            let rest = (total / self.dims[mode]).max(1) as f64;
            let g = mode_gram(x, mode)?;
            for (bv, gv) in b.data_mut().iter_mut().zip(g.data()) {
                *bv = ((t - 1.0) * *bv + gv / rest) / t;
            }
        }
        Ok(())
    }

    /// Combines shard accumulators by a count-weighted mean.
    pub fn merge(shards: &[CovarianceAccumulator]) -> Result<Self> {
        let first = shards.first().ok_or(CalibrateError::EmptyStream)?;
        let mut out = first.clone();
        let tracked = |a: &Self| a.covs.iter().map(Option::is_some).collect::<Vec<_>>();
        for s in &shards[1..] {
            if s.dims != first.dims || tracked(s) != tracked(first) {
                return Err(CalibrateError::MergeMismatch(format!("{:?} vs {:?}", s.dims, first.dims)));
            }
        }
        let total: usize = shards.iter().map(|s| s.t).sum();
        out.t = total;
        if total == 0 {
            return Ok(out);
        }
        for (mode, cov) in out.covs.iter_mut().enumerate() {
            let Some(b) = cov else { continue };
            b.data_mut().iter_mut().for_each(|v| *v = 0.0);
            for s in shards {
                let w = s.t as f64 / total as f64;
                let sb = s.covs[mode].as_ref().expect("tracked modes agree");
                b.data_mut().iter_mut().zip(sb.data()).for_each(|(v, x)| *v += w * x);
            }
        }
        Ok(out)
    }
}

/// Fixed orthonormal factors `U_0..U_{d-1}` for one layer input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSubspace {
    dims: Vec<usize>,
    factors: Vec<DenseMatrix>,
    transposed: Vec<DenseMatrix>,
}

impl LayerSubspace {
    /// Validates that `factors[i]` is `dims[i] x r_i` with orthonormal columns.
    pub fn new(dims: Vec<usize>, factors: Vec<DenseMatrix>) -> Result<Self> {
        if dims.len() != factors.len() || dims.is_empty() {
            return Err(CalibrateError::InvalidSubspace(format!(
                "{} factors for {} modes",
                factors.len(),
                dims.len()
            )));
        }
        for (i, (u, &n)) in factors.iter().zip(&dims).enumerate() {
            if u.rows() != n || u.cols() > n {
                return Err(CalibrateError::InvalidSubspace(format!(
                    "mode {i}: factor is {}x{}, mode size {n}",
                    u.rows(),
                    u.cols()
                )));
            }
            if !u.is_finite() || orthonormality_error(u) > ORTHONORMAL_TOL {
                return Err(CalibrateError::InvalidSubspace(format!("mode {i}: columns not orthonormal")));
            }
        }
        let transposed = factors.iter().map(DenseMatrix::transpose).collect();
        Ok(Self {
            dims,
            factors,
            transposed,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn factors(&self) -> &[DenseMatrix] {
        &self.factors
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.factors.iter().map(DenseMatrix::cols).collect()
    }

    /// `prod r_i`.
    pub fn core_elements(&self) -> usize {
        self.factors.iter().map(DenseMatrix::cols).product()
    }

    /// `sum n_i r_i`.
    pub fn factor_elements(&self) -> usize {
        self.factors.iter().map(|u| u.rows() * u.cols()).sum()
    }

    /// `X x_0 U_0^T .. x_{d-1} U_{d-1}^T`.
    pub fn compress(&self, x: &DenseTensor) -> std::result::Result<DenseTensor, TensorError> {
        if x.dims() != self.dims.as_slice() {
            return Err(TensorError::ShapeMismatch(format!(
                "subspace dims {:?}, tensor dims {:?}",
                self.dims,
                x.dims()
            )));
        }
        let mut out = x.clone();
        for (mode, ut) in self.transposed.iter().enumerate() {
            out = mode_product(&out, ut, mode)?;
        }
        Ok(out)
    }

    /// `G x_0 U_0 .. x_{d-1} U_{d-1}`.
    pub fn reconstruct(&self, core: &DenseTensor) -> std::result::Result<DenseTensor, TensorError> {
        let mut out = core.clone();
        for (mode, u) in self.factors.iter().enumerate() {
            out = mode_product(&out, u, mode)?;
        }
        Ok(out)
    }
}

/// Factors for every trainable layer, keyed by layer index.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBank {
    batch_size: usize,
    eps: f64,
    layers: BTreeMap<usize, LayerSubspace>,
}

impl SubspaceBank {
    pub fn new(batch_size: usize, eps: f64) -> Self {
        Self {
            batch_size,
            eps,
            layers: BTreeMap::new(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn insert(&mut self, layer: usize, sub: LayerSubspace) {
        self.layers.insert(layer, sub);
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerSubspace> {
        self.layers.get(&layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &LayerSubspace)> {
        self.layers.iter().map(|(&l, s)| (l, s))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Factor elements summed over layers; stored once, not per step.
    pub fn factor_elements(&self) -> usize {
        self.layers.values().map(LayerSubspace::factor_elements).sum()
    }
}

/// Per-layer orthonormal last-mode directions protected for past tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    tasks: usize,
    layers: BTreeMap<usize, DenseMatrix>,
}

impl MemoryBank {
    /// Zero-column memory for `layers` of `net`; those are the layers
    /// [`memory_update`] will grow.
    pub fn empty_for(net: &Network, layers: &[usize]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for &l in layers {
            if !net.layers().get(l).is_some_and(|s| s.kind.has_params()) {
                return Err(CalibrateError::InvalidSubspace(format!("layer {l} has no weights")));
            }
            let shape = net.layer_input_shape(l);
            map.insert(l, DenseMatrix::zeros(shape[shape.len() - 1], 0));
        }
        Ok(Self { tasks: 0, layers: map })
    }

    /// Assembles a memory from stored matrices, checking orthonormality.
    pub fn from_parts(tasks: usize, layers: BTreeMap<usize, DenseMatrix>) -> Result<Self> {
        for (l, m) in &layers {
            if m.cols() > m.rows() || orthonormality_error(m) > ORTHONORMAL_TOL {
                return Err(CalibrateError::InvalidSubspace(format!("layer {l}: memory not orthonormal")));
            }
        }
        Ok(Self { tasks, layers })
    }

    /// Tasks folded into this memory.
    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn layer(&self, layer: usize) -> Option<&DenseMatrix> {
        self.layers.get(&layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &DenseMatrix)> {
        self.layers.iter().map(|(&l, m)| (l, m))
    }

    /// Protected directions per layer.
    pub fn columns(&self) -> BTreeMap<usize, usize> {
        self.layers.iter().map(|(&l, m)| (l, m.cols())).collect()
    }

    /// True when no layer holds any direction.
    pub fn is_empty(&self) -> bool {
        self.layers.values().all(|m| m.cols() == 0)
    }
}

/// Eigenbasis of `B` restricted to `span(memory)^perp`, with rank chosen
/// against the unconstrained spectrum. Returns `(factor, rank)`.
fn constrained_last_mode(b: &DenseMatrix, memory: Option<&DenseMatrix>, eps: f64) -> std::result::Result<DenseMatrix, LinalgError> {
    let full = psd_eig(b)?;
    let Some(m) = memory.filter(|m| m.cols() > 0) else {
        let r = energy_rank(&full.values, eps)?;
        return Ok(full.top_vectors(r));
    };
    // Eigenpairs of (I - MM^T) B (I - MM^T) off span(M), taken in the
    // complement basis so the factor is orthogonal to M by construction.
    let c = orthogonal_complement(m)?;
    let bc = c.matmul_tn(&b.matmul(&c).expect("square")).expect("conformable");
    let proj = psd_eig(&bc)?;
    let mut values = proj.values.clone();
    values.resize(b.rows(), 0.0);
    let r = energy_rank_cl(&full.values, &values, eps)?;
    Ok(c.matmul(&proj.top_vectors(r)).expect("conformable"))
}

/// Takes exactly `n` uniformly sized batches from `batches`.
fn take_batches(batches: impl IntoIterator<Item = DenseTensor>, n: usize) -> Result<Vec<DenseTensor>> {
    if n == 0 {
        return Err(CalibrateError::ZeroCount);
    }
    let taken: Vec<DenseTensor> = batches.into_iter().take(n).collect();
    if taken.is_empty() {
        return Err(CalibrateError::EmptyStream);
    }
    if taken.len() < n {
        return Err(CalibrateError::NotEnoughBatches {
            wanted: n,
            got: taken.len(),
        });
    }
    let expected = taken[0].dims()[0];
    if let Some((index, t)) = taken.iter().enumerate().find(|(_, t)| t.dims()[0] != expected) {
        return Err(CalibrateError::NonUniformBatch {
            index,
            expected,
            got: t.dims()[0],
        });
    }
    Ok(taken)
}

/// Builds a [`SubspaceBank`] for every trainable layer of `net` from `n`
/// calibration batches. Layers present in `memory` get a last-mode factor
/// orthogonal to their protected directions.
pub fn calibrate_bank(
    net: &Network,
    batches: impl IntoIterator<Item = DenseTensor>,
    n: usize,
    eps: f64,
    memory: Option<&MemoryBank>,
) -> Result<SubspaceBank> {
    calibrate_layers(net, batches, n, eps, memory, &net.trainable_layers())
}

/// [`calibrate_bank`] restricted to `layers`, which must all be trainable.
pub fn calibrate_layers(
    net: &Network,
    batches: impl IntoIterator<Item = DenseTensor>,
    n: usize,
    eps: f64,
    memory: Option<&MemoryBank>,
    layers: &[usize],
) -> Result<SubspaceBank> {
    let batches = take_batches(batches, n)?;
    let batch = batches[0].dims()[0];
    if layers.is_empty() {
        return Err(CalibrateError::InvalidSubspace("no layers to calibrate".into()));
    }
    if let Some(&l) = layers.iter().find(|&&l| !net.layers().get(l).is_some_and(|s| s.trainable)) {
        return Err(CalibrateError::InvalidSubspace(format!("layer {l} is not trainable")));
    }
    let mut accs: BTreeMap<usize, CovarianceAccumulator> = layers
        .iter()
        .map(|&l| (l, CovarianceAccumulator::new(&net.batch_input_dims(l, batch))))
        .collect();
    for x in &batches {
        for (l, input) in net.capture_trainable_inputs(x)? {
            if let Some(acc) = accs.get_mut(&l) {
                acc.update(&input)?;
            }
        }
    }
    let mut bank = SubspaceBank::new(batch, eps);
    for (l, acc) in accs {
        let d = acc.dims().len();
        let mut factors = Vec::with_capacity(d);
        for mode in 0..d - 1 {
            let b = acc.covariance(mode).expect("tracked");
            let wrap = |source| CalibrateError::Linalg { layer: l, mode, source };
            let eig = psd_eig(b).map_err(wrap)?;
            let r = energy_rank(&eig.values, eps).map_err(wrap)?;
            factors.push(eig.top_vectors(r));
        }
        let b = acc.covariance(d - 1).expect("tracked");
        let m = memory.and_then(|mem| mem.layer(l));
        let u = constrained_last_mode(b, m, eps).map_err(|source| CalibrateError::Linalg {
            layer: l,
            mode: d - 1,
            source,
        })?;
        factors.push(u);
        bank.insert(l, LayerSubspace::new(acc.dims().to_vec(), factors)?);
    }
    Ok(bank)
}

/// Grows `prev` with the last-mode directions of the current task that it
/// does not already cover, for every layer `prev` tracks.
pub fn memory_update(
    net: &Network,
    batches: impl IntoIterator<Item = DenseTensor>,
    n_cl: usize,
    eps_cl: f64,
    prev: &MemoryBank,
) -> Result<MemoryBank> {
    let batches = take_batches(batches, n_cl)?;
    let batch = batches[0].dims()[0];
    let layers: Vec<usize> = prev.layers.keys().copied().collect();
    let mut accs: BTreeMap<usize, CovarianceAccumulator> = layers
        .iter()
        .map(|&l| (l, CovarianceAccumulator::last_mode(&net.batch_input_dims(l, batch))))
        .collect();
    let mut probe = net.clone();
    for &l in &layers {
        probe.set_trainable(l, true)?;
    }
    for x in &batches {
        for (l, input) in probe.capture_trainable_inputs(x)? {
            if let Some(acc) = accs.get_mut(&l) {
                acc.update(&input)?;
            }
        }
    }
    let mut next = BTreeMap::new();
    for (l, acc) in accs {
        let d = acc.dims().len();
        let m_prev = &prev.layers[&l];
        let wrap = |source| CalibrateError::Linalg {
            layer: l,
            mode: d - 1,
            source,
        };
        let b = acc.covariance(d - 1).expect("tracked");
        let fresh = constrained_last_mode(b, Some(m_prev), eps_cl).map_err(wrap)?;
        next.insert(l, orth_merge(m_prev, &fresh).map_err(wrap)?);
    }
    Ok(MemoryBank {
        tasks: prev.tasks + 1,
        layers: next,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::LayerSpec;
    use crate::tensor::unfold;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> DenseTensor {
        DenseTensor::from_fn(dims, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn scaled_gram(x: &DenseTensor, mode: usize) -> DenseMatrix {
        let u = unfold(x, mode).unwrap();
        u.matmul_nt(&u).unwrap().scale(1.0 / u.cols() as f64)
    }

    #[test]
    fn first_update_is_scaled_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(vec![3, 4, 5], &mut rng);
        let mut acc = CovarianceAccumulator::new(&[3, 4, 5]);
        acc.update(&x).unwrap();
        for mode in 0..3 {
            assert!(acc.covariance(mode).unwrap().max_abs_diff(&scaled_gram(&x, mode)) <= 1e-14);
        }
        assert_eq!(acc.count(), 1);
    }

    #[test]
    fn identical_batches_keep_single_batch_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(vec![4, 3, 2, 3], &mut rng);
        let mut acc = CovarianceAccumulator::new(x.dims());
        for _ in 0..6 {
            acc.update(&x).unwrap();
        }
        for mode in 0..4 {
            assert!(acc.covariance(mode).unwrap().max_abs_diff(&scaled_gram(&x, mode)) <= 1e-13);
        }
    }

    #[test]
    fn streaming_matches_batch_mean_and_shards() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<DenseTensor> = (0..7).map(|_| rand_tensor(vec![5, 3, 4], &mut rng)).collect();
        let mut acc = CovarianceAccumulator::new(&[5, 3, 4]);
        xs.iter().for_each(|x| acc.update(x).unwrap());
        for mode in 0..3 {
            let mut mean = DenseMatrix::zeros(xs[0].dims()[mode], xs[0].dims()[mode]);
            for x in &xs {
                let g = scaled_gram(x, mode);
                mean.data_mut().iter_mut().zip(g.data()).for_each(|(m, v)| *m += v / 7.0);
            }
            assert!(acc.covariance(mode).unwrap().max_abs_diff(&mean) <= 1e-10);
        }
        let mut a = CovarianceAccumulator::new(&[5, 3, 4]);
        let mut b = CovarianceAccumulator::new(&[5, 3, 4]);
        xs[..3].iter().for_each(|x| a.update(x).unwrap());
        xs[3..].iter().for_each(|x| b.update(x).unwrap());
        let merged = CovarianceAccumulator::merge(&[a, b]).unwrap();
        assert_eq!(merged.count(), 7);
        for mode in 0..3 {
            let d = merged.covariance(mode).unwrap().max_abs_diff(acc.covariance(mode).unwrap());
            assert!(d <= 1e-10);
        }
    }

    #[test]
    fn rejects_wrong_shape() {
        let mut acc = CovarianceAccumulator::new(&[2, 3]);
        assert!(acc.update(&DenseTensor::zeros(vec![3, 2]).unwrap()).is_err());
        assert_eq!(acc.count(), 0);
    }

    fn linear_probe(features: usize) -> Network {
        let mut net = Network::new(vec![features], vec![LayerSpec::dense(features, 2)], 0).unwrap();
        net.set_trainable_last(1);
        net
    }

    /// Batches whose feature mode lies in the span of `basis` (features x k).
    fn planted_batches(basis: &DenseMatrix, batch: usize, count: usize, seed: u64) -> Vec<DenseTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k) = (basis.rows(), basis.cols());
        (0..count)
            .map(|_| {
                let coef = DenseMatrix::from_fn(batch, k, |_, _| rng.random_range(-1.0..1.0));
                let x = coef.matmul_nt(basis).unwrap();
                DenseTensor::new(vec![batch, n], x.into_data()).unwrap()
            })
            .collect()
    }

    fn random_basis(n: usize, k: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DenseMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
        orth_merge(&DenseMatrix::zeros(n, 0), &raw).unwrap()
    }

    #[test]
    fn full_threshold_keeps_every_rank() {
        let net = linear_probe(6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<_> = (0..3).map(|_| rand_tensor(vec![8, 6], &mut rng)).collect();
        let bank = calibrate_bank(&net, xs, 3, 1.0, None).unwrap();
        assert_eq!(bank.layer(0).unwrap().ranks(), vec![8, 6]);
        assert_eq!(bank.batch_size(), 8);
    }

    #[test]
    fn planted_rank_is_recovered() {
        let net = linear_probe(10);
        let basis = random_basis(10, 2, 5);
        let bank = calibrate_bank(&net, planted_batches(&basis, 12, 4, 6), 4, 0.99, None).unwrap();
        let sub = bank.layer(0).unwrap();
        assert_eq!(sub.ranks()[1], 2);
        for u in sub.factors() {
            assert!(orthonormality_error(u) <= 1e-8);
        }
    }

    #[test]
    fn memory_factor_is_orthogonal_to_memory() {
        let net = linear_probe(8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // anisotropic features so the top direction is well defined
        let xs: Vec<DenseTensor> = (0..5)
            .map(|_| {
                let mut x = rand_tensor(vec![10, 8], &mut rng);
                for row in x.data_mut().chunks_mut(8) {
                    row.iter_mut().enumerate().for_each(|(j, v)| *v *= 1.0 + 3.0 / (1.0 + j as f64));
                }
                x
            })
            .collect();
        let plain = calibrate_bank(&net, xs.clone(), 5, 0.9, None).unwrap();
        let top = plain.layer(0).unwrap().factors()[1].leading_columns(1);
        let mut layers = BTreeMap::new();
        layers.insert(0, top);
        let memory = MemoryBank::from_parts(1, layers).unwrap();
        let bank = calibrate_bank(&net, xs, 5, 0.9, Some(&memory)).unwrap();
        let u = &bank.layer(0).unwrap().factors()[1];
        assert!(u.cols() > 0);
        assert!(memory.layer(0).unwrap().matmul_tn(u).unwrap().max_abs() <= 1e-8);
        assert!(orthonormality_error(u) <= 1e-8);
    }

    #[test]
    fn calibration_stream_errors() {
        let net = linear_probe(3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<_> = (0..2).map(|_| rand_tensor(vec![4, 3], &mut rng)).collect();
        assert_eq!(calibrate_bank(&net, Vec::new(), 1, 0.9, None).unwrap_err(), CalibrateError::EmptyStream);
        assert_eq!(
            calibrate_bank(&net, xs.clone(), 3, 0.9, None).unwrap_err(),
            CalibrateError::NotEnoughBatches { wanted: 3, got: 2 }
        );
        assert_eq!(calibrate_bank(&net, xs.clone(), 0, 0.9, None).unwrap_err(), CalibrateError::ZeroCount);
        let mixed = vec![xs[0].clone(), rand_tensor(vec![5, 3], &mut rng)];
        assert!(matches!(
            calibrate_bank(&net, mixed, 2, 0.9, None),
            Err(CalibrateError::NonUniformBatch { index: 1, .. })
        ));
    }

    /// Largest principal angle cosine deficit: 1 - sigma_min(A^T B) for equal-dimension spans.
    fn spans_contain(big: &DenseMatrix, small: &DenseMatrix) -> f64 {
        // residual of projecting each column of `small` onto span(big)
        let coef = big.matmul_tn(small).unwrap();
        let proj = big.matmul(&coef).unwrap();
        proj.sub(small).unwrap().max_abs()
    }

    #[test]
    fn memory_grows_along_planted_task_subspaces() {
        let net = linear_probe(9);
        let q = random_basis(9, 6, 9);
        let task1 = DenseMatrix::from_fn(9, 3, |i, j| q.get(i, j));
        let task2 = DenseMatrix::from_fn(9, 3, |i, j| q.get(i, j + 3));
        let empty = MemoryBank::empty_for(&net, &[0]).unwrap();
        assert!(empty.is_empty());

        let m1 = memory_update(&net, planted_batches(&task1, 16, 4, 10), 4, 0.999, &empty).unwrap();
        assert_eq!(m1.columns()[&0], 3);
        assert_eq!(m1.tasks(), 1);
        assert!(spans_contain(m1.layer(0).unwrap(), &task1) <= 1e-6);

        // a task fully inside the memory adds nothing
        let same = memory_update(&net, planted_batches(&task1, 16, 4, 11), 4, 0.999, &m1).unwrap();
        assert_eq!(same.layer(0), m1.layer(0));

        let m2 = memory_update(&net, planted_batches(&task2, 16, 4, 12), 4, 0.999, &m1).unwrap();
        let m = m2.layer(0).unwrap();
        assert_eq!(m.cols(), 6);
        assert_eq!(m.leading_columns(3), *m1.layer(0).unwrap());
        assert!(spans_contain(m, &task1) <= 1e-6 && spans_contain(m, &task2) <= 1e-6);
        assert!(orthonormality_error(m) <= 1e-8);
    }

    #[test]
    fn compress_reconstruct_round_trip_at_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_tensor(vec![3, 4, 2], &mut rng);
        let factors = vec![random_basis(3, 3, 1), random_basis(4, 4, 2), random_basis(2, 2, 3)];
        let sub = LayerSubspace::new(vec![3, 4, 2], factors).unwrap();
        let back = sub.reconstruct(&sub.compress(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) <= 1e-12);
        assert_eq!(sub.core_elements(), 24);
        assert_eq!(sub.factor_elements(), 9 + 16 + 4);
        assert!(LayerSubspace::new(vec![3], vec![DenseMatrix::from_fn(3, 1, |_, _| 1.0)]).is_err());
    }
}
