//! Memory and FLOPs accounting, gradient alignment and run records.
//!
//! One multiply-accumulate counts as one FLOP. Cost formulas are stated for
//! order-3 activations `(n_1, n_2, n_3)` whose last mode feeds an `n̂`-wide
//! layer; order-4 conv inputs use the same successive mode-product pattern
//! and dense inputs `(B, F)` are lifted to `(B, 1, F)`.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Gradients, LayerKind, Network, StoredForward};
use crate::calibrate::SubspaceBank;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{dims} dims but {ranks} ranks")]
    LengthMismatch { dims: usize, ranks: usize },
    #[error("order {0} not in {{3, 4}}")]
    UnsupportedOrder(usize),
    #[error("mode {mode}: size must be positive")]
    ZeroDim { mode: usize },
    #[error("mode {mode}: rank {rank} outside [{min}, {dim}]")]
    RankOutOfRange {
        mode: usize,
        rank: usize,
        min: usize,
        dim: usize,
    },
    #[error("output width must be positive")]
    ZeroOutDim,
    #[error("count overflow")]
    Overflow,
    #[error("zero-norm gradient")]
    ZeroNorm,
    #[error("gradients have different layouts")]
    LayoutMismatch,
    #[error("layer {0} missing from bank")]
    MissingBankEntry(usize),
}

type Result<T> = std::result::Result<T, MetricsError>;

fn check(dims: &[usize], ranks: &[usize], min_rank: usize) -> Result<()> {
    if dims.len() != ranks.len() {
        return Err(MetricsError::LengthMismatch {
            dims: dims.len(),
            ranks: ranks.len(),
        });
    }
    for (mode, (&n, &r)) in dims.iter().zip(ranks).enumerate() {
        if n == 0 {
            return Err(MetricsError::ZeroDim { mode });
        }
        if r < min_rank || r > n {
            return Err(MetricsError::RankOutOfRange {
                mode,
                rank: r,
                min: min_rank,
                dim: n,
            });
        }
    }
    Ok(())
}

fn product(xs: impl IntoIterator<Item = usize>) -> Result<u64> {
    xs.into_iter()
        .try_fold(1u64, |acc, x| acc.checked_mul(x as u64))
        .ok_or(MetricsError::Overflow)
}

fn sum(xs: impl IntoIterator<Item = Result<u64>>) -> Result<u64> {
    xs.into_iter()
        .try_fold(0u64, |acc, x| acc.checked_add(x?).ok_or(MetricsError::Overflow))
}

/// `(prod n_i, prod r_i + sum n_i r_i)`: dense elements against core plus factors.
pub fn mem_saving_parts(dims: &[usize], ranks: &[usize]) -> Result<(u64, u64)> {
    check(dims, ranks, 1)?;
    let num = product(dims.iter().copied())?;
    let core = product(ranks.iter().copied())?;
    let factors = sum(dims.iter().zip(ranks).map(|(&n, &r)| product([n, r])))?;
    Ok((num, core.checked_add(factors).ok_or(MetricsError::Overflow)?))
}

/// `prod n_i / (prod r_i + sum n_i r_i)`, with `1 <= r_i <= n_i`.
pub fn mem_saving(dims: &[usize], ranks: &[usize]) -> Result<f64> {
    let (num, den) = mem_saving_parts(dims, ranks)?;
    Ok(num as f64 / den as f64)
}

fn check_flops(dims: &[usize], ranks: &[usize], out_dim: usize) -> Result<()> {
    if !(3..=4).contains(&dims.len()) {
        return Err(MetricsError::UnsupportedOrder(dims.len()));
    }
    if out_dim == 0 {
        return Err(MetricsError::ZeroOutDim);
    }
    check(dims, ranks, 0)
}

/// Forward and backward FLOPs of a layer trained on compressed activations.
///
/// Forward is the layer itself plus projection onto each factor in turn:
/// `n̂ prod n + sum_i (prod_{j<i} r_j) n_i r_i (prod_{j>i} n_j)`.
/// Backward reconstructs and forms the weight gradient:
/// `r_1 prod n + sum_{i>=2} r_1 (prod_{2<=j<i} n_j) n_i r_i (prod_{j>i} r_j) + r_1 n̂ prod_{j>=2} n_j`.
/// Ranks may be zero; a rank above its mode size is rejected.
pub fn lance_flops(dims: &[usize], ranks: &[usize], out_dim: usize) -> Result<(u64, u64)> {
    check_flops(dims, ranks, out_dim)?;
    let d = dims.len();
    let dense = product(dims.iter().copied())?;
    let fw = sum(std::iter::once(product([out_dim]).and_then(|n| n.checked_mul(dense).ok_or(MetricsError::Overflow)))
        .chain((0..d).map(|i| {
            product(
                ranks[..i]
                    .iter()
                    .copied()
                    .chain([dims[i], ranks[i]])
                    .chain(dims[i + 1..].iter().copied()),
            )
        })))?;
    let r1 = ranks[0];
    let bw = sum(std::iter::once(product([r1]).and_then(|r| r.checked_mul(dense).ok_or(MetricsError::Overflow)))
        .chain((1..d).map(|i| {
            product(
                std::iter::once(r1)
                    .chain(dims[1..i].iter().copied())
                    .chain([dims[i], ranks[i]])
                    .chain(ranks[i + 1..].iter().copied()),
            )
        }))
        .chain(std::iter::once(product(
            std::iter::once(r1).chain(dims[1..].iter().copied()).chain([out_dim]),
        ))))?;
    Ok((fw, bw))
}

/// Forward and backward FLOPs of plain backprop: both `n̂ prod n`.
pub fn bp_flops(dims: &[usize], out_dim: usize) -> Result<(u64, u64)> {
    if dims.is_empty() {
        return Err(MetricsError::UnsupportedOrder(0));
    }
    if out_dim == 0 {
        return Err(MetricsError::ZeroOutDim);
    }
    if let Some(mode) = dims.iter().position(|&n| n == 0) {
        return Err(MetricsError::ZeroDim { mode });
    }
    let f = product(dims.iter().copied().chain([out_dim]))?;
    Ok((f, f))
}

/// `(fw + bw)_BP / (fw + bw)_LANCE`.
pub fn s_flops(dims: &[usize], ranks: &[usize], out_dim: usize) -> Result<f64> {
    let (bf, bb) = bp_flops(dims, out_dim)?;
    let (lf, lb) = lance_flops(dims, ranks, out_dim)?;
    Ok((bf + bb) as f64 / (lf + lb) as f64)
}

/// Angle in degrees between two gradient sets, all layers concatenated.
pub fn grad_angle(a: &Gradients, b: &Gradients) -> Result<f64> {
    if a.layer_indices() != b.layer_indices() {
        return Err(MetricsError::LayoutMismatch);
    }
    vector_angle(&a.flatten(), &b.flatten())
}

/// Angle per trained layer, weights and bias concatenated within each layer.
pub fn grad_angle_per_layer(a: &Gradients, b: &Gradients) -> Result<Vec<(usize, f64)>> {
    if a.layer_indices() != b.layer_indices() {
        return Err(MetricsError::LayoutMismatch);
    }
    a.layer_indices()
        .into_iter()
        .map(|l| {
            let (x, y) = (a.layer_flat(l).expect("indexed"), b.layer_flat(l).expect("indexed"));
            Ok((l, vector_angle(&x, &y)?))
        })
        .collect()
}

/// Angle between `a` and `b` in degrees, `acos(<a/|a|, b/|b|>)` evaluated as
/// `2 atan2(|â - b̂|, |â + b̂|)` so that near-parallel vectors stay accurate.
pub fn vector_angle(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricsError::LayoutMismatch);
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(MetricsError::ZeroNorm);
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    Ok((2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees())
}

/// Cost of one trainable layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    /// Input dims, batch first.
    pub dims: Vec<usize>,
    /// Factor ranks; equal to `dims` under full storage.
    pub ranks: Vec<usize>,
    /// Width `n̂` multiplying the last mode (conv: `kernel^2 * out_channels`).
    pub out_dim: usize,
    pub full_elements: u64,
    /// Elements kept for backward: the core, or the whole input.
    pub stored_elements: u64,
    pub factor_elements: u64,
    pub flops_forward: u64,
    pub flops_backward: u64,
    pub bp_flops_forward: u64,
    pub bp_flops_backward: u64,
}

impl LayerCost {
    /// Cost of a layer with the given input dims; `ranks = None` means full storage.
    pub fn estimate(layer: usize, dims: &[usize], ranks: Option<&[usize]>, out_dim: usize) -> Result<Self> {
        let lift = |v: &[usize]| -> Vec<usize> {
            if v.len() == 2 {
                vec![v[0], 1, v[1]]
            } else {
                v.to_vec()
            }
        };
        let ldims = lift(dims);
        let (bp_fw, bp_bw) = bp_flops(&ldims, out_dim)?;
        let full = product(dims.iter().copied())?;
        let (ranks, stored, factors, fw, bw) = match ranks {
            None => {
                check_flops(&ldims, &ldims, out_dim)?;
                (dims.to_vec(), full, 0, bp_fw, bp_bw)
            }
            Some(r) => {
                check(dims, r, 0)?;
                let (fw, bw) = lance_flops(&ldims, &lift(r), out_dim)?;
                let core = product(r.iter().copied())?;
                let factors = sum(dims.iter().zip(r).map(|(&n, &k)| product([n, k])))?;
                (r.to_vec(), core, factors, fw, bw)
            }
        };
        Ok(Self {
            layer,
            dims: dims.to_vec(),
            ranks,
            out_dim,
            full_elements: full,
            stored_elements: stored,
            factor_elements: factors,
            flops_forward: fw,
            flops_backward: bw,
            bp_flops_forward: bp_fw,
            bp_flops_backward: bp_bw,
        })
    }
}

/// Memory and FLOPs for one training step of a network under a storage policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub policy: String,
    pub batch_size: usize,
    pub layers: Vec<LayerCost>,
    /// Saved layer inputs (cores or full tensors).
    pub activation_elements: u64,
    /// ReLU mask bits and pooling argmax entries.
    pub aux_elements: u64,
    pub aux_bytes: u64,
    pub stored_elements: u64,
    /// 8 bytes per activation element plus `aux_bytes`.
    pub stored_bytes: u64,
    /// Factor matrices, held once for the whole run.
    pub factor_elements: u64,
    pub full_elements: u64,
    pub flops_forward: u64,
    pub flops_backward: u64,
    pub bp_flops_forward: u64,
    pub bp_flops_backward: u64,
    /// `full / (stored + factors)` over trainable-layer activations.
    pub s_mem: Option<f64>,
    /// `full / stored`, factors excluded.
    pub s_mem_without_factors: Option<f64>,
    pub s_flops: f64,
}

impl CostReport {
    /// Aggregates per-layer costs; auxiliaries are passed in separately.
    pub fn from_layers(policy: &str, batch_size: usize, layers: Vec<LayerCost>, aux_elements: u64, aux_bytes: u64) -> Self {
        let total = |f: fn(&LayerCost) -> u64| layers.iter().map(f).sum::<u64>();
        let activation = total(|c| c.stored_elements);
        let factors = total(|c| c.factor_elements);
        let full = total(|c| c.full_elements);
        let (fw, bw) = (total(|c| c.flops_forward), total(|c| c.flops_backward));
        let (bfw, bbw) = (total(|c| c.bp_flops_forward), total(|c| c.bp_flops_backward));
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        Self {
            policy: policy.to_string(),
            batch_size,
            activation_elements: activation,
            aux_elements,
            aux_bytes,
            stored_elements: activation + aux_elements,
            stored_bytes: 8 * activation + aux_bytes,
            factor_elements: factors,
            full_elements: full,
            flops_forward: fw,
            flops_backward: bw,
            bp_flops_forward: bfw,
            bp_flops_backward: bbw,
            s_mem: ratio(full, activation + factors),
            s_mem_without_factors: ratio(full, activation),
            s_flops: ratio(bfw + bbw, fw + bw).unwrap_or(1.0),
            layers,
        }
    }

    /// Predicts what a forward pass of `net` on `batch_size` samples keeps,
    /// using `bank` ranks when given and full inputs otherwise.
    pub fn for_network(net: &Network, batch_size: usize, bank: Option<&SubspaceBank>) -> Result<Self> {
        let mut layers = Vec::new();
        for l in net.trainable_layers() {
            let dims = net.batch_input_dims(l, batch_size);
            let out_dim = match net.layers()[l].kind {
                LayerKind::Dense { out_features, .. } => out_features,
                LayerKind::Conv2d {
                    kernel, out_channels, ..
                } => kernel * kernel * out_channels,
                _ => unreachable!("trainable layers have weights"),
            };
            let ranks = match bank {
                Some(b) => Some(b.layer(l).ok_or(MetricsError::MissingBankEntry(l))?.ranks()),
                None => None,
            };
            layers.push(LayerCost::estimate(l, &dims, ranks.as_deref(), out_dim)?);
        }
        let (mut aux, mut aux_bytes) = (0u64, 0u64);
        if let Some(low) = net.lowest_trainable() {
            for l in low + 1..net.layers().len() {
                match net.layers()[l].kind {
                    LayerKind::Relu => {
                        let n = product(net.batch_input_dims(l, batch_size))?;
                        aux += n;
                        aux_bytes += n.div_ceil(8);
                    }
                    LayerKind::MaxPool2d { .. } => {
                        let n = product(net.batch_input_dims(l + 1, batch_size))?;
                        aux += n;
                        aux_bytes += n;
                    }
                    _ => {}
                }
            }
        }
        let policy = if bank.is_some() { "lance" } else { "full" };
        Ok(Self::from_layers(policy, batch_size, layers, aux, aux_bytes))
    }

    /// True when the prediction matches what a real forward pass kept.
    pub fn matches(&self, stored: &StoredForward<'_>) -> bool {
        self.activation_elements == stored.activation_elements() as u64
            && self.aux_elements == stored.aux_elements() as u64
            && self.stored_bytes == stored.stored_bytes() as u64
    }
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub phase: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    pub loss: f64,
    pub accuracy: f64,
    pub stored_elements: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_angle_degrees: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_angle_per_layer: Option<Vec<(usize, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

/// Writes each value as one compact JSON line.
pub fn write_jsonl<T: Serialize>(mut w: impl Write, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{forward, LayerSpec, StoragePolicy};
    use crate::calibrate::calibrate_bank;
    use crate::tensor::DenseTensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mem_saving_examples() {
        assert_eq!(mem_saving(&[8, 8, 8], &[1, 1, 1]).unwrap(), 20.48);
        assert!(mem_saving(&[4, 5, 6], &[4, 5, 6]).unwrap() < 1.0);
        assert_eq!(
            mem_saving(&[4, 5], &[0, 2]).unwrap_err(),
            MetricsError::RankOutOfRange { mode: 0, rank: 0, min: 1, dim: 4 }
        );
        assert!(mem_saving(&[4, 5], &[5, 2]).is_err());
    }

    #[test]
    fn flops_examples() {
        assert_eq!(lance_flops(&[4, 4, 4], &[2, 2, 2], 4).unwrap().0, 480);
        assert_eq!(bp_flops(&[2, 2, 2], 3).unwrap(), (24, 24));
        assert_eq!(bp_flops(&[1, 1, 1], 1).unwrap(), (1, 1));
        assert_eq!(lance_flops(&[4, 4], &[2, 2], 4).unwrap_err(), MetricsError::UnsupportedOrder(2));
        assert_eq!(lance_flops(&[4, 0, 4], &[2, 0, 2], 4).unwrap_err(), MetricsError::ZeroDim { mode: 1 });
        assert!(bp_flops(&[4, 0, 4], 4).is_err());
    }

    /// The three-mode expressions written out term by term.
    fn closed_form(n: [u64; 3], r: [u64; 3], h: u64) -> (u64, u64) {
        let p = n[0] * n[1] * n[2];
        let fw = h * p + n[0] * r[0] * n[1] * n[2] + r[0] * n[1] * r[1] * n[2] + r[0] * r[1] * n[2] * r[2];
        let bw = p * r[0] + r[0] * r[1] * r[2] * n[1] + r[0] * n[1] * r[2] * n[2] + r[0] * n[1] * n[2] * h;
        (fw, bw)
    }

    #[test]
    fn resnet_scale_saving_is_moderate() {
        let s = s_flops(&[128, 14, 14, 256], &[8, 4, 4, 16], 256).unwrap();
        assert!((1.2..=2.0).contains(&s), "{s}");
    }

    proptest! {
        #[test]
        fn order3_matches_closed_form(n in prop::array::uniform3(1usize..20), h in 1usize..40, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r: Vec<usize> = n.iter().map(|&k| rng.random_range(0..=k)).collect();
            let got = lance_flops(&n, &r, h).unwrap();
            let to = |v: &[usize]| [v[0] as u64, v[1] as u64, v[2] as u64];
            prop_assert_eq!(got, closed_form(to(&n), to(&r), h as u64));
        }

        #[test]
        fn full_rank_never_beats_bp(n in prop::collection::vec(1usize..12, 3..=4), h in 1usize..30) {
            let (lf, lb) = lance_flops(&n, &n, h).unwrap();
            let (bf, bb) = bp_flops(&n, h).unwrap();
            prop_assert!(lf >= bf && lb + lf >= bb + bf);
        }

        #[test]
        fn smaller_rank_saves_more(n in prop::collection::vec(2usize..10, 2..=4), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r: Vec<usize> = n.iter().map(|&k| rng.random_range(2..=k)).collect();
            let mode = rng.random_range(0..n.len());
            let mut lower = r.clone();
            lower[mode] -= 1;
            prop_assert!(mem_saving(&n, &lower).unwrap() > mem_saving(&n, &r).unwrap());
        }
    }

    #[test]
    fn angle_cases() {
        assert_eq!(vector_angle(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 0.0);
        assert!((vector_angle(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() - 180.0).abs() < 1e-12);
        assert!((vector_angle(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 90.0).abs() < 1e-12);
        assert_eq!(vector_angle(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err(), MetricsError::ZeroNorm);
    }

    #[test]
    fn report_matches_runtime_counts() {
        let mut net = Network::new(
            vec![6, 6, 2],
            vec![
                LayerSpec::conv(2, 3, 3, 1, 1),
                LayerSpec::relu(),
                LayerSpec::max_pool(2, 2),
                LayerSpec::flatten(),
                LayerSpec::dense(27, 5),
                LayerSpec::relu(),
                LayerSpec::dense(5, 3),
            ],
            1,
        )
        .unwrap();
        net.set_trainable_last(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batches: Vec<DenseTensor> = (0..3)
            .map(|_| DenseTensor::from_fn(vec![4, 6, 6, 2], |_| rng.random_range(-1.0..1.0)).unwrap())
            .collect();
        let bank = calibrate_bank(&net, batches.clone(), 3, 0.7, None).unwrap();
        for b in [None, Some(&bank)] {
            let report = CostReport::for_network(&net, 4, b).unwrap();
            let policy = b.map_or(StoragePolicy::Full, StoragePolicy::LowRank);
            let (_, stored) = forward(&net, &batches[0], policy).unwrap();
            assert!(report.matches(&stored), "{report:?}");
            assert_eq!(report.stored_elements, stored.stored_elements() as u64);
        }
        let report = CostReport::for_network(&net, 4, Some(&bank)).unwrap();
        assert_eq!(report.factor_elements, bank.factor_elements() as u64);
    }

    #[test]
    fn jsonl_lines_round_trip() {
        let rec = RunRecord {
            phase: "train".into(),
            task: None,
            epoch: Some(2),
            loss: 0.5,
            accuracy: 0.75,
            stored_elements: 10,
            grad_angle_degrees: Some(30.0),
            grad_angle_per_layer: None,
            wall_time: None,
        };
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[rec.clone(), rec.clone()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(serde_json::from_str::<RunRecord>(lines[1]).unwrap(), rec);
        assert!(!lines[0].contains("wall_time"));
    }
}
