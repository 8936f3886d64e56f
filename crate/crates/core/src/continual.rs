//! Sequential multi-head task training with null-space memory.
//!
//! Every task owns the final dense layer (its head); the earlier trainable
//! layers form a shared trunk. The first task trains with full storage.
//! Later tasks calibrate the trunk with last-mode factors orthogonal to the
//! memory of earlier tasks, so trunk updates leave the protected input
//! directions untouched. After each task the memory absorbs that task's
//! dominant trunk-input directions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{init_layer_params, AutogradError, LayerKind, LayerParams, Network, StoragePolicy};
use crate::calibrate::{calibrate_layers, memory_update, CalibrateError, LayerSubspace, MemoryBank, SubspaceBank};
use crate::data::{random_orthonormal, DataError, Dataset, SubspaceLayout, SyntheticSpec, SyntheticTask};
use crate::metrics::RunRecord;
use crate::tensor::DenseMatrix;
use crate::train::{evaluate, fit, TrainConfig, TrainError};

#[derive(Error, Debug)]
pub enum ContinualError {
    #[error("task stream needs at least 2 tasks, got {0}")]
    TooFewTasks(usize),
    #[error("accuracy entry ({t}, {i}) is undefined")]
    Undefined { t: usize, i: usize },
    #[error("entry ({t}, {i}) outside the lower triangle of a {size}-task matrix")]
    OutOfRange { t: usize, i: usize, size: usize },
    #[error("accuracy {0} outside [0, 1]")]
    BadAccuracy(f64),
    #[error("network layout: {0}")]
    Layout(String),
    #[error("task {task}: {source}")]
    Calibrate { task: usize, source: CalibrateError },
    #[error("task {task}: {source}")]
    Train { task: usize, source: TrainError },
    #[error("task {task}: {source}")]
    Autograd { task: usize, source: AutogradError },
    #[error(transparent)]
    Data(#[from] DataError),
}

type Result<T> = std::result::Result<T, ContinualError>;

/// `R[t][i]`: accuracy on task `i` after training task `t`, for `i <= t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            rows: (0..tasks).map(|t| vec![None; t + 1]).collect(),
        }
    }

    /// Builds a fully populated matrix from its lower-triangular rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (t, row) in rows.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(ContinualError::OutOfRange {
                    t,
                    i: row.len(),
                    size: rows.len(),
                });
            }
            for (i, &v) in row.iter().enumerate() {
                m.set(t, i, v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, t: usize, i: usize, acc: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&acc) {
            return Err(ContinualError::BadAccuracy(acc));
        }
        let size = self.rows.len();
        let slot = self
            .rows
            .get_mut(t)
            .and_then(|r| r.get_mut(i))
            .ok_or(ContinualError::OutOfRange { t, i, size })?;
        *slot = Some(acc);
        Ok(())
    }

    pub fn get(&self, t: usize, i: usize) -> Result<f64> {
        let size = self.rows.len();
        self.rows
            .get(t)
            .and_then(|r| r.get(i))
            .ok_or(ContinualError::OutOfRange { t, i, size })?
            .ok_or(ContinualError::Undefined { t, i })
    }

    /// The populated lower triangle.
    pub fn rows(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.tasks())
            .map(|t| (0..=t).map(|i| self.get(t, i)).collect())
            .collect()
    }
}

/// `ACC = mean_i R[T][i]`, `BWT = mean_{i<T} (R[T][i] - R[i][i])`.
pub fn acc_bwt(r: &AccuracyMatrix) -> Result<(f64, f64)> {
    let t = r.tasks();
    if t == 0 {
        return Err(ContinualError::TooFewTasks(0));
    }
    let last = t - 1;
    let acc = (0..t).map(|i| r.get(last, i)).sum::<Result<f64>>()? / t as f64;
    if t == 1 {
        return Ok((acc, 0.0));
    }
    let bwt = (0..last)
        .map(|i| Ok(r.get(last, i)? - r.get(i, i)?))
        .sum::<Result<f64>>()?
        / last as f64;
    Ok((acc, bwt))
}

#[derive(Debug, Clone)]
pub struct Task {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone)]
pub struct TaskStream {
    tasks: Vec<Task>,
    seed: u64,
}

impl TaskStream {
    pub fn new(tasks: Vec<Task>, seed: u64) -> Result<Self> {
        if tasks.len() < 2 {
            return Err(ContinualError::TooFewTasks(tasks.len()));
        }
        Ok(Self { tasks, seed })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Flattens every task's samples to `shape`.
    pub fn reshaped(self, shape: &[usize]) -> Result<Self> {
        let tasks = self
            .tasks
            .into_iter()
            .map(|t| {
                Ok(Task {
                    train: t.train.reshaped(shape)?,
                    test: t.test.reshaped(shape)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { tasks, seed: self.seed })
    }
}

/// Tasks whose classes share a channel subspace, with subspaces of different
/// tasks mutually orthogonal (consecutive column blocks of one random
/// orthogonal matrix). `template.rank * tasks` must not exceed the channels;
/// its layout field is ignored.
pub fn synthetic_stream(template: &SyntheticSpec, tasks: usize, train: usize, test: usize, seed: u64) -> Result<TaskStream> {
    let k = template.rank;
    if k * tasks > template.channels {
        return Err(DataError::BadSpec(format!(
            "{tasks} tasks of rank {k} do not fit in {} channels",
            template.channels
        ))
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_orthonormal(template.channels, template.channels, &mut rng);
    let stream = (0..tasks)
        .map(|t| {
            let basis = DenseMatrix::from_fn(template.channels, k, |i, j| q.get(i, t * k + j));
            let spec = SyntheticSpec {
                layout: SubspaceLayout::Shared,
                seed: seed.wrapping_add(1 + t as u64),
                ..template.clone()
            };
            let task = SyntheticTask::with_bases(spec.clone(), vec![basis; spec.classes])?;
            let salt = seed.wrapping_mul(31).wrapping_add(2 * t as u64);
            Ok(Task {
                train: task.sample(train, salt.wrapping_add(1000))?,
                test: task.sample(test, salt.wrapping_add(2001))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TaskStream::new(stream, seed)
}

/// Splits `train`/`test` into `tasks` groups of consecutive classes, each
/// relabelled from 0. The class count must divide evenly.
pub fn class_split_stream(train: &Dataset, test: &Dataset, tasks: usize, seed: u64) -> Result<TaskStream> {
    let classes = train.classes();
    if tasks == 0 || !classes.is_multiple_of(tasks) || test.classes() != classes {
        return Err(ContinualError::Layout(format!("{classes} classes do not split into {tasks} tasks")));
    }
    let per = classes / tasks;
    let split = |data: &Dataset, t: usize| -> Result<Dataset> {
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels()[i] / per == t).collect();
        let (x, y) = data.gather(&idx);
        Ok(Dataset::new(x, y.into_iter().map(|c| c - t * per).collect(), per)?)
    };
    let stream = (0..tasks)
        .map(|t| {
            Ok(Task {
                train: split(train, t)?,
                test: split(test, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TaskStream::new(stream, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Calibration energy threshold for trunk factors.
    pub eps: f64,
    /// Memory energy threshold.
    pub eps_cl: f64,
    /// Calibration batches per task.
    pub n_calib: usize,
    /// Memory batches per task.
    pub n_cl: usize,
    /// Constrain later tasks to the memory null space; `false` runs plain
    /// sequential full backprop.
    pub constrained: bool,
    pub timing: bool,
}

/// Result of a task sequence.
#[derive(Debug, Clone)]
pub struct ClOutcome {
    pub accuracy: AccuracyMatrix,
    /// Memory after each task; empty for unconstrained runs.
    pub memories: Vec<MemoryBank>,
    /// Bank used to train each task; `None` where full storage was used.
    pub banks: Vec<Option<SubspaceBank>>,
    pub records: Vec<RunRecord>,
    /// Trunk layer indices.
    pub trunk: Vec<usize>,
    pub head: usize,
}

/// Trunk = trainable layers below the head; head = the last layer with weights.
fn split_layers(net: &Network) -> Result<(Vec<usize>, usize)> {
    let head = (0..net.layers().len())
        .rev()
        .find(|&l| net.layers()[l].kind.has_params())
        .ok_or_else(|| ContinualError::Layout("no layer with weights".into()))?;
    let trunk: Vec<usize> = net.trainable_layers().into_iter().filter(|&l| l < head).collect();
    if trunk.is_empty() {
        return Err(ContinualError::Layout("no trainable trunk layer below the head".into()));
    }
    if let Some(&l) = trunk.iter().find(|&&l| has_bias(&net.layers()[l].kind)) {
        return Err(ContinualError::Layout(format!("trunk layer {l} has a bias, which the memory cannot protect")));
    }
    Ok((trunk, head))
}

fn has_bias(kind: &LayerKind) -> bool {
    matches!(kind, LayerKind::Dense { bias: true, .. } | LayerKind::Conv2d { bias: true, .. })
}

fn identity_subspace(dims: Vec<usize>) -> LayerSubspace {
    let factors = dims.iter().map(|&n| DenseMatrix::identity(n)).collect();
    LayerSubspace::new(dims, factors).expect("identity factors are orthonormal")
}

/// Trains `net` on each task in turn and fills the accuracy matrix.
///
/// The trainable layers of `net` below its last weighted layer form the
/// trunk; each task gets a freshly initialised head. The head is stored
/// losslessly (identity factors) when a bank is in use.
pub fn run_task_sequence(mut net: Network, stream: &TaskStream, cfg: &ClConfig) -> Result<ClOutcome> {
    let (trunk, head) = split_layers(&net)?;
    net.set_trainable(head, true)
        .map_err(|source| ContinualError::Autograd { task: 0, source })?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream.seed());
    let mut memory =
        MemoryBank::empty_for(&net, &trunk).map_err(|source| ContinualError::Calibrate { task: 0, source })?;
    let tasks = stream.tasks();
    let mut outcome = ClOutcome {
        accuracy: AccuracyMatrix::new(tasks.len()),
        memories: Vec::new(),
        banks: Vec::new(),
        records: Vec::new(),
        trunk: trunk.clone(),
        head,
    };
    let mut heads: Vec<LayerParams> = Vec::new();
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        record_angle: false,
        per_layer_angle: false,
        timing: cfg.timing,
    };
    for (t, task) in tasks.iter().enumerate() {
        let autograd = |source| ContinualError::Autograd { task: t, source };
        let calib = |source| ContinualError::Calibrate { task: t, source };
        let fresh = init_layer_params(&net.layers()[head].kind, stream.seed().wrapping_add(7919 * (t as u64 + 1)))
            .expect("head has weights");
        net.set_params(head, fresh).map_err(autograd)?;

        let bank = if cfg.constrained && t > 0 {
            let batches = task
                .train
                .calibration_batches(cfg.batch_size, cfg.n_calib, stream.seed().wrapping_add(t as u64));
            let mut bank = calibrate_layers(&net, batches, cfg.n_calib, cfg.eps, Some(&memory), &trunk).map_err(calib)?;
            bank.insert(head, identity_subspace(net.batch_input_dims(head, cfg.batch_size)));
            Some(bank)
        } else {
            None
        };
        let policy = bank.as_ref().map_or(StoragePolicy::Full, StoragePolicy::LowRank);
        let records = fit(&mut net, &task.train, &task.test, policy, &train_cfg, &mut rng)
            .map_err(|source| ContinualError::Train { task: t, source })?;
        outcome.records.extend(records.into_iter().map(|r| RunRecord { task: Some(t), ..r }));
        outcome.banks.push(bank);

        if cfg.constrained {
            let batches = task.train.leading_batches(cfg.batch_size, cfg.n_cl);
            memory = memory_update(&net, batches, cfg.n_cl, cfg.eps_cl, &memory).map_err(calib)?;
            outcome.memories.push(memory.clone());
        }

        heads.push(net.params(head).expect("head has weights").clone());
        for (i, past) in tasks[..=t].iter().enumerate() {
            net.set_params(head, heads[i].clone()).map_err(autograd)?;
            let (_, acc) = evaluate(&net, &past.test, 256).map_err(|source| ContinualError::Train { task: t, source })?;
            outcome.accuracy.set(t, i, acc)?;
        }
        net.set_params(head, heads[t].clone()).map_err(autograd)?;
    }
    Ok(outcome)
}
