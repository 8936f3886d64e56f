//! Subcommand implementations. Each writes its artifacts under `cfg.out`.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};
use lance_core::autograd::{backward, forward, Network, StoragePolicy};
use lance_core::calibrate::{calibrate_bank, SubspaceBank};
use lance_core::continual::{acc_bwt, class_split_stream, run_task_sequence, synthetic_stream, ClConfig, ClOutcome, TaskStream};
use lance_core::data::{load_idx, Dataset, SyntheticTask};
use lance_core::format;
use lance_core::metrics::{grad_angle, grad_angle_per_layer, write_jsonl, CostReport, LayerCost, RunRecord};
use lance_core::train::{fit, TrainConfig};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DatasetConfig, EstimateLayer, ModelConfig, Policy, RunConfig, StreamConfig};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Creates the output directory and writes `resolved_config.json`.
pub fn prepare_output(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    fs::write(cfg.out.join("resolved_config.json"), cfg.to_json() + "\n")?;
    Ok(())
}

/// Loads train and test sets, flattened to `shape` when it differs.
pub fn load_datasets(ds: &DatasetConfig, shape: &[usize]) -> Result<(Dataset, Dataset)> {
    let (train, test) = match ds {
        DatasetConfig::Synthetic {
            spec,
            drift,
            train_samples,
            test_samples,
            train_seed,
            test_seed,
        } => {
            let mut task = SyntheticTask::new(spec.clone())?;
            if let Some(d) = drift {
                task = task.drifted(d.rho, d.seed)?;
            }
            (task.sample(*train_samples, *train_seed)?, task.sample(*test_samples, *test_seed)?)
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?),
    };
    let fit_shape = |d: Dataset| -> Result<Dataset> {
        if d.sample_shape() == shape {
            Ok(d)
        } else {
            Ok(d.reshaped(shape).context("dataset samples do not match the model input shape")?)
        }
    };
    Ok((fit_shape(train)?, fit_shape(test)?))
}

fn build_network(model: &ModelConfig, seed: u64) -> Result<Network> {
    Ok(Network::new(model.input_shape.clone(), model.layers.clone(), seed)?)
}

/// The checkpoint if one is configured, else a fresh network; then applies
/// `trainable_layers`.
fn load_network(cfg: &RunConfig) -> Result<Network> {
    let mut net = match &cfg.checkpoint {
        Some(p) => format::load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?,
        None => build_network(&cfg.model, cfg.seed)?,
    };
    let weighted = net.layers().iter().filter(|s| s.kind.has_params()).count();
    let k = if cfg.trainable_layers == 0 { weighted } else { cfg.trainable_layers };
    if k > weighted {
        bail!("trainable_layers = {k} but the network has {weighted} weighted layers");
    }
    net.set_trainable_last(k);
    Ok(net)
}

fn load_bank(cfg: &RunConfig) -> Result<Option<SubspaceBank>> {
    cfg.bank
        .as_ref()
        .map(|p| format::load_bank(p).with_context(|| format!("loading bank {}", p.display())))
        .transpose()
}

fn require_bank(cfg: &RunConfig, batch_size: usize) -> Result<SubspaceBank> {
    let Some(bank) = load_bank(cfg)? else {
        bail!("policy `lance` needs a subspace bank; run `calibrate` and pass --bank");
    };
    if bank.batch_size() != batch_size {
        bail!("bank was calibrated for batch size {} but batch_size is {batch_size}", bank.batch_size());
    }
    Ok(bank)
}

fn calibration_seed(cfg: &RunConfig) -> u64 {
    cfg.seed.wrapping_add(0x5eed)
}

#[derive(Serialize)]
struct LayerRanks {
    layer: usize,
    dims: Vec<usize>,
    ranks: Vec<usize>,
    s_mem: f64,
}

#[derive(Serialize)]
struct CalibrateSummary {
    batch_size: usize,
    eps: f64,
    calib_batches: usize,
    layers: Vec<LayerRanks>,
    cost: CostReport,
}

pub fn calibrate(cfg: &RunConfig) -> Result<()> {
    if cfg.checkpoint.is_none() {
        bail!("calibrate needs --checkpoint");
    }
    let net = load_network(cfg)?;
    let (train, _) = load_datasets(&cfg.dataset, net.input_shape())?;
    let batches = train.calibration_batches(cfg.batch_size, cfg.calib_batches, calibration_seed(cfg));
    let bank = calibrate_bank(&net, batches, cfg.calib_batches, cfg.eps, None)?;
    let layers = bank
        .iter()
        .map(|(l, s)| {
            Ok(LayerRanks {
                layer: l,
                dims: s.dims().to_vec(),
                ranks: s.ranks(),
                s_mem: lance_core::metrics::mem_saving(s.dims(), &s.ranks()).unwrap_or(f64::INFINITY),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for l in &layers {
        info!("layer {} dims {:?} ranks {:?}", l.layer, l.dims, l.ranks);
    }
    let cost = CostReport::for_network(&net, cfg.batch_size, Some(&bank))?;
    format::save_bank(&cfg.out.join("bank.bin"), &bank)?;
    write_json(
        &cfg.out.join("calibrate.json"),
        &CalibrateSummary {
            batch_size: cfg.batch_size,
            eps: cfg.eps,
            calib_batches: cfg.calib_batches,
            layers,
            cost,
        },
    )
}

#[derive(Serialize)]
struct FinetuneSummary {
    policy: Policy,
    epochs: usize,
    initial_accuracy: f64,
    final_accuracy: f64,
    final_loss: f64,
    stored_elements: u64,
    mean_grad_angle_degrees: Option<f64>,
    cost: CostReport,
}

pub fn finetune(cfg: &RunConfig) -> Result<()> {
    let mut net = load_network(cfg)?;
    let (train, test) = load_datasets(&cfg.dataset, net.input_shape())?;
    let bank = match cfg.policy {
        Policy::Full => None,
        Policy::Lance => Some(require_bank(cfg, cfg.batch_size)?),
    };
    let policy = bank.as_ref().map_or(StoragePolicy::Full, StoragePolicy::LowRank);
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        record_angle: cfg.record_angle && bank.is_some(),
        per_layer_angle: cfg.per_layer_angle && bank.is_some(),
        timing: !cfg.deterministic,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let records = fit(&mut net, &train, &test, policy, &tc, &mut rng)?;
    for r in &records {
        info!("epoch {:?} loss {:.4} acc {:.4}", r.epoch, r.loss, r.accuracy);
    }
    let cost = CostReport::for_network(&net, cfg.batch_size, bank.as_ref())?;
    let angles: Vec<f64> = records.iter().filter_map(|r| r.grad_angle_degrees).collect();
    let last = records.last().expect("init record");
    let summary = FinetuneSummary {
        policy: cfg.policy,
        epochs: cfg.epochs,
        initial_accuracy: records[0].accuracy,
        final_accuracy: last.accuracy,
        final_loss: last.loss,
        stored_elements: records.get(1).map_or(0, |r| r.stored_elements),
        mean_grad_angle_degrees: (!angles.is_empty()).then(|| angles.iter().sum::<f64>() / angles.len() as f64),
        cost,
    };
    let file = fs::File::create(cfg.out.join("records.jsonl"))?;
    write_jsonl(BufWriter::new(file), &records)?;
    write_json(&cfg.out.join("summary.json"), &summary)?;
    format::save_checkpoint(&cfg.out.join("checkpoint.bin"), &net)?;
    Ok(())
}

#[derive(Serialize)]
struct ClRun {
    constrained: bool,
    accuracy: Vec<Vec<f64>>,
    acc: f64,
    bwt: f64,
    /// Protected columns per trunk layer after each task.
    memory_columns: Vec<BTreeMap<usize, usize>>,
    /// Trunk factor ranks per task; empty where full storage was used.
    bank_ranks: Vec<BTreeMap<usize, Vec<usize>>>,
}

impl ClRun {
    fn new(out: &ClOutcome, constrained: bool) -> Result<Self> {
        let (acc, bwt) = acc_bwt(&out.accuracy)?;
        Ok(Self {
            constrained,
            accuracy: out.accuracy.rows()?,
            acc,
            bwt,
            memory_columns: out.memories.iter().map(|m| m.columns()).collect(),
            bank_ranks: out
                .banks
                .iter()
                .map(|b| b.iter().flat_map(|b| b.iter().map(|(l, s)| (l, s.ranks()))).collect())
                .collect(),
        })
    }
}

#[derive(Serialize)]
struct ClSummary {
    trunk: Vec<usize>,
    head: usize,
    runs: Vec<ClRun>,
}

pub fn build_stream(cfg: &RunConfig) -> Result<TaskStream> {
    let cl = &cfg.cl;
    let stream = match &cl.stream {
        StreamConfig::Synthetic {
            template,
            train_samples,
            test_samples,
            seed,
        } => synthetic_stream(template, cl.tasks, *train_samples, *test_samples, *seed)?,
        StreamConfig::ClassSplit { dataset } => {
            let (train, test) = load_datasets(dataset, &cl.model.input_shape)?;
            class_split_stream(&train, &test, cl.tasks, cfg.seed)?
        }
    };
    let shape = &cl.model.input_shape;
    if stream.tasks()[0].train.sample_shape() != &shape[..] {
        return Ok(stream.reshaped(shape)?);
    }
    Ok(stream)
}

pub fn continual(cfg: &RunConfig) -> Result<()> {
    let cl = &cfg.cl;
    let stream = build_stream(cfg)?;
    let net = build_network(&cl.model, cfg.seed)?;
    let mut summary = ClSummary {
        trunk: Vec::new(),
        head: 0,
        runs: Vec::new(),
    };
    let mut records: Vec<RunRecord> = Vec::new();
    let modes: &[bool] = if cl.control { &[true, false] } else { &[true] };
    for &constrained in modes {
        let cc = ClConfig {
            epochs: cl.epochs,
            batch_size: cl.batch_size,
            lr: cl.lr,
            eps: cl.eps,
            eps_cl: cl.eps_cl,
            n_calib: cl.calib_batches,
            n_cl: cl.memory_batches,
            constrained,
            timing: !cfg.deterministic,
        };
        let out = run_task_sequence(net.clone(), &stream, &cc)?;
        let run = ClRun::new(&out, constrained)?;
        info!("constrained {constrained}: ACC {:.4} BWT {:.4}", run.acc, run.bwt);
        if constrained {
            for (t, m) in out.memories.iter().enumerate() {
                format::save_memory(&cfg.out.join(format!("memory_task{t}.bin")), m)?;
            }
            for (t, b) in out.banks.iter().enumerate() {
                if let Some(b) = b {
                    format::save_bank(&cfg.out.join(format!("bank_task{t}.bin")), b)?;
                }
            }
        }
        let phase = if constrained { "constrained" } else { "control" };
        records.extend(out.records.iter().map(|r| RunRecord {
            phase: format!("{phase}_{}", r.phase),
            ..r.clone()
        }));
        summary.trunk = out.trunk.clone();
        summary.head = out.head;
        summary.runs.push(run);
    }
    let file = fs::File::create(cfg.out.join("cl_records.jsonl"))?;
    write_jsonl(BufWriter::new(file), &records)?;
    write_json(&cfg.out.join("cl.json"), &summary)
}

/// Cost report from explicit layer entries.
pub fn estimate_layers(entries: &[EstimateLayer]) -> Result<CostReport> {
    let batch = entries[0].dims.first().copied().unwrap_or(0);
    let layers = entries
        .iter()
        .enumerate()
        .map(|(i, e)| LayerCost::estimate(i, &e.dims, Some(&e.ranks), e.out_dim))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(CostReport::from_layers("lance", batch, layers, 0, 0))
}

pub fn estimate(cfg: &RunConfig) -> Result<CostReport> {
    let report = if !cfg.estimate.is_empty() {
        estimate_layers(&cfg.estimate)?
    } else {
        let net = load_network(cfg)?;
        let bank = load_bank(cfg)?;
        CostReport::for_network(&net, bank.as_ref().map_or(cfg.batch_size, |b| b.batch_size()), bank.as_ref())?
    };
    write_json(&cfg.out.join("estimate.json"), &report)?;
    Ok(report)
}

#[derive(Serialize)]
struct AngleRow {
    batch: usize,
    angle_degrees: f64,
    per_layer: Vec<(usize, f64)>,
}

#[derive(Serialize)]
struct AlignSummary {
    batches: Vec<AngleRow>,
    mean_degrees: f64,
    max_degrees: f64,
}

pub fn grad_align(cfg: &RunConfig, count: usize) -> Result<()> {
    let net = load_network(cfg)?;
    let (train, _) = load_datasets(&cfg.dataset, net.input_shape())?;
    let bank = require_bank(cfg, cfg.batch_size)?;
    let idx = train.batch_indices(cfg.batch_size, None);
    if idx.len() < count {
        bail!("dataset has {} full batches, {count} requested", idx.len());
    }
    let mut rows = Vec::with_capacity(count);
    for (b, ix) in idx.iter().take(count).enumerate() {
        let (x, y) = train.gather(ix);
        let (ll, ls) = forward(&net, &x, StoragePolicy::LowRank(&bank))?;
        let (_, gl) = backward(&net, &ls, &ll, &y)?;
        let (fl, fs) = forward(&net, &x, StoragePolicy::Full)?;
        let (_, gf) = backward(&net, &fs, &fl, &y)?;
        rows.push(AngleRow {
            batch: b,
            angle_degrees: grad_angle(&gl, &gf)?,
            per_layer: grad_angle_per_layer(&gl, &gf)?,
        });
    }
    let angles: Vec<f64> = rows.iter().map(|r| r.angle_degrees).collect();
    let summary = AlignSummary {
        mean_degrees: angles.iter().sum::<f64>() / count.max(1) as f64,
        max_degrees: angles.iter().copied().fold(0.0, f64::max),
        batches: rows,
    };
    write_json(&cfg.out.join("grad_align.json"), &summary)
}
