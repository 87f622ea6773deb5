//! Deployment simulator: replays a multi-task image workload under three
//! serving strategies and ledgers init time, switch time, inference time,
//! and peak resident model bytes.
//!
//! Strategies:
//! - `reload-per-task`: one standalone fine-tuned model lives in memory;
//!   every task change reloads the next model from disk.
//! - `preload-all`: every standalone model is loaded up front; no switches.
//! - `melo-shared`: one shared frozen backbone plus all task adapters are
//!   loaded up front; task changes move the registry's active handle.
//!
//! A standalone fine-tuned model is stored as its merged backbone file plus
//! the task file, whose classifier head it uses (the low-rank factors in
//! the task file are inert once merged). Before any timing is reported,
//! every strategy's outputs are gated against direct single-model
//! inference of the same artifact family, bit-for-bit, and the merged and
//! runtime-add families are cross-checked numerically.
//!
//! Timings come from a monotonic clock. The optional load-cost model adds
//! `bytes × ns_per_byte` to the ledger for every file load, which makes
//! reload costs hardware-independent without sleeping.

use crate::lora::{
    init_adapter, load_adapter, merge_adapter, save_adapter, LoraAdapter, LoraError, MergeError,
};
use crate::registry::{AdapterRegistry, RegistryError};
use crate::tensor::{Tensor, TensorError};
use crate::vit::{
    forward, forward_features, load_backbone, save_backbone, ViTConfig, ViTError, ViTWeights,
};
use crate::wire::FormatError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeployError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Forward(#[from] ViTError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("workload is empty")]
    EmptyWorkload,
    #[error("unknown task '{0}' in workload")]
    UnknownTask(String),
    #[error("validity gate failed for {strategy} on task '{task}': {detail}")]
    ValidityGate {
        strategy: &'static str,
        task: String,
        detail: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    ReloadPerTask,
    PreloadAll,
    MeloShared,
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::ReloadPerTask => "reload-per-task",
            Strategy::PreloadAll => "preload-all",
            Strategy::MeloShared => "melo-shared",
        }
    }

    pub fn all() -> [Strategy; 3] {
        [
            Strategy::ReloadPerTask,
            Strategy::PreloadAll,
            Strategy::MeloShared,
        ]
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reload-per-task" => Ok(Strategy::ReloadPerTask),
            "preload-all" => Ok(Strategy::PreloadAll),
            "melo-shared" => Ok(Strategy::MeloShared),
            other => Err(format!(
                "unknown strategy '{other}' (expected reload-per-task, preload-all, melo-shared)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkloadOrder {
    /// Images grouped by task, tasks back to back.
    InOrder,
    /// All images shuffled together (seeded).
    Random,
}

impl WorkloadOrder {
    pub fn label(&self) -> &'static str {
        match self {
            WorkloadOrder::InOrder => "in-order",
            WorkloadOrder::Random => "random",
        }
    }
}

impl std::str::FromStr for WorkloadOrder {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "in-order" => Ok(WorkloadOrder::InOrder),
            "random" => Ok(WorkloadOrder::Random),
            other => Err(format!(
                "unknown ordering '{other}' (expected in-order or random)"
            )),
        }
    }
}

/// Synthetic per-byte load cost added to the timing ledger for every file
/// load (accounting only; no sleeping).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadCostModel {
    pub ns_per_byte: f64,
}

impl LoadCostModel {
    fn cost_ns(&self, bytes: usize) -> u128 {
        (self.ns_per_byte * bytes as f64) as u128
    }
}

/// One request: a task and an input image.
#[derive(Debug, Clone)]
pub struct WorkItem {
    pub task: String,
    pub image: Tensor,
}

#[derive(Debug, Clone)]
pub struct BenchScenario {
    pub strategy: Strategy,
    pub order: WorkloadOrder,
    pub workload: Vec<WorkItem>,
    pub load_cost: Option<LoadCostModel>,
}

/// On-disk artifacts for one task.
#[derive(Debug, Clone)]
pub struct TaskArtifact {
    pub name: String,
    pub num_classes: usize,
    /// Adapter file (low-rank factors + head).
    pub adapter_path: PathBuf,
    /// Backbone file with this task's update merged in.
    pub merged_path: PathBuf,
}

/// Everything `run_bench` needs on disk.
#[derive(Debug, Clone)]
pub struct DeployArtifacts {
    pub cfg: ViTConfig,
    pub backbone_path: PathBuf,
    pub tasks: Vec<TaskArtifact>,
}

impl DeployArtifacts {
    pub fn task(&self, name: &str) -> Option<&TaskArtifact> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn task_names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.name.clone()).collect()
    }
}

/// Writes a seeded backbone plus, per task, a trained-looking adapter
/// (nonzero factors) and the corresponding merged standalone model.
pub fn prepare_artifacts(
    dir: &Path,
    cfg: &ViTConfig,
    seed: u64,
    tasks: &[(String, usize)],
) -> Result<DeployArtifacts, DeployError> {
    std::fs::create_dir_all(dir)?;
    let weights = ViTWeights::init(cfg, seed);
    let backbone_path = dir.join("backbone.melb");
    save_backbone(cfg, &weights, &backbone_path)?;

    let mut artifacts = Vec::with_capacity(tasks.len());
    for (i, (name, classes)) in tasks.iter().enumerate() {
        let mut adapter = init_adapter(cfg, *classes, 4.min(cfg.dim - 1), seed + 1 + i as u64)?;
        adapter.task_name = name.clone();
        adapter.randomize_updates(0.05, seed ^ (0xC0FFEE + i as u64));
        let adapter_path = dir.join(format!("{name}.melo"));
        save_adapter(&adapter, &adapter_path)?;

        let merged = merge_adapter(&weights, &adapter)?;
        let merged_path = dir.join(format!("{name}.merged.melb"));
        save_backbone(cfg, &merged, &merged_path)?;
        artifacts.push(TaskArtifact {
            name: name.clone(),
            num_classes: *classes,
            adapter_path,
            merged_path,
        });
    }
    Ok(DeployArtifacts {
        cfg: *cfg,
        backbone_path,
        tasks: artifacts,
    })
}

/// Builds the request list for the given ordering; images are seeded per
/// (task, index) and identical across orderings and strategies.
pub fn build_workload(
    artifacts: &DeployArtifacts,
    images_per_task: usize,
    order: WorkloadOrder,
    seed: u64,
) -> Vec<WorkItem> {
    let cfg = &artifacts.cfg;
    let mut items = Vec::with_capacity(images_per_task * artifacts.tasks.len());
    for (t, task) in artifacts.tasks.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((t as u64 + 1) << 32));
        for _ in 0..images_per_task {
            items.push(WorkItem {
                task: task.name.clone(),
                image: Tensor::randn(
                    &[cfg.channels, cfg.image_size, cfg.image_size],
                    1.0,
                    &mut rng,
                ),
            });
        }
    }
    if order == WorkloadOrder::Random {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5AFE);
        items.shuffle(&mut rng);
    }
    items
}

/// Ledger for one (strategy, ordering) run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub order: WorkloadOrder,
    pub init_ns: u128,
    pub switch_total_ns: u128,
    pub switch_count: u64,
    pub infer_total_ns: u128,
    pub peak_model_bytes: usize,
}

impl BenchRow {
    /// Average time per switch; 0 when the strategy never switches.
    pub fn avg_switch_ns(&self) -> u128 {
        if self.switch_count == 0 {
            0
        } else {
            self.switch_total_ns / self.switch_count as u128
        }
    }
}

/// The full simulator output: one row per (strategy, ordering), plus the
/// stamp that makes the run reproducible.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub seed: u64,
    pub images_per_task: usize,
    pub tasks: Vec<String>,
    pub load_cost_ns_per_byte: Option<f64>,
    pub os: &'static str,
    pub arch: &'static str,
}

impl BenchReport {
    pub fn row(&self, strategy: Strategy, order: WorkloadOrder) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy && r.order == order)
    }

    /// Machine-readable `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "seed={} images_per_task={} tasks={} os={} arch={}\n",
            self.seed,
            self.images_per_task,
            self.tasks.join(","),
            self.os,
            self.arch
        ));
        match self.load_cost_ns_per_byte {
            Some(c) => out.push_str(&format!("load_cost_ns_per_byte={c}\n")),
            None => out.push_str("load_cost_ns_per_byte=none\n"),
        }
        for r in &self.rows {
            out.push_str(&format!(
                "strategy={} order={} it_ns={} st_ns={} ast_ns={} switches={} tt_ns={} peak_bytes={}\n",
                r.strategy.label(),
                r.order.label(),
                r.init_ns,
                r.switch_total_ns,
                r.avg_switch_ns(),
                r.switch_count,
                r.infer_total_ns,
                r.peak_model_bytes
            ));
        }
        out
    }
}

fn ms(ns: u128) -> f64 {
    ns as f64 / 1e6
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>9} {:>12} {:>12} {:>12} {:>9} {:>12} {:>14}",
            "strategy", "order", "IT(ms)", "ST(ms)", "A-ST(ms)", "switches", "TT(ms)", "peak bytes"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<16} {:>9} {:>12.3} {:>12.3} {:>12.3} {:>9} {:>12.3} {:>14}",
                r.strategy.label(),
                r.order.label(),
                ms(r.init_ns),
                ms(r.switch_total_ns),
                ms(r.avg_switch_ns()),
                r.switch_count,
                ms(r.infer_total_ns),
                r.peak_model_bytes
            )?;
        }
        Ok(())
    }
}

/// A loaded standalone model: merged backbone plus the task head.
struct StandaloneModel {
    cfg: ViTConfig,
    weights: ViTWeights,
    adapter: LoraAdapter,
    resident_bytes: usize,
}

impl StandaloneModel {
    fn load(task: &TaskArtifact) -> Result<(Self, usize), DeployError> {
        let (cfg, weights) = load_backbone(&task.merged_path)?;
        let adapter = load_adapter(&task.adapter_path)?;
        let bytes = std::fs::metadata(&task.merged_path)?.len() as usize
            + std::fs::metadata(&task.adapter_path)?.len() as usize;
        Ok((
            StandaloneModel {
                cfg,
                weights,
                adapter,
                resident_bytes: bytes,
            },
            bytes,
        ))
    }

    fn infer(&self, image: &Tensor) -> Result<Tensor, DeployError> {
        let feats = forward_features(image, &self.cfg, &self.weights, None)?;
        Ok(self.adapter.apply_head(&feats)?)
    }
}

/// Reference outputs for the gate: merged-family and runtime-add-family
/// logits for every work item, computed outside any timing.
struct GateReference {
    merged: Vec<Tensor>,
    runtime: Vec<Tensor>,
}

fn gate_reference(
    artifacts: &DeployArtifacts,
    workload: &[WorkItem],
) -> Result<GateReference, DeployError> {
    let (cfg, shared) = load_backbone(&artifacts.backbone_path)?;
    let mut merged_models = Vec::new();
    let mut adapters = Vec::new();
    for task in &artifacts.tasks {
        merged_models.push(StandaloneModel::load(task)?.0);
        adapters.push(load_adapter(&task.adapter_path)?);
    }
    let mut merged = Vec::with_capacity(workload.len());
    let mut runtime = Vec::with_capacity(workload.len());
    for item in workload {
        let idx = artifacts
            .tasks
            .iter()
            .position(|t| t.name == item.task)
            .ok_or_else(|| DeployError::UnknownTask(item.task.clone()))?;
        merged.push(merged_models[idx].infer(&item.image)?);
        runtime.push(forward(&item.image, &cfg, &shared, Some(&adapters[idx]))?);
    }
    // The two artifact families must agree numerically even though they
    // cannot agree bitwise (merged weights are rounded to f32).
    for (i, (m, r)) in merged.iter().zip(&runtime).enumerate() {
        for (a, b) in m.data().iter().zip(r.data()) {
            if (a - b).abs() > 1e-4 {
                return Err(DeployError::ValidityGate {
                    strategy: "reference",
                    task: workload[i].task.clone(),
                    detail: format!("merged {a} vs runtime-add {b} diverge beyond 1e-4"),
                });
            }
        }
    }
    Ok(GateReference { merged, runtime })
}

fn check_bit_identical(
    got: &Tensor,
    want: &Tensor,
    strategy: &'static str,
    task: &str,
) -> Result<(), DeployError> {
    if got != want {
        return Err(DeployError::ValidityGate {
            strategy,
            task: task.to_string(),
            detail: "outputs differ from direct single-model inference".into(),
        });
    }
    Ok(())
}

/// Replays the scenario under its strategy and returns the timing/memory
/// ledger. Outputs are validity-gated before any timing is accepted.
pub fn run_bench(
    artifacts: &DeployArtifacts,
    scenario: &BenchScenario,
) -> Result<BenchRow, DeployError> {
    if scenario.workload.is_empty() {
        return Err(DeployError::EmptyWorkload);
    }
    for item in &scenario.workload {
        if artifacts.task(&item.task).is_none() {
            return Err(DeployError::UnknownTask(item.task.clone()));
        }
    }
    let reference = gate_reference(artifacts, &scenario.workload)?;
    let cost = |bytes: usize| scenario.load_cost.map_or(0, |m| m.cost_ns(bytes));

    match scenario.strategy {
        Strategy::ReloadPerTask => {
            let mut init_ns = 0u128;
            let mut switch_total_ns = 0u128;
            let mut switch_count = 0u64;
            let mut infer_total_ns = 0u128;
            let mut peak = 0usize;
            let mut current: Option<(String, StandaloneModel)> = None;
            for (i, item) in scenario.workload.iter().enumerate() {
                if current.as_ref().map(|(t, _)| t.as_str()) != Some(item.task.as_str()) {
                    let task = artifacts.task(&item.task).unwrap();
                    // Drop the resident model before loading the next one.
                    current = None;
                    let t0 = Instant::now();
                    let (model, bytes) = StandaloneModel::load(task)?;
                    switch_total_ns += t0.elapsed().as_nanos() + cost(bytes);
                    switch_count += 1;
                    peak = peak.max(model.resident_bytes);
                    current = Some((item.task.clone(), model));
                }
                let model = &current.as_ref().unwrap().1;
                let t0 = Instant::now();
                let logits = model.infer(&item.image)?;
                infer_total_ns += t0.elapsed().as_nanos();
                check_bit_identical(&logits, &reference.merged[i], "reload-per-task", &item.task)?;
            }
            init_ns += 0;
            Ok(BenchRow {
                strategy: scenario.strategy,
                order: scenario.order,
                init_ns,
                switch_total_ns,
                switch_count,
                infer_total_ns,
                peak_model_bytes: peak,
            })
        }
        Strategy::PreloadAll => {
            let t0 = Instant::now();
            let mut models: Vec<(String, StandaloneModel)> = Vec::new();
            let mut synth = 0u128;
            let mut peak = 0usize;
            for task in &artifacts.tasks {
                let (model, bytes) = StandaloneModel::load(task)?;
                synth += cost(bytes);
                peak += model.resident_bytes;
                models.push((task.name.clone(), model));
            }
            let init_ns = t0.elapsed().as_nanos() + synth;
            let mut infer_total_ns = 0u128;
            for (i, item) in scenario.workload.iter().enumerate() {
                let model = &models.iter().find(|(t, _)| *t == item.task).unwrap().1;
                let t0 = Instant::now();
                let logits = model.infer(&item.image)?;
                infer_total_ns += t0.elapsed().as_nanos();
                check_bit_identical(&logits, &reference.merged[i], "preload-all", &item.task)?;
            }
            Ok(BenchRow {
                strategy: scenario.strategy,
                order: scenario.order,
                init_ns,
                switch_total_ns: 0,
                switch_count: 0,
                infer_total_ns,
                peak_model_bytes: peak,
            })
        }
        Strategy::MeloShared => {
            let t0 = Instant::now();
            let (cfg, weights) = load_backbone(&artifacts.backbone_path)?;
            let mut synth = cost(std::fs::metadata(&artifacts.backbone_path)?.len() as usize);
            let mut registry = AdapterRegistry::new(cfg, weights);
            for task in &artifacts.tasks {
                registry.register(&task.adapter_path)?;
                synth += cost(std::fs::metadata(&task.adapter_path)?.len() as usize);
            }
            let init_ns = t0.elapsed().as_nanos() + synth;
            let report = registry.memory_report();
            let peak = report.backbone_bytes + report.adapter_bytes_total;

            let mut switch_total_ns = 0u128;
            let mut switch_count = 0u64;
            let mut infer_total_ns = 0u128;
            for (i, item) in scenario.workload.iter().enumerate() {
                if registry.active_task() != Some(item.task.as_str()) {
                    let receipt = registry.switch(&item.task)?;
                    switch_total_ns += receipt.latency.as_nanos();
                    switch_count += 1;
                }
                let t0 = Instant::now();
                let logits = registry.infer(&item.image)?;
                infer_total_ns += t0.elapsed().as_nanos();
                check_bit_identical(&logits, &reference.runtime[i], "melo-shared", &item.task)?;
            }
            Ok(BenchRow {
                strategy: scenario.strategy,
                order: scenario.order,
                init_ns,
                switch_total_ns,
                switch_count,
                infer_total_ns,
                peak_model_bytes: peak,
            })
        }
    }
}

/// Runs every (strategy, ordering) combination over the same seeded
/// workloads and assembles the comparison table.
pub fn run_bench_suite(
    artifacts: &DeployArtifacts,
    strategies: &[Strategy],
    orderings: &[WorkloadOrder],
    images_per_task: usize,
    seed: u64,
    load_cost: Option<LoadCostModel>,
) -> Result<BenchReport, DeployError> {
    let mut rows = Vec::new();
    for &order in orderings {
        let workload = build_workload(artifacts, images_per_task, order, seed);
        for &strategy in strategies {
            let scenario = BenchScenario {
                strategy,
                order,
                workload: workload.clone(),
                load_cost,
            };
            rows.push(run_bench(artifacts, &scenario)?);
        }
    }
    Ok(BenchReport {
        rows,
        seed,
        images_per_task,
        tasks: artifacts.task_names(),
        load_cost_ns_per_byte: load_cost.map(|c| c.ns_per_byte),
        os: std::env::consts::OS,
        arch: std::env::consts::ARCH,
    })
}
