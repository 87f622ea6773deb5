//! Multi-task serving runtime: one shared frozen backbone, a catalog of
//! loaded adapters, O(1) task switching, and per-task inference routing.
//!
//! Switching only moves the active-task handle; backbone bytes are never
//! copied or touched. Catalog mutations require `&mut self`, while `infer`
//! and `infer_as` take `&self` and may run concurrently from many threads
//! (per-task counters are atomic).

use crate::lora::{AdapterCompatError, LoraAdapter};
use crate::tensor::Tensor;
use crate::vit::{backbone_file_size, forward, ViTConfig, ViTError, ViTWeights};
use crate::wire::FormatError;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error(transparent)]
    Compat(#[from] AdapterCompatError),
    #[error("task '{0}' is already registered")]
    DuplicateTask(String),
    #[error("unknown task '{0}'")]
    UnknownTask(String),
    #[error("no active task; switch to one first")]
    NoActiveTask,
    #[error("adapter file carries an empty task name")]
    UnnamedAdapter,
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Forward(#[from] ViTError),
}

/// Wall-clock record of one switch event.
#[derive(Debug, Clone)]
pub struct SwitchReceipt {
    pub task: String,
    pub latency: Duration,
    /// True when the task was already active.
    pub noop: bool,
}

/// Aggregate over all switch receipts, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchStats {
    pub count: u64,
    pub total_ns: u128,
    pub min_ns: u128,
    pub median_ns: u128,
    pub mean_ns: u128,
}

/// Resident model bytes, measured as exact serialized sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryReport {
    pub backbone_bytes: usize,
    pub adapter_bytes_total: usize,
    pub per_adapter: Vec<(String, usize)>,
}

struct Entry {
    adapter: Arc<LoraAdapter>,
    byte_size: usize,
    infer_count: AtomicU64,
}

/// Shared backbone plus a catalog of named adapters and an active-task
/// handle.
pub struct AdapterRegistry {
    cfg: ViTConfig,
    weights: Arc<ViTWeights>,
    backbone_bytes: usize,
    catalog: BTreeMap<String, Entry>,
    active: Option<String>,
    switch_latencies_ns: Vec<u128>,
}

impl AdapterRegistry {
    pub fn new(cfg: ViTConfig, weights: ViTWeights) -> Self {
        Self {
            backbone_bytes: backbone_file_size(&cfg),
            cfg,
            weights: Arc::new(weights),
            catalog: BTreeMap::new(),
            active: None,
            switch_latencies_ns: Vec::new(),
        }
    }

    /// Builds on an already-shared weight block without copying it.
    pub fn with_shared(cfg: ViTConfig, weights: Arc<ViTWeights>) -> Self {
        Self {
            backbone_bytes: backbone_file_size(&cfg),
            cfg,
            weights,
            catalog: BTreeMap::new(),
            active: None,
            switch_latencies_ns: Vec::new(),
        }
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    /// The single shared weight block; its identity never changes over the
    /// registry's lifetime.
    pub fn backbone(&self) -> &Arc<ViTWeights> {
        &self.weights
    }

    /// Loads an adapter file into the catalog and returns its task name.
    /// The catalog is unchanged on any error.
    pub fn register(&mut self, path: &Path) -> Result<String, RegistryError> {
        let adapter = crate::lora::load_adapter(path)?;
        self.register_adapter(adapter)
    }

    pub fn register_adapter(&mut self, adapter: LoraAdapter) -> Result<String, RegistryError> {
        if adapter.task_name.is_empty() {
            return Err(RegistryError::UnnamedAdapter);
        }
        adapter.check_compat(&self.cfg)?;
        if self.catalog.contains_key(&adapter.task_name) {
            return Err(RegistryError::DuplicateTask(adapter.task_name));
        }
        let name = adapter.task_name.clone();
        let byte_size = adapter.byte_size();
        self.catalog.insert(
            name.clone(),
            Entry {
                adapter: Arc::new(adapter),
                byte_size,
                infer_count: AtomicU64::new(0),
            },
        );
        Ok(name)
    }

    pub fn len(&self) -> usize {
        self.catalog.len()
    }

    pub fn is_empty(&self) -> bool {
        self.catalog.is_empty()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &str> {
        self.catalog.keys().map(String::as_str)
    }

    pub fn adapter(&self, task: &str) -> Option<&Arc<LoraAdapter>> {
        self.catalog.get(task).map(|e| &e.adapter)
    }

    pub fn active_task(&self) -> Option<&str> {
        self.active.as_deref()
    }

    /// Makes `task` the active adapter. Only the handle moves; no weight
    /// bytes are copied or mutated. Switching to the already-active task is
    /// a no-op whose (tiny) latency is still recorded.
    pub fn switch(&mut self, task: &str) -> Result<SwitchReceipt, RegistryError> {
        let start = Instant::now();
        if !self.catalog.contains_key(task) {
            return Err(RegistryError::UnknownTask(task.to_string()));
        }
        let noop = self.active.as_deref() == Some(task);
        if !noop {
            self.active = Some(task.to_string());
        }
        let latency = start.elapsed();
        self.switch_latencies_ns.push(latency.as_nanos());
        Ok(SwitchReceipt {
            task: task.to_string(),
            latency,
            noop,
        })
    }

    /// Inference under the active task; equals a direct `forward` call with
    /// that task's adapter.
    pub fn infer(&self, image: &Tensor) -> Result<Tensor, RegistryError> {
        let task = self.active.as_deref().ok_or(RegistryError::NoActiveTask)?;
        self.infer_as(task, image)
    }

    /// Stateless per-call task selection; safe to call concurrently with
    /// other inferences and independent of the active handle.
    pub fn infer_as(&self, task: &str, image: &Tensor) -> Result<Tensor, RegistryError> {
        let entry = self
            .catalog
            .get(task)
            .ok_or_else(|| RegistryError::UnknownTask(task.to_string()))?;
        let logits = forward(image, &self.cfg, &self.weights, Some(&entry.adapter))?;
        entry.infer_count.fetch_add(1, Ordering::Relaxed);
        Ok(logits)
    }

    pub fn infer_count(&self, task: &str) -> u64 {
        self.catalog
            .get(task)
            .map_or(0, |e| e.infer_count.load(Ordering::Relaxed))
    }

    pub fn switch_count(&self) -> u64 {
        self.switch_latencies_ns.len() as u64
    }

    pub fn switch_stats(&self) -> Option<SwitchStats> {
        if self.switch_latencies_ns.is_empty() {
            return None;
        }
        let mut sorted = self.switch_latencies_ns.clone();
        sorted.sort_unstable();
        let count = sorted.len();
        let total: u128 = sorted.iter().sum();
        Some(SwitchStats {
            count: count as u64,
            total_ns: total,
            min_ns: sorted[0],
            median_ns: sorted[count / 2],
            mean_ns: total / count as u128,
        })
    }

    /// Exact serialized byte sizes: one backbone plus every cataloged
    /// adapter. The backbone appears once no matter how many adapters are
    /// loaded.
    pub fn memory_report(&self) -> MemoryReport {
        let per_adapter: Vec<(String, usize)> = self
            .catalog
            .iter()
            .map(|(name, e)| (name.clone(), e.byte_size))
            .collect();
        MemoryReport {
            backbone_bytes: self.backbone_bytes,
            adapter_bytes_total: per_adapter.iter().map(|(_, b)| b).sum(),
            per_adapter,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{adapter_file_size, init_adapter, save_adapter};
    use crate::vit::backbone_file_size;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            dim: 8,
            heads: 2,
            depth: 2,
            mlp_ratio: 2,
        }
    }

    fn named_adapter(cfg: &ViTConfig, name: &str, classes: usize, seed: u64) -> LoraAdapter {
        let mut a = init_adapter(cfg, classes, 2, seed).unwrap();
        a.task_name = name.to_string();
        a.randomize_updates(0.1, seed ^ 0x5EED);
        a
    }

    fn registry_with_tasks(classes: &[(&str, usize)]) -> AdapterRegistry {
        let cfg = tiny_cfg();
        let weights = ViTWeights::init(&cfg, 1);
        let mut reg = AdapterRegistry::new(cfg, weights);
        for (i, (name, c)) in classes.iter().enumerate() {
            reg.register_adapter(named_adapter(&cfg, name, *c, 10 + i as u64))
                .unwrap();
        }
        reg
    }

    fn random_image(cfg: &ViTConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[cfg.channels, cfg.image_size, cfg.image_size], 1.0, &mut rng)
    }

    #[test]
    fn register_four_adapters() {
        let reg = registry_with_tasks(&[("cxr", 2), ("blood", 4), ("mammo", 2), ("thorax", 14)]);
        assert_eq!(reg.len(), 4);
        assert_eq!(
            reg.tasks().collect::<Vec<_>>(),
            vec!["blood", "cxr", "mammo", "thorax"]
        );
    }

    #[test]
    fn incompatible_adapter_leaves_catalog_unchanged() {
        let cfg = tiny_cfg();
        let weights = ViTWeights::init(&cfg, 1);
        let mut reg = AdapterRegistry::new(cfg, weights);
        let other = ViTConfig { dim: 16, ..cfg };
        let bad = named_adapter(&other, "bad", 2, 3);
        assert!(matches!(
            reg.register_adapter(bad),
            Err(RegistryError::Compat(_))
        ));
        assert_eq!(reg.len(), 0);
    }

    #[test]
    fn duplicate_name_rejected() {
        let cfg = tiny_cfg();
        let mut reg = registry_with_tasks(&[("cxr", 2)]);
        let dup = named_adapter(&cfg, "cxr", 3, 9);
        assert!(matches!(
            reg.register_adapter(dup),
            Err(RegistryError::DuplicateTask(_))
        ));
        assert_eq!(reg.len(), 1);
    }

    #[test]
    fn register_from_file_uses_embedded_name() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.melo");
        save_adapter(&named_adapter(&cfg, "filetask", 3, 4), &path).unwrap();
        let mut reg = registry_with_tasks(&[]);
        let name = reg.register(&path).unwrap();
        assert_eq!(name, "filetask");
        assert_eq!(reg.memory_report().per_adapter[0].1, std::fs::metadata(&path).unwrap().len() as usize);
    }

    #[test]
    fn switch_to_active_task_is_noop() {
        let mut reg = registry_with_tasks(&[("a", 2), ("b", 3)]);
        let first = reg.switch("a").unwrap();
        assert!(!first.noop);
        let second = reg.switch("a").unwrap();
        assert!(second.noop);
        assert_eq!(reg.switch_count(), 2);
    }

    #[test]
    fn unknown_task_errors() {
        let mut reg = registry_with_tasks(&[("a", 2)]);
        assert!(matches!(
            reg.switch("nope"),
            Err(RegistryError::UnknownTask(_))
        ));
        let img = random_image(reg.config(), 5);
        assert!(matches!(reg.infer(&img), Err(RegistryError::NoActiveTask)));
    }

    #[test]
    fn round_robin_routes_to_correct_heads() {
        // Class counts differ, so the logits length identifies the head.
        let tasks = [("t2", 2usize), ("t3", 3), ("t4", 4), ("t5", 5)];
        let mut reg = registry_with_tasks(&tasks);
        let cfg = *reg.config();
        for round in 0..25 {
            for (name, classes) in &tasks {
                reg.switch(name).unwrap();
                let img = random_image(&cfg, round);
                let logits = reg.infer(&img).unwrap();
                assert_eq!(logits.numel(), *classes);
            }
        }
        for (name, _) in &tasks {
            assert_eq!(reg.infer_count(name), 25);
        }
        assert_eq!(reg.switch_count(), 100);
    }

    #[test]
    fn infer_matches_direct_forward_bit_exactly() {
        let mut reg = registry_with_tasks(&[("a", 2), ("b", 3)]);
        let cfg = *reg.config();
        let img = random_image(&cfg, 7);
        reg.switch("a").unwrap();
        let via_registry = reg.infer(&img).unwrap();
        let direct = forward(&img, &cfg, reg.backbone(), Some(reg.adapter("a").unwrap())).unwrap();
        assert_eq!(via_registry, direct);
    }

    #[test]
    fn switching_leaves_no_residue() {
        let mut reg = registry_with_tasks(&[("a", 2), ("b", 3)]);
        let cfg = *reg.config();
        let img = random_image(&cfg, 7);
        reg.switch("a").unwrap();
        let before = reg.infer(&img).unwrap();
        reg.switch("b").unwrap();
        let _ = reg.infer(&img).unwrap();
        reg.switch("a").unwrap();
        let after = reg.infer(&img).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn memory_ledger_sums_exact_sizes() {
        let reg = registry_with_tasks(&[("a", 2), ("b", 3)]);
        let report = reg.memory_report();
        assert_eq!(report.backbone_bytes, backbone_file_size(reg.config()));
        let summed: usize = report.per_adapter.iter().map(|(_, b)| b).sum();
        assert_eq!(summed, report.adapter_bytes_total);
        let expected_a = adapter_file_size("a", 8, 2, 2, 2);
        assert_eq!(report.per_adapter[0], ("a".to_string(), expected_a));

        let empty = registry_with_tasks(&[]);
        assert_eq!(empty.memory_report().adapter_bytes_total, 0);
    }

    #[test]
    fn shared_backbone_beats_one_copy_per_task_at_scale() {
        // Byte arithmetic at vit-base scale; no weights are materialized.
        let base = ViTConfig::preset("vit-base").unwrap();
        let backbone = backbone_file_size(&base);
        let adapters: usize = [2, 4, 2, 14]
            .iter()
            .map(|&c| adapter_file_size("task", base.dim, base.depth, 4, c))
            .sum();
        let shared = backbone + adapters;
        let per_task = 4 * backbone;
        assert!((shared as f64) < 0.3 * per_task as f64);
    }

    #[test]
    fn backbone_identity_is_stable_across_registration() {
        let cfg = tiny_cfg();
        let weights = Arc::new(ViTWeights::init(&cfg, 1));
        let mut reg = AdapterRegistry::with_shared(cfg, Arc::clone(&weights));
        let before = Arc::as_ptr(reg.backbone());
        let report_before = reg.memory_report().backbone_bytes;
        for i in 0..4 {
            reg.register_adapter(named_adapter(&cfg, &format!("t{i}"), 2 + i, i as u64))
                .unwrap();
        }
        assert_eq!(Arc::as_ptr(reg.backbone()), before);
        assert_eq!(reg.memory_report().backbone_bytes, report_before);
        assert!(Arc::ptr_eq(reg.backbone(), &weights));
    }

    #[test]
    fn switch_latency_does_not_scale_with_backbone() {
        // Medians over many switches on a small and a much larger backbone.
        // An O(backbone) switch would differ by orders of magnitude.
        let small_cfg = tiny_cfg();
        let big_cfg = ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            dim: 128,
            heads: 8,
            depth: 8,
            mlp_ratio: 4,
        };
        let median = |cfg: &ViTConfig| -> u128 {
            let weights = ViTWeights::init(cfg, 1);
            let mut reg = AdapterRegistry::new(*cfg, weights);
            for i in 0..3 {
                reg.register_adapter(named_adapter(cfg, &format!("t{i}"), 2, i as u64))
                    .unwrap();
            }
            for i in 0..600 {
                reg.switch(&format!("t{}", i % 3)).unwrap();
            }
            reg.switch_stats().unwrap().median_ns
        };
        let med_small = median(&small_cfg).max(1);
        let med_big = median(&big_cfg);
        let params_ratio =
            big_cfg.backbone_param_count() as f64 / small_cfg.backbone_param_count() as f64;
        assert!(params_ratio > 50.0);
        assert!(
            (med_big as f64) < 25.0 * med_small as f64 + 20_000.0,
            "switch medians scaled with backbone: small {med_small}ns, big {med_big}ns"
        );
    }

    #[test]
    fn concurrent_infer_as_from_many_threads() {
        let reg = Arc::new({
            let mut r = registry_with_tasks(&[("a", 2), ("b", 3)]);
            r.switch("a").unwrap();
            r
        });
        let cfg = *reg.config();
        let img = random_image(&cfg, 3);
        let expect_a = reg.infer_as("a", &img).unwrap();
        let expect_b = reg.infer_as("b", &img).unwrap();
        let mut handles = Vec::new();
        for i in 0..8 {
            let reg = Arc::clone(&reg);
            let img = img.clone();
            let (task, expect) = if i % 2 == 0 {
                ("a", expect_a.clone())
            } else {
                ("b", expect_b.clone())
            };
            handles.push(std::thread::spawn(move || {
                for _ in 0..5 {
                    assert_eq!(reg.infer_as(task, &img).unwrap(), expect);
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(reg.infer_count("a") + reg.infer_count("b"), 42);
    }
}
