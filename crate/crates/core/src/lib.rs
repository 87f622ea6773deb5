//! Frozen-ViT inference runtime with per-task low-rank adapters.
//!
//! One shared Vision Transformer backbone stays immutable; small per-task
//! plug-ins (low-rank factors on every attention layer's query/value
//! projections plus a classifier head) are trained, stored, hot-swapped,
//! and benchmarked against full-model deployment strategies.

pub mod deploy;
pub mod lora;
pub mod metrics;
pub mod registry;
pub mod tensor;
pub mod train;
pub mod vit;
pub mod wire;

pub use deploy::{
    build_workload, prepare_artifacts, run_bench, run_bench_suite, BenchReport, BenchRow,
    BenchScenario, DeployArtifacts, LoadCostModel, Strategy, WorkItem, WorkloadOrder,
};
pub use lora::{
    adapter_file_size, apply_lora, count_trainable, init_adapter, load_adapter, merge_adapter,
    save_adapter, trainable_fraction, unmerge_adapter, LoraAdapter, LoraPair, MergeSlot,
    TrainableCount,
};
pub use metrics::{
    auc, confusion_metrics, evaluate, EvalRecord, MetricsReport, Mode, MultiLabelRecord,
};
pub use registry::{AdapterRegistry, MemoryReport, SwitchReceipt, SwitchStats};
pub use tensor::{Tensor, TensorError};
pub use train::{
    full_finetune_baseline, lora_backward, train, Example, Gradients, Head, LossKind,
    SyntheticTask, TrainConfig, TrainHistory, TrainModel,
};
pub use vit::{
    backbone_file_size, forward, forward_features, load_backbone, patchify_embed, save_backbone,
    ProjectionKind, ViTConfig, ViTWeights,
};
