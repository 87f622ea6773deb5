//! Command-line front end: backbone/adapter management, toy-scale adapter
//! training, inference, the multi-task registry, and the deployment
//! simulator.

mod image;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use vitlora_core::deploy::{self, LoadCostModel, Strategy, WorkloadOrder};
use vitlora_core::metrics::{self, EvalRecord, Mode, MultiLabelRecord};
use vitlora_core::train::{self, LossKind, SyntheticTask, TrainConfig};
use vitlora_core::{
    count_trainable, forward, forward_features, load_adapter, load_backbone, save_adapter,
    save_backbone, trainable_fraction, AdapterRegistry, Tensor, ViTConfig, ViTWeights,
};

#[derive(Parser)]
#[command(
    name = "vitlora",
    version,
    about = "Frozen-ViT runtime with hot-swappable low-rank task adapters"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Named preset: vit-base, vit-huge, vit-giga, or vit-tiny.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mlp_ratio: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ViTConfig> {
        let mut cfg = match &self.preset {
            Some(name) => ViTConfig::preset(name).ok_or_else(|| {
                anyhow!(
                    "unknown preset '{name}' (expected one of {})",
                    ViTConfig::preset_names().join(", ")
                )
            })?,
            None => ViTConfig::preset("vit-tiny").unwrap(),
        };
        if let Some(v) = self.image_size {
            cfg.image_size = v;
        }
        if let Some(v) = self.patch_size {
            cfg.patch_size = v;
        }
        if let Some(v) = self.channels {
            cfg.channels = v;
        }
        if let Some(v) = self.dim {
            cfg.dim = v;
        }
        if let Some(v) = self.depth {
            cfg.depth = v;
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
        if let Some(v) = self.mlp_ratio {
            cfg.mlp_ratio = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a seeded random-init backbone file.
    InitBackbone {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an adapter on a synthetic task against a frozen backbone.
    Train {
        #[arg(long)]
        backbone: PathBuf,
        /// Synthetic task spec, e.g. "classes=2,seed=7,samples=250,noise=0.1,margin=1.0".
        #[arg(long)]
        task_spec: String,
        #[arg(long, default_value_t = 4)]
        rank: usize,
        #[arg(long, default_value_t = 3e-4)]
        lr: f64,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Loss: "softmax" (default) or "sigmoid" (per-class, multi-label style).
        #[arg(long, default_value = "softmax")]
        loss: String,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-epoch history file (line-delimited key=value records).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Run one image through a backbone, with or without an adapter.
    Infer {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Raw f32 tensor file (u32 C,H,W header) or binary PGM.
        #[arg(long)]
        input: PathBuf,
    },
    /// Load adapters over one backbone and replay a task workload.
    Registry {
        #[arg(long)]
        backbone: PathBuf,
        /// Comma-separated adapter files.
        #[arg(long, value_delimiter = ',')]
        adapters: Vec<PathBuf>,
        /// "in-order:<images_per_task>" or "random:<total>:<seed>".
        #[arg(long)]
        workload: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Deployment simulator: compare serving strategies on one workload.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// "all" or a comma-separated subset of
        /// reload-per-task,preload-all,melo-shared.
        #[arg(long, default_value = "all")]
        strategies: String,
        #[arg(long, value_delimiter = ',', default_values_t = ["in-order".to_string(), "random".to_string()])]
        orderings: Vec<String>,
        /// Class counts of the simulated tasks.
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4, 2, 14])]
        classes: Vec<usize>,
        #[arg(long, default_value_t = 25)]
        images_per_task: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Synthetic per-byte load cost added to the ledger for every file
        /// load; 0 disables it (pure wall clock).
        #[arg(long, default_value_t = 1.0)]
        load_cost_ns_per_byte: f64,
        /// Where artifacts are materialized; a temp dir when omitted.
        #[arg(long)]
        workdir: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Trainable-parameter accounting for a config/rank/classes triple.
    CountParams {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 4)]
        rank: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
    },
    /// Score predictions against labels.
    Eval {
        /// One record per line: space-separated scores.
        #[arg(long)]
        pred: PathBuf,
        /// One label per line: a class index, or space-separated 0/1 flags
        /// in multi-label mode.
        #[arg(long)]
        labels: PathBuf,
        /// "binary", "macro", or "multi-label"; inferred from the data when
        /// omitted.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::InitBackbone { config, seed, out } => init_backbone(&config, seed, &out),
        Cmd::Train {
            backbone,
            task_spec,
            rank,
            lr,
            epochs,
            batch_size,
            seed,
            loss,
            out,
            history,
        } => cmd_train(
            &backbone,
            &task_spec,
            rank,
            lr,
            epochs,
            batch_size,
            seed,
            &loss,
            &out,
            history.as_deref(),
        ),
        Cmd::Infer {
            backbone,
            adapter,
            input,
        } => cmd_infer(&backbone, adapter.as_deref(), &input),
        Cmd::Registry {
            backbone,
            adapters,
            workload,
            report,
        } => cmd_registry(&backbone, &adapters, &workload, report.as_deref()),
        Cmd::Bench {
            config,
            strategies,
            orderings,
            classes,
            images_per_task,
            seed,
            load_cost_ns_per_byte,
            workdir,
            report,
        } => cmd_bench(
            &config,
            &strategies,
            &orderings,
            &classes,
            images_per_task,
            seed,
            load_cost_ns_per_byte,
            workdir.as_deref(),
            report.as_deref(),
        ),
        Cmd::CountParams {
            config,
            rank,
            classes,
        } => cmd_count_params(&config, rank, classes),
        Cmd::Eval {
            pred,
            labels,
            mode,
            out,
        } => cmd_eval(&pred, &labels, mode.as_deref(), out.as_deref()),
    }
}

fn init_backbone(config: &ConfigArgs, seed: u64, out: &Path) -> Result<()> {
    let cfg = config.resolve()?;
    let weights = ViTWeights::init(&cfg, seed);
    save_backbone(&cfg, &weights, out)?;
    println!(
        "wrote backbone dim={} depth={} heads={} params={} bytes={} to {}",
        cfg.dim,
        cfg.depth,
        cfg.heads,
        cfg.backbone_param_count(),
        std::fs::metadata(out)?.len(),
        out.display()
    );
    Ok(())
}

fn parse_task_spec(spec: &str) -> Result<SyntheticTask> {
    let mut task = SyntheticTask::new(2, 0);
    for part in spec.split(',').filter(|s| !s.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| anyhow!("task-spec entry '{part}' is not key=value"))?;
        match key.trim() {
            "classes" => task.num_classes = value.parse()?,
            "seed" => task.seed = value.parse()?,
            "samples" => task.samples = value.parse()?,
            "noise" => task.noise = value.parse()?,
            "margin" => task.margin = value.parse()?,
            other => bail!("unknown task-spec key '{other}'"),
        }
    }
    Ok(task)
}

fn parse_loss(name: &str) -> Result<LossKind> {
    match name {
        "softmax" => Ok(LossKind::SoftmaxCrossEntropy),
        "sigmoid" => Ok(LossKind::SigmoidPerClass),
        other => bail!("unknown loss '{other}' (expected softmax or sigmoid)"),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    backbone: &Path,
    task_spec: &str,
    rank: usize,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    loss: &str,
    out: &Path,
    history_path: Option<&Path>,
) -> Result<()> {
    let (cfg, weights) = load_backbone(backbone)?;
    let task = parse_task_spec(task_spec)?;
    let train_cfg = TrainConfig {
        learning_rate: lr,
        epochs,
        batch_size,
        seed,
        rank,
        loss: parse_loss(loss)?,
        ..TrainConfig::default()
    };
    let (adapter, history) = train::train(&task, &train_cfg, &cfg, &weights)?;
    save_adapter(&adapter, out)?;

    let t = history.trainable;
    let frac = trainable_fraction(&cfg, rank, task.num_classes);
    println!("trainable.lora={}", t.lora);
    println!("trainable.head={}", t.head);
    println!("trainable.total={}", t.total);
    println!("backbone.params={}", cfg.backbone_param_count());
    println!("trainable.fraction={:.6} ({:.4}%)", frac, frac * 100.0);
    println!(
        "best_epoch={} best_val_{}={:.4}",
        history.best_epoch, history.selection, history.best_val_metric
    );
    println!(
        "wrote adapter '{}' ({} bytes) to {}",
        adapter.task_name,
        std::fs::metadata(out)?.len(),
        out.display()
    );
    if let Some(path) = history_path {
        history.write(path)?;
        println!("wrote history to {}", path.display());
    }
    Ok(())
}

fn cmd_infer(backbone: &Path, adapter: Option<&Path>, input: &Path) -> Result<()> {
    let (cfg, weights) = load_backbone(backbone)?;
    let img = image::read_image(input)?;
    match adapter {
        Some(path) => {
            let adapter = load_adapter(path)?;
            let logits = forward(&img, &cfg, &weights, Some(&adapter))?;
            let scores: Vec<f64> = logits.data().iter().map(|&v| f64::from(v)).collect();
            println!(
                "logits=[{}]",
                scores
                    .iter()
                    .map(|v| format!("{v:.6}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            println!("predicted_class={}", metrics::argmax(&scores));
        }
        None => {
            // No adapter means no task head; report the backbone features.
            let feats = forward_features(&img, &cfg, &weights, None)?;
            println!(
                "features=[{}]",
                feats
                    .data()
                    .iter()
                    .map(|v| format!("{v:.6}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
        }
    }
    Ok(())
}

enum WorkloadSpec {
    InOrder { per_task: usize },
    Random { total: usize, seed: u64 },
}

fn parse_workload(spec: &str) -> Result<WorkloadSpec> {
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        ["in-order", n] => Ok(WorkloadSpec::InOrder {
            per_task: n.parse()?,
        }),
        ["random", n, seed] => Ok(WorkloadSpec::Random {
            total: n.parse()?,
            seed: seed.parse()?,
        }),
        _ => bail!("workload must be 'in-order:<per_task>' or 'random:<total>:<seed>'"),
    }
}

fn cmd_registry(
    backbone: &Path,
    adapters: &[PathBuf],
    workload: &str,
    report: Option<&Path>,
) -> Result<()> {
    if adapters.is_empty() {
        bail!("at least one adapter is required");
    }
    let (cfg, weights) = load_backbone(backbone)?;
    let mut registry = AdapterRegistry::new(cfg, weights);
    for path in adapters {
        let name = registry.register(path)?;
        println!("registered '{name}' from {}", path.display());
    }
    let tasks: Vec<String> = registry.tasks().map(str::to_string).collect();

    let sequence: Vec<String> = match parse_workload(workload)? {
        WorkloadSpec::InOrder { per_task } => tasks
            .iter()
            .flat_map(|t| std::iter::repeat(t.clone()).take(per_task))
            .collect(),
        WorkloadSpec::Random { total, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..total)
                .map(|_| tasks[rand::Rng::gen_range(&mut rng, 0..tasks.len())].clone())
                .collect()
        }
    };

    let mut image_rng = ChaCha8Rng::seed_from_u64(0xACE);
    for task in &sequence {
        if registry.active_task() != Some(task.as_str()) {
            registry.switch(task)?;
        }
        let img = Tensor::randn(
            &[cfg.channels, cfg.image_size, cfg.image_size],
            1.0,
            &mut image_rng,
        );
        registry.infer(&img)?;
    }

    let mem = registry.memory_report();
    let mut lines = String::new();
    lines.push_str(&format!("tasks={}\n", tasks.join(",")));
    lines.push_str(&format!("requests={}\n", sequence.len()));
    lines.push_str(&format!("backbone_bytes={}\n", mem.backbone_bytes));
    lines.push_str(&format!(
        "adapter_bytes_total={}\n",
        mem.adapter_bytes_total
    ));
    for (name, bytes) in &mem.per_adapter {
        lines.push_str(&format!("adapter.{name}.bytes={bytes}\n"));
    }
    for task in &tasks {
        lines.push_str(&format!(
            "inferences.{task}={}\n",
            registry.infer_count(task)
        ));
    }
    if let Some(stats) = registry.switch_stats() {
        lines.push_str(&format!(
            "switches={} switch_min_ns={} switch_median_ns={} switch_mean_ns={}\n",
            stats.count, stats.min_ns, stats.median_ns, stats.mean_ns
        ));
    } else {
        lines.push_str("switches=0\n");
    }
    print!("{lines}");
    if let Some(path) = report {
        std::fs::write(path, &lines)?;
        println!("wrote report to {}", path.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    config: &ConfigArgs,
    strategies: &str,
    orderings: &[String],
    classes: &[usize],
    images_per_task: usize,
    seed: u64,
    load_cost_ns_per_byte: f64,
    workdir: Option<&Path>,
    report_path: Option<&Path>,
) -> Result<()> {
    let cfg = config.resolve()?;
    let strategies: Vec<Strategy> = if strategies == "all" {
        Strategy::all().to_vec()
    } else {
        strategies
            .split(',')
            .map(|s| s.parse().map_err(|e: String| anyhow!(e)))
            .collect::<Result<_>>()?
    };
    let orderings: Vec<WorkloadOrder> = orderings
        .iter()
        .map(|s| s.parse().map_err(|e: String| anyhow!(e)))
        .collect::<Result<_>>()?;
    let load_cost = (load_cost_ns_per_byte > 0.0).then_some(LoadCostModel {
        ns_per_byte: load_cost_ns_per_byte,
    });

    let dir = match workdir {
        Some(d) => d.to_path_buf(),
        None => {
            let d = std::env::temp_dir().join(format!("vitlora-bench-{}", std::process::id()));
            std::fs::create_dir_all(&d)?;
            d
        }
    };
    let tasks: Vec<(String, usize)> = classes
        .iter()
        .enumerate()
        .map(|(i, &c)| (format!("task{i}-{c}c"), c))
        .collect();
    eprintln!(
        "materializing artifacts for {} tasks under {}",
        tasks.len(),
        dir.display()
    );
    let artifacts = deploy::prepare_artifacts(&dir, &cfg, seed, &tasks)?;
    let report = deploy::run_bench_suite(
        &artifacts,
        &strategies,
        &orderings,
        images_per_task,
        seed,
        load_cost,
    )?;
    print!("{report}");
    if let Some(path) = report_path {
        std::fs::write(path, report.to_kv())?;
        println!("wrote report to {}", path.display());
    }
    Ok(())
}

fn cmd_count_params(config: &ConfigArgs, rank: usize, classes: usize) -> Result<()> {
    let cfg = config.resolve()?;
    if rank == 0 || rank >= cfg.dim {
        bail!("rank {rank} out of range for dim {}", cfg.dim);
    }
    let c = count_trainable(&cfg, rank, classes);
    let frac = trainable_fraction(&cfg, rank, classes);
    println!("lora={}", c.lora);
    println!("head={}", c.head);
    println!("total={}", c.total);
    println!("backbone={}", cfg.backbone_param_count());
    println!("trainable_fraction={:.6} ({:.4}%)", frac, frac * 100.0);
    Ok(())
}

fn cmd_eval(pred: &Path, labels: &Path, mode: Option<&str>, out: Option<&Path>) -> Result<()> {
    let pred_text = std::fs::read_to_string(pred)?;
    let labels_text = std::fs::read_to_string(labels)?;
    let scores: Vec<Vec<f64>> = pred_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| t.parse::<f64>().context("bad score"))
                .collect()
        })
        .collect::<Result<_>>()?;
    let label_rows: Vec<Vec<String>> = labels_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect();
    if scores.len() != label_rows.len() {
        bail!(
            "{} prediction rows vs {} label rows",
            scores.len(),
            label_rows.len()
        );
    }
    if scores.is_empty() {
        bail!("no records to evaluate");
    }

    let multilabel_data = label_rows.first().map(|r| r.len() > 1).unwrap_or(false);
    let mode = match mode {
        Some("binary") => Mode::Binary,
        Some("macro") => Mode::Macro,
        Some("multi-label") => Mode::MultiLabel,
        Some(other) => bail!("unknown mode '{other}'"),
        None if multilabel_data => Mode::MultiLabel,
        None if scores[0].len() == 2 => Mode::Binary,
        None => Mode::Macro,
    };

    let text = if mode == Mode::MultiLabel {
        let records: Vec<MultiLabelRecord> = scores
            .into_iter()
            .zip(label_rows)
            .map(|(s, l)| {
                let labels: Vec<bool> = l.iter().map(|v| v != "0").collect();
                MultiLabelRecord { labels, scores: s }
            })
            .collect();
        let mut report = metrics::confusion_metrics_multilabel(&records)?;
        match metrics::auc_multilabel(&records) {
            Ok(v) => report.auc = Some(v),
            Err(_) => report.degenerate = true,
        }
        report.to_kv()
    } else {
        let records: Vec<EvalRecord> = scores
            .into_iter()
            .zip(label_rows)
            .map(|(s, l)| {
                let label: usize = l[0].parse().context("bad label")?;
                Ok(EvalRecord { label, scores: s })
            })
            .collect::<Result<_>>()?;
        metrics::evaluate(&records, mode)?.to_kv()
    };
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(path, &text)?;
    }
    Ok(())
}
