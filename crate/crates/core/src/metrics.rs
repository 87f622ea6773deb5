//! Classification evaluation: accuracy, sensitivity, precision, F1, and
//! ROC AUC with exact small-sample semantics.
//!
//! Multi-class metrics are macro-averaged (per-class, then unweighted
//! mean); classes whose denominator is zero contribute 0 and flag the
//! report. AUC uses the Mann–Whitney formulation with average ranks, so
//! tied scores count one half.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no records to evaluate")]
    EmptyInput,
    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),
    #[error("invalid record at index {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },
}

/// Averaging convention used to produce a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Two classes; sensitivity/precision are for class 1.
    Binary,
    /// Macro average over classes, one-vs-rest.
    Macro,
    /// Per-label sigmoid decisions thresholded at 0.5, macro-averaged.
    MultiLabel,
}

impl Mode {
    pub fn tag(&self) -> &'static str {
        match self {
            Mode::Binary => "binary",
            Mode::Macro => "macro",
            Mode::MultiLabel => "multi-label",
        }
    }
}

/// One evaluated example: true class index plus a probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub label: usize,
    pub scores: Vec<f64>,
}

/// Multi-label example: per-class true bits and per-class sigmoid scores.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLabelRecord {
    pub labels: Vec<bool>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub sen: f64,
    pub pre: f64,
    pub f1s: f64,
    pub support: usize,
    /// Set when a zero denominator forced a metric to 0.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mode: Mode,
    pub acc: f64,
    pub sen: f64,
    pub pre: f64,
    pub f1s: f64,
    /// None when AUC is undefined for the input (e.g. a single class).
    pub auc: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    /// Any class had a zero-denominator metric or AUC was undefined.
    pub degenerate: bool,
}

impl MetricsReport {
    /// Plain `key=value` lines for files and CLI output.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("mode={}\n", self.mode.tag()));
        out.push_str(&format!("acc={:.6}\n", self.acc));
        out.push_str(&format!("sen={:.6}\n", self.sen));
        out.push_str(&format!("pre={:.6}\n", self.pre));
        out.push_str(&format!("f1s={:.6}\n", self.f1s));
        match self.auc {
            Some(auc) => out.push_str(&format!("auc={auc:.6}\n")),
            None => out.push_str("auc=undefined\n"),
        }
        out.push_str(&format!("degenerate={}\n", self.degenerate));
        for c in &self.per_class {
            out.push_str(&format!(
                "class{}.sen={:.6} class{}.pre={:.6} class{}.f1s={:.6} class{}.support={}\n",
                c.class, c.sen, c.class, c.pre, c.class, c.f1s, c.class, c.support
            ));
        }
        out
    }
}

/// Predicted class: argmax of the score vector, ties broken toward the
/// lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn validate(records: &[EvalRecord], probability: bool) -> Result<usize, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let k = records[0].scores.len();
    for (index, r) in records.iter().enumerate() {
        if r.scores.len() != k || k == 0 {
            return Err(MetricsError::InvalidRecord {
                index,
                reason: format!("expected {k} scores, got {}", r.scores.len()),
            });
        }
        if r.label >= k {
            return Err(MetricsError::InvalidRecord {
                index,
                reason: format!("label {} out of range for {k} classes", r.label),
            });
        }
        if probability {
            let sum: f64 = r.scores.iter().sum();
            if r.scores.iter().any(|&s| s < 0.0) || (sum - 1.0).abs() > 1e-3 {
                return Err(MetricsError::InvalidRecord {
                    index,
                    reason: format!("scores must be a probability vector (sum {sum})"),
                });
            }
        }
    }
    Ok(k)
}

struct Confusion {
    tp: usize,
    fp: usize,
    fne: usize,
}

fn class_metrics(class: usize, c: &Confusion, support: usize) -> ClassMetrics {
    let mut flagged = false;
    let sen = if c.tp + c.fne == 0 {
        flagged = true;
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fne) as f64
    };
    let pre = if c.tp + c.fp == 0 {
        flagged = true;
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let f1s = if sen + pre == 0.0 {
        flagged = true;
        0.0
    } else {
        2.0 * sen * pre / (sen + pre)
    };
    ClassMetrics {
        class,
        sen,
        pre,
        f1s,
        support,
        flagged,
    }
}

/// Accuracy, sensitivity, precision, and F1 from argmax predictions.
///
/// `Binary` reports the class-1 metrics; `Macro` averages per-class
/// metrics unweighted. AUC is not computed here; see [`auc`] and
/// [`evaluate`].
pub fn confusion_metrics(records: &[EvalRecord], mode: Mode) -> Result<MetricsReport, MetricsError> {
    let k = validate(records, true)?;
    if mode == Mode::Binary && k != 2 {
        return Err(MetricsError::InvalidRecord {
            index: 0,
            reason: format!("binary mode needs 2 classes, got {k}"),
        });
    }
    let mut per_class_conf: Vec<Confusion> = (0..k)
        .map(|_| Confusion {
            tp: 0,
            fp: 0,
            fne: 0,
        })
        .collect();
    let mut support = vec![0usize; k];
    let mut correct = 0usize;
    for r in records {
        let pred = argmax(&r.scores);
        support[r.label] += 1;
        if pred == r.label {
            correct += 1;
            per_class_conf[r.label].tp += 1;
        } else {
            per_class_conf[r.label].fne += 1;
            per_class_conf[pred].fp += 1;
        }
    }
    let per_class: Vec<ClassMetrics> = per_class_conf
        .iter()
        .enumerate()
        .map(|(c, conf)| class_metrics(c, conf, support[c]))
        .collect();
    let acc = correct as f64 / records.len() as f64;
    let (sen, pre, f1s) = match mode {
        Mode::Binary => {
            let c = &per_class[1];
            (c.sen, c.pre, c.f1s)
        }
        _ => {
            let n = per_class.len() as f64;
            (
                per_class.iter().map(|c| c.sen).sum::<f64>() / n,
                per_class.iter().map(|c| c.pre).sum::<f64>() / n,
                per_class.iter().map(|c| c.f1s).sum::<f64>() / n,
            )
        }
    };
    let degenerate = per_class.iter().any(|c| c.flagged);
    Ok(MetricsReport {
        mode,
        acc,
        sen,
        pre,
        f1s,
        auc: None,
        per_class,
        degenerate,
    })
}

/// Multi-label confusion metrics: each score is thresholded at 0.5 and the
/// per-label metrics are macro-averaged. Accuracy is label-wise (the mean
/// correctness over every (record, label) decision).
pub fn confusion_metrics_multilabel(
    records: &[MultiLabelRecord],
) -> Result<MetricsReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let k = records[0].scores.len();
    for (index, r) in records.iter().enumerate() {
        if r.scores.len() != k || r.labels.len() != k || k == 0 {
            return Err(MetricsError::InvalidRecord {
                index,
                reason: "label/score lengths disagree".into(),
            });
        }
    }
    let mut per_class = Vec::with_capacity(k);
    let mut correct = 0usize;
    for c in 0..k {
        let mut conf = Confusion {
            tp: 0,
            fp: 0,
            fne: 0,
        };
        let mut support = 0usize;
        for r in records {
            let pred = r.scores[c] >= 0.5;
            let truth = r.labels[c];
            if truth {
                support += 1;
            }
            match (pred, truth) {
                (true, true) => conf.tp += 1,
                (true, false) => conf.fp += 1,
                (false, true) => conf.fne += 1,
                (false, false) => {}
            }
            if pred == truth {
                correct += 1;
            }
        }
        per_class.push(class_metrics(c, &conf, support));
    }
    let n = k as f64;
    let degenerate = per_class.iter().any(|c| c.flagged);
    Ok(MetricsReport {
        mode: Mode::MultiLabel,
        acc: correct as f64 / (records.len() * k) as f64,
        sen: per_class.iter().map(|c| c.sen).sum::<f64>() / n,
        pre: per_class.iter().map(|c| c.pre).sum::<f64>() / n,
        f1s: per_class.iter().map(|c| c.f1s).sum::<f64>() / n,
        auc: None,
        per_class,
        degenerate,
    })
}

/// Mann–Whitney AUC of one binary problem with average-rank tie handling
/// (tied positive/negative pairs count one half).
fn binary_auc(items: &[(f64, bool)]) -> Result<f64, MetricsError> {
    let n_pos = items.iter().filter(|(_, p)| *p).count();
    let n_neg = items.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::UndefinedAuc(format!(
            "need both classes present, got {n_pos} positive / {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&i, &j| items[i].0.partial_cmp(&items[j].0).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && items[order[j + 1]].0 == items[order[i]].0 {
            j += 1;
        }
        // Ranks i+1..=j+1 share the average rank.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if items[idx].1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// ROC AUC. Binary mode ranks class-1 scores; macro mode averages
/// one-vs-rest AUCs and requires every class to appear at least once.
/// Single-class input is an error, never a silent 0 or 1.
pub fn auc(records: &[EvalRecord], mode: Mode) -> Result<f64, MetricsError> {
    let k = validate(records, false)?;
    match mode {
        Mode::Binary => {
            if k != 2 {
                return Err(MetricsError::InvalidRecord {
                    index: 0,
                    reason: format!("binary mode needs 2 classes, got {k}"),
                });
            }
            let items: Vec<(f64, bool)> = records
                .iter()
                .map(|r| (r.scores[1], r.label == 1))
                .collect();
            binary_auc(&items)
        }
        Mode::Macro => {
            let mut sum = 0.0;
            for c in 0..k {
                let items: Vec<(f64, bool)> =
                    records.iter().map(|r| (r.scores[c], r.label == c)).collect();
                sum += binary_auc(&items).map_err(|_| {
                    MetricsError::UndefinedAuc(format!("class {c} absent from records"))
                })?;
            }
            Ok(sum / k as f64)
        }
        Mode::MultiLabel => Err(MetricsError::InvalidRecord {
            index: 0,
            reason: "use auc_multilabel for multi-label records".into(),
        }),
    }
}

/// Mean per-label AUC for multi-label records.
pub fn auc_multilabel(records: &[MultiLabelRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let k = records[0].scores.len();
    let mut sum = 0.0;
    for c in 0..k {
        let items: Vec<(f64, bool)> = records
            .iter()
            .map(|r| (r.scores[c], r.labels[c]))
            .collect();
        sum += binary_auc(&items)
            .map_err(|_| MetricsError::UndefinedAuc(format!("label {c} is single-class")))?;
    }
    Ok(sum / k as f64)
}

/// Confusion metrics plus AUC in one report. An undefined AUC (degenerate
/// class composition) leaves `auc` as `None` and flags the report instead
/// of failing, so evaluation loops survive lopsided batches.
pub fn evaluate(records: &[EvalRecord], mode: Mode) -> Result<MetricsReport, MetricsError> {
    let mut report = confusion_metrics(records, mode)?;
    match auc(records, mode) {
        Ok(v) => report.auc = Some(v),
        Err(MetricsError::UndefinedAuc(_)) => {
            report.auc = None;
            report.degenerate = true;
        }
        Err(e) => return Err(e),
    }
    Ok(report)
}
