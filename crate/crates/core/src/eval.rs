//! Rank correlation, robustness summaries and feature-distance reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::benchmark::BenchmarkTable;
use crate::engine::forward_trace;
use crate::error::{Error, Result};
use crate::plan::NetworkPlan;
use crate::space::decode;
use crate::tensor::{l2_norm, Batch, ParameterSet, Tensor};

/// 1-based ranks with ties sharing the average of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && xs[idx[j]] == xs[idx[i]] {
            j += 1;
        }
        // positions i..j (0-based) share rank mean(i+1 ..= j)
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 pairs, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::UndefinedCorrelation("input contains NaN".into()));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
        .ok_or_else(|| Error::UndefinedCorrelation("constant input".into()))
}

/// Harmonic mean of clean and robust accuracy; 0 when both are 0.
pub fn hrs(clean: f64, robust: f64) -> f64 {
    if clean + robust == 0.0 {
        return 0.0;
    }
    2.0 * clean * robust / (clean + robust)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(Error::Shape(format!(
            "logits {shape:?} vs {} labels",
            labels.len()
        )));
    }
    let k = shape[1];
    let correct = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best == y
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDistances {
    pub id: String,
    /// Keyed by perturbation name.
    pub per_perturbation: BTreeMap<String, DistanceStats>,
    /// Standard deviation of the per-perturbation mean distances.
    pub cross_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDistanceReport {
    pub layers: Vec<LayerDistances>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per encoder layer and perturbation: mean and std over the batch of
/// `‖z_m(x) − z_m(x')‖`, plus the spread of those means across
/// perturbations. Standard deviations are population (1/n) estimates.
pub fn feature_distance_report(
    plan: &NetworkPlan,
    params: &ParameterSet,
    clean: &Batch,
    perturbed: &BTreeMap<String, Tensor>,
) -> Result<FeatureDistanceReport> {
    let base = forward_trace(plan, params, clean.images())?;
    let encoder = plan.num_layers() - 1;
    let mut layers: Vec<LayerDistances> = (0..encoder)
        .map(|m| LayerDistances {
            id: plan.layers()[m].id.clone(),
            per_perturbation: BTreeMap::new(),
            cross_std: 0.0,
        })
        .collect();
    for (name, images) in perturbed {
        if images.shape() != clean.images().shape() {
            return Err(Error::Shape(format!(
                "perturbation {name}: {:?} vs clean {:?}",
                images.shape(),
                clean.images().shape()
            )));
        }
        let trace = forward_trace(plan, params, images)?;
        for (m, layer) in layers.iter_mut().enumerate() {
            let a = base.layer_output(m);
            let b = trace.layer_output(m);
            let d: Vec<f64> = (0..clean.len())
                .map(|s| {
                    let diff: Vec<f64> = a.sample(s).iter().zip(b.sample(s)).map(|(x, y)| x - y).collect();
                    l2_norm(&diff)
                })
                .collect();
            let (mean, std) = mean_std(&d);
            layer.per_perturbation.insert(name.clone(), DistanceStats { mean, std });
        }
    }
    for layer in &mut layers {
        let means: Vec<f64> = layer.per_perturbation.values().map(|s| s.mean).collect();
        if !means.is_empty() {
            layer.cross_std = mean_std(&means).1;
        }
    }
    Ok(FeatureDistanceReport { layers })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCorrelation {
    pub metric: String,
    pub rho: Option<f64>,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub intersection: usize,
    pub metrics: Vec<MetricCorrelation>,
    /// Mean of the defined ρ values.
    pub average: Option<f64>,
}

impl CorrelationReport {
    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let width = self
            .metrics
            .iter()
            .map(|m| m.metric.len())
            .chain(["metric".len(), "Avg.".len()])
            .max()
            .unwrap_or(6);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>9}  {:>6}", "metric", "rho", "n");
        for m in &self.metrics {
            let rho = match m.rho {
                Some(r) => format!("{r:>9.6}"),
                None => format!("{:>9}", "undef"),
            };
            let _ = writeln!(s, "{:<width$}  {rho}  {:>6}", m.metric, m.n);
        }
        let avg = match self.average {
            Some(a) => format!("{a:>9.6}"),
            None => format!("{:>9}", "undef"),
        };
        let _ = writeln!(s, "{:<width$}  {avg}  {:>6}", "Avg.", self.intersection);
        let _ = writeln!(s, "intersection: {}", self.intersection);
        s
    }
}

/// ρ between proxy scores and each metric over the encodings present in
/// both. Scores are keyed by encoding (canonicalized when decodable). A
/// metric whose ρ is undefined is reported without affecting the others.
pub fn correlate(
    scores: &[(String, f64)],
    table: &BenchmarkTable,
    metrics: &[String],
) -> Result<CorrelationReport> {
    let cols = metrics
        .iter()
        .map(|m| table.metric_index(m))
        .collect::<Result<Vec<_>>>()?;
    let mut seen = BTreeMap::new();
    let mut pairs: Vec<(f64, &[f64])> = Vec::new();
    for (i, (enc, score)) in scores.iter().enumerate() {
        let key = decode(enc).map(|c| c.encode()).unwrap_or_else(|_| enc.clone());
        if let Some(prev) = seen.insert(key.clone(), i) {
            return Err(Error::Config(format!(
                "encoding {key} scored twice (entries {} and {})",
                prev + 1,
                i + 1
            )));
        }
        if let Some(row) = table.row(&key) {
            pairs.push((*score, row));
        }
    }
    if pairs.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "only {} encodings shared between scores and table",
            pairs.len()
        )));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut out = Vec::with_capacity(metrics.len());
    for (m, &c) in metrics.iter().zip(&cols) {
        let ys: Vec<f64> = pairs.iter().map(|p| p.1[c]).collect();
        let (rho, error) = match spearman(&xs, &ys) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        out.push(MetricCorrelation {
            metric: m.clone(),
            rho,
            n: pairs.len(),
            error,
        });
    }
    let defined: Vec<f64> = out.iter().filter_map(|m| m.rho).collect();
    let average = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(CorrelationReport {
        intersection: pairs.len(),
        metrics: out,
        average,
    })
}
