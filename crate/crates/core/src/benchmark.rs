//! Accuracy tables keyed by canonical encoding, and a synthetic generator
//! with a planted quality landscape.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::space::{decode, enumerate_space, CellSpec, SpaceKind};

/// Metric columns produced by [`synth_benchmark`], with the affine map
/// `a + b·quality` applied to each.
pub const SYNTH_METRICS: [(&str, f64, f64); 8] = [
    ("clean", 10.0, 80.0),
    ("fgsm_eps8", 2.0, 45.0),
    ("fgsm_eps4", 5.0, 60.0),
    ("pgd", 1.0, 40.0),
    ("cc_weather", 8.0, 65.0),
    ("cc_noise", 5.0, 55.0),
    ("cc_blur", 8.0, 60.0),
    ("cc_digital", 8.0, 62.0),
];

#[derive(Clone, Debug, PartialEq, Default)]
pub struct BenchmarkTable {
    metrics: Vec<String>,
    rows: BTreeMap<String, Vec<f64>>,
}

impl BenchmarkTable {
    pub fn new(metrics: Vec<String>) -> Result<Self> {
        for (i, m) in metrics.iter().enumerate() {
            if m.is_empty() || m == "encoding" {
                return Err(Error::Table {
                    row: 1,
                    msg: format!("invalid metric name \"{m}\""),
                });
            }
            if metrics[..i].contains(m) {
                return Err(Error::Table {
                    row: 1,
                    msg: format!("metric \"{m}\" declared twice"),
                });
            }
        }
        Ok(Self {
            metrics,
            rows: BTreeMap::new(),
        })
    }

    pub fn metrics(&self) -> &[String] {
        &self.metrics
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn metric_index(&self, metric: &str) -> Result<usize> {
        self.metrics
            .iter()
            .position(|m| m == metric)
            .ok_or_else(|| Error::UnknownMetric(metric.to_string()))
    }

    /// Row for a canonical encoding.
    pub fn row(&self, encoding: &str) -> Option<&[f64]> {
        self.rows.get(encoding).map(Vec::as_slice)
    }

    pub fn get(&self, encoding: &str, metric: &str) -> Result<Option<f64>> {
        let i = self.metric_index(metric)?;
        Ok(self.rows.get(encoding).map(|r| r[i]))
    }

    /// Rows in encoding order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.rows.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Inserts a row under the canonical form of `encoding`.
    pub fn insert(&mut self, encoding: &str, values: Vec<f64>) -> Result<()> {
        let key = decode(encoding)?.encode();
        if values.len() != self.metrics.len() {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: self.metrics.len(),
            });
        }
        if let Some((m, v)) = self
            .metrics
            .iter()
            .zip(&values)
            .find(|(_, v)| !(0.0..=100.0).contains(*v))
        {
            return Err(Error::Config(format!("{m} = {v} outside [0, 100]")));
        }
        if self.rows.contains_key(&key) {
            return Err(Error::Config(format!("duplicate encoding {key}")));
        }
        self.rows.insert(key, values);
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["encoding".to_string()];
        header.extend(self.metrics.iter().cloned());
        w.write_record(&header)?;
        for (enc, vals) in &self.rows {
            let mut rec = vec![enc.clone()];
            rec.extend(vals.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parses a benchmark CSV. When `schema` is given, each listed metric must
/// be a column; other columns are dropped. Row numbers in errors count the
/// header as row 1.
pub fn parse_benchmark<R: Read>(input: R, schema: Option<&[String]>) -> Result<BenchmarkTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(h) => h.map_err(|e| Error::Table { row: 1, msg: e.to_string() })?,
        None => return Err(Error::Table { row: 1, msg: "empty file".into() }),
    };
    if header.get(0).map(str::trim) != Some("encoding") {
        return Err(Error::Table {
            row: 1,
            msg: "first column must be \"encoding\"".into(),
        });
    }
    let columns: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let wanted: Vec<String> = match schema {
        Some(s) => s.to_vec(),
        None => columns.clone(),
    };
    let mut picks = Vec::with_capacity(wanted.len());
    for m in &wanted {
        let i = columns
            .iter()
            .position(|c| c == m)
            .ok_or_else(|| Error::UnknownMetric(m.clone()))?;
        picks.push(i + 1);
    }
    let mut table = BenchmarkTable::new(wanted)?;
    let mut first_seen: BTreeMap<String, usize> = BTreeMap::new();
    for (i, rec) in records.enumerate() {
        let row = i + 2;
        let bad = |msg: String| Error::Table { row, msg };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != columns.len() + 1 {
            return Err(bad(format!(
                "expected {} fields, found {}",
                columns.len() + 1,
                rec.len()
            )));
        }
        let key = decode(rec[0].trim())
            .map_err(|e| bad(e.to_string()))?
            .encode();
        if let Some(prev) = first_seen.get(&key) {
            return Err(bad(format!("duplicate encoding {key} (first at row {prev})")));
        }
        let mut values = Vec::with_capacity(picks.len());
        for (&c, m) in picks.iter().zip(table.metrics()) {
            let field = rec[c].trim();
            if field.is_empty() {
                return Err(bad(format!("missing value for {m}")));
            }
            let v: f64 = field
                .parse()
                .map_err(|_| bad(format!("unparsable value \"{field}\" for {m}")))?;
            if !(0.0..=100.0).contains(&v) {
                return Err(bad(format!("{m} = {v} outside [0, 100]")));
            }
            values.push(v);
        }
        first_seen.insert(key.clone(), row);
        table.rows.insert(key, values);
    }
    Ok(table)
}

pub fn load_benchmark(path: &Path, schema: Option<&[String]>) -> Result<BenchmarkTable> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    parse_benchmark(std::io::BufReader::new(file), schema)
}

/// Latent quality in [0, 1] assigned to each cell.
#[derive(Clone, Debug, PartialEq)]
pub enum Planted {
    /// `1 − hamming(cell, target) / num_edges`.
    Hamming { target: CellSpec },
    /// Mean over edge slots of `weights[slot][op index in pool]`, each
    /// weight in [0, 1]. NB201 only.
    Additive { weights: Vec<Vec<f64>> },
}

impl Planted {
    pub fn random_additive<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let pool = SpaceKind::Nb201.pool().len();
        let weights = (0..SpaceKind::Nb201.num_edges())
            .map(|_| (0..pool).map(|_| rng.random::<f64>()).collect())
            .collect();
        Planted::Additive { weights }
    }

    pub fn quality(&self, cell: &CellSpec) -> f64 {
        match self {
            Planted::Hamming { target } => {
                1.0 - target.hamming(cell) as f64 / cell.space().num_edges() as f64
            }
            Planted::Additive { weights } => {
                let pool = cell.space().pool();
                let ops = cell.ops();
                let sum: f64 = ops
                    .iter()
                    .zip(weights)
                    .map(|(op, w)| w[pool.iter().position(|p| p == op).expect("op in pool")])
                    .sum();
                sum / ops.len() as f64
            }
        }
    }
}

/// Synthetic table over `cells`: each metric is `a + b·quality` plus
/// uniform noise in `[−noise, noise]`, clipped to [0, 100].
pub fn synth_benchmark_for<R: Rng + ?Sized>(
    cells: &[CellSpec],
    planted: &Planted,
    noise: f64,
    rng: &mut R,
) -> Result<BenchmarkTable> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("noise must be finite and >= 0, got {noise}")));
    }
    if let Planted::Additive { weights } = planted {
        if cells.iter().any(|c| c.space() != SpaceKind::Nb201) {
            return Err(Error::Unsupported("additive landscapes are defined on nb201 only".into()));
        }
        let pool = SpaceKind::Nb201.pool().len();
        if weights.len() != SpaceKind::Nb201.num_edges()
            || weights.iter().any(|w| w.len() != pool || w.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::Config("additive weights must be 6 x 5 values in [0, 1]".into()));
        }
    }
    let mut table = BenchmarkTable::new(SYNTH_METRICS.iter().map(|m| m.0.to_string()).collect())?;
    for cell in cells {
        let q = planted.quality(cell);
        let values = SYNTH_METRICS
            .iter()
            .map(|&(_, a, b)| {
                let eps = if noise > 0.0 {
                    rng.random_range(-noise..=noise)
                } else {
                    0.0
                };
                (a + b * q + eps).clamp(0.0, 100.0)
            })
            .collect();
        table.insert(&cell.encode(), values)?;
    }
    Ok(table)
}

/// Synthetic table over the whole NB201 space.
pub fn synth_benchmark<R: Rng + ?Sized>(
    space: SpaceKind,
    planted: &Planted,
    noise: f64,
    rng: &mut R,
) -> Result<BenchmarkTable> {
    let cells = enumerate_space(space)?;
    synth_benchmark_for(&cells, planted, noise, rng)
}
