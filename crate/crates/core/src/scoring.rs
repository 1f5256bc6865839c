//! Batch scoring of many encodings with order-independent seeding, plus the
//! score-table CSV and breakdown JSON-lines formats.

use std::io::{BufRead, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::init_params;
use crate::error::{Error, Result};
use crate::plan::{build_plan, StackConfig};
use crate::proxies::{score_with, ProxyBreakdown, ProxyConfig, ProxyKind};
use crate::space::decode;
use crate::tensor::Batch;

pub const SCORE_HEADER: [&str; 6] = ["encoding", "proxy", "score", "M", "seed", "status"];

/// Per-candidate seed: the first eight bytes (little-endian) of
/// `sha256(global_seed_le ‖ encoding)`.
pub fn derive_seed(global_seed: u64, encoding: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(encoding.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub encoding: String,
    pub proxy: ProxyKind,
    pub score: Option<f64>,
    #[serde(rename = "M")]
    pub num_layers: Option<usize>,
    pub seed: u64,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
    #[serde(skip)]
    pub breakdown: Option<ProxyBreakdown>,
}

impl ScoreRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Settings shared by every candidate of a [`score_many`] run.
#[derive(Clone, Debug)]
pub struct ScoreSettings {
    pub proxy: ProxyKind,
    /// `config.seed` is the global seed; each candidate gets its own
    /// derived seed for initialization and input noise.
    pub config: ProxyConfig,
    pub stack: StackConfig,
    /// Worker threads; 0 uses the rayon default.
    pub jobs: usize,
}

/// Scores a single encoding, returning the first error encountered.
pub fn try_score_one(encoding: &str, settings: &ScoreSettings, batch: Option<&Batch>) -> Result<ScoreRow> {
    let cell = decode(encoding)?;
    let key = cell.encode();
    let seed = derive_seed(settings.config.seed, &key);
    let plan = build_plan(&cell, &settings.stack)?;
    let params = settings.proxy.needs_params().then(|| init_params(&plan, seed));
    let config = ProxyConfig {
        seed,
        ..settings.config
    };
    let (score, breakdown) = score_with(settings.proxy, &plan, params.as_ref(), batch, &config)?;
    let breakdown = breakdown.map(|mut b| {
        b.encoding = Some(key.clone());
        b
    });
    Ok(ScoreRow {
        encoding: key,
        proxy: settings.proxy,
        score: Some(score),
        num_layers: Some(plan.num_layers()),
        seed,
        status: "ok".into(),
        breakdown,
    })
}

/// Scores a single encoding. Errors are captured in the row; an encoding
/// that does not decode is kept verbatim.
pub fn score_one(encoding: &str, settings: &ScoreSettings, batch: Option<&Batch>) -> ScoreRow {
    try_score_one(encoding, settings, batch).unwrap_or_else(|e| {
        let key = decode(encoding)
            .map(|c| c.encode())
            .unwrap_or_else(|_| encoding.to_string());
        ScoreRow {
            seed: derive_seed(settings.config.seed, &key),
            encoding: key,
            proxy: settings.proxy,
            score: None,
            num_layers: None,
            status: format!("failed: {e}"),
            breakdown: None,
        }
    })
}

/// Scores every encoding, in parallel when `jobs != 1`. Rows come back in
/// input order and each depends only on its own encoding and the global
/// seed, so results do not change with `jobs` or input order.
pub fn score_many<S: AsRef<str> + Sync>(
    encodings: &[S],
    settings: &ScoreSettings,
    batch: Option<&Batch>,
) -> Result<Vec<ScoreRow>> {
    settings.config.validate()?;
    settings.stack.validate()?;
    if settings.proxy.needs_batch() && batch.is_none() {
        return Err(Error::Config(format!("proxy {} needs a batch", settings.proxy)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        encodings
            .par_iter()
            .map(|e| score_one(e.as_ref(), settings, batch))
            .collect()
    }))
}

pub fn write_scores<W: Write>(out: W, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SCORE_HEADER)?;
    for r in rows {
        w.write_record([
            r.encoding.clone(),
            r.proxy.to_string(),
            r.score.map(|s| s.to_string()).unwrap_or_default(),
            r.num_layers.map(|m| m.to_string()).unwrap_or_default(),
            r.seed.to_string(),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a score table. Row numbers in errors count the header as row 1.
pub fn read_scores<R: Read>(input: R) -> Result<Vec<ScoreRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().ne(SCORE_HEADER) {
        return Err(Error::Table {
            row: 1,
            msg: format!("expected header {}", SCORE_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Table { row, msg: e.to_string() })?;
        let bad = |msg: String| Error::Table { row, msg };
        let proxy: ProxyKind = rec[1].parse().map_err(|e: Error| bad(e.to_string()))?;
        let score = match &rec[2] {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|_| bad(format!("bad score \"{s}\"")))?),
        };
        let num_layers = match &rec[3] {
            "" => None,
            s => Some(s.parse::<usize>().map_err(|_| bad(format!("bad M \"{s}\"")))?),
        };
        let seed = rec[4]
            .parse::<u64>()
            .map_err(|_| bad(format!("bad seed \"{}\"", &rec[4])))?;
        let status = rec[5].to_string();
        if (status == "ok") != score.is_some() {
            return Err(bad("score must be present exactly when status is ok".into()));
        }
        rows.push(ScoreRow {
            encoding: rec[0].to_string(),
            proxy,
            score,
            num_layers,
            seed,
            status,
            breakdown: None,
        });
    }
    Ok(rows)
}

/// `(encoding, score)` pairs from any CSV with `encoding` and `score`
/// columns. When a `status` column exists, rows not marked `ok` are
/// skipped.
pub fn read_score_pairs<R: Read>(input: R) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h.trim() == name);
    let (enc, score) = match (col("encoding"), col("score")) {
        (Some(e), Some(s)) => (e, s),
        _ => {
            return Err(Error::Table {
                row: 1,
                msg: "header needs encoding and score columns".into(),
            })
        }
    };
    let status = col("status");
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Table { row, msg: e.to_string() })?;
        if let Some(s) = status {
            if rec[s].trim() != "ok" {
                continue;
            }
        }
        let field = rec[score].trim();
        let v: f64 = field.parse().map_err(|_| Error::Table {
            row,
            msg: format!("bad score \"{field}\""),
        })?;
        out.push((rec[enc].trim().to_string(), v));
    }
    Ok(out)
}

/// One JSON object per line for every row that carries a breakdown.
pub fn write_breakdowns<W: Write>(mut out: W, rows: &[ScoreRow]) -> Result<()> {
    for bd in rows.iter().filter_map(|r| r.breakdown.as_ref()) {
        serde_json::to_writer(&mut out, bd)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_breakdowns<R: BufRead>(input: R) -> Result<Vec<ProxyBreakdown>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Table {
            row: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_batch;
    use crate::space::{sample_uniform, SpaceKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn settings(proxy: ProxyKind, jobs: usize) -> ScoreSettings {
        ScoreSettings {
            proxy,
            config: ProxyConfig {
                seed: 11,
                ..ProxyConfig::default()
            },
            stack: StackConfig {
                channels: 4,
                height: 8,
                width: 8,
                stages: 2,
                ..StackConfig::default()
            },
            jobs,
        }
    }

    fn encodings(n: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| sample_uniform(SpaceKind::Nb201, &mut rng).encode())
            .collect()
    }

    #[test]
    fn seed_depends_on_both_inputs() {
        let a = derive_seed(1, "x");
        assert_eq!(a, derive_seed(1, "x"));
        assert_ne!(a, derive_seed(2, "x"));
        assert_ne!(a, derive_seed(1, "y"));
    }

    #[test]
    fn permutation_and_jobs_do_not_change_scores() {
        let batch = synthetic_batch(4, [3, 8, 8], 10, 1).unwrap();
        let encs = encodings(12, 3);
        let a = score_many(&encs, &settings(ProxyKind::Croze, 1), Some(&batch)).unwrap();
        let mut rev = encs.clone();
        rev.reverse();
        let b = score_many(&rev, &settings(ProxyKind::Croze, 4), Some(&batch)).unwrap();
        for (x, y) in a.iter().zip(b.iter().rev()) {
            assert_eq!(x, y);
        }
        assert!(a.iter().all(ScoreRow::is_ok));
    }

    #[test]
    fn malformed_row_is_captured() {
        let mut encs = encodings(9, 4);
        encs.insert(5, "|conv3x3~0|+|oops".into());
        let rows = score_many(&encs, &settings(ProxyKind::NumParams, 2), None).unwrap();
        assert_eq!(rows.len(), 10);
        assert_eq!(rows.iter().filter(|r| r.is_ok()).count(), 9);
        assert!(rows[5].status.starts_with("failed: "));
        assert_eq!(rows[5].encoding, "|conv3x3~0|+|oops");
        assert!(rows[5].score.is_none());
    }

    #[test]
    fn batch_required_for_data_proxies() {
        assert!(score_many(&encodings(2, 1), &settings(ProxyKind::Croze, 1), None).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut encs = encodings(5, 5);
        encs.push("nope".into());
        let rows = score_many(&encs, &settings(ProxyKind::Flops, 1), None).unwrap();
        let mut buf = Vec::new();
        write_scores(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("encoding,proxy,score,M,seed,status\n"));
        assert_eq!(read_scores(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn csv_errors_carry_row_numbers() {
        let text = "encoding,proxy,score,M,seed,status\n|skip~0|+|skip~1|skip~0|+|skip~2|skip~1|skip~0|,plain,abc,4,1,ok\n";
        match read_scores(text.as_bytes()) {
            Err(Error::Table { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }
        assert!(read_scores("a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn score_pairs_skip_failed_rows() {
        let text = "encoding,proxy,score,M,seed,status\na,plain,1.5,4,1,ok\nb,plain,,,2,failed: x\n";
        assert_eq!(read_score_pairs(text.as_bytes()).unwrap(), vec![("a".to_string(), 1.5)]);
        let plain = "encoding,score\na,2\nb,x\n";
        assert!(matches!(read_score_pairs(plain.as_bytes()), Err(Error::Table { row: 3, .. })));
        assert!(read_score_pairs("encoding\n".as_bytes()).is_err());
    }

    #[test]
    fn breakdown_lines_round_trip() {
        let batch = synthetic_batch(4, [3, 8, 8], 10, 1).unwrap();
        let rows = score_many(&encodings(3, 8), &settings(ProxyKind::Croze, 1), Some(&batch)).unwrap();
        let mut buf = Vec::new();
        write_breakdowns(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["encoding", "total", "M", "layers"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert!(first["layers"][0].get("Z").is_some());
        let back = read_breakdowns(&buf[..]).unwrap();
        assert_eq!(back[0], *rows[0].breakdown.as_ref().unwrap());
    }
}
