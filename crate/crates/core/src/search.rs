//! Proxy-driven sampling search: random search, aging evolution, a warmup
//! pool of high-scoring samples, and "move" rounds that sample the mutation
//! neighborhood of the proxy incumbent.
//!
//! Every proxy evaluation counts against one budget. Ground-truth metrics
//! are only recorded, never consulted for decisions.

use std::cmp::Ordering;
use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::BenchmarkTable;
use crate::error::{Error, Result};
use crate::space::{mutate, sample_uniform, CellSpec, SpaceKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Rand,
    Ae,
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rand" => Ok(Self::Rand),
            "ae" => Ok(Self::Ae),
            other => Err(Error::Config(format!("unknown search algorithm \"{other}\""))),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rand => "rand",
            Self::Ae => "ae",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarmupConfig {
    pub pool_size: usize,
    pub top_k: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoveConfig {
    /// Successive mutations per child.
    pub radius: usize,
    pub fan_out: usize,
}

impl Default for MoveConfig {
    fn default() -> Self {
        Self {
            radius: 1,
            fan_out: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub space: SpaceKind,
    pub algorithm: Algorithm,
    /// Total proxy evaluations.
    pub budget: usize,
    pub warmup: Option<WarmupConfig>,
    #[serde(rename = "move")]
    pub moves: Option<MoveConfig>,
    pub population: usize,
    pub sample: usize,
    pub seed: u64,
    /// Rows kept in the final shortlist.
    pub shortlist: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            space: SpaceKind::Nb201,
            algorithm: Algorithm::Rand,
            budget: 100,
            warmup: None,
            moves: None,
            population: 20,
            sample: 5,
            seed: 0,
            shortlist: 10,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.budget == 0 {
            return bad("budget must be at least 1".into());
        }
        if let Some(w) = self.warmup {
            if w.top_k == 0 || w.top_k > w.pool_size {
                return bad(format!("warmup needs 1 <= top_k <= pool_size, got top_k={} pool_size={}", w.top_k, w.pool_size));
            }
            if w.pool_size > self.budget {
                return bad(format!("warmup pool {} exceeds budget {}", w.pool_size, self.budget));
            }
        }
        if let Some(m) = self.moves {
            if m.radius == 0 || m.fan_out == 0 {
                return bad("move needs radius >= 1 and fan_out >= 1".into());
            }
            if self.warmup.is_none() {
                return bad("move needs a warmup pool to pick its incumbent from".into());
            }
        }
        if self.algorithm == Algorithm::Ae {
            if self.sample == 0 || self.sample > self.population {
                return bad(format!(
                    "aging evolution needs 1 <= sample <= population, got sample={} population={}",
                    self.sample, self.population
                ));
            }
            if self.warmup.is_none() && self.budget < self.population {
                return bad(format!("budget {} is below population {}", self.budget, self.population));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub encoding: String,
    pub proxy_score: f64,
    /// Insertion counter, unique within a run.
    pub age: usize,
    pub truth: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Move,
    Init,
    Evolve,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub encoding: String,
    pub proxy: f64,
    pub best_proxy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_truth: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchLog {
    pub records: Vec<StepRecord>,
    pub shortlist: Vec<Candidate>,
    /// Set when a phase was cut short by the budget.
    pub truncated: Option<String>,
}

impl SearchLog {
    /// JSON lines; an optional header object comes first.
    pub fn write_jsonl<W: Write>(&self, mut out: W, header: Option<&serde_json::Value>) -> Result<()> {
        if let Some(h) = header {
            serde_json::to_writer(&mut out, h)?;
            out.write_all(b"\n")?;
        }
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_shortlist<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rank", "encoding", "proxy", "truth"])?;
        for (i, c) in self.shortlist.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                c.encoding.clone(),
                c.proxy_score.to_string(),
                c.truth.map(|t| t.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn final_best_truth(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.best_truth)
    }
}

/// Ground-truth lookup used only for reporting.
#[derive(Clone, Copy, Debug)]
pub struct TruthSource<'a> {
    table: &'a BenchmarkTable,
    column: usize,
}

impl<'a> TruthSource<'a> {
    pub fn new(table: &'a BenchmarkTable, metric: &str) -> Result<Self> {
        Ok(Self {
            column: table.metric_index(metric)?,
            table,
        })
    }

    fn lookup(&self, encoding: &str) -> Option<f64> {
        self.table.row(encoding).map(|r| r[self.column])
    }
}

fn rank_key(score: f64) -> f64 {
    if score.is_nan() {
        f64::NEG_INFINITY
    } else {
        score
    }
}

/// Higher proxy first; ties by encoding, lexicographically smallest first.
fn ranking(a: &Candidate, b: &Candidate) -> Ordering {
    rank_key(b.proxy_score)
        .total_cmp(&rank_key(a.proxy_score))
        .then_with(|| a.encoding.cmp(&b.encoding))
}

struct Run<'a, F> {
    proxy_fn: &'a F,
    truth: Option<TruthSource<'a>>,
    budget: usize,
    records: Vec<StepRecord>,
    scored: Vec<Candidate>,
    best_proxy: f64,
    best_truth: Option<f64>,
    truncated: Option<String>,
}

impl<'a, F: Fn(&CellSpec) -> f64 + Sync> Run<'a, F> {
    fn new(proxy_fn: &'a F, truth: Option<TruthSource<'a>>, budget: usize) -> Self {
        Self {
            proxy_fn,
            truth,
            budget,
            records: Vec::new(),
            scored: Vec::new(),
            best_proxy: f64::NEG_INFINITY,
            best_truth: None,
            truncated: None,
        }
    }

    fn remaining(&self) -> usize {
        self.budget - self.scored.len()
    }

    /// Scores up to the remaining budget, in parallel, recording in
    /// submission order.
    fn score(&mut self, mut cells: Vec<CellSpec>, phase: Phase) -> Vec<Candidate> {
        if cells.len() > self.remaining() {
            if self.truncated.is_none() {
                self.truncated = Some(format!(
                    "{phase:?} phase cut to {} of {} candidates by the budget",
                    self.remaining(),
                    cells.len()
                ));
            }
            cells.truncate(self.remaining());
        }
        let f = self.proxy_fn;
        let scores: Vec<f64> = cells.par_iter().map(f).collect();
        let mut out = Vec::with_capacity(cells.len());
        for (cell, s) in cells.iter().zip(scores) {
            let encoding = cell.encode();
            let truth = self.truth.and_then(|t| t.lookup(&encoding));
            if rank_key(s) > self.best_proxy {
                self.best_proxy = rank_key(s);
            }
            if let Some(t) = truth {
                self.best_truth = Some(self.best_truth.map_or(t, |b| b.max(t)));
            }
            let c = Candidate {
                encoding: encoding.clone(),
                proxy_score: s,
                age: self.scored.len(),
                truth,
            };
            self.records.push(StepRecord {
                step: self.scored.len(),
                phase,
                encoding,
                proxy: s,
                best_proxy: self.best_proxy,
                best_truth: self.truth.and(self.best_truth),
            });
            self.scored.push(c.clone());
            out.push(c);
        }
        out
    }

    fn warmup<R: Rng + ?Sized>(&mut self, space: SpaceKind, w: WarmupConfig, rng: &mut R) -> Vec<Candidate> {
        let cells = (0..w.pool_size).map(|_| sample_uniform(space, rng)).collect();
        let mut pool = self.score(cells, Phase::Warmup);
        pool.sort_by(ranking);
        pool.truncate(w.top_k);
        pool
    }

    fn neighborhood<R: Rng + ?Sized>(&mut self, best: &Candidate, m: MoveConfig, rng: &mut R) -> Result<Vec<Candidate>> {
        let parent: CellSpec = best.encoding.parse()?;
        let cells = (0..m.fan_out)
            .map(|_| (0..m.radius).fold(parent.clone(), |c, _| mutate(&c, rng)))
            .collect();
        Ok(self.score(cells, Phase::Move))
    }

    fn incumbent(&self) -> Option<Candidate> {
        self.scored.iter().min_by(|a, b| ranking(a, b)).cloned()
    }

    fn finish(self, shortlist: usize) -> SearchLog {
        let mut all = self.scored;
        all.sort_by(ranking);
        all.dedup_by(|a, b| a.encoding == b.encoding);
        all.truncate(shortlist);
        SearchLog {
            records: self.records,
            shortlist: all,
            truncated: self.truncated,
        }
    }
}

/// Scores `pool_size` uniform samples and returns the best `top_k`, highest
/// proxy first, ties broken by encoding.
pub fn warmup_pool<F, R>(space: SpaceKind, proxy_fn: &F, pool_size: usize, top_k: usize, rng: &mut R) -> Result<Vec<Candidate>>
where
    F: Fn(&CellSpec) -> f64 + Sync,
    R: Rng + ?Sized,
{
    if top_k == 0 || top_k > pool_size {
        return Err(Error::Config(format!("warmup needs 1 <= top_k <= pool_size, got {top_k} > {pool_size}")));
    }
    let mut run = Run::new(proxy_fn, None, pool_size);
    Ok(run.warmup(space, WarmupConfig { pool_size, top_k }, rng))
}

/// `fan_out` children of `best`, each `radius` successive mutations away.
pub fn move_neighborhood<F, R>(best: &Candidate, radius: usize, fan_out: usize, proxy_fn: &F, rng: &mut R) -> Result<Vec<Candidate>>
where
    F: Fn(&CellSpec) -> f64 + Sync,
    R: Rng + ?Sized,
{
    if radius == 0 {
        return Err(Error::Config("move radius must be at least 1".into()));
    }
    let mut run = Run::new(proxy_fn, None, fan_out);
    run.neighborhood(best, MoveConfig { radius, fan_out }, rng)
}

/// Warmup (optional), one move round around the incumbent (optional), then
/// random sampling or aging evolution until the budget is spent. Move
/// children join the evolution population, so evolution starts around the
/// incumbent.
pub fn hybrid_search<F>(proxy_fn: &F, config: &SearchConfig, truth: Option<TruthSource<'_>>) -> Result<SearchLog>
where
    F: Fn(&CellSpec) -> f64 + Sync,
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut run = Run::new(proxy_fn, truth, config.budget);

    let mut seeds = match config.warmup {
        Some(w) => run.warmup(config.space, w, &mut rng),
        None => Vec::new(),
    };
    if let Some(m) = config.moves {
        let best = run.incumbent().expect("warmup scored at least one candidate");
        let children = run.neighborhood(&best, m, &mut rng)?;
        seeds.extend(children);
    }

    match config.algorithm {
        Algorithm::Rand => {
            let cells = (0..run.remaining()).map(|_| sample_uniform(config.space, &mut rng)).collect();
            run.score(cells, Phase::Random);
        }
        Algorithm::Ae => evolve(&mut run, config, seeds, &mut rng),
    }
    Ok(run.finish(config.shortlist))
}

fn evolve<F, R>(run: &mut Run<'_, F>, config: &SearchConfig, seeds: Vec<Candidate>, rng: &mut R)
where
    F: Fn(&CellSpec) -> f64 + Sync,
    R: Rng + ?Sized,
{
    // Seeds enter best-last so the strongest are evicted last.
    let mut seeds = seeds;
    seeds.sort_by(ranking);
    seeds.truncate(config.population);
    seeds.reverse();
    let mut population: VecDeque<Candidate> = seeds.into();

    let missing = config.population - population.len();
    if missing > 0 {
        let cells = (0..missing).map(|_| sample_uniform(config.space, rng)).collect();
        population.extend(run.score(cells, Phase::Init));
    }

    while run.remaining() > 0 && !population.is_empty() {
        let k = config.sample.min(population.len());
        let picks = index::sample(rng, population.len(), k);
        let parent = picks
            .iter()
            .map(|i| &population[i])
            .min_by(|a, b| ranking(a, b))
            .expect("at least one pick");
        let cell: CellSpec = parent.encoding.parse().expect("scored encodings decode");
        let child = mutate(&cell, rng);
        let scored = run.score(vec![child], Phase::Evolve);
        population.extend(scored);
        if population.len() > config.population {
            population.pop_front();
        }
    }
}

/// Uniform sampling for `config.budget` evaluations (warmup/move settings
/// are honored if present).
pub fn random_search<F>(proxy_fn: &F, config: &SearchConfig, truth: Option<TruthSource<'_>>) -> Result<SearchLog>
where
    F: Fn(&CellSpec) -> f64 + Sync,
{
    let config = SearchConfig {
        algorithm: Algorithm::Rand,
        ..config.clone()
    };
    hybrid_search(proxy_fn, &config, truth)
}

pub fn aging_evolution<F>(proxy_fn: &F, config: &SearchConfig, truth: Option<TruthSource<'_>>) -> Result<SearchLog>
where
    F: Fn(&CellSpec) -> f64 + Sync,
{
    let config = SearchConfig {
        algorithm: Algorithm::Ae,
        ..config.clone()
    };
    hybrid_search(proxy_fn, &config, truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{synth_benchmark, Planted};
    use crate::space::OperationKind::*;

    fn target() -> CellSpec {
        CellSpec::nb201([Conv3x3, Skip, Conv1x1, AvgPool3x3, Conv3x3, Zero]).unwrap()
    }

    fn planted(c: &CellSpec) -> f64 {
        -(c.hamming(&target()) as f64)
    }

    fn first_hit(log: &SearchLog) -> Option<usize> {
        let t = target().encode();
        log.records.iter().position(|r| r.encoding == t)
    }

    fn cfg(algorithm: Algorithm, budget: usize, seed: u64) -> SearchConfig {
        SearchConfig {
            algorithm,
            budget,
            seed,
            ..SearchConfig::default()
        }
    }

    #[test]
    fn budget_one() {
        let log = random_search(&planted, &cfg(Algorithm::Rand, 1, 3), None).unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.records[0].best_proxy, log.records[0].proxy);
        assert_eq!(log.shortlist[0].encoding, log.records[0].encoding);
    }

    #[test]
    fn budget_is_exact_and_best_is_monotone() {
        let combos = [
            (Algorithm::Rand, None, None),
            (Algorithm::Ae, None, None),
            (Algorithm::Rand, Some((50, 10)), None),
            (Algorithm::Ae, Some((50, 10)), None),
            (Algorithm::Ae, Some((50, 30)), Some((2, 20))),
            (Algorithm::Rand, Some((50, 5)), Some((1, 200))),
            (Algorithm::Ae, Some((150, 5)), Some((1, 200))),
        ];
        for (algorithm, w, m) in combos {
            let config = SearchConfig {
                warmup: w.map(|(pool_size, top_k)| WarmupConfig { pool_size, top_k }),
                moves: m.map(|(radius, fan_out)| MoveConfig { radius, fan_out }),
                ..cfg(algorithm, 160, 9)
            };
            let log = hybrid_search(&planted, &config, None).unwrap();
            assert_eq!(log.records.len(), 160, "{config:?}");
            assert!(log.records.windows(2).all(|p| p[1].best_proxy >= p[0].best_proxy));
            assert!(log.records.iter().all(|r| r.best_truth.is_none()));
            assert_eq!(log.truncated.is_some(), matches!(m, Some((_, 200))));
            let ages: std::collections::BTreeSet<usize> = log.records.iter().map(|r| r.step).collect();
            assert_eq!(ages.len(), 160);
        }
    }

    #[test]
    fn validation() {
        let mut c = cfg(Algorithm::Rand, 10, 0);
        c.warmup = Some(WarmupConfig { pool_size: 5, top_k: 6 });
        assert!(c.validate().is_err());
        c.warmup = Some(WarmupConfig { pool_size: 11, top_k: 1 });
        assert!(c.validate().is_err());
        c.warmup = None;
        c.moves = Some(MoveConfig::default());
        assert!(c.validate().is_err());
        let mut c = cfg(Algorithm::Ae, 10, 0);
        assert!(c.validate().is_err(), "budget below population");
        c.budget = 30;
        c.sample = 21;
        assert!(c.validate().is_err());
        assert!(cfg(Algorithm::Rand, 0, 0).validate().is_err());
    }

    #[test]
    fn deterministic_and_truth_free() {
        let table = synth_benchmark(SpaceKind::Nb201, &Planted::Hamming { target: target() }, 2.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let config = SearchConfig {
            warmup: Some(WarmupConfig { pool_size: 40, top_k: 10 }),
            moves: Some(MoveConfig::default()),
            ..cfg(Algorithm::Ae, 120, 5)
        };
        let a = hybrid_search(&planted, &config, None).unwrap();
        let b = hybrid_search(&planted, &config, None).unwrap();
        assert_eq!(a, b);
        let t = hybrid_search(&planted, &config, Some(TruthSource::new(&table, "clean").unwrap())).unwrap();
        assert!(t.records.iter().all(|r| r.best_truth.is_some()));
        for (x, y) in a.records.iter().zip(&t.records) {
            assert_eq!((&x.encoding, x.proxy, x.best_proxy), (&y.encoding, y.proxy, y.best_proxy));
        }
        assert!(TruthSource::new(&table, "nope").is_err());
    }

    #[test]
    fn elitist_selection_when_sample_equals_population() {
        // With sample == population every parent is the population argmax,
        // so every child is one mutation away from the running best of the
        // current population.
        let config = SearchConfig {
            population: 10,
            sample: 10,
            ..cfg(Algorithm::Ae, 80, 2)
        };
        let log = aging_evolution(&planted, &config, None).unwrap();
        let mut pop: VecDeque<(String, f64)> = VecDeque::new();
        for r in &log.records {
            if r.phase == Phase::Evolve {
                let best = pop
                    .iter()
                    .min_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)))
                    .unwrap();
                let parent: CellSpec = best.0.parse().unwrap();
                let child: CellSpec = r.encoding.parse().unwrap();
                assert_eq!(parent.hamming(&child), 1);
            }
            pop.push_back((r.encoding.clone(), r.proxy));
            if pop.len() > 10 {
                pop.pop_front();
            }
        }
    }

    #[test]
    fn random_hit_rate_matches_binomial() {
        let trials = 10_000u64;
        let p = 1.0 - (1.0 - 5f64.powi(-6)).powi(100);
        let hits = (0..trials)
            .into_par_iter()
            .filter(|&s| first_hit(&random_search(&planted, &cfg(Algorithm::Rand, 100, s), None).unwrap()).is_some())
            .count() as f64;
        let mean = trials as f64 * p;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        assert!((hits - mean).abs() <= 3.0 * sd, "hits {hits}, expected {mean} ± {}", 3.0 * sd);
    }

    #[test]
    fn evolution_finds_target_sooner_than_random() {
        let wins = (0..20u64)
            .filter(|&s| {
                let ae = first_hit(&aging_evolution(&planted, &cfg(Algorithm::Ae, 300, s), None).unwrap());
                let rs = first_hit(&random_search(&planted, &cfg(Algorithm::Rand, 300, s), None).unwrap());
                match (ae, rs) {
                    (Some(a), Some(r)) => a < r,
                    (Some(_), None) => true,
                    _ => false,
                }
            })
            .count();
        assert!(wins >= 14, "ae won {wins}/20");
    }

    #[test]
    fn warmup_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let all = warmup_pool(SpaceKind::Nb201, &planted, 30, 30, &mut rng).unwrap();
        assert_eq!(all.len(), 30);
        assert!(all.windows(2).all(|p| ranking(&p[0], &p[1]) != Ordering::Greater));
        assert!(warmup_pool(SpaceKind::Nb201, &planted, 3, 4, &mut rng).is_err());

        // top-k dominates the rest, and its mean beats the pool mean
        let mut above = 0;
        for s in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut run = Run::new(&planted, None, 200);
            let top = run.warmup(SpaceKind::Nb201, WarmupConfig { pool_size: 200, top_k: 20 }, &mut rng);
            let kept: std::collections::BTreeSet<usize> = top.iter().map(|c| c.age).collect();
            let min_top = top.iter().map(|c| c.proxy_score).fold(f64::INFINITY, f64::min);
            let max_rest = run
                .scored
                .iter()
                .filter(|c| !kept.contains(&c.age))
                .map(|c| c.proxy_score)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(min_top >= max_rest);
            let top_mean = top.iter().map(|c| c.proxy_score).sum::<f64>() / 20.0;
            let pool_mean = run.scored.iter().map(|c| c.proxy_score).sum::<f64>() / 200.0;
            if top_mean > pool_mean {
                above += 1;
            }
        }
        assert!(above as f64 / 200.0 >= 0.99);
    }

    #[test]
    fn move_children_are_neighbors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let best = Candidate {
            encoding: target().encode(),
            proxy_score: 0.0,
            age: 0,
            truth: None,
        };
        let kids = move_neighborhood(&best, 1, 50, &planted, &mut rng).unwrap();
        assert_eq!(kids.len(), 50);
        for k in &kids {
            let c: CellSpec = k.encoding.parse().unwrap();
            assert_eq!(c.hamming(&target()), 1);
        }
        let far = move_neighborhood(&best, 3, 50, &planted, &mut rng).unwrap();
        assert!(far.iter().all(|k| k.encoding.parse::<CellSpec>().unwrap().hamming(&target()) <= 3));
        assert!(move_neighborhood(&best, 0, 5, &planted, &mut rng).is_err());
    }

    #[test]
    fn move_hit_probability_matches_closed_form() {
        // best sits one edit from the target: a child hits it when the
        // mutation picks the differing edge (1/6) and the right op (1/4)
        let near = CellSpec::nb201([Conv3x3, Skip, Conv1x1, AvgPool3x3, Conv3x3, Skip]).unwrap();
        let best = Candidate {
            encoding: near.encode(),
            proxy_score: 0.0,
            age: 0,
            truth: None,
        };
        let fan_out = 10;
        let trials = 5000;
        let t = target().encode();
        let hits = (0..trials)
            .filter(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                move_neighborhood(&best, 1, fan_out, &planted, &mut rng)
                    .unwrap()
                    .iter()
                    .any(|k| k.encoding == t)
            })
            .count() as f64;
        let p = 1.0 - (1.0 - 1.0 / 24.0f64).powi(fan_out as i32);
        let n = trials as f64;
        assert!((hits - n * p).abs() <= 3.0 * (n * p * (1.0 - p)).sqrt(), "hits {hits} vs {}", n * p);
    }

    #[test]
    fn warmup_move_evolution_beats_random_on_synthetic_table() {
        let mut wins = 0;
        for s in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + s);
            let landscape = Planted::random_additive(&mut rng);
            let table = synth_benchmark(SpaceKind::Nb201, &landscape, 2.0, &mut rng).unwrap();
            let truth = TruthSource::new(&table, "clean").unwrap();
            let proxy = |c: &CellSpec| landscape.quality(c);
            let hybrid = SearchConfig {
                warmup: Some(WarmupConfig { pool_size: 100, top_k: 10 }),
                moves: Some(MoveConfig::default()),
                ..cfg(Algorithm::Ae, 500, s)
            };
            let a = hybrid_search(&proxy, &hybrid, Some(truth)).unwrap();
            let r = random_search(&proxy, &cfg(Algorithm::Rand, 500, s), Some(truth)).unwrap();
            if a.final_best_truth() >= r.final_best_truth() {
                wins += 1;
            }
        }
        assert!(wins >= 14, "hybrid won {wins}/20");
    }

    #[test]
    fn log_serialization() {
        let log = random_search(&planted, &cfg(Algorithm::Rand, 5, 1), None).unwrap();
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf, Some(&serde_json::json!({"config": {"budget": 5}}))).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        let rec: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        for k in ["step", "encoding", "proxy", "best_proxy"] {
            assert!(rec.get(k).is_some());
        }
        assert!(rec.get("best_truth").is_none());
        let mut csv = Vec::new();
        log.write_shortlist(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("rank,encoding,proxy,truth\n"));
    }
}
