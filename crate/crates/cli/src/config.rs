//! Resolved run configuration and its `key = value` text form.
//!
//! A config file holds one `key = value` per line; blank lines and lines
//! starting with `#` are ignored. Command-line flags are applied on top of
//! the file through the same [`RunConfig::set`] entry point.

use std::fmt::Write as _;

use croze_core::perturb::{InputPerturbation, PerturbConfig};
use croze_core::proxies::{ComponentMask, ProxyConfig, ProxyKind};
use croze_core::search::{Algorithm, MoveConfig, SearchConfig, WarmupConfig};
use croze_core::{SpaceKind, StackConfig};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("unknown key \"{0}\"")]
    UnknownKey(String),
    #[error("{key}: {msg}")]
    Value { key: String, msg: String },
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<ConfigError>,
    },
    #[error("line {0}: expected key = value")]
    Syntax(usize),
}

/// Settings for a synthetic batch, `n=8 classes=10 seed=S`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub classes: Option<usize>,
    pub seed: Option<u64>,
}

impl std::str::FromStr for SyntheticSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut spec = SyntheticSpec {
            n: 8,
            classes: None,
            seed: None,
        };
        for part in s.split([' ', ',']).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got \"{part}\""))?;
            let num = |v: &str| v.parse::<u64>().map_err(|_| format!("bad number \"{v}\" for {k}"));
            match k {
                "n" => spec.n = num(v)? as usize,
                "classes" => spec.classes = Some(num(v)? as usize),
                "seed" => spec.seed = Some(num(v)?),
                other => return Err(format!("unknown synthetic key \"{other}\"")),
            }
        }
        if spec.n == 0 || spec.classes == Some(0) {
            return Err("n and classes must be positive".into());
        }
        Ok(spec)
    }
}

impl std::fmt::Display for SyntheticSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n={}", self.n)?;
        if let Some(c) = self.classes {
            write!(f, " classes={c}")?;
        }
        if let Some(s) = self.seed {
            write!(f, " seed={s}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub space: SpaceKind,
    pub stack: StackConfig,
    pub proxy: ProxyKind,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub sigma: f64,
    pub perturb: InputPerturbation,
    pub components: ComponentMask,
    pub exclude_head: bool,
    pub clip: Option<(f64, f64)>,
    pub seed: Option<u64>,
    pub jobs: usize,
    pub batch: Option<String>,
    pub synthetic: Option<SyntheticSpec>,
    pub algo: Algorithm,
    pub budget: usize,
    pub warmup: Option<(usize, usize)>,
    pub moves: Option<(usize, usize)>,
    pub population: usize,
    pub sample: usize,
    pub benchmark: Option<String>,
    pub metric: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = ProxyConfig::default();
        let s = SearchConfig::default();
        Self {
            space: SpaceKind::Nb201,
            stack: StackConfig::default(),
            proxy: ProxyKind::Croze,
            beta: p.perturb.beta,
            gamma: p.gamma,
            epsilon: p.perturb.epsilon,
            sigma: p.perturb.sigma,
            perturb: p.perturb.input_kind,
            components: p.components,
            exclude_head: p.exclude_head,
            clip: None,
            seed: None,
            jobs: 0,
            batch: None,
            synthetic: None,
            algo: s.algorithm,
            budget: s.budget,
            warmup: None,
            moves: None,
            population: s.population,
            sample: s.sample,
            benchmark: None,
            metric: "clean".into(),
        }
    }
}

fn pair<T: std::str::FromStr>(v: &str) -> Result<(T, T), String> {
    let (a, b) = v.split_once(',').ok_or_else(|| format!("expected two comma-separated values, got \"{v}\""))?;
    let parse = |s: &str| s.trim().parse::<T>().map_err(|_| format!("bad value \"{s}\""));
    Ok((parse(a)?, parse(b)?))
}

fn parse_stack(v: &str, in_channels: usize) -> Result<StackConfig, String> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad stack entry \"{p}\"")))
        .collect::<Result<_, _>>()?;
    let [channels, stages, cells_per_stage, height, width, num_classes] = parts[..] else {
        return Err("expected C,stages,cells,H,W,classes".into());
    };
    let stack = StackConfig {
        in_channels,
        height,
        width,
        channels,
        stages,
        cells_per_stage,
        num_classes,
    };
    stack.validate().map_err(|e| e.to_string())?;
    Ok(stack)
}

fn opt_str(v: &str) -> Option<String> {
    (!v.is_empty() && v != "none").then(|| v.to_string())
}

impl RunConfig {
    pub const KEYS: [&'static str; 24] = [
        "space", "stack", "in_channels", "proxy", "beta", "gamma", "epsilon", "sigma", "perturb",
        "components", "exclude_head", "clip", "seed", "jobs", "batch", "synthetic", "algo", "budget",
        "warmup", "move", "population", "sample", "benchmark", "metric",
    ];

    /// Applies one setting. `none` (or an empty value) clears optional keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let err = |msg: String| ConfigError::Value {
            key: key.to_string(),
            msg,
        };
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
            v.parse::<T>().map_err(|_| format!("bad value \"{v}\""))
        }
        fn float(v: &str) -> Result<f64, String> {
            let x: f64 = num(v)?;
            if !x.is_finite() {
                return Err(format!("bad value \"{v}\""));
            }
            Ok(x)
        }
        match key {
            "space" => self.space = v.parse().map_err(|e: croze_core::Error| err(e.to_string()))?,
            "stack" => self.stack = parse_stack(v, self.stack.in_channels).map_err(err)?,
            "in_channels" => {
                let c: usize = num(v).map_err(err)?;
                if c == 0 {
                    return Err(err("must be positive".into()));
                }
                self.stack.in_channels = c;
            }
            "proxy" => self.proxy = v.parse().map_err(|e: croze_core::Error| err(e.to_string()))?,
            "beta" => self.beta = float(v).map_err(err)?,
            "gamma" => self.gamma = float(v).map_err(err)?,
            "epsilon" => self.epsilon = float(v).map_err(err)?,
            "sigma" => self.sigma = float(v).map_err(err)?,
            "perturb" => self.perturb = v.parse().map_err(|e: croze_core::Error| err(e.to_string()))?,
            "components" => {
                self.components = v.parse().map_err(|e: croze_core::Error| err(e.to_string()))?
            }
            "exclude_head" => self.exclude_head = num(v).map_err(err)?,
            "clip" => {
                self.clip = match v {
                    "" | "none" => None,
                    _ => {
                        let (lo, hi): (f64, f64) = pair(v).map_err(err)?;
                        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                            return Err(err(format!("empty clip range [{lo}, {hi}]")));
                        }
                        Some((lo, hi))
                    }
                }
            }
            "seed" => self.seed = if opt_str(v).is_none() { None } else { Some(num(v).map_err(err)?) },
            "jobs" => self.jobs = num(v).map_err(err)?,
            "batch" => self.batch = opt_str(v),
            "synthetic" => {
                self.synthetic = match opt_str(v) {
                    None => None,
                    Some(s) => Some(s.parse().map_err(err)?),
                }
            }
            "algo" => self.algo = v.parse().map_err(|e: croze_core::Error| err(e.to_string()))?,
            "budget" => self.budget = num(v).map_err(err)?,
            "warmup" => self.warmup = if opt_str(v).is_none() { None } else { Some(pair(v).map_err(err)?) },
            "move" => self.moves = if opt_str(v).is_none() { None } else { Some(pair(v).map_err(err)?) },
            "population" => self.population = num(v).map_err(err)?,
            "sample" => self.sample = num(v).map_err(err)?,
            "benchmark" => self.benchmark = opt_str(v),
            "metric" => {
                if v.is_empty() {
                    return Err(err("must not be empty".into()));
                }
                self.metric = v.to_string()
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies every line of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax(i + 1))?;
            self.set(k.trim(), v).map_err(|e| ConfigError::Line {
                line: i + 1,
                source: Box::new(e),
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key, in [`RunConfig::KEYS`] order.
    pub fn to_text(&self) -> String {
        let s = &self.stack;
        let or_none = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("space", self.space.to_string());
        put(
            "stack",
            format!(
                "{},{},{},{},{},{}",
                s.channels, s.stages, s.cells_per_stage, s.height, s.width, s.num_classes
            ),
        );
        put("in_channels", s.in_channels.to_string());
        put("proxy", self.proxy.to_string());
        put("beta", self.beta.to_string());
        put("gamma", self.gamma.to_string());
        put("epsilon", self.epsilon.to_string());
        put("sigma", self.sigma.to_string());
        put("perturb", self.perturb.to_string());
        put("components", self.components.to_string());
        put("exclude_head", self.exclude_head.to_string());
        put("clip", or_none(self.clip.map(|(a, b)| format!("{a},{b}"))));
        put("seed", or_none(self.seed.map(|v| v.to_string())));
        put("jobs", self.jobs.to_string());
        put("batch", or_none(self.batch.clone()));
        put("synthetic", or_none(self.synthetic.map(|v| v.to_string())));
        put("algo", self.algo.to_string());
        put("budget", self.budget.to_string());
        put("warmup", or_none(self.warmup.map(|(a, b)| format!("{a},{b}"))));
        put("move", or_none(self.moves.map(|(a, b)| format!("{a},{b}"))));
        put("population", self.population.to_string());
        put("sample", self.sample.to_string());
        put("benchmark", or_none(self.benchmark.clone()));
        put("metric", self.metric.clone());
        out
    }

    /// Key/value pairs for embedding in JSON outputs.
    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .to_text()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), serde_json::Value::String(v.to_string())))
            .collect();
        serde_json::Value::Object(map)
    }

    pub fn seed_or_default(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn proxy_config(&self) -> ProxyConfig {
        ProxyConfig {
            gamma: self.gamma,
            perturb: PerturbConfig {
                beta: self.beta,
                epsilon: self.epsilon,
                sigma: self.sigma,
                input_kind: self.perturb,
                clip: self.clip,
            },
            components: self.components,
            exclude_head: self.exclude_head,
            seed: self.seed_or_default(),
        }
    }

    pub fn search_config(&self, shortlist: usize) -> SearchConfig {
        SearchConfig {
            space: self.space,
            algorithm: self.algo,
            budget: self.budget,
            warmup: self.warmup.map(|(pool_size, top_k)| WarmupConfig { pool_size, top_k }),
            moves: self.moves.map(|(radius, fan_out)| MoveConfig { radius, fan_out }),
            population: self.population,
            sample: self.sample,
            seed: self.seed_or_default(),
            shortlist,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("beta", "0.25").unwrap();
        c.set("clip", "0,1").unwrap();
        c.set("synthetic", "n=4 classes=3 seed=9").unwrap();
        c.set("warmup", "50,10").unwrap();
        c.set("stack", "4,2,1,8,8,5").unwrap();
        c.set("in_channels", "1").unwrap();
        c.set("batch", "x y.crzb").unwrap();
        let text = c.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
        for (line, key) in text.lines().zip(RunConfig::KEYS) {
            assert!(line.starts_with(&format!("{key} = ")));
        }
    }

    #[test]
    fn file_then_flags() {
        let mut c = RunConfig::parse("# comment\n\nbeta = 0.5\nseed=3\n").unwrap();
        assert_eq!((c.beta, c.seed), (0.5, Some(3)));
        c.set("beta", "0").unwrap();
        assert_eq!(c.beta, 0.0);
    }

    #[test]
    fn errors_name_lines_and_keys() {
        assert_eq!(RunConfig::parse("beta\n"), Err(ConfigError::Syntax(1)));
        match RunConfig::parse("\nfoo = 1\n") {
            Err(ConfigError::Line { line: 2, source }) => {
                assert_eq!(*source, ConfigError::UnknownKey("foo".into()))
            }
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse("beta = abc").is_err());
        assert!(RunConfig::parse("beta = inf").is_err());
        assert!(RunConfig::parse("clip = 1,0").is_err());
        assert!(RunConfig::parse("stack = 8,3,1,15,16,10").is_err());
        assert!(RunConfig::parse("components = XZ").is_err());
        assert!(RunConfig::parse("synthetic = n=0").is_err());
    }

    #[test]
    fn synthetic_spec() {
        let s: SyntheticSpec = "n=8 classes=10 seed=5".parse().unwrap();
        assert_eq!((s.n, s.classes, s.seed), (8, Some(10), Some(5)));
        assert_eq!(s.to_string().parse::<SyntheticSpec>().unwrap(), s);
        assert!("k=1".parse::<SyntheticSpec>().is_err());
    }
}
