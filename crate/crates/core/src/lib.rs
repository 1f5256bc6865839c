//! Training-free robustness scoring for cell-based convolutional
//! architectures.
//!
//! A candidate cell is compiled into a [`NetworkPlan`], initialized at
//! random and scored by comparing a clean network with a perturbed copy
//! (perturbed parameters, perturbed inputs) after one gradient step. The
//! resulting scores drive rank-correlation studies against accuracy tables
//! and sampling-based search.

pub mod benchmark;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod ops;
pub mod perturb;
pub mod plan;
pub mod proxies;
pub mod scoring;
pub mod search;
pub mod space;
pub mod tensor;

pub use benchmark::{load_benchmark, parse_benchmark, synth_benchmark, BenchmarkTable, Planted};
pub use data::synthetic_batch;
pub use engine::{cross_entropy, finite_diff_check, forward_trace, FdReport, init_params, EvaluationTrace};
pub use error::{Error, Result};
pub use eval::{accuracy, correlate, feature_distance_report, hrs, spearman, CorrelationReport};
pub use perturb::{fgsm, gaussian_perturb, robust_params, InputPerturbation, PerturbConfig};
pub use plan::{build_plan, count_flops, count_params, NetworkPlan, StackConfig};
pub use proxies::{
    baseline_score, croze, layer_consistency, ComponentMask, ProxyBreakdown, ProxyConfig, ProxyKind,
};
pub use scoring::{derive_seed, score_many, ScoreRow, ScoreSettings};
pub use search::{hybrid_search, Algorithm, SearchConfig, SearchLog};
pub use space::{decode, encode, enumerate_space, mutate, sample_uniform, CellSpec, OperationKind, SpaceKind};
pub use tensor::{Batch, GradientSet, ParameterSet, Tensor};
