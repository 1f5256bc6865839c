//! Zero-cost scoring of randomly initialized networks.
//!
//! The consistency proxy compares a clean surrogate (θ on clean inputs) with
//! a robust surrogate (θʳ on perturbed inputs) layer by layer:
//!
//! * `Z_m = 1 + cos(z_m, zʳ_m)` on layer outputs,
//! * `P_m = 1 + cos(θ₁,m, θʳ₁,m)` on parameters after one gradient step,
//! * `G_m = |cos(g_m, gʳ_m)|` on gradients,
//!
//! and sums `Z_m · P_m · G_m` over layers. Cosines of a vector with norm
//! below [`NORM_GUARD`] are defined as 0.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::forward_trace;
use crate::error::{Error, Result};
use crate::perturb::{self, InputPerturbation, PerturbConfig, NORM_GUARD};
use crate::plan::{count_flops, count_params, LayerKind, NetworkPlan};
use crate::tensor::{dot, l2_norm, Batch, ParameterSet, Tensor};

/// Which consistency factors enter each layer's product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComponentMask {
    pub feature: bool,
    pub parameter: bool,
    pub gradient: bool,
}

impl ComponentMask {
    pub const ALL: ComponentMask = ComponentMask {
        feature: true,
        parameter: true,
        gradient: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.feature || self.parameter || self.gradient)
    }

    /// Product of the enabled factors.
    pub fn combine(&self, z: f64, p: f64, g: f64) -> f64 {
        let mut term = 1.0;
        if self.feature {
            term *= z;
        }
        if self.parameter {
            term *= p;
        }
        if self.gradient {
            term *= g;
        }
        term
    }

    /// Largest value a single layer term can take.
    pub fn max_term(&self) -> f64 {
        self.combine(2.0, 2.0, 1.0)
    }
}

impl Default for ComponentMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for ComponentMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (on, c) in [(self.feature, 'Z'), (self.parameter, 'P'), (self.gradient, 'G')] {
            if on {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for ComponentMask {
    type Err = Error;

    /// Letters from `ZPG` (case-insensitive), e.g. `"ZG"`.
    fn from_str(s: &str) -> Result<Self> {
        let mut mask = ComponentMask {
            feature: false,
            parameter: false,
            gradient: false,
        };
        for c in s.chars() {
            let slot = match c.to_ascii_uppercase() {
                'Z' => &mut mask.feature,
                'P' => &mut mask.parameter,
                'G' => &mut mask.gradient,
                other => {
                    return Err(Error::Config(format!(
                        "unknown component '{other}', expected letters from ZPG"
                    )))
                }
            };
            if *slot {
                return Err(Error::Config(format!("component '{c}' given twice")));
            }
            *slot = true;
        }
        if mask.is_empty() {
            return Err(Error::Config("at least one component is required".into()));
        }
        Ok(mask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    /// Single-step learning rate.
    pub gamma: f64,
    pub perturb: PerturbConfig,
    pub components: ComponentMask,
    /// Drop the linear head from the layer sum.
    pub exclude_head: bool,
    /// Seeds the Gaussian input noise.
    pub seed: u64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            perturb: PerturbConfig::default(),
            components: ComponentMask::ALL,
            exclude_head: false,
            seed: 0,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.components.is_empty() {
            return Err(Error::Config("at least one component is required".into()));
        }
        self.perturb.validate()
    }

    /// Short stable digest of every setting except the seed.
    pub fn hash(&self) -> String {
        let mut c = *self;
        c.seed = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConsistency {
    pub id: String,
    #[serde(rename = "Z")]
    pub z: f64,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "G")]
    pub g: f64,
    pub term: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyBreakdown {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoding: Option<String>,
    pub total: f64,
    #[serde(rename = "M")]
    pub num_layers: usize,
    pub seed: u64,
    pub config_hash: String,
    pub layers: Vec<LayerConsistency>,
}

impl ProxyBreakdown {
    /// Re-sums the stored per-layer factors under another mask.
    pub fn total_under(&self, mask: ComponentMask) -> f64 {
        self.layers.iter().map(|l| mask.combine(l.z, l.p, l.g)).sum()
    }
}

/// Cosine similarity in [-1, 1]; 0 if either vector has vanishing norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na < NORM_GUARD || nb < NORM_GUARD {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// `(Z, P, G)` for one layer from its clean/robust features, one-step
/// parameters and gradients.
pub fn layer_consistency(
    z: &[f64],
    z_r: &[f64],
    theta1: &[f64],
    theta1_r: &[f64],
    g: &[f64],
    g_r: &[f64],
) -> Result<(f64, f64, f64)> {
    for (a, b) in [(z, z_r), (theta1, theta1_r), (g, g_r)] {
        if a.len() != b.len() {
            return Err(Error::LengthMismatch {
                left: a.len(),
                right: b.len(),
            });
        }
    }
    Ok((
        1.0 + cosine(z, z_r),
        1.0 + cosine(theta1, theta1_r),
        cosine(g, g_r).abs(),
    ))
}

/// The consistency proxy. One clean forward/backward, one robust
/// forward/backward on the perturbed batch, plus one extra pass through the
/// robust network when the inputs are perturbed with FGSM.
pub fn croze(
    plan: &NetworkPlan,
    params: &ParameterSet,
    batch: &Batch,
    config: &ProxyConfig,
) -> Result<ProxyBreakdown> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let pc = &config.perturb;

    let mut clean = forward_trace(plan, params, batch.images())?;
    let (_, grads, _) = clean.backward_cross_entropy(batch.labels())?;

    let robust = perturb::robust_params(params, &grads, pc.beta)?;

    let perturbed = match pc.input_kind {
        InputPerturbation::Fgsm => perturb::fgsm(plan, &robust, batch, pc.epsilon, pc.clip)?,
        InputPerturbation::Gaussian => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut x = perturb::gaussian_perturb(batch, pc.sigma, &mut rng)?;
            if let Some((lo, hi)) = pc.clip {
                for v in x.data_mut() {
                    *v = v.clamp(lo, hi);
                }
            }
            x
        }
    };

    let mut robust_trace = forward_trace(plan, &robust, &perturbed)?;
    let (_, grads_r, _) = robust_trace.backward_cross_entropy(batch.labels())?;

    let theta1 = params.add_scaled(&grads, -config.gamma)?;
    let theta1_r = robust.add_scaled(&grads_r, -config.gamma)?;

    let count = if config.exclude_head {
        plan.num_layers() - 1
    } else {
        plan.num_layers()
    };
    let mut layers = Vec::with_capacity(count);
    for m in 0..count {
        let (z, p, g) = layer_consistency(
            clean.layer_output(m).data(),
            robust_trace.layer_output(m).data(),
            &theta1.layer_vector(m),
            &theta1_r.layer_vector(m),
            &grads.layer_vector(m),
            &grads_r.layer_vector(m),
        )?;
        let term = config.components.combine(z, p, g);
        layers.push(LayerConsistency {
            id: plan.layers()[m].id.clone(),
            z,
            p,
            g,
            term,
        });
    }
    let total: f64 = layers.iter().map(|l| l.term).sum();
    if !total.is_finite() {
        return Err(Error::NonFinite("proxy total".into()));
    }
    Ok(ProxyBreakdown {
        encoding: None,
        total,
        num_layers: count,
        seed: config.seed,
        config_hash: config.hash(),
        layers,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyKind {
    Croze,
    Plain,
    GradNorm,
    Synflow,
    Naswot,
    NumParams,
    Flops,
}

impl ProxyKind {
    pub const ALL: [ProxyKind; 7] = [
        ProxyKind::Croze,
        ProxyKind::Plain,
        ProxyKind::GradNorm,
        ProxyKind::Synflow,
        ProxyKind::Naswot,
        ProxyKind::NumParams,
        ProxyKind::Flops,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProxyKind::Croze => "croze",
            ProxyKind::Plain => "plain",
            ProxyKind::GradNorm => "grad_norm",
            ProxyKind::Synflow => "synflow",
            ProxyKind::Naswot => "naswot",
            ProxyKind::NumParams => "num_params",
            ProxyKind::Flops => "flops",
        }
    }

    /// Whether scoring needs a data batch.
    pub fn needs_batch(self) -> bool {
        !matches!(self, ProxyKind::NumParams | ProxyKind::Flops | ProxyKind::Synflow)
    }

    /// Whether scoring needs initialized parameters.
    pub fn needs_params(self) -> bool {
        !matches!(self, ProxyKind::NumParams | ProxyKind::Flops)
    }
}

impl fmt::Display for ProxyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProxyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown proxy \"{s}\"")))
    }
}

/// Baseline scorers. `batch` is ignored by the data-free kinds and may be
/// `None` for them.
pub fn baseline_score(
    kind: ProxyKind,
    plan: &NetworkPlan,
    params: &ParameterSet,
    batch: Option<&Batch>,
) -> Result<f64> {
    let need_batch = || batch.ok_or_else(|| Error::Config(format!("{kind} needs a batch")));
    match kind {
        ProxyKind::Croze => Err(Error::Config(
            "croze is not a baseline; use croze()".into(),
        )),
        ProxyKind::NumParams => Ok(count_params(plan) as f64),
        ProxyKind::Flops => {
            let [_, h, w] = plan.input_shape();
            Ok(count_flops(plan, h, w) as f64)
        }
        ProxyKind::Plain => {
            let b = need_batch()?;
            let mut trace = forward_trace(plan, params, b.images())?;
            let (_, g, _) = trace.backward_cross_entropy(b.labels())?;
            Ok(params.iter_values().zip(g.iter_values()).map(|(t, d)| t * d).sum())
        }
        ProxyKind::GradNorm => {
            let b = need_batch()?;
            let mut trace = forward_trace(plan, params, b.images())?;
            let (_, g, _) = trace.backward_cross_entropy(b.labels())?;
            Ok((0..g.num_layers()).map(|m| l2_norm(&g.layer_vector(m))).sum())
        }
        ProxyKind::Synflow => synflow(plan, params),
        ProxyKind::Naswot => naswot(plan, params, need_batch()?),
    }
}

/// `Σ |θ ⊙ ∂R/∂θ|` with `R` the summed logits of the network evaluated at
/// `|θ|` on a single all-ones image.
pub fn synflow(plan: &NetworkPlan, params: &ParameterSet) -> Result<f64> {
    let abs = params.map(f64::abs);
    let [c, h, w] = plan.input_shape();
    let ones = Tensor::full(&[1, c, h, w], 1.0);
    let mut trace = forward_trace(plan, &abs, &ones)?;
    let seed = Tensor::full(trace.logits().shape(), 1.0);
    let (g, _) = trace.backward(&seed)?;
    let score: f64 = abs
        .iter_values()
        .zip(g.iter_values())
        .map(|(t, d)| (t * d).abs())
        .sum();
    if !score.is_finite() {
        return Err(Error::NonFinite("synflow score".into()));
    }
    Ok(score)
}

/// `log |det(K + 1e-6 I)|` with `K_ab = N_A − hamming(c_a, c_b)` over the
/// binary ReLU activation codes of each sample.
pub fn naswot(plan: &NetworkPlan, params: &ParameterSet, batch: &Batch) -> Result<f64> {
    let trace = forward_trace(plan, params, batch.images())?;
    let n = batch.len();
    let mut codes: Vec<Vec<bool>> = vec![Vec::new(); n];
    for (m, layer) in plan.layers().iter().enumerate() {
        if matches!(layer.kind, LayerKind::Conv { .. }) {
            let out = trace.layer_output(m);
            for (b, code) in codes.iter_mut().enumerate() {
                code.extend(out.sample(b).iter().map(|&v| v > 0.0));
            }
        }
    }
    let units = codes[0].len() as f64;
    let kernel = DMatrix::from_fn(n, n, |a, b| {
        let hamming = codes[a].iter().zip(&codes[b]).filter(|(x, y)| x != y).count() as f64;
        units - hamming + if a == b { 1e-6 } else { 0.0 }
    });
    let lu = kernel.lu();
    let mut logdet = 0.0;
    for i in 0..n {
        let pivot = lu.u()[(i, i)].abs();
        if pivot <= 0.0 || !pivot.is_finite() {
            return Err(Error::Degenerate(
                "activation kernel is singular".into(),
            ));
        }
        logdet += pivot.ln();
    }
    Ok(logdet)
}

/// Score with any proxy kind; the breakdown is present for `croze` only.
pub fn score_with(
    kind: ProxyKind,
    plan: &NetworkPlan,
    params: Option<&ParameterSet>,
    batch: Option<&Batch>,
    config: &ProxyConfig,
) -> Result<(f64, Option<ProxyBreakdown>)> {
    let params_for = |k: ProxyKind| {
        params.ok_or_else(|| Error::Config(format!("{k} needs initialized parameters")))
    };
    match kind {
        ProxyKind::Croze => {
            let b = batch.ok_or_else(|| Error::Config("croze needs a batch".into()))?;
            let bd = croze(plan, params_for(kind)?, b, config)?;
            Ok((bd.total, Some(bd)))
        }
        ProxyKind::NumParams | ProxyKind::Flops => {
            let empty = ParameterSet::new(Vec::new())?;
            Ok((baseline_score(kind, plan, &empty, None)?, None))
        }
        _ => Ok((baseline_score(kind, plan, params_for(kind)?, batch)?, None)),
    }
}
