//! Surrogate construction: layer-wise gradient-aligned parameter
//! perturbation and perturbed input batches (FGSM or Gaussian noise).

use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::forward_trace;
use crate::error::{Error, Result};
use crate::plan::NetworkPlan;
use crate::tensor::{l2_norm, Batch, GradientSet, ParameterSet, Tensor};

/// Norms below this are treated as zero.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputPerturbation {
    Fgsm,
    Gaussian,
}

impl FromStr for InputPerturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(Self::Fgsm),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::Config(format!("unknown perturbation \"{other}\""))),
        }
    }
}

impl std::fmt::Display for InputPerturbation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fgsm => "fgsm",
            Self::Gaussian => "gaussian",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    /// Relative parameter step.
    pub beta: f64,
    /// FGSM budget.
    pub epsilon: f64,
    /// Gaussian noise std.
    pub sigma: f64,
    pub input_kind: InputPerturbation,
    pub clip: Option<(f64, f64)>,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            beta: 0.01,
            epsilon: 8.0 / 255.0,
            sigma: 8.0 / 255.0,
            input_kind: InputPerturbation::Fgsm,
            clip: None,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("epsilon", self.epsilon), ("sigma", self.sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if let Some((lo, hi)) = self.clip {
            if lo.is_nan() || hi.is_nan() || lo >= hi {
                return Err(Error::Config(format!("clip range [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }
}

/// `θʳ_m = θ_m + β · g_m/‖g_m‖ · ‖θ_m‖` per layer, with each layer's weight
/// and bias flattened into one vector. Layers with a vanishing parameter or
/// gradient norm are left unchanged.
pub fn robust_params(params: &ParameterSet, grads: &GradientSet, beta: f64) -> Result<ParameterSet> {
    params.check_same_layout(grads)?;
    let mut out = params.clone();
    if beta == 0.0 {
        return Ok(out);
    }
    for m in 0..params.num_layers() {
        let theta = params.layer_vector(m);
        let g = grads.layer_vector(m);
        let tn = l2_norm(&theta);
        let gn = l2_norm(&g);
        if tn < NORM_GUARD || gn < NORM_GUARD {
            continue;
        }
        let scale = beta * tn / gn;
        let shifted: Vec<f64> = theta.iter().zip(&g).map(|(t, d)| t + scale * d).collect();
        out.set_layer_vector(m, &shifted)?;
    }
    Ok(out)
}

/// `sign` with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `x + ε · sign(grad)`, clipped afterwards when a range is given.
pub fn apply_sign_step(images: &Tensor, input_grad: &Tensor, epsilon: f64, clip: Option<(f64, f64)>) -> Result<Tensor> {
    let mut out = images.add_scaled(&input_grad.map(sign), epsilon)?;
    if let Some((lo, hi)) = clip {
        for v in out.data_mut() {
            *v = v.clamp(lo, hi);
        }
    }
    Ok(out)
}

/// One-step sign attack on the input through the network at `params`.
/// Returns the perturbed images; labels are untouched.
pub fn fgsm(
    plan: &NetworkPlan,
    params: &ParameterSet,
    batch: &Batch,
    epsilon: f64,
    clip: Option<(f64, f64)>,
) -> Result<Tensor> {
    let mut trace = forward_trace(plan, params, batch.images())?;
    let (_, _, dx) = trace.backward_cross_entropy(batch.labels())?;
    apply_sign_step(batch.images(), &dx, epsilon, clip)
}

/// `x + η`, η ~ N(0, σ²) i.i.d.
pub fn gaussian_perturb<R: Rng + ?Sized>(batch: &Batch, sigma: f64, rng: &mut R) -> Result<Tensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let mut out = batch.images().clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    for v in out.data_mut() {
        *v += normal.sample(rng);
    }
    Ok(out)
}
