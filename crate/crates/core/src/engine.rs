//! Network evaluation with a recorded trace and a single reverse sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::plan::{LayerKind, NetworkPlan, StepOp};
use crate::tensor::{Batch, GradientSet, ParamEntry, ParamRole, ParameterSet, Tensor};

/// Fan-in scaled uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
pub fn init_params(plan: &NetworkPlan, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(2 * plan.num_layers());
    for layer in plan.layers() {
        let bound = (6.0 / layer.kind.fan_in() as f64).sqrt();
        let shape = layer.kind.weight_shape();
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
        let (wrole, brole) = match layer.kind {
            LayerKind::Conv { .. } => (ParamRole::ConvWeight, ParamRole::ConvBias),
            LayerKind::Linear { .. } => (ParamRole::LinearWeight, ParamRole::LinearBias),
        };
        entries.push(ParamEntry {
            layer_id: layer.id.clone(),
            role: wrole,
            tensor: Tensor::from_parts(shape, data),
        });
        entries.push(ParamEntry {
            layer_id: layer.id.clone(),
            role: brole,
            tensor: Tensor::zeros(&[layer.kind.bias_len()]),
        });
    }
    ParameterSet::new(entries).expect("plan layer ids are unique")
}

fn check_params(plan: &NetworkPlan, params: &ParameterSet) -> Result<()> {
    if params.num_layers() != plan.num_layers() || !params.entries().len().is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "plan has {} layers, parameters cover {}",
            plan.num_layers(),
            params.num_layers()
        )));
    }
    for (m, layer) in plan.layers().iter().enumerate() {
        if params.layer_id(m) != layer.id
            || params.weight(m).shape() != layer.kind.weight_shape()
            || params.bias(m).shape() != [layer.kind.bias_len()]
        {
            return Err(Error::Shape(format!(
                "parameters for layer {} do not match the plan",
                layer.id
            )));
        }
    }
    Ok(())
}

/// Forward values of every node plus the caches needed by one reverse sweep.
#[derive(Debug)]
pub struct EvaluationTrace<'a> {
    plan: &'a NetworkPlan,
    params: &'a ParameterSet,
    values: Vec<Tensor>,
    argmax: Vec<Option<Vec<usize>>>,
    swept: bool,
}

pub fn forward_trace<'a>(
    plan: &'a NetworkPlan,
    params: &'a ParameterSet,
    images: &Tensor,
) -> Result<EvaluationTrace<'a>> {
    check_params(plan, params)?;
    let [c, h, w] = plan.input_shape();
    match *images.shape() {
        [n, ic, ih, iw] if n >= 1 && ic == c && ih == h && iw == w => {}
        ref s => {
            return Err(Error::Shape(format!(
                "plan expects (N, {c}, {h}, {w}) images, got {s:?}"
            )))
        }
    }
    let n = images.batch_size();
    let mut values: Vec<Tensor> = Vec::with_capacity(plan.steps().len() + 1);
    let mut argmax = vec![None; plan.steps().len()];
    values.push(images.clone());
    for (k, step) in plan.steps().iter().enumerate() {
        let input = step.inputs.first().map(|id| &values[id.0]);
        let out = match step.op {
            StepOp::ConvRelu { layer, dilation, .. } => {
                let pre = ops::conv2d_forward(
                    input.unwrap(),
                    params.weight(layer),
                    params.bias(layer),
                    dilation,
                )?;
                if !pre.is_finite() {
                    return Err(Error::NonFinite(step.label.clone()));
                }
                ops::relu_forward(&pre)
            }
            StepOp::AvgPool3 => ops::avg_pool3_forward(input.unwrap())?,
            StepOp::MaxPool3 => {
                let (out, arg) = ops::max_pool3_forward(input.unwrap())?;
                argmax[k] = Some(arg);
                out
            }
            StepOp::Downsample => ops::avg_pool2_forward(input.unwrap())?,
            StepOp::Sum => {
                let mut acc = values[step.inputs[0].0].clone();
                for id in &step.inputs[1..] {
                    acc.accumulate(&values[id.0]);
                }
                acc
            }
            StepOp::Zeros => {
                let mut shape = vec![n];
                shape.extend_from_slice(&step.shape);
                Tensor::zeros(&shape)
            }
            StepOp::GlobalAvgPool => ops::global_avg_pool_forward(input.unwrap())?,
            StepOp::Linear { layer } => {
                ops::linear_forward(input.unwrap(), params.weight(layer), params.bias(layer))?
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite(step.label.clone()));
        }
        values.push(out);
    }
    Ok(EvaluationTrace {
        plan,
        params,
        values,
        argmax,
        swept: false,
    })
}

impl<'a> EvaluationTrace<'a> {
    pub fn plan(&self) -> &'a NetworkPlan {
        self.plan
    }

    pub fn logits(&self) -> &Tensor {
        &self.values[self.plan.output().0]
    }

    /// Post-activation output of parameterized layer `m` (the logits for the
    /// head).
    pub fn layer_output(&self, m: usize) -> &Tensor {
        &self.values[self.plan.layers()[m].node.0]
    }

    /// One feature tensor per parameterized layer, in layer order.
    pub fn features(&self) -> Vec<&Tensor> {
        (0..self.plan.num_layers()).map(|m| self.layer_output(m)).collect()
    }

    pub fn is_swept(&self) -> bool {
        self.swept
    }

    /// Reverse sweep seeded with the gradient of a scalar objective with
    /// respect to the logits. Returns parameter gradients and the gradient
    /// with respect to the input images.
    pub fn backward(&mut self, dlogits: &Tensor) -> Result<(GradientSet, Tensor)> {
        if self.swept {
            return Err(Error::AlreadySwept);
        }
        if dlogits.shape() != self.logits().shape() {
            return Err(Error::Shape(format!(
                "logit gradient {:?} vs logits {:?}",
                dlogits.shape(),
                self.logits().shape()
            )));
        }
        self.swept = true;
        let plan = self.plan;
        let params = self.params;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[plan.output().0] = Some(dlogits.clone());
        let mut pgrads = params.zeros_like();

        fn add(slot: &mut Option<Tensor>, g: Tensor) {
            match slot {
                Some(acc) => acc.accumulate(&g),
                None => *slot = Some(g),
            }
        }

        for (k, step) in plan.steps().iter().enumerate().rev() {
            let node = k + 1;
            let Some(g) = grads[node].take() else {
                continue;
            };
            let in_id = step.inputs.first().map(|id| id.0);
            match step.op {
                StepOp::ConvRelu { layer, dilation, .. } => {
                    let dpre = ops::relu_backward(&self.values[node], &g);
                    let input = &self.values[in_id.unwrap()];
                    let (dx, dw, db) =
                        ops::conv2d_backward(input, params.weight(layer), dilation, &dpre);
                    pgrads.entries_mut()[2 * layer].tensor = dw;
                    pgrads.entries_mut()[2 * layer + 1].tensor = db;
                    add(&mut grads[in_id.unwrap()], dx);
                }
                StepOp::AvgPool3 => {
                    let i = in_id.unwrap();
                    let dx = ops::avg_pool3_backward(self.values[i].shape(), &g);
                    add(&mut grads[i], dx);
                }
                StepOp::MaxPool3 => {
                    let i = in_id.unwrap();
                    let arg = self.argmax[k].as_ref().expect("cached in forward");
                    let dx = ops::max_pool3_backward(self.values[i].shape(), arg, &g);
                    add(&mut grads[i], dx);
                }
                StepOp::Downsample => {
                    let i = in_id.unwrap();
                    let dx = ops::avg_pool2_backward(self.values[i].shape(), &g);
                    add(&mut grads[i], dx);
                }
                StepOp::Sum => {
                    for id in &step.inputs {
                        add(&mut grads[id.0], g.clone());
                    }
                }
                StepOp::Zeros => {}
                StepOp::GlobalAvgPool => {
                    let i = in_id.unwrap();
                    let dx = ops::global_avg_pool_backward(self.values[i].shape(), &g);
                    add(&mut grads[i], dx);
                }
                StepOp::Linear { layer } => {
                    let i = in_id.unwrap();
                    let (dx, dw, db) =
                        ops::linear_backward(&self.values[i], params.weight(layer), &g);
                    pgrads.entries_mut()[2 * layer].tensor = dw;
                    pgrads.entries_mut()[2 * layer + 1].tensor = db;
                    add(&mut grads[i], dx);
                }
            }
        }
        let input_grad = grads[0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.values[0].shape()));
        Ok((pgrads, input_grad))
    }

    /// Cross-entropy loss against `labels`, then the reverse sweep.
    pub fn backward_cross_entropy(
        &mut self,
        labels: &[usize],
    ) -> Result<(f64, GradientSet, Tensor)> {
        let (loss, dlogits) = cross_entropy_grad(self.logits(), labels)?;
        let (g, dx) = self.backward(&dlogits)?;
        Ok((loss, g, dx))
    }
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        ref s => return Err(Error::Shape(format!("logits must be (N, K), got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: n,
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Shape(format!("label {bad} out of range for {k} classes")));
    }
    Ok((n, k))
}

/// Mean negative log-softmax of the labelled class, max-shifted.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_grad(logits, labels)?.0)
}

/// Loss and its gradient with respect to the logits.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = check_labels(logits, labels)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * k];
    for (b, &y) in labels.iter().enumerate() {
        let row = logits.sample(b);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        for j in 0..k {
            grad[b * k + j] = (row[j] - log_z).exp() / n as f64;
        }
        grad[b * k + y] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, Tensor::from_parts(vec![n, k], grad)))
}

pub fn loss(plan: &NetworkPlan, params: &ParameterSet, batch: &Batch) -> Result<f64> {
    let trace = forward_trace(plan, params, batch.images())?;
    cross_entropy(trace.logits(), batch.labels())
}

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Probes discarded because a step of ±h flips some ReLU.
    pub skipped: usize,
    /// Coordinate, analytic and numeric value at the worst comparison.
    pub worst: Option<(usize, f64, f64)>,
}

/// Loss plus the sign pattern of every conv-layer activation.
fn probe(plan: &NetworkPlan, params: &ParameterSet, batch: &Batch) -> Result<(f64, Vec<bool>)> {
    let trace = forward_trace(plan, params, batch.images())?;
    let pattern = plan
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.kind, LayerKind::Conv { .. }))
        .flat_map(|(m, _)| trace.layer_output(m).data().iter().map(|&v| v > 0.0))
        .collect();
    Ok((cross_entropy(trace.logits(), batch.labels())?, pattern))
}

/// Compares analytic gradients with central differences at `num_coords`
/// uniformly drawn parameter coordinates. A central difference that
/// straddles a ReLU kink measures neither one-sided derivative, so probes
/// that change any activation pattern are redrawn (at most 20 draws per
/// requested coordinate).
///
/// Relative error is `|a − n| / max(|a|, |n|, τ)`. Cancellation in double
/// precision leaves central differences with an absolute error near
/// `ε·|L|/h`, so `τ = 1e4·ε·max(1, |L|)/h` is the gradient size below which
/// rounding alone would exceed a relative error of 1e-4.
pub fn finite_diff_check<R: Rng + ?Sized>(
    plan: &NetworkPlan,
    params: &ParameterSet,
    batch: &Batch,
    num_coords: usize,
    h: f64,
    rng: &mut R,
) -> Result<FdReport> {
    if h <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    if num_coords == 0 {
        return Ok(report);
    }
    let mut trace = forward_trace(plan, params, batch.images())?;
    let (_, grads, _) = trace.backward_cross_entropy(batch.labels())?;
    let (base_loss, base) = probe(plan, params, batch)?;
    let floor = 1e4 * f64::EPSILON * base_loss.abs().max(1.0) / h;
    let total = params.total_len();
    let mut probe_params = params.clone();
    for _ in 0..20 * num_coords {
        if report.checked == num_coords {
            break;
        }
        let i = rng.random_range(0..total);
        let orig = params.value(i).unwrap();
        *probe_params.value_mut(i).unwrap() = orig + h;
        let (up, up_pattern) = probe(plan, &probe_params, batch)?;
        *probe_params.value_mut(i).unwrap() = orig - h;
        let (down, down_pattern) = probe(plan, &probe_params, batch)?;
        *probe_params.value_mut(i).unwrap() = orig;
        if up_pattern != base || down_pattern != base {
            report.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.value(i).unwrap();
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((i, analytic, numeric));
        }
        report.checked += 1;
    }
    Ok(report)
}
