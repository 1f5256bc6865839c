//! Scalar reverse-mode reference for the consistency score on a
//! conv3x3+ReLU -> global average pool -> linear network. Shares no code
//! with the tensor engine: every value is a tape node and gradients come
//! from one generic reverse accumulation.

use std::cell::RefCell;

#[derive(Clone, Copy)]
pub struct Var(usize);

struct Node {
    parents: Vec<(usize, f64)>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    values: RefCell<Vec<f64>>,
}

impl Tape {
    fn push(&self, value: f64, parents: Vec<(usize, f64)>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents });
        self.values.borrow_mut().push(value);
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: f64) -> Var {
        self.push(value, Vec::new())
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values.borrow()[v.0]
    }

    /// `c + Σ a_i b_i`.
    pub fn affine(&self, c: Var, a: &[Var], b: &[Var]) -> Var {
        let values = self.values.borrow();
        let mut total = values[c.0];
        let mut parents = vec![(c.0, 1.0)];
        for (x, y) in a.iter().zip(b) {
            let (vx, vy) = (values[x.0], values[y.0]);
            total += vx * vy;
            parents.push((x.0, vy));
            parents.push((y.0, vx));
        }
        drop(values);
        self.push(total, parents)
    }

    pub fn relu(&self, x: Var) -> Var {
        let v = self.value(x);
        let d = if v > 0.0 { 1.0 } else { 0.0 };
        self.push(v.max(0.0), vec![(x.0, d)])
    }

    pub fn scaled_sum(&self, xs: &[Var], scale: f64) -> Var {
        let total: f64 = xs.iter().map(|&x| self.value(x)).sum();
        self.push(scale * total, xs.iter().map(|x| (x.0, scale)).collect())
    }

    pub fn exp(&self, x: Var) -> Var {
        let e = self.value(x).exp();
        self.push(e, vec![(x.0, e)])
    }

    pub fn ln(&self, x: Var) -> Var {
        let v = self.value(x);
        self.push(v.ln(), vec![(x.0, 1.0 / v)])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.push(self.value(a) - self.value(b), vec![(a.0, 1.0), (b.0, -1.0)])
    }

    pub fn shift(&self, a: Var, c: f64) -> Var {
        self.push(self.value(a) + c, vec![(a.0, 1.0)])
    }

    /// d out / d every node.
    pub fn gradient(&self, out: Var) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        adj[out.0] = 1.0;
        for i in (0..=out.0).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            for &(p, d) in &nodes[i].parents {
                adj[p] += a * d;
            }
        }
        adj
    }
}

/// Flat network description. Conv weight layout `[out][in][3][3]`, linear
/// weight layout `[class][channel]`.
#[derive(Clone, Debug)]
pub struct TinyNet {
    pub in_channels: usize,
    pub channels: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub conv_w: Vec<f64>,
    pub conv_b: Vec<f64>,
    pub lin_w: Vec<f64>,
    pub lin_b: Vec<f64>,
}

struct Pass {
    loss: f64,
    conv_out: Vec<f64>,
    logits: Vec<f64>,
    /// conv weight, conv bias, linear weight, linear bias gradients.
    grads: [Vec<f64>; 4],
    input_grad: Vec<f64>,
}

impl TinyNet {
    fn params(&self) -> [Vec<f64>; 4] {
        [
            self.conv_w.clone(),
            self.conv_b.clone(),
            self.lin_w.clone(),
            self.lin_b.clone(),
        ]
    }

    fn with_params(&self, p: &[Vec<f64>; 4]) -> TinyNet {
        TinyNet {
            conv_w: p[0].clone(),
            conv_b: p[1].clone(),
            lin_w: p[2].clone(),
            lin_b: p[3].clone(),
            ..self.clone()
        }
    }

    fn pass(&self, images: &[f64], labels: &[usize]) -> Pass {
        let (ci, co, k, h, w) = (self.in_channels, self.channels, self.classes, self.height, self.width);
        let n = labels.len();
        let t = Tape::default();
        let x: Vec<Var> = images.iter().map(|&v| t.leaf(v)).collect();
        let cw: Vec<Var> = self.conv_w.iter().map(|&v| t.leaf(v)).collect();
        let cb: Vec<Var> = self.conv_b.iter().map(|&v| t.leaf(v)).collect();
        let lw: Vec<Var> = self.lin_w.iter().map(|&v| t.leaf(v)).collect();
        let lb: Vec<Var> = self.lin_b.iter().map(|&v| t.leaf(v)).collect();

        let mut conv_out = Vec::new();
        let mut logits = Vec::new();
        let mut losses = Vec::new();
        for s in 0..n {
            let mut pooled = Vec::with_capacity(co);
            for o in 0..co {
                let mut plane = Vec::with_capacity(h * w);
                for i in 0..h {
                    for j in 0..w {
                        let mut ws = Vec::new();
                        let mut xs = Vec::new();
                        for c in 0..ci {
                            for di in 0..3 {
                                for dj in 0..3 {
                                    let (yi, xj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                                    if yi < 0 || xj < 0 || yi >= h as isize || xj >= w as isize {
                                        continue;
                                    }
                                    ws.push(cw[((o * ci + c) * 3 + di) * 3 + dj]);
                                    xs.push(x[((s * ci + c) * h + yi as usize) * w + xj as usize]);
                                }
                            }
                        }
                        let a = t.relu(t.affine(cb[o], &ws, &xs));
                        conv_out.push(t.value(a));
                        plane.push(a);
                    }
                }
                pooled.push(t.scaled_sum(&plane, 1.0 / (h * w) as f64));
            }
            let row: Vec<Var> = (0..k)
                .map(|c| t.affine(lb[c], &lw[c * co..(c + 1) * co], &pooled))
                .collect();
            let vals: Vec<f64> = row.iter().map(|&v| t.value(v)).collect();
            logits.extend_from_slice(&vals);
            // The max shift is a constant; the loss is invariant to it.
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<Var> = row.iter().map(|&v| t.exp(t.shift(v, -max))).collect();
            let log_z = t.shift(t.ln(t.scaled_sum(&exps, 1.0)), max);
            losses.push(t.sub(log_z, row[labels[s]]));
        }
        let loss = t.scaled_sum(&losses, 1.0 / n as f64);
        let adj = t.gradient(loss);
        let pick = |vs: &[Var]| vs.iter().map(|v| adj[v.0]).collect::<Vec<_>>();
        Pass {
            loss: t.value(loss),
            conv_out,
            logits,
            grads: [pick(&cw), pick(&cb), pick(&lw), pick(&lb)],
            input_grad: pick(&x),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (d / (na * nb)).clamp(-1.0, 1.0)
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

pub struct ReferenceScore {
    pub total: f64,
    pub clean_loss: f64,
    /// (Z, P, G) for the conv layer, then the head.
    pub layers: Vec<(f64, f64, f64)>,
}

/// Full score with FGSM inputs (no clipping).
pub fn reference_score(
    net: &TinyNet,
    images: &[f64],
    labels: &[usize],
    beta: f64,
    gamma: f64,
    epsilon: f64,
) -> ReferenceScore {
    let theta = net.params();
    let clean = net.pass(images, labels);

    // Layer-wise perturbation on [weight, bias] of each layer.
    let mut robust = theta.clone();
    for layer in 0..2 {
        let (wi, bi) = (2 * layer, 2 * layer + 1);
        let t = concat(&theta[wi], &theta[bi]);
        let g = concat(&clean.grads[wi], &clean.grads[bi]);
        let (tn, gn) = (norm(&t), norm(&g));
        if tn < 1e-12 || gn < 1e-12 {
            continue;
        }
        for idx in [wi, bi] {
            for (p, d) in robust[idx].iter_mut().zip(&clean.grads[idx]) {
                *p += beta * d / gn * tn;
            }
        }
    }
    let robust_net = net.with_params(&robust);

    let attack = robust_net.pass(images, labels);
    let adv: Vec<f64> = images
        .iter()
        .zip(&attack.input_grad)
        .map(|(x, d)| x + epsilon * if *d > 0.0 { 1.0 } else if *d < 0.0 { -1.0 } else { 0.0 })
        .collect();
    let rob = robust_net.pass(&adv, labels);

    let step = |p: &[Vec<f64>; 4], g: &[Vec<f64>; 4]| -> Vec<Vec<f64>> {
        p.iter()
            .zip(g)
            .map(|(pv, gv)| pv.iter().zip(gv).map(|(a, b)| a - gamma * b).collect())
            .collect()
    };
    let t1 = step(&theta, &clean.grads);
    let t1r = step(&robust, &rob.grads);

    let feats = [(&clean.conv_out, &rob.conv_out), (&clean.logits, &rob.logits)];
    let mut layers = Vec::new();
    let mut total = 0.0;
    for (layer, (f, f_r)) in feats.iter().enumerate() {
        let (wi, bi) = (2 * layer, 2 * layer + 1);
        let z = 1.0 + cos(f, f_r);
        let p = 1.0 + cos(&concat(&t1[wi], &t1[bi]), &concat(&t1r[wi], &t1r[bi]));
        let g = cos(
            &concat(&clean.grads[wi], &clean.grads[bi]),
            &concat(&rob.grads[wi], &rob.grads[bi]),
        )
        .abs();
        total += z * p * g;
        layers.push((z, p, g));
    }
    ReferenceScore {
        total,
        clean_loss: clean.loss,
        layers,
    }
}
