//! Compilation of a cell into a concrete layered network.
//!
//! A [`NetworkPlan`] is a topologically ordered list of steps over numbered
//! nodes (node 0 is the input image batch). Parameterized layers are
//! Conv→ReLU blocks and the final linear head. Cell edges that cannot carry
//! signal are dropped during compilation: an edge survives only if its source
//! is reachable from a cell input through non-zero edges and its target
//! reaches the cell output. Dropped edges contribute exactly zero to the
//! logits, so pruning changes the layer list but never the function.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{CellSpec, OperationKind, SpaceKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOp {
    /// Conv then ReLU; `layer` indexes [`NetworkPlan::layers`].
    ConvRelu {
        layer: usize,
        kernel: usize,
        dilation: usize,
    },
    AvgPool3,
    MaxPool3,
    /// 2×2 average pool, stride 2.
    Downsample,
    Sum,
    Zeros,
    GlobalAvgPool,
    Linear { layer: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub label: String,
    pub op: StepOp,
    pub inputs: Vec<NodeId>,
    /// Per-sample output shape: (C, H, W) for feature maps, (F) after pooling.
    pub shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerKind {
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![out_channels, in_channels, kernel, kernel],
            LayerKind::Linear {
                in_features,
                out_features,
            } => vec![out_features, in_features],
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerKind::Conv { out_channels, .. } => out_channels,
            LayerKind::Linear { out_features, .. } => out_features,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            LayerKind::Linear { in_features, .. } => in_features,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.bias_len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub id: String,
    pub kind: LayerKind,
    /// Node holding this layer's post-activation output.
    pub node: NodeId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkPlan {
    input_shape: [usize; 3],
    steps: Vec<Step>,
    layers: Vec<LayerDesc>,
    output: NodeId,
}

impl NetworkPlan {
    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    /// Parameterized layers in topological order; the last is the head.
    pub fn layers(&self) -> &[LayerDesc] {
        &self.layers
    }

    /// Number of parameterized layers.
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn head_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn num_classes(&self) -> usize {
        self.node_shape(self.output)[0]
    }

    pub fn node_shape(&self, node: NodeId) -> &[usize] {
        if node.0 == 0 {
            &self.input_shape
        } else {
            &self.steps[node.0 - 1].shape
        }
    }

    pub fn builder(in_channels: usize, height: usize, width: usize) -> PlanBuilder {
        PlanBuilder {
            input_shape: [in_channels, height, width],
            steps: Vec::new(),
            layers: Vec::new(),
        }
    }
}

/// Incremental construction of arbitrary plans; used by [`build_plan`] and
/// handy for hand-built test networks.
#[derive(Clone, Debug)]
pub struct PlanBuilder {
    input_shape: [usize; 3],
    steps: Vec<Step>,
    layers: Vec<LayerDesc>,
}

impl PlanBuilder {
    pub fn input(&self) -> NodeId {
        NodeId(0)
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        if node.0 == 0 {
            &self.input_shape
        } else {
            &self.steps[node.0 - 1].shape
        }
    }

    fn check(&self, node: NodeId) -> Result<()> {
        if node.0 > self.steps.len() {
            return Err(Error::Shape(format!("node {} does not exist", node.0)));
        }
        Ok(())
    }

    fn feature_map(&self, node: NodeId) -> Result<(usize, usize, usize)> {
        self.check(node)?;
        match *self.shape(node) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(Error::Shape(format!(
                "node {} is not a feature map: {s:?}",
                node.0
            ))),
        }
    }

    fn push(&mut self, label: String, op: StepOp, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        self.steps.push(Step {
            label,
            op,
            inputs,
            shape,
        });
        NodeId(self.steps.len())
    }

    fn check_id(&self, id: &str) -> Result<()> {
        if self.layers.iter().any(|l| l.id == id) {
            return Err(Error::Shape(format!("duplicate layer id {id}")));
        }
        Ok(())
    }

    pub fn conv_relu(
        &mut self,
        id: &str,
        input: NodeId,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<NodeId> {
        let (c, h, w) = self.feature_map(input)?;
        self.check_id(id)?;
        if kernel.is_multiple_of(2) || dilation == 0 || out_channels == 0 {
            return Err(Error::Shape(format!(
                "conv {id}: kernel must be odd, dilation and channels positive"
            )));
        }
        let layer = self.layers.len();
        let node = self.push(
            id.to_string(),
            StepOp::ConvRelu {
                layer,
                kernel,
                dilation,
            },
            vec![input],
            vec![out_channels, h, w],
        );
        self.layers.push(LayerDesc {
            id: id.to_string(),
            kind: LayerKind::Conv {
                in_channels: c,
                out_channels,
                kernel,
                dilation,
            },
            node,
        });
        Ok(node)
    }

    pub fn avg_pool3(&mut self, label: &str, input: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.feature_map(input)?;
        Ok(self.push(label.into(), StepOp::AvgPool3, vec![input], vec![c, h, w]))
    }

    pub fn max_pool3(&mut self, label: &str, input: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.feature_map(input)?;
        Ok(self.push(label.into(), StepOp::MaxPool3, vec![input], vec![c, h, w]))
    }

    pub fn downsample(&mut self, label: &str, input: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.feature_map(input)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "cannot downsample odd spatial size {h}x{w}"
            )));
        }
        Ok(self.push(label.into(), StepOp::Downsample, vec![input], vec![c, h / 2, w / 2]))
    }

    /// Elementwise sum. A single input is returned unchanged.
    pub fn sum(&mut self, label: &str, inputs: &[NodeId]) -> Result<NodeId> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Shape("sum of no inputs".into()))?;
        for &n in inputs {
            self.check(n)?;
            if self.shape(n) != self.shape(first) {
                return Err(Error::Shape(format!(
                    "sum {label}: {:?} vs {:?}",
                    self.shape(n),
                    self.shape(first)
                )));
            }
        }
        if inputs.len() == 1 {
            return Ok(first);
        }
        let shape = self.shape(first).to_vec();
        Ok(self.push(label.into(), StepOp::Sum, inputs.to_vec(), shape))
    }

    pub fn zeros(&mut self, label: &str, shape: &[usize]) -> NodeId {
        self.push(label.into(), StepOp::Zeros, Vec::new(), shape.to_vec())
    }

    pub fn global_avg_pool(&mut self, label: &str, input: NodeId) -> Result<NodeId> {
        let (c, _, _) = self.feature_map(input)?;
        Ok(self.push(label.into(), StepOp::GlobalAvgPool, vec![input], vec![c]))
    }

    pub fn linear(&mut self, id: &str, input: NodeId, out_features: usize) -> Result<NodeId> {
        self.check(input)?;
        self.check_id(id)?;
        if out_features == 0 {
            return Err(Error::Shape(format!("linear {id} has no outputs")));
        }
        let in_features = self.shape(input).iter().product();
        let layer = self.layers.len();
        let node = self.push(
            id.to_string(),
            StepOp::Linear { layer },
            vec![input],
            vec![out_features],
        );
        self.layers.push(LayerDesc {
            id: id.to_string(),
            kind: LayerKind::Linear {
                in_features,
                out_features,
            },
            node,
        });
        Ok(node)
    }

    /// The output must be the node of the last layer, which must be linear.
    pub fn finish(self, output: NodeId) -> Result<NetworkPlan> {
        match self.layers.last() {
            Some(LayerDesc {
                kind: LayerKind::Linear { .. },
                node,
                ..
            }) if *node == output => {}
            _ => {
                return Err(Error::Shape(
                    "plan must end in a linear head producing the output".into(),
                ))
            }
        }
        Ok(NetworkPlan {
            input_shape: self.input_shape,
            steps: self.steps,
            layers: self.layers,
            output,
        })
    }
}

/// How a cell is stacked into a full network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StackConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Stem channels; doubled at every reduction.
    pub channels: usize,
    pub stages: usize,
    pub cells_per_stage: usize,
    pub num_classes: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            height: 16,
            width: 16,
            channels: 8,
            stages: 3,
            cells_per_stage: 1,
            num_classes: 10,
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.in_channels,
            self.height,
            self.width,
            self.channels,
            self.stages,
            self.cells_per_stage,
            self.num_classes,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("stack counts must all be at least 1".into()));
        }
        let factor = 1usize
            .checked_shl(self.stages as u32 - 1)
            .filter(|f| *f <= self.height.min(self.width))
            .ok_or_else(|| Error::Config("too many stages for the input size".into()))?;
        if !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by 2^(stages-1) = {factor}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Which cell edges can carry signal; see the module docs.
pub fn live_edges(cell: &CellSpec) -> Vec<bool> {
    let space = cell.space();
    let n = space.num_nodes();
    let inputs = space.num_input_nodes();
    let is_output = |j: usize| match space {
        SpaceKind::Nb201 => j == n - 1,
        SpaceKind::DartsLite => j >= inputs,
    };
    let mut nonzero = vec![false; n];
    for (j, nz) in nonzero.iter_mut().enumerate().take(inputs) {
        *nz = j < inputs;
    }
    for j in inputs..n {
        nonzero[j] = cell
            .edges()
            .iter()
            .any(|e| e.to == j && e.op != OperationKind::Zero && nonzero[e.from]);
    }
    let mut reaches = vec![false; n];
    for j in (0..n).rev() {
        reaches[j] = is_output(j)
            || cell
                .edges()
                .iter()
                .any(|e| e.from == j && e.op != OperationKind::Zero && reaches[e.to]);
    }
    cell.edges()
        .iter()
        .map(|e| e.op != OperationKind::Zero && nonzero[e.from] && reaches[e.to])
        .collect()
}

fn build_cell(
    b: &mut PlanBuilder,
    cell: &CellSpec,
    prefix: &str,
    inputs: &[NodeId],
) -> Result<NodeId> {
    let space = cell.space();
    let shape = b.shape(*inputs.last().unwrap()).to_vec();
    let channels = shape[0];
    let live = live_edges(cell);
    let mut nodes: Vec<Option<NodeId>> = inputs.iter().copied().map(Some).collect();
    for j in space.num_input_nodes()..space.num_nodes() {
        let mut contributions = Vec::new();
        for (e, _) in cell
            .edges()
            .iter()
            .zip(&live)
            .filter(|(e, &l)| l && e.to == j)
        {
            let src = nodes[e.from].expect("live edges have non-zero sources");
            let label = format!("{prefix}.e{}-{}", e.from, e.to);
            let out = match e.op {
                OperationKind::Skip => src,
                OperationKind::AvgPool3x3 => b.avg_pool3(&label, src)?,
                OperationKind::MaxPool3x3 => b.max_pool3(&label, src)?,
                OperationKind::Zero => unreachable!("zero edges are never live"),
                conv => match conv.primitive() {
                    crate::ops::Primitive::Conv { kernel, dilation } => {
                        b.conv_relu(&label, src, channels, kernel, dilation)?
                    }
                    other => unreachable!("{other:?} is not a conv"),
                },
            };
            contributions.push(out);
        }
        nodes.push(if contributions.is_empty() {
            None
        } else {
            Some(b.sum(&format!("{prefix}.n{j}"), &contributions)?)
        });
    }
    let outputs: Vec<NodeId> = match space {
        SpaceKind::Nb201 => nodes[space.num_nodes() - 1].into_iter().collect(),
        SpaceKind::DartsLite => nodes[space.num_input_nodes()..].iter().flatten().copied().collect(),
    };
    if outputs.is_empty() {
        Ok(b.zeros(&format!("{prefix}.out"), &shape))
    } else {
        b.sum(&format!("{prefix}.out"), &outputs)
    }
}

/// stem conv3x3 → stages of cells with (avg-pool 2×2, conv1x1 ×2 channels)
/// reductions between them → global average pool → linear head.
pub fn build_plan(cell: &CellSpec, stack: &StackConfig) -> Result<NetworkPlan> {
    stack.validate()?;
    let mut b = NetworkPlan::builder(stack.in_channels, stack.height, stack.width);
    let mut x = b.conv_relu("stem", b.input(), stack.channels, 3, 1)?;
    let mut prev = x;
    let mut channels = stack.channels;
    for s in 0..stack.stages {
        if s > 0 {
            channels *= 2;
            let pooled = b.downsample(&format!("reduce{s}.pool"), x)?;
            x = b.conv_relu(&format!("reduce{s}"), pooled, channels, 1, 1)?;
            prev = x;
        }
        for c in 0..stack.cells_per_stage {
            let inputs = match cell.space() {
                SpaceKind::Nb201 => vec![x],
                SpaceKind::DartsLite => vec![prev, x],
            };
            let out = build_cell(&mut b, cell, &format!("s{s}.c{c}"), &inputs)?;
            prev = x;
            x = out;
        }
    }
    let pooled = b.global_avg_pool("gap", x)?;
    let logits = b.linear("head", pooled, stack.num_classes)?;
    b.finish(logits)
}

pub fn count_params(plan: &NetworkPlan) -> usize {
    plan.layers().iter().map(|l| l.kind.num_params()).sum()
}

/// 2 × multiply-accumulates of conv and linear layers for one sample of
/// spatial size `height`×`width`. Pools, sums and skips count as free.
/// Channel counts come from the plan.
pub fn count_flops(plan: &NetworkPlan, height: usize, width: usize) -> u64 {
    let [_, h0, w0] = plan.input_shape();
    let mut macs: u64 = 0;
    for step in plan.steps() {
        match step.op {
            StepOp::ConvRelu { layer, .. } => {
                let h = step.shape[1] * height / h0;
                let w = step.shape[2] * width / w0;
                macs += (h * w * plan.layers()[layer].kind.fan_in() * step.shape[0]) as u64;
            }
            StepOp::Linear { layer } => {
                let kind = &plan.layers()[layer].kind;
                macs += (kind.fan_in() * kind.bias_len()) as u64;
            }
            _ => {}
        }
    }
    2 * macs
}
