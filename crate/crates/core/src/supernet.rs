//! Search-time network: a resolved [`NetworkSpec`] whose mappable layers carry
//! one alternative per CU plus the assignment banks that blend them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{BatchNormState, Conv2dParams, ParamId, ParamRole, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::hwmodel::{
    self, CostReport, CostTarget, LayerLoad, OpKind, PlatformProfile, RelaxedUnit, Rounding, Tau, Unit,
};
use crate::mapping::{blend_outputs, blend_weights, effective_channels_var, is_sorted, ThetaBank, ThetaMode};
use crate::netspec::{Activation, LayerGeometry, LayerOp, MapMode, NetworkSpec, Source};
use crate::quant::{ActivationQuantizer, Precision, WeightQuantizer, DEFAULT_TERNARY_THRESHOLD};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupernetConfig {
    pub ternary_threshold: f32,
    pub bn_momentum: f32,
    pub bn_eps: f32,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        SupernetConfig {
            ternary_threshold: DEFAULT_TERNARY_THRESHOLD,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorBranch {
    pub cu: usize,
    pub op: OpKind,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub quant: WeightQuantizer,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Placement {
    /// Runs entirely on one CU.
    Fixed {
        cu: usize,
        op: OpKind,
        weight: ParamId,
        bias: Option<ParamId>,
        quant: WeightQuantizer,
    },
    /// Shared float weights, one quantizer per CU, per-channel assignment.
    Precision {
        bank: usize,
        weight: ParamId,
        bias: Option<ParamId>,
        cus: Vec<usize>,
        quants: Vec<WeightQuantizer>,
    },
    /// Depthwise (branch 0) vs standard (branch 1) over a contiguous split.
    Operator { bank: usize, branches: Vec<OperatorBranch> },
}

impl Placement {
    pub fn bank(&self) -> Option<usize> {
        match self {
            Placement::Fixed { .. } => None,
            Placement::Precision { bank, .. } | Placement::Operator { bank, .. } => Some(*bank),
        }
    }

    /// Platform CU of every branch.
    pub fn branch_cus(&self) -> Vec<usize> {
        match self {
            Placement::Fixed { cu, .. } => vec![*cu],
            Placement::Precision { cus, .. } => cus.clone(),
            Placement::Operator { branches, .. } => branches.iter().map(|b| b.cu).collect(),
        }
    }

    pub fn branch_ops(&self, layer_op: OpKind) -> Vec<OpKind> {
        match self {
            Placement::Fixed { op, .. } => vec![*op],
            Placement::Precision { cus, .. } => vec![layer_op; cus.len()],
            Placement::Operator { branches, .. } => branches.iter().map(|b| b.op).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Compute {
    pub op: OpKind,
    pub placement: Placement,
    pub bn: Option<BatchNorm>,
    /// 8-bit fake-quantization of the layer input (platforms with quantized CUs).
    pub act_quant: Option<ActivationQuantizer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: LayerOp,
    pub inputs: Vec<Source>,
    pub geometry: LayerGeometry,
    pub in_shape: [usize; 3],
    pub out_shape: [usize; 3],
    pub relu: bool,
    pub compute: Option<Compute>,
}

/// Training protocol stage reached by a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Search,
    Final,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Search => "search",
            Phase::Final => "final",
        }
    }
}

/// Per-bank branch index for every channel.
pub type BankAssignment = Vec<Vec<usize>>;

/// A layer that was flagged mappable but could not be given alternatives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub layer: String,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct Supernet {
    pub spec: NetworkSpec,
    pub platform: PlatformProfile,
    pub config: SupernetConfig,
    pub nodes: Vec<Node>,
    pub store: ParamStore,
    pub banks: Vec<ThetaBank>,
    /// Member layers (node indices) of every bank.
    pub bank_layers: Vec<Vec<usize>>,
    pub excluded: Vec<Exclusion>,
    /// Weight and activation quantizers are applied (false during warmup).
    pub quant_active: bool,
    pub phase: Option<Phase>,
    calibrating: bool,
}

fn layer_opkind(op: LayerOp) -> Option<OpKind> {
    match op {
        LayerOp::Conv => Some(OpKind::StdConv),
        LayerOp::DwConv => Some(OpKind::DwConv),
        LayerOp::Linear => Some(OpKind::Linear),
        _ => None,
    }
}

/// Connected sets of tensors that must share a channel order: add joins and
/// channel-preserving ops (pooling) merge the spaces of their inputs.
pub fn channel_spaces(nodes: &[Node]) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..nodes.len()).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        let mut j = i;
        while p[j] != r {
            let next = p[j];
            p[j] = r;
            j = next;
        }
        r
    }
    for (i, n) in nodes.iter().enumerate() {
        if matches!(n.op, LayerOp::Add | LayerOp::AvgPool | LayerOp::GlobalAvgPool) {
            for s in &n.inputs {
                if let Source::Layer(j) = *s {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
    }
    (0..nodes.len()).map(|i| find(&mut parent, i)).collect()
}

impl Supernet {
    /// Builds the supernet with freshly initialized weights and uniform banks.
    pub fn build(spec: &NetworkSpec, platform: &PlatformProfile, config: SupernetConfig, rng: &mut Rng) -> Result<Self> {
        platform.validate()?;
        let resolved = spec.resolve()?;
        let quantized_platform = platform.cus.iter().any(|c| c.precision != Precision::Float);
        let mut store = ParamStore::new();
        let mut nodes = Vec::with_capacity(resolved.len());
        let mut excluded = Vec::new();
        // Mapping decision for every node, resolved before parameters exist.
        enum Plan {
            Fixed(usize),
            Precision(Vec<usize>),
            Operator { dw: usize, std: usize },
        }
        let mut plans: Vec<Option<Plan>> = Vec::with_capacity(resolved.len());
        for (l, r) in spec.layers.iter().zip(&resolved) {
            let Some(op) = layer_opkind(l.op) else {
                plans.push(None);
                continue;
            };
            let g = &r.geometry;
            let runnable: Vec<usize> = (0..platform.cus.len())
                .filter(|&i| platform.cus[i].can_run(op, g))
                .collect();
            let precision_cus = {
                let mut p: Vec<Precision> = runnable.iter().map(|&i| platform.cus[i].precision).collect();
                p.sort_by_key(|p| p.rank());
                p.dedup();
                (p.len() >= 2).then(|| runnable.clone())
            };
            let operator_cus = if matches!(op, OpKind::StdConv | OpKind::DwConv) && g.c_in == g.c_out {
                let dw = (0..platform.cus.len())
                    .filter(|&i| platform.cus[i].can_run(OpKind::DwConv, g))
                    .min_by_key(|&i| platform.cus[i].operator != hwmodel::OperatorSupport::DwConv);
                dw.and_then(|dw| {
                    (0..platform.cus.len())
                        .filter(|&i| i != dw && platform.cus[i].can_run(OpKind::StdConv, g))
                        .max_by_key(|&i| (platform.cus[i].accuracy_rank(), std::cmp::Reverse(i)))
                        .map(|std| (dw, std))
                })
            } else {
                None
            };
            let plan = if !l.mappable {
                None
            } else {
                match (l.mode, op) {
                    (MapMode::Precision, _) => Some(precision_cus.map(Plan::Precision).ok_or_else(|| {
                        Error::Unsupported(format!(
                            "layer `{}`: platform `{}` has no two precisions able to run it",
                            l.name, platform.name
                        ))
                    })?),
                    (MapMode::Operator, _) => Some(
                        operator_cus
                            .map(|(dw, std)| Plan::Operator { dw, std })
                            .ok_or_else(|| {
                                Error::Unsupported(format!(
                                    "layer `{}`: platform `{}` lacks a depthwise CU and a separate std-conv CU",
                                    l.name, platform.name
                                ))
                            })?,
                    ),
                    (MapMode::Auto, OpKind::DwConv) => operator_cus
                        .map(|(dw, std)| Plan::Operator { dw, std })
                        .or(precision_cus.map(Plan::Precision)),
                    (MapMode::Auto, _) => precision_cus
                        .map(Plan::Precision)
                        .or(operator_cus.map(|(dw, std)| Plan::Operator { dw, std })),
                }
            };
            let plan = match plan {
                Some(p) => p,
                None => {
                    if l.mappable {
                        let reason = if g.c_in != g.c_out && matches!(op, OpKind::StdConv) {
                            format!("c_in {} != c_out {}: no depthwise alternative and no precision alternative", g.c_in, g.c_out)
                        } else {
                            format!("platform `{}` offers no alternative CU for {}", platform.name, op.as_str())
                        };
                        excluded.push(Exclusion {
                            layer: l.name.clone(),
                            reason,
                        });
                    }
                    Plan::Fixed(platform.default_cu_for(op, g)?)
                }
            };
            plans.push(Some(plan));
        }

        // Provisional nodes so that channel spaces can be computed.
        for (l, r) in spec.layers.iter().zip(&resolved) {
            nodes.push(Node {
                name: l.name.clone(),
                op: l.op,
                inputs: r.inputs.clone(),
                geometry: r.geometry,
                in_shape: r.in_shape,
                out_shape: r.out_shape,
                relu: l.activation == Activation::Relu,
                compute: None,
            });
        }
        let spaces = channel_spaces(&nodes);

        // Banks: precision-mapped producers of one channel space share a bank.
        let mut banks: Vec<ThetaBank> = Vec::new();
        let mut bank_layers: Vec<Vec<usize>> = Vec::new();
        let mut space_bank: BTreeMap<usize, (usize, Vec<usize>)> = BTreeMap::new();
        let mut node_bank: Vec<Option<usize>> = vec![None; nodes.len()];
        for (i, plan) in plans.iter().enumerate() {
            match plan {
                Some(Plan::Precision(cus)) => {
                    let space = spaces[i];
                    if let Some((b, first_cus)) = space_bank.get(&space) {
                        if first_cus != cus {
                            return Err(Error::Unsupported(format!(
                                "layer `{}` joins a residual with different candidate CUs than `{}`",
                                nodes[i].name, nodes[bank_layers[*b][0]].name
                            )));
                        }
                        node_bank[i] = Some(*b);
                        bank_layers[*b].push(i);
                    } else {
                        let mode = ThetaMode::PerChannel {
                            channels: nodes[i].geometry.c_out,
                            branches: cus.len(),
                        };
                        banks.push(ThetaBank::new(&mut store, nodes[i].name.clone(), mode)?);
                        bank_layers.push(vec![i]);
                        space_bank.insert(space, (banks.len() - 1, cus.clone()));
                        node_bank[i] = Some(banks.len() - 1);
                    }
                }
                Some(Plan::Operator { .. }) => {
                    let mode = ThetaMode::Contiguous {
                        channels: nodes[i].geometry.c_out,
                    };
                    banks.push(ThetaBank::new(&mut store, nodes[i].name.clone(), mode)?);
                    bank_layers.push(vec![i]);
                    node_bank[i] = Some(banks.len() - 1);
                }
                _ => {}
            }
        }

        for (i, plan) in plans.into_iter().enumerate() {
            let Some(plan) = plan else { continue };
            let l = &spec.layers[i];
            let name = l.name.clone();
            let g = nodes[i].geometry;
            let op = layer_opkind(l.op).expect("compute layer");
            let has_bias = !l.batchnorm;
            let quant_for = |cu: usize| WeightQuantizer::for_precision(platform.cus[cu].precision, config.ternary_threshold);
            let new_weight = |store: &mut ParamStore, suffix: &str, op: OpKind, rng: &mut Rng| {
                let (shape, fan_in): (Vec<usize>, usize) = match op {
                    OpKind::StdConv => (vec![g.c_out, g.c_in, g.kernel, g.kernel], g.c_in * g.kernel * g.kernel),
                    OpKind::DwConv => (vec![g.c_out, 1, g.kernel, g.kernel], g.kernel * g.kernel),
                    OpKind::Linear => (vec![g.c_out, g.c_in], g.c_in),
                };
                let gain = if l.activation == Activation::Relu { 2.0 } else { 1.0 };
                let w = store.add(
                    format!("{name}.{suffix}weight"),
                    Tensor::normal(shape, (gain / fan_in as f32).sqrt(), rng),
                    ParamRole::Weight,
                );
                let b = has_bias.then(|| store.add(format!("{name}.{suffix}bias"), Tensor::zeros([g.c_out]), ParamRole::Weight));
                (w, b)
            };
            let placement = match plan {
                Plan::Fixed(cu) => {
                    let (weight, bias) = new_weight(&mut store, "", op, rng);
                    Placement::Fixed {
                        cu,
                        op,
                        weight,
                        bias,
                        quant: quant_for(cu),
                    }
                }
                Plan::Precision(cus) => {
                    let (weight, bias) = new_weight(&mut store, "", op, rng);
                    Placement::Precision {
                        bank: node_bank[i].expect("bank"),
                        weight,
                        bias,
                        quants: cus.iter().map(|&c| quant_for(c)).collect(),
                        cus,
                    }
                }
                Plan::Operator { dw, std } => {
                    let (dw_w, dw_b) = new_weight(&mut store, "dw.", OpKind::DwConv, rng);
                    let (std_w, std_b) = new_weight(&mut store, "std.", OpKind::StdConv, rng);
                    Placement::Operator {
                        bank: node_bank[i].expect("bank"),
                        branches: vec![
                            OperatorBranch {
                                cu: dw,
                                op: OpKind::DwConv,
                                weight: dw_w,
                                bias: dw_b,
                                quant: quant_for(dw),
                            },
                            OperatorBranch {
                                cu: std,
                                op: OpKind::StdConv,
                                weight: std_w,
                                bias: std_b,
                                quant: quant_for(std),
                            },
                        ],
                    }
                }
            };
            let bn = l.batchnorm.then(|| BatchNorm {
                gamma: store.add(format!("{name}.bn.gamma"), Tensor::ones([g.c_out]), ParamRole::Weight),
                beta: store.add(format!("{name}.bn.beta"), Tensor::zeros([g.c_out]), ParamRole::Weight),
                mean: store.add(format!("{name}.bn.mean"), Tensor::zeros([g.c_out]), ParamRole::Buffer),
                var: store.add(format!("{name}.bn.var"), Tensor::ones([g.c_out]), ParamRole::Buffer),
            });
            nodes[i].compute = Some(Compute {
                op,
                placement,
                bn,
                act_quant: quantized_platform.then(ActivationQuantizer::default),
            });
        }

        Ok(Supernet {
            spec: spec.clone(),
            platform: platform.clone(),
            config,
            nodes,
            store,
            banks,
            bank_layers,
            excluded,
            quant_active: false,
            phase: None,
            calibrating: false,
        })
    }

    /// Node indices of mapped layers.
    pub fn mapped_layers(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| {
                self.nodes[i]
                    .compute
                    .as_ref()
                    .is_some_and(|c| c.placement.bank().is_some())
            })
            .collect()
    }

    pub fn theta_ids(&self) -> Vec<ParamId> {
        self.banks.iter().map(|b| b.logits).collect()
    }

    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_role(ParamRole::Weight)
    }

    pub fn set_theta_frozen(&mut self, frozen: bool) {
        for b in &self.banks {
            b.set_frozen(&mut self.store, frozen);
        }
    }

    pub fn set_tau(&mut self, tau: f32) {
        for b in &mut self.banks {
            b.tau = tau;
        }
    }

    /// Argmax assignment of every bank.
    pub fn discretize(&self) -> BankAssignment {
        self.banks.iter().map(|b| b.discretize(&self.store)).collect()
    }

    /// Uniform-logit discretization (every tie resolved to branch 0 / split 0).
    pub fn uniform_assignment(&self) -> BankAssignment {
        self.banks
            .iter()
            .map(|b| {
                let mut fresh = ParamStore::new();
                ThetaBank::new(&mut fresh, "u", b.mode).expect("valid mode").discretize(&fresh)
            })
            .collect()
    }

    /// Fixes every bank to `assignment`, freezes the logits and the weights of
    /// operator branches that received no channel.
    pub fn set_hard_assignment(&mut self, assignment: &BankAssignment) -> Result<()> {
        if assignment.len() != self.banks.len() {
            return Err(Error::Invalid(format!(
                "assignment covers {} banks, network has {}",
                assignment.len(),
                self.banks.len()
            )));
        }
        for (b, a) in self.banks.iter_mut().zip(assignment) {
            b.set_hard(a.clone())?;
            b.set_frozen(&mut self.store, true);
        }
        for n in &self.nodes {
            if let Some(Compute {
                placement: Placement::Operator { bank, branches },
                ..
            }) = &n.compute
            {
                for (j, br) in branches.iter().enumerate() {
                    let unused = !assignment[*bank].contains(&j);
                    self.store.set_frozen(br.weight, unused);
                    if let Some(b) = br.bias {
                        self.store.set_frozen(b, unused);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn clear_hard_assignment(&mut self) {
        for b in &mut self.banks {
            b.clear_hard();
        }
        let ids = self.weight_ids();
        for id in ids {
            self.store.set_frozen(id, false);
        }
    }

    pub fn is_hard(&self) -> bool {
        self.banks.iter().all(|b| b.hard().is_some())
    }

    /// Records every bank's theta `[C, N]`.
    pub fn thetas(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.banks.iter().map(|b| b.theta(tape, &self.store)).collect()
    }

    fn branch_weight(&self, tape: &mut Tape, id: ParamId, quant: &WeightQuantizer) -> Result<Var> {
        let w = tape.param(&self.store, id);
        if self.quant_active {
            quant.apply(tape, w)
        } else {
            Ok(w)
        }
    }

    fn apply_op(tape: &mut Tape, op: OpKind, x: Var, w: Var, b: Option<Var>, g: &LayerGeometry) -> Result<Var> {
        match op {
            OpKind::Linear => tape.linear(x, w, b),
            OpKind::StdConv => tape.conv2d(x, w, b, Conv2dParams::new(g.stride, g.padding, 1)),
            OpKind::DwConv => tape.conv2d(x, w, b, Conv2dParams::new(g.stride, g.padding, g.c_in)),
        }
    }

    /// Logits `[B, classes]` for images `[B, C, H, W]`.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, thetas: &[Var], train: bool) -> Result<Var> {
        let batch = tape.value(x).shape().first().copied().unwrap_or(0);
        let outs = self.forward_nodes(tape, x, thetas, train)?;
        let last = *outs.last().expect("non-empty network");
        let classes = self.spec.classes;
        if tape.value(last).rank() == 2 {
            Ok(last)
        } else {
            tape.reshape(last, &[batch, classes])
        }
    }

    /// Eval-mode output of every node.
    pub fn trace(&mut self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let thetas = self.thetas(&mut tape)?;
        let x = tape.constant(images.clone());
        let outs = self.forward_nodes(&mut tape, x, &thetas, false)?;
        Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    fn forward_nodes(&mut self, tape: &mut Tape, x: Var, thetas: &[Var], train: bool) -> Result<Vec<Var>> {
        let xs = tape.value(x).shape().to_vec();
        let [c, h, w] = self.spec.input;
        if xs.len() != 4 || xs[1..] != [c, h, w] {
            return Err(Error::shape("forward", format!("input {xs:?} does not match [B, {c}, {h}, {w}]")));
        }
        if thetas.len() != self.banks.len() {
            return Err(Error::Invalid(format!("{} thetas for {} banks", thetas.len(), self.banks.len())));
        }
        let batch = xs[0];
        let mut outs: Vec<Var> = Vec::with_capacity(self.nodes.len());
        for i in 0..self.nodes.len() {
            let get = |s: &Source| match *s {
                Source::Input => x,
                Source::Layer(j) => outs[j],
            };
            let node = &self.nodes[i];
            let first = get(&node.inputs[0]);
            let y = match node.op {
                LayerOp::Add => {
                    let mut acc = first;
                    for s in &node.inputs[1..] {
                        let v = get(s);
                        acc = tape.add(acc, v)?;
                    }
                    acc
                }
                LayerOp::AvgPool => {
                    let v = self.as_4d(tape, first, batch, node.in_shape)?;
                    tape.avg_pool2d(v, node.geometry.kernel, node.geometry.stride)?
                }
                LayerOp::GlobalAvgPool => {
                    let v = self.as_4d(tape, first, batch, node.in_shape)?;
                    tape.global_avg_pool(v)?
                }
                LayerOp::Conv | LayerOp::DwConv | LayerOp::Linear => self.compute_forward(tape, i, first, batch, thetas, train)?,
            };
            let y = if self.nodes[i].relu { tape.relu(y) } else { y };
            outs.push(y);
        }
        Ok(outs)
    }

    fn as_4d(&self, tape: &mut Tape, v: Var, batch: usize, shape: [usize; 3]) -> Result<Var> {
        if tape.value(v).rank() == 4 {
            Ok(v)
        } else {
            tape.reshape(v, &[batch, shape[0], shape[1], shape[2]])
        }
    }

    fn compute_forward(
        &mut self,
        tape: &mut Tape,
        i: usize,
        input: Var,
        batch: usize,
        thetas: &[Var],
        train: bool,
    ) -> Result<Var> {
        let node = &self.nodes[i];
        let compute = node.compute.as_ref().expect("compute node");
        let g = node.geometry;
        let mut x = match compute.op {
            OpKind::Linear => {
                if tape.value(input).rank() == 2 {
                    input
                } else {
                    tape.reshape(input, &[batch, g.c_in])?
                }
            }
            _ => self.as_4d(tape, input, batch, node.in_shape)?,
        };
        let frozen_range = compute.act_quant.as_ref().map(|aq| aq.frozen_range);
        if let (true, Some(frozen)) = (self.quant_active, frozen_range) {
            let range = if self.calibrating {
                // calibration keeps the running max of the observed ranges
                let r = tape.value(x).max_abs();
                let aq = self.nodes[i].compute.as_mut().and_then(|c| c.act_quant.as_mut()).expect("aq");
                aq.frozen_range = Some(frozen.unwrap_or(0.0).max(r));
                r
            } else {
                frozen.unwrap_or_else(|| tape.value(x).max_abs())
            };
            let q = crate::quant::quantize_activation(tape.value(x), range)?;
            x = tape.straight_through(x, q)?;
        }
        let node = &self.nodes[i];
        let compute = node.compute.as_ref().expect("compute node");
        let y = match &compute.placement {
            Placement::Fixed {
                op, weight, bias, quant, ..
            } => {
                let w = self.branch_weight(tape, *weight, quant)?;
                let b = bias.map(|b| tape.param(&self.store, b));
                Self::apply_op(tape, *op, x, w, b, &g)?
            }
            Placement::Precision {
                bank,
                weight,
                bias,
                quants,
                ..
            } => {
                let w = tape.param(&self.store, *weight);
                let qs = if self.quant_active {
                    quants.iter().map(|q| q.apply(tape, w)).collect::<Result<Vec<_>>>()?
                } else {
                    vec![w; quants.len()]
                };
                let weff = blend_weights(tape, &qs, thetas[*bank])?;
                let b = bias.map(|b| tape.param(&self.store, b));
                Self::apply_op(tape, compute.op, x, weff, b, &g)?
            }
            Placement::Operator { bank, branches } => {
                let hard = self.banks[*bank].hard();
                let used: Vec<bool> = (0..branches.len())
                    .map(|j| hard.is_none_or(|a| a.contains(&j)))
                    .collect();
                let mut ys = Vec::with_capacity(branches.len());
                for (j, br) in branches.iter().enumerate() {
                    if !used[j] {
                        continue;
                    }
                    let w = self.branch_weight(tape, br.weight, &br.quant)?;
                    let b = br.bias.map(|b| tape.param(&self.store, b));
                    ys.push(Self::apply_op(tape, br.op, x, w, b, &g)?);
                }
                if ys.len() == 1 {
                    ys[0]
                } else {
                    blend_outputs(tape, &ys, thetas[*bank])?
                }
            }
        };
        match compute.bn {
            Some(bn) => {
                let gamma = tape.param(&self.store, bn.gamma);
                let beta = tape.param(&self.store, bn.beta);
                let (momentum, eps) = (self.config.bn_momentum, self.config.bn_eps);
                let (running_mean, running_var) = self.store.pair_mut(bn.mean, bn.var);
                tape.batch_norm(
                    y,
                    gamma,
                    beta,
                    BatchNormState {
                        running_mean,
                        running_var,
                        momentum,
                        eps,
                        train,
                    },
                )
            }
            None => Ok(y),
        }
    }

    /// Eval-mode logits without recording gradients for later use.
    pub fn predict(&mut self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let thetas = self.thetas(&mut tape)?;
        let x = tape.constant(images.clone());
        let y = self.forward(&mut tape, x, &thetas, false)?;
        Ok(tape.value(y).clone())
    }

    /// Freezes weight-quantizer statistics at the current weights and fixes
    /// activation ranges to the max observed over `calibration` batches.
    pub fn freeze_quantizers(&mut self, calibration: &[Tensor]) -> Result<()> {
        let was_active = self.quant_active;
        self.quant_active = true;
        for n in &mut self.nodes {
            if let Some(c) = &mut n.compute {
                match &mut c.placement {
                    Placement::Fixed { weight, quant, .. } => quant.freeze(self.store.value(*weight)),
                    Placement::Precision { weight, quants, .. } => {
                        for q in quants {
                            q.freeze(self.store.value(*weight));
                        }
                    }
                    Placement::Operator { branches, .. } => {
                        for b in branches {
                            b.quant.freeze(self.store.value(b.weight));
                        }
                    }
                }
                if let Some(aq) = &mut c.act_quant {
                    aq.frozen_range = None;
                }
            }
        }
        self.calibrating = true;
        let res: Result<()> = calibration.iter().try_for_each(|batch| self.predict(batch).map(|_| ()));
        self.calibrating = false;
        self.quant_active = was_active;
        res?;
        for n in &mut self.nodes {
            if let Some(Compute { act_quant: Some(aq), .. }) = &mut n.compute {
                // a layer never reached keeps a unit range
                aq.frozen_range = Some(aq.frozen_range.filter(|r| *r > 0.0).unwrap_or(1.0));
            }
        }
        Ok(())
    }

    pub fn unfreeze_quantizers(&mut self) {
        for n in &mut self.nodes {
            if let Some(c) = &mut n.compute {
                match &mut c.placement {
                    Placement::Fixed { quant, .. } => quant.unfreeze(),
                    Placement::Precision { quants, .. } => quants.iter_mut().for_each(|q| q.unfreeze()),
                    Placement::Operator { branches, .. } => branches.iter_mut().for_each(|b| b.quant.unfreeze()),
                }
                if let Some(aq) = &mut c.act_quant {
                    aq.frozen_range = None;
                }
            }
        }
    }

    /// Cost-model view of a discrete assignment.
    pub fn loads(&self, assignment: &BankAssignment) -> Result<Vec<LayerLoad>> {
        let mut loads = Vec::new();
        for n in &self.nodes {
            let Some(c) = &n.compute else { continue };
            let units = match c.placement.bank() {
                None => c
                    .placement
                    .branch_cus()
                    .into_iter()
                    .zip(c.placement.branch_ops(c.op))
                    .map(|(cu, op)| Unit {
                        cu,
                        op,
                        channels: n.geometry.c_out as f64,
                    })
                    .collect(),
                Some(b) => {
                    let a = assignment
                        .get(b)
                        .ok_or_else(|| Error::Invalid(format!("assignment lacks bank {b}")))?;
                    if a.len() != n.geometry.c_out {
                        return Err(Error::Invalid(format!(
                            "layer `{}`: assignment of {} channels for {}",
                            n.name,
                            a.len(),
                            n.geometry.c_out
                        )));
                    }
                    c.placement
                        .branch_cus()
                        .into_iter()
                        .zip(c.placement.branch_ops(c.op))
                        .enumerate()
                        .map(|(j, (cu, op))| Unit {
                            cu,
                            op,
                            channels: a.iter().filter(|&&x| x == j).count() as f64,
                        })
                        .collect()
                }
            };
            loads.push(LayerLoad {
                name: n.name.clone(),
                geometry: n.geometry,
                units,
            });
        }
        Ok(loads)
    }

    pub fn cost_report(&self, assignment: &BankAssignment, rounding: Rounding) -> Result<CostReport> {
        hwmodel::evaluate(&self.platform, &self.loads(assignment)?, rounding)
    }

    /// Exact cost of the current argmax discretization.
    pub fn exact_report(&self) -> Result<CostReport> {
        self.cost_report(&self.discretize(), Rounding::Ceil)
    }

    /// Differentiable cost under the linear relaxation. Fixed layers contribute a constant.
    pub fn relaxed_cost(&self, tape: &mut Tape, thetas: &[Var], target: CostTarget, tau: Tau) -> Result<Var> {
        let mut constant = 0.0f64;
        let mut terms = Vec::new();
        let mut channel_cache: BTreeMap<usize, Var> = BTreeMap::new();
        for n in &self.nodes {
            let Some(c) = &n.compute else { continue };
            match c.placement.bank() {
                None => {
                    let load = LayerLoad {
                        name: n.name.clone(),
                        geometry: n.geometry,
                        units: vec![Unit {
                            cu: c.placement.branch_cus()[0],
                            op: c.placement.branch_ops(c.op)[0],
                            channels: n.geometry.c_out as f64,
                        }],
                    };
                    let lc = hwmodel::layer_cost(&self.platform, &load, Rounding::Linear)?;
                    constant += match target {
                        CostTarget::Latency => lc.cycles,
                        CostTarget::Energy => lc.energy,
                    };
                }
                Some(b) => {
                    let counts = match channel_cache.get(&b) {
                        Some(&v) => v,
                        None => {
                            let v = effective_channels_var(tape, thetas[b])?;
                            channel_cache.insert(b, v);
                            v
                        }
                    };
                    let mut units = Vec::new();
                    for (j, (cu, op)) in c
                        .placement
                        .branch_cus()
                        .into_iter()
                        .zip(c.placement.branch_ops(c.op))
                        .enumerate()
                    {
                        units.push(RelaxedUnit {
                            cu,
                            op,
                            channels: tape.index(counts, j)?,
                        });
                    }
                    let (m, e) = hwmodel::relaxed_layer_cost(tape, &self.platform, &n.geometry, &units, tau)?;
                    terms.push(match target {
                        CostTarget::Latency => m,
                        CostTarget::Energy => e,
                    });
                }
            }
        }
        let mut total = match terms.split_first() {
            Some((&first, rest)) => {
                let mut acc = first;
                for &t in rest {
                    acc = tape.add(acc, t)?;
                }
                acc
            }
            None => tape.constant(Tensor::scalar(0.0)),
        };
        if constant != 0.0 {
            total = tape.add_scalar(total, constant as f32);
        }
        Ok(total)
    }

    /// Relaxed cost value at the current logits (no gradient).
    pub fn relaxed_cost_value(&self, target: CostTarget) -> Result<f64> {
        let mut tape = Tape::new();
        let thetas = self.thetas(&mut tape)?;
        let c = self.relaxed_cost(&mut tape, &thetas, target, Tau::Relative)?;
        Ok(tape.value(c).item() as f64)
    }

    /// Per mapped layer, the platform CU of every output channel.
    pub fn layer_assignments(&self, assignment: &BankAssignment) -> Vec<LayerAssignment> {
        self.mapped_layers()
            .into_iter()
            .map(|i| {
                let n = &self.nodes[i];
                let c = n.compute.as_ref().expect("mapped");
                let b = c.placement.bank().expect("mapped");
                let cus = c.placement.branch_cus();
                let per_channel: Vec<usize> = assignment[b].iter().map(|&j| cus[j]).collect();
                let split = match self.banks[b].mode {
                    ThetaMode::Contiguous { .. } => Some(assignment[b].iter().filter(|&&j| j == 0).count()),
                    ThetaMode::PerChannel { .. } => None,
                };
                LayerAssignment {
                    layer: n.name.clone(),
                    cus: per_channel,
                    split,
                }
            })
            .collect()
    }

    /// Inverse of [`Self::layer_assignments`].
    pub fn bank_assignment_from(&self, layers: &[LayerAssignment]) -> Result<BankAssignment> {
        let mut out: Vec<Option<Vec<usize>>> = vec![None; self.banks.len()];
        for la in layers {
            let i = self
                .spec
                .layer_index(&la.layer)
                .ok_or_else(|| Error::Invalid(format!("unknown layer `{}`", la.layer)))?;
            let c = self.nodes[i]
                .compute
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("layer `{}` is not mapped", la.layer)))?;
            let b = c
                .placement
                .bank()
                .ok_or_else(|| Error::Invalid(format!("layer `{}` is not mapped", la.layer)))?;
            let cus = c.placement.branch_cus();
            let branches = la
                .cus
                .iter()
                .map(|cu| {
                    cus.iter().position(|x| x == cu).ok_or_else(|| {
                        Error::UnknownCu(format!("CU #{cu} is not an alternative of `{}`", la.layer))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if matches!(self.banks[b].mode, ThetaMode::Contiguous { .. }) && !is_sorted(&branches) {
                return Err(Error::Invalid(format!("layer `{}`: contiguous assignment is not sorted", la.layer)));
            }
            match &out[b] {
                Some(prev) if *prev != branches => {
                    return Err(Error::Invalid(format!(
                        "layer `{}` disagrees with another layer sharing its channel space",
                        la.layer
                    )))
                }
                _ => out[b] = Some(branches),
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(b, a)| a.ok_or_else(|| Error::Invalid(format!("no assignment for bank `{}`", self.banks[b].name))))
            .collect()
    }
}

/// Per-layer discrete assignment in platform CU indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerAssignment {
    pub layer: String,
    pub cus: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<usize>,
}
