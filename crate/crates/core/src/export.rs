//! Turning a searched network into a deployable mapping: channel grouping,
//! per-CU sub-layers, the artifact file pair and its replay.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{BatchNormState, Conv2dParams, Tape, Var};
use crate::error::{Error, Result};
use crate::hwmodel::{CostReport, OpKind, PlatformProfile, Rounding};
use crate::mapping::{is_sorted, ThetaMode};
use crate::netspec::{Activation, LayerGeometry, LayerOp, NetworkSpec, Source};
use crate::quant::{QuantCodes, WeightQuantizer};
use crate::rng;
use crate::supernet::{channel_spaces, BankAssignment, Placement, Supernet};
use crate::tensor::Tensor;

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;
/// Replay tolerance on every intermediate tensor.
pub const VERIFY_TOLERANCE: f32 = 1e-4;
pub const PROBE_SAMPLES: usize = 8;

/// Stable sort of channel indices by branch: `perm[i]` is the old index of new channel `i`.
pub fn grouping_permutation(assignment: &[usize]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..assignment.len()).collect();
    perm.sort_by_key(|&i| assignment[i]);
    perm
}

fn is_identity(perm: &[usize]) -> bool {
    perm.iter().enumerate().all(|(i, &p)| i == p)
}

fn permute<T: Clone>(v: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| v[i].clone()).collect()
}

fn permute_quantizer(q: &mut WeightQuantizer, perm: &[usize]) {
    match q {
        WeightQuantizer::Ternary { frozen: Some(s), .. } => *s = permute(s, perm),
        WeightQuantizer::Int { frozen: Some(r), .. } => *r = permute(r, perm),
        _ => {}
    }
}

/// A network whose channel spaces were regrouped so that every CU owns a
/// contiguous block of channels.
#[derive(Clone, Debug)]
pub struct Reordered {
    pub net: Supernet,
    pub assignment: BankAssignment,
    /// Per node, the original index of each output channel.
    pub output_order: Vec<Vec<usize>>,
}

/// Groups the channels of every bank by branch. One permutation is applied
/// per channel space, so residual joins keep a consistent order.
pub fn reorder_channels(net: &Supernet, assignment: &BankAssignment) -> Result<Reordered> {
    if assignment.len() != net.banks.len() {
        return Err(Error::Invalid(format!(
            "assignment covers {} banks, network has {}",
            assignment.len(),
            net.banks.len()
        )));
    }
    let spaces = channel_spaces(&net.nodes);
    let mut space_perm: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut new_assignment = assignment.clone();
    let mut bank_perm: Vec<Option<Vec<usize>>> = vec![None; net.banks.len()];
    for (b, bank) in net.banks.iter().enumerate() {
        if assignment[b].len() != bank.channels() {
            return Err(Error::Invalid(format!(
                "bank `{}`: {} assignments for {} channels",
                bank.name,
                assignment[b].len(),
                bank.channels()
            )));
        }
        let perm = grouping_permutation(&assignment[b]);
        if is_identity(&perm) {
            continue;
        }
        if matches!(bank.mode, ThetaMode::Contiguous { .. }) {
            return Err(Error::Invalid(format!("bank `{}`: contiguous assignment is not sorted", bank.name)));
        }
        let space = spaces[net.bank_layers[b][0]];
        new_assignment[b] = permute(&assignment[b], &perm);
        space_perm.insert(space, perm.clone());
        bank_perm[b] = Some(perm);
    }

    let last = net.nodes.len() - 1;
    if space_perm.contains_key(&spaces[last]) {
        return Err(Error::Unsupported(format!(
            "layer `{}` produces the network output, whose channel order is fixed",
            net.nodes[last].name
        )));
    }

    let mut out = net.clone();
    for (i, node) in net.nodes.iter().enumerate() {
        let Some(compute) = &node.compute else { continue };
        let produced = space_perm.get(&spaces[i]);
        let consumed = node.inputs.iter().find_map(|s| match *s {
            Source::Layer(j) if spaces[j] != spaces[i] => space_perm.get(&spaces[j]),
            _ => None,
        });
        if produced.is_none() && consumed.is_none() {
            continue;
        }
        let dw = node.op == LayerOp::DwConv || compute.placement.branch_ops(compute.op).contains(&OpKind::DwConv);
        if dw {
            return Err(Error::Unsupported(format!(
                "cannot reorder channels through depthwise layer `{}`; map it in contiguous (operator) mode",
                node.name
            )));
        }
        let weights: Vec<_> = match &compute.placement {
            Placement::Fixed { weight, bias, .. } | Placement::Precision { weight, bias, .. } => vec![(*weight, *bias)],
            Placement::Operator { branches, .. } => branches.iter().map(|b| (b.weight, b.bias)).collect(),
        };
        if let Some(perm) = consumed {
            let in_perm = match compute.op {
                OpKind::Linear => {
                    let block = node.in_shape[1] * node.in_shape[2];
                    perm.iter().flat_map(|&c| c * block..(c + 1) * block).collect()
                }
                _ => perm.clone(),
            };
            for &(w, _) in &weights {
                let v = out.store.value(w).permute_axis(1, &in_perm);
                *out.store.value_mut(w) = v;
            }
        }
        if let Some(perm) = produced {
            for &(w, b) in &weights {
                let v = out.store.value(w).permute_axis(0, perm);
                *out.store.value_mut(w) = v;
                if let Some(b) = b {
                    let v = out.store.value(b).permute_axis(0, perm);
                    *out.store.value_mut(b) = v;
                }
            }
            if let Some(bn) = compute.bn {
                for id in [bn.gamma, bn.beta, bn.mean, bn.var] {
                    let v = out.store.value(id).permute_axis(0, perm);
                    *out.store.value_mut(id) = v;
                }
            }
            let c = out.nodes[i].compute.as_mut().expect("compute node");
            match &mut c.placement {
                Placement::Fixed { quant, .. } => permute_quantizer(quant, perm),
                Placement::Precision { quants, .. } => quants.iter_mut().for_each(|q| permute_quantizer(q, perm)),
                Placement::Operator { branches, .. } => {
                    branches.iter_mut().for_each(|b| permute_quantizer(&mut b.quant, perm))
                }
            }
        }
    }

    let hard = net.is_hard();
    for (b, perm) in bank_perm.iter().enumerate() {
        let Some(perm) = perm else { continue };
        let logits = out.banks[b].logits;
        let v = out.store.value(logits).permute_axis(0, perm);
        *out.store.value_mut(logits) = v;
        if hard {
            out.banks[b].set_hard(new_assignment[b].clone())?;
        }
    }

    let output_order = (0..net.nodes.len())
        .map(|i| match space_perm.get(&spaces[i]) {
            Some(p) => p.clone(),
            None => (0..net.nodes[i].out_shape[0]).collect(),
        })
        .collect();
    Ok(Reordered {
        net: out,
        assignment: new_assignment,
        output_order,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I8,
}

/// A tensor stored in the sidecar blob.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRef {
    pub dtype: DType,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl TensorRef {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.numel()
            * match self.dtype {
                DType::F32 => 4,
                DType::I8 => 1,
            }
    }
}

/// Weight encoding of one sub-layer, tagged by precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "precision", rename_all = "lowercase")]
pub enum WeightEncoding {
    /// Codes in {-1, 0, +1}; value = code * scale[channel].
    Ternary { codes: TensorRef, scales: TensorRef },
    /// Symmetric integers; value = code * range[channel] / (2^(bits-1) - 1).
    Int { bits: u32, codes: TensorRef, ranges: TensorRef },
    Float { values: TensorRef },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubLayer {
    pub cu: String,
    /// Output channel range `[start, end)`.
    pub start: usize,
    pub end: usize,
    pub op: OpKind,
    pub weight: WeightEncoding,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<TensorRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormRef {
    pub eps: f32,
    pub gamma: TensorRef,
    pub beta: TensorRef,
    pub mean: TensorRef,
    pub var: TensorRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactLayer {
    pub name: String,
    /// Per output channel, its CU (in the exported order).
    pub assignment: Vec<String>,
    /// Original index of every exported output channel.
    pub output_order: Vec<usize>,
    /// Symmetric 8-bit input quantization range, when the platform quantizes activations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act_range: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batchnorm: Option<BatchNormRef>,
    #[serde(rename = "sub")]
    pub sublayers: Vec<SubLayer>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

/// Deterministic probe inputs and the checksum of the replayed logits on them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeInfo {
    pub seed: u64,
    pub samples: usize,
    pub output_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingArtifact {
    pub format_version: u32,
    pub network: NetworkSpec,
    pub platform: PlatformProfile,
    pub blob: BlobInfo,
    pub probe: ProbeInfo,
    pub cost: CostReport,
    #[serde(rename = "layer")]
    pub layers: Vec<ArtifactLayer>,
}

impl MappingArtifact {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Artifact(format!("serialize: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let a: MappingArtifact = toml::from_str(text).map_err(|e| Error::Artifact(format!("parse: {e}")))?;
        if a.format_version != ARTIFACT_FORMAT_VERSION {
            return Err(Error::Artifact(format!(
                "format_version {} (supported: {ARTIFACT_FORMAT_VERSION})",
                a.format_version
            )));
        }
        Ok(a)
    }

    /// Writes `<stem>.toml` and the blob next to it; returns the TOML path.
    pub fn save(&self, blob: &[u8], dir: &Path, stem: &str) -> Result<PathBuf> {
        let mut a = self.clone();
        a.blob.file = format!("{stem}.bin");
        std::fs::write(dir.join(&a.blob.file), blob)?;
        let path = dir.join(format!("{stem}.toml"));
        std::fs::write(&path, a.to_toml()?)?;
        Ok(path)
    }

    /// Reads an artifact and its blob, checking size and checksum.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
        let a = Self::from_toml(&text)?;
        let blob_path = path.parent().unwrap_or(Path::new(".")).join(&a.blob.file);
        let blob = std::fs::read(&blob_path)
            .map_err(|e| Error::Artifact(format!("missing blob {}: {e}", blob_path.display())))?;
        a.check_blob(&blob)?;
        Ok((a, blob))
    }

    pub fn check_blob(&self, blob: &[u8]) -> Result<()> {
        if blob.len() != self.blob.bytes {
            return Err(Error::Artifact(format!(
                "blob holds {} bytes, artifact expects {}",
                blob.len(),
                self.blob.bytes
            )));
        }
        let sum = sha256_hex(blob);
        if sum != self.blob.sha256 {
            return Err(Error::Artifact(format!("blob checksum {sum} does not match {}", self.blob.sha256)));
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn tensor_sha256(t: &Tensor) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

/// Inputs used for the embedded output checksum.
pub fn probe_inputs(input: [usize; 3], samples: usize, seed: u64) -> Tensor {
    let [c, h, w] = input;
    Tensor::normal([samples, c, h, w], 1.0, &mut rng::derive(seed, 0x9e0b))
}

#[derive(Default)]
struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn f32s(&mut self, data: &[f32], shape: &[usize]) -> TensorRef {
        let offset = self.bytes.len();
        self.bytes.extend(data.iter().flat_map(|v| v.to_le_bytes()));
        TensorRef {
            dtype: DType::F32,
            offset,
            shape: shape.to_vec(),
        }
    }

    fn i8s(&mut self, data: &[i8], shape: &[usize]) -> TensorRef {
        let offset = self.bytes.len();
        self.bytes.extend(data.iter().map(|&v| v as u8));
        TensorRef {
            dtype: DType::I8,
            offset,
            shape: shape.to_vec(),
        }
    }
}

fn read_f32(blob: &[u8], r: &TensorRef, what: &str) -> Result<Tensor> {
    let data = raw(blob, r, DType::F32, what)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(r.shape.clone(), data)
}

fn read_i8(blob: &[u8], r: &TensorRef, what: &str) -> Result<Vec<i8>> {
    Ok(raw(blob, r, DType::I8, what)?.iter().map(|&b| b as i8).collect())
}

fn raw<'a>(blob: &'a [u8], r: &TensorRef, dtype: DType, what: &str) -> Result<&'a [u8]> {
    if r.dtype != dtype {
        return Err(Error::Artifact(format!("{what}: stored as {:?}, expected {dtype:?}", r.dtype)));
    }
    blob.get(r.offset..r.offset + r.byte_len())
        .ok_or_else(|| Error::Artifact(format!("{what}: tensor at {}+{} lies outside the blob", r.offset, r.byte_len())))
}

/// Rows `[start, end)` of per-channel codes.
fn slice_codes(codes: &QuantCodes, channels: usize, start: usize, end: usize) -> QuantCodes {
    let rows = |v: &[i8]| {
        let per = v.len() / channels;
        v[start * per..end * per].to_vec()
    };
    match codes {
        QuantCodes::Ternary { codes, scales } => QuantCodes::Ternary {
            codes: rows(codes),
            scales: scales[start..end].to_vec(),
        },
        QuantCodes::Int { bits, codes, ranges } => QuantCodes::Int {
            bits: *bits,
            codes: rows(codes),
            ranges: ranges[start..end].to_vec(),
        },
        QuantCodes::Float(v) => {
            let per = v.len() / channels;
            QuantCodes::Float(v[start * per..end * per].to_vec())
        }
    }
}

fn encode(blob: &mut BlobWriter, codes: &QuantCodes, shape: &[usize]) -> WeightEncoding {
    match codes {
        QuantCodes::Ternary { codes, scales } => WeightEncoding::Ternary {
            codes: blob.i8s(codes, shape),
            scales: blob.f32s(scales, &[scales.len()]),
        },
        QuantCodes::Int { bits, codes, ranges } => WeightEncoding::Int {
            bits: *bits,
            codes: blob.i8s(codes, shape),
            ranges: blob.f32s(ranges, &[ranges.len()]),
        },
        QuantCodes::Float(v) => WeightEncoding::Float {
            values: blob.f32s(v, shape),
        },
    }
}

/// Splits every compute layer of a grouped, hard-assigned network into one
/// sub-layer per CU with a contiguous channel range. The probe checksum is
/// left empty.
pub fn split_sublayers(net: &Supernet, assignment: &BankAssignment, output_order: &[Vec<usize>]) -> Result<(MappingArtifact, Vec<u8>)> {
    let cost = net.cost_report(assignment, Rounding::Ceil)?;
    let mut blob = BlobWriter::default();
    let mut layers = Vec::new();
    for (i, node) in net.nodes.iter().enumerate() {
        let Some(compute) = &node.compute else { continue };
        let c_out = node.geometry.c_out;
        let branch_cus = compute.placement.branch_cus();
        let branch_ops = compute.placement.branch_ops(compute.op);
        let branches: Vec<usize> = match compute.placement.bank() {
            Some(b) => assignment[b].clone(),
            None => vec![0; c_out],
        };
        if !is_sorted(&branches) {
            return Err(Error::Invalid(format!("layer `{}`: channels are not grouped by CU", node.name)));
        }
        let act_range = match &compute.act_quant {
            Some(aq) if net.quant_active => Some(aq.frozen_range.ok_or_else(|| {
                Error::PhaseOrder(format!("layer `{}`: activation range not calibrated", node.name))
            })?),
            _ => None,
        };
        let mut sublayers = Vec::new();
        let mut start = 0;
        while start < c_out {
            let j = branches[start];
            let end = start + branches[start..].iter().take_while(|&&x| x == j).count();
            let (weight, bias, quant) = match &compute.placement {
                Placement::Fixed { weight, bias, quant, .. } => (*weight, *bias, quant),
                Placement::Precision { weight, bias, quants, .. } => (*weight, *bias, &quants[j]),
                Placement::Operator { branches, .. } => (branches[j].weight, branches[j].bias, &branches[j].quant),
            };
            let w = net.store.value(weight);
            let codes = quant.codes(w)?;
            let mut shape = w.shape().to_vec();
            shape[0] = end - start;
            let weight = encode(&mut blob, &slice_codes(&codes, c_out, start, end), &shape);
            let bias = bias.map(|b| {
                let v = net.store.value(b).data()[start..end].to_vec();
                blob.f32s(&v, &[end - start])
            });
            sublayers.push(SubLayer {
                cu: net.platform.cus[branch_cus[j]].name.clone(),
                start,
                end,
                op: branch_ops[j],
                weight,
                bias,
            });
            start = end;
        }
        let batchnorm = compute.bn.map(|bn| {
            let mut put = |id| {
                let t = net.store.value(id);
                blob.f32s(t.data(), t.shape())
            };
            BatchNormRef {
                eps: net.config.bn_eps,
                gamma: put(bn.gamma),
                beta: put(bn.beta),
                mean: put(bn.mean),
                var: put(bn.var),
            }
        });
        layers.push(ArtifactLayer {
            name: node.name.clone(),
            assignment: branches.iter().map(|&j| net.platform.cus[branch_cus[j]].name.clone()).collect(),
            output_order: output_order[i].clone(),
            act_range,
            batchnorm,
            sublayers,
        });
    }
    let bytes = blob.bytes;
    let artifact = MappingArtifact {
        format_version: ARTIFACT_FORMAT_VERSION,
        network: net.spec.clone(),
        platform: net.platform.clone(),
        blob: BlobInfo {
            file: String::new(),
            bytes: bytes.len(),
            sha256: sha256_hex(&bytes),
        },
        probe: ProbeInfo {
            seed: 0,
            samples: 0,
            output_sha256: String::new(),
        },
        cost,
        layers,
    };
    Ok((artifact, bytes))
}

/// Checks the structural invariants of an artifact against its blob.
pub fn validate_artifact(artifact: &MappingArtifact, blob: &[u8]) -> Result<()> {
    artifact.check_blob(blob)?;
    let resolved = artifact.network.resolve()?;
    let mut by_name: HashMap<&str, &ArtifactLayer> = HashMap::new();
    for l in &artifact.layers {
        by_name.insert(&l.name, l);
    }
    for (spec, r) in artifact.network.layers.iter().zip(&resolved) {
        let compute = matches!(spec.op, LayerOp::Conv | LayerOp::DwConv | LayerOp::Linear);
        let layer = by_name.get(spec.name.as_str());
        let Some(layer) = layer else {
            if compute {
                return Err(Error::Artifact(format!("layer `{}` has no tensors", spec.name)));
            }
            continue;
        };
        let c_out = r.geometry.c_out;
        let mut next = 0;
        for s in &layer.sublayers {
            if s.start != next || s.end <= s.start || s.end > c_out {
                return Err(Error::Artifact(format!(
                    "layer `{}`: sub-layer [{}, {}) does not continue the partition at {next} of {c_out}",
                    spec.name, s.start, s.end
                )));
            }
            next = s.end;
            let cu = artifact.platform.cu_index(&s.cu).map(|i| &artifact.platform.cus[i])?;
            if !cu.can_run(s.op, &r.geometry) {
                return Err(Error::Artifact(format!("layer `{}`: CU `{}` cannot run {}", spec.name, s.cu, s.op.as_str())));
            }
            let precision_ok = matches!(
                (&s.weight, cu.precision),
                (WeightEncoding::Ternary { .. }, crate::quant::Precision::Ternary)
                    | (WeightEncoding::Int { .. }, crate::quant::Precision::Int8)
                    | (WeightEncoding::Float { .. }, crate::quant::Precision::Float)
            );
            if !precision_ok {
                return Err(Error::Artifact(format!(
                    "layer `{}`: weight encoding does not match the {} precision of `{}`",
                    spec.name,
                    cu.precision.as_str(),
                    s.cu
                )));
            }
        }
        if next != c_out {
            return Err(Error::Artifact(format!(
                "layer `{}`: sub-layers cover [0, {next}) of {c_out} channels",
                spec.name
            )));
        }
        let mut order = layer.output_order.clone();
        order.sort_unstable();
        if order != (0..c_out).collect::<Vec<_>>() {
            return Err(Error::Artifact(format!("layer `{}`: output_order is not a permutation", spec.name)));
        }
    }
    Ok(())
}

fn decode(blob: &[u8], w: &WeightEncoding, what: &str) -> Result<Tensor> {
    match w {
        WeightEncoding::Ternary { codes, scales } => {
            let c = read_i8(blob, codes, what)?;
            let s = read_f32(blob, scales, what)?;
            QuantCodes::Ternary {
                codes: c,
                scales: s.into_data(),
            }
            .dequantize(&codes.shape)
        }
        WeightEncoding::Int { bits, codes, ranges } => {
            let c = read_i8(blob, codes, what)?;
            let r = read_f32(blob, ranges, what)?;
            QuantCodes::Int {
                bits: *bits,
                codes: c,
                ranges: r.into_data(),
            }
            .dequantize(&codes.shape)
        }
        WeightEncoding::Float { values } => read_f32(blob, values, what),
    }
}

fn apply_op(tape: &mut Tape, op: OpKind, x: Var, w: Var, b: Option<Var>, g: &LayerGeometry, groups: usize) -> Result<Var> {
    match op {
        OpKind::Linear => tape.linear(x, w, b),
        OpKind::StdConv => tape.conv2d(x, w, b, Conv2dParams::new(g.stride, g.padding, 1)),
        OpKind::DwConv => tape.conv2d(x, w, b, Conv2dParams::new(g.stride, g.padding, groups)),
    }
}

/// Runs inference from the artifact alone; returns the output of every
/// network layer in the exported channel order.
pub fn replay(artifact: &MappingArtifact, blob: &[u8], images: &Tensor) -> Result<Vec<Tensor>> {
    validate_artifact(artifact, blob)?;
    let resolved = artifact.network.resolve()?;
    let batch = images.dim(0);
    let mut tape = Tape::new();
    let x0 = tape.constant(images.clone());
    let mut outs: Vec<Var> = Vec::with_capacity(resolved.len());
    for (spec, r) in artifact.network.layers.iter().zip(&resolved) {
        let get = |s: &Source| match *s {
            Source::Input => x0,
            Source::Layer(j) => outs[j],
        };
        let first = get(&r.inputs[0]);
        let [c, h, w] = r.in_shape;
        let y = match spec.op {
            LayerOp::Add => {
                let mut acc = first;
                for s in &r.inputs[1..] {
                    let v = get(s);
                    acc = tape.add(acc, v)?;
                }
                acc
            }
            LayerOp::AvgPool => {
                let v = tape.reshape(first, &[batch, c, h, w])?;
                tape.avg_pool2d(v, r.geometry.kernel, r.geometry.stride)?
            }
            LayerOp::GlobalAvgPool => {
                let v = tape.reshape(first, &[batch, c, h, w])?;
                tape.global_avg_pool(v)?
            }
            LayerOp::Conv | LayerOp::DwConv | LayerOp::Linear => {
                let layer = artifact
                    .layers
                    .iter()
                    .find(|l| l.name == spec.name)
                    .ok_or_else(|| Error::Artifact(format!("layer `{}` has no tensors", spec.name)))?;
                let mut x = if spec.op == LayerOp::Linear {
                    tape.reshape(first, &[batch, c * h * w])?
                } else {
                    tape.reshape(first, &[batch, c, h, w])?
                };
                if let Some(range) = layer.act_range {
                    let q = crate::quant::quantize_activation(tape.value(x), range)?;
                    x = tape.constant(q);
                }
                let mut parts = Vec::with_capacity(layer.sublayers.len());
                for s in &layer.sublayers {
                    let what = format!("layer `{}` sub-layer on `{}`", spec.name, s.cu);
                    let wv = tape.constant(decode(blob, &s.weight, &what)?);
                    let bv = match &s.bias {
                        Some(b) => Some(tape.constant(read_f32(blob, b, &what)?)),
                        None => None,
                    };
                    let (input, groups) = if s.op == OpKind::DwConv {
                        let xs = tape.value(x).narrow(1, s.start, s.end);
                        (tape.constant(xs), s.end - s.start)
                    } else {
                        (x, 1)
                    };
                    parts.push(apply_op(&mut tape, s.op, input, wv, bv, &r.geometry, groups)?);
                }
                let mut y = if parts.len() == 1 {
                    parts[0]
                } else {
                    tape.concat_channels(&parts)?
                };
                if let Some(bn) = &layer.batchnorm {
                    let what = format!("layer `{}` batchnorm", spec.name);
                    let gamma = tape.constant(read_f32(blob, &bn.gamma, &what)?);
                    let beta = tape.constant(read_f32(blob, &bn.beta, &what)?);
                    let mut mean = read_f32(blob, &bn.mean, &what)?;
                    let mut var = read_f32(blob, &bn.var, &what)?;
                    y = tape.batch_norm(
                        y,
                        gamma,
                        beta,
                        BatchNormState {
                            running_mean: &mut mean,
                            running_var: &mut var,
                            momentum: 0.0,
                            eps: bn.eps,
                            train: false,
                        },
                    )?;
                }
                y
            }
        };
        let y = if spec.activation == Activation::Relu { tape.relu(y) } else { y };
        outs.push(y);
    }
    Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Logits of a replay as `[B, classes]`.
pub fn replay_logits(artifact: &MappingArtifact, blob: &[u8], images: &Tensor) -> Result<Tensor> {
    let outs = replay(artifact, blob, images)?;
    let last = outs.last().expect("non-empty network").clone();
    last.reshape([images.dim(0), artifact.network.classes])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    /// Largest deviation of the logits.
    pub max_abs_dev: f32,
    pub passed: bool,
    /// First layer whose output deviates beyond the tolerance.
    pub failed_layer: Option<String>,
    /// Per layer, the largest deviation.
    pub layers: Vec<(String, f32)>,
}

/// Replays the artifact and compares every layer with `reference`, a
/// discretized network in the original (pre-export) channel order.
pub fn verify_artifact(artifact: &MappingArtifact, blob: &[u8], reference: &Supernet, inputs: &Tensor) -> Result<VerifyReport> {
    if !reference.is_hard() {
        return Err(Error::Invalid("the reference network has no hard assignment".into()));
    }
    if reference.spec != artifact.network {
        return Err(Error::Artifact("the artifact describes a different network".into()));
    }
    let got = replay(artifact, blob, inputs)?;
    let mut reference = reference.clone();
    reference.quant_active = true;
    let want = reference.trace(inputs)?;
    let orders: HashMap<&str, &Vec<usize>> = artifact.layers.iter().map(|l| (l.name.as_str(), &l.output_order)).collect();
    let batch = inputs.dim(0);
    let mut layers = Vec::with_capacity(got.len());
    let mut failed_layer = None;
    for (i, (g, w)) in got.iter().zip(&want).enumerate() {
        let name = &artifact.network.layers[i].name;
        let [c, h, wd] = reference.nodes[i].out_shape;
        let w = w.clone().reshape([batch, c, h * wd])?;
        let g = g.clone().reshape([batch, c, h * wd])?;
        // non-compute layers inherit the order of their channel space
        let order = orders.get(name.as_str()).copied().cloned().or_else(|| space_order(artifact, &reference, i));
        let w = match order {
            Some(o) => w.permute_axis(1, &o),
            None => w,
        };
        let dev = g.max_abs_diff(&w);
        if !(dev <= VERIFY_TOLERANCE) && failed_layer.is_none() {
            failed_layer = Some(name.clone());
        }
        layers.push((name.clone(), dev));
    }
    let max_abs_dev = layers.last().map(|l| l.1).unwrap_or(0.0);
    Ok(VerifyReport {
        max_abs_dev,
        passed: failed_layer.is_none(),
        failed_layer,
        layers,
    })
}

/// Channel order of a parameter-free node, taken from a compute node of its space.
fn space_order(artifact: &MappingArtifact, net: &Supernet, node: usize) -> Option<Vec<usize>> {
    let spaces = channel_spaces(&net.nodes);
    let s = spaces[node];
    (0..net.nodes.len())
        .filter(|&j| spaces[j] == s)
        .find_map(|j| artifact.layers.iter().find(|l| l.name == net.nodes[j].name))
        .map(|l| l.output_order.clone())
}

/// An exported mapping with the reordered network it was cut from.
#[derive(Clone, Debug)]
pub struct Exported {
    pub artifact: MappingArtifact,
    pub blob: Vec<u8>,
    pub reordered: Reordered,
    pub report: VerifyReport,
}

/// Reorders, splits and verifies. `net` must be quantizer-calibrated (the
/// final phase does this). The artifact is rejected when its replay deviates
/// from `net` on the probe inputs.
pub fn export(net: &Supernet, assignment: &BankAssignment, probe_seed: u64) -> Result<Exported> {
    let mut reference = net.clone();
    reference.set_hard_assignment(assignment)?;
    reference.quant_active = true;
    let reordered = reorder_channels(&reference, assignment)?;
    let (mut artifact, blob) = split_sublayers(&reordered.net, &reordered.assignment, &reordered.output_order)?;
    let probe = probe_inputs(net.spec.input, PROBE_SAMPLES, probe_seed);
    let report = verify_artifact(&artifact, &blob, &reference, &probe)?;
    if !report.passed {
        return Err(Error::Artifact(format!(
            "replay deviates at layer `{}` (max logit deviation {:e})",
            report.failed_layer.as_deref().unwrap_or("?"),
            report.max_abs_dev
        )));
    }
    let logits = replay_logits(&artifact, &blob, &probe)?;
    artifact.probe = ProbeInfo {
        seed: probe_seed,
        samples: PROBE_SAMPLES,
        output_sha256: tensor_sha256(&logits),
    };
    Ok(Exported {
        artifact,
        blob,
        reordered,
        report,
    })
}

/// Replays the embedded probe and compares the output checksum.
pub fn check_probe(artifact: &MappingArtifact, blob: &[u8]) -> Result<bool> {
    let probe = probe_inputs(artifact.network.input, artifact.probe.samples, artifact.probe.seed);
    let logits = replay_logits(artifact, blob, &probe)?;
    Ok(tensor_sha256(&logits) == artifact.probe.output_sha256)
}

/// Exact cost of the mapping an artifact describes, recomputed from its
/// per-channel CU lists.
pub fn artifact_cost(artifact: &MappingArtifact, rounding: Rounding) -> Result<CostReport> {
    let resolved = artifact.network.resolve()?;
    let mut loads = Vec::new();
    for (spec, r) in artifact.network.layers.iter().zip(&resolved) {
        if !matches!(spec.op, LayerOp::Conv | LayerOp::DwConv | LayerOp::Linear) {
            continue;
        }
        let layer = artifact
            .layers
            .iter()
            .find(|l| l.name == spec.name)
            .ok_or_else(|| Error::Artifact(format!("layer `{}` has no tensors", spec.name)))?;
        let mut units: Vec<crate::hwmodel::Unit> = Vec::new();
        for s in &layer.sublayers {
            let cu = artifact.platform.cu_index(&s.cu)?;
            let n = (s.end - s.start) as f64;
            match units.iter_mut().find(|u| u.cu == cu && u.op == s.op) {
                Some(u) => u.channels += n,
                None => units.push(crate::hwmodel::Unit { cu, op: s.op, channels: n }),
            }
        }
        loads.push(crate::hwmodel::LayerLoad {
            name: spec.name.clone(),
            geometry: r.geometry,
            units,
        });
    }
    crate::hwmodel::evaluate(&artifact.platform, &loads, rounding)
}
