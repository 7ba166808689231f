//! Channel regrouping, sub-layer splitting and artifact replay.

use chanmap::export::{check_probe, export, verify_artifact, MappingArtifact};
use chanmap::hwmodel::PlatformProfile;
use chanmap::mapping::{is_sorted, ThetaMode};
use chanmap::netspec::{mbv1_micro, resnet8_slim, NetworkSpec, CIFAR_INPUT};
use chanmap::rng::{self, Rng};
use chanmap::supernet::{BankAssignment, Supernet, SupernetConfig};
use chanmap::Tensor;
use rand::Rng as _;

use crate::Outcome;

/// A freshly built network with randomized batchnorm statistics, so that a
/// wrong channel order shows up in the outputs.
fn randomized(spec: &NetworkSpec, platform: &PlatformProfile, r: &mut Rng) -> Supernet {
    let mut net = Supernet::build(spec, platform, SupernetConfig::default(), r).unwrap();
    for n in net.nodes.clone() {
        if let Some(bn) = n.compute.as_ref().and_then(|c| c.bn) {
            let c = net.store.value(bn.mean).numel();
            *net.store.value_mut(bn.mean) = Tensor::normal([c], 0.1, r);
            *net.store.value_mut(bn.var) = Tensor::uniform([c], 0.5, 1.5, r);
            *net.store.value_mut(bn.gamma) = Tensor::uniform([c], 0.5, 1.5, r);
            *net.store.value_mut(bn.beta) = Tensor::normal([c], 0.1, r);
        }
    }
    net
}

/// Fixes the assignment and calibrates quantizers, as the final phase does.
fn finalize(net: &mut Supernet, a: &BankAssignment, r: &mut Rng) {
    net.set_hard_assignment(a).unwrap();
    let [c, h, w] = net.spec.input;
    let calib = Tensor::normal([16, c, h, w], 1.0, r);
    net.freeze_quantizers(&[calib]).unwrap();
    net.quant_active = true;
}

/// Sub-layer ranges cover `[0, C_out)` without gaps or overlaps, in order.
fn ranges_tile(artifact: &MappingArtifact) -> bool {
    artifact.layers.iter().all(|l| {
        let mut next = 0;
        for s in &l.sublayers {
            if s.start != next || s.end <= s.start {
                return false;
            }
            next = s.end;
        }
        next == l.assignment.len()
    })
}

pub fn reorder_equivalence() -> Outcome {
    let spec = resnet8_slim(CIFAR_INPUT, 10);
    let platform = PlatformProfile::diana_like();
    let mut worst_logits = 0.0f32;
    let mut worst_replay = 0.0f32;
    let mut failures = Vec::new();
    for i in 0..20u64 {
        let mut r = rng::derive(0x7265, i);
        let mut net = randomized(&spec, &platform, &mut r);
        let a: BankAssignment = net
            .banks
            .iter()
            .map(|b| match b.mode {
                ThetaMode::PerChannel { channels, branches } => (0..channels).map(|_| r.random_range(0..branches)).collect(),
                ThetaMode::Contiguous { channels } => {
                    let k = r.random_range(0..=channels);
                    (0..channels).map(|c| usize::from(c >= k)).collect()
                }
            })
            .collect();
        finalize(&mut net, &a, &mut r);
        let ex = match export(&net, &a, i) {
            Ok(ex) => ex,
            Err(e) => {
                failures.push(format!("#{i}: {e}"));
                continue;
            }
        };
        let x = Tensor::normal([8, 3, 32, 32], 1.0, &mut r);
        let before = net.clone().predict(&x).unwrap();
        let after = ex.reordered.net.clone().predict(&x).unwrap();
        worst_logits = worst_logits.max(before.max_abs_diff(&after));
        let report = verify_artifact(&ex.artifact, &ex.blob, &net, &x).unwrap();
        worst_replay = worst_replay.max(report.max_abs_dev);
        if !report.passed {
            failures.push(format!("#{i}: replay fails at {:?}", report.failed_layer));
        }
        if !ranges_tile(&ex.artifact) {
            failures.push(format!("#{i}: sub-layer ranges do not tile"));
        }
        if !check_probe(&ex.artifact, &ex.blob).unwrap() {
            failures.push(format!("#{i}: probe checksum mismatch"));
        }
    }
    let passed = failures.is_empty() && worst_logits < 1e-4;
    let mut detail = format!(
        "20 resnet8-slim mappings: logit deviation after regrouping {worst_logits:.2e} (< 1e-4), replay deviation {worst_replay:.2e}"
    );
    if !failures.is_empty() {
        detail.push_str(&format!("; failures: {}", failures.join(", ")));
    }
    Outcome::new(passed, detail)
}

pub fn contiguity() -> Outcome {
    let platform = PlatformProfile::darkside_like();
    let mut failures = Vec::new();
    let mut splits = 0;
    for i in 0..20u64 {
        let mut r = rng::derive(0x636f, i);
        let width = [0.25, 0.5, 1.0][r.random_range(0..3)];
        let spec = mbv1_micro(CIFAR_INPUT, 10, width);
        let mut net = randomized(&spec, &platform, &mut r);
        for b in net.banks.clone() {
            let shape = net.store.value(b.logits).shape().to_vec();
            *net.store.value_mut(b.logits) = Tensor::normal(shape, 3.0, &mut r);
        }
        let a = net.discretize();
        finalize(&mut net, &a, &mut r);
        let ex = match export(&net, &a, i) {
            Ok(ex) => ex,
            Err(e) => {
                failures.push(format!("#{i}: {e}"));
                continue;
            }
        };
        for layer in &ex.artifact.layers {
            let node = net.nodes.iter().find(|n| n.name == layer.name).unwrap();
            let cus = node.compute.as_ref().unwrap().placement.branch_cus();
            let branch: Vec<usize> = layer
                .assignment
                .iter()
                .map(|name| cus.iter().position(|&c| platform.cus[c].name == *name).unwrap())
                .collect();
            if !is_sorted(&branch) {
                failures.push(format!("#{i}: {} is not sorted", layer.name));
            }
            splits += usize::from(layer.sublayers.len() > 1);
        }
    }
    let mut detail = format!("20 darkside exports, every layer assignment sorted ({splits} split layers)");
    if !failures.is_empty() {
        detail = format!("failures: {}", failures.join(", "));
    }
    Outcome::new(failures.is_empty(), detail)
}
