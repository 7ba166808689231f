//! Three interactive views over the core crate, exported to JavaScript.
//! Every function returns a JSON string; failures come back as `{"error": ...}`.

use chanmap::autograd::ParamStore;
use chanmap::hwmodel::{layer_cost, smooth_max, LayerLoad, OpKind, PlatformProfile, Rounding, Unit, SMOOTH_MAX_REL_TAU};
use chanmap::mapping::{effective_channels, ThetaBank, ThetaMode};
use chanmap::netspec::LayerGeometry;
use chanmap::Tensor;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn respond<T: Serialize>(r: chanmap::Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).expect("plain data serializes"),
        Err(e) => serde_json::json!({ "error": e.to_string() }).to_string(),
    }
}

#[derive(Serialize)]
struct SplitRow {
    /// Channels on the first CU.
    k: usize,
    cu_cycles: Vec<f64>,
    cycles: f64,
    energy: f64,
}

#[derive(Serialize)]
struct SplitSweep {
    cu_names: Vec<String>,
    ops: Vec<&'static str>,
    rows: Vec<SplitRow>,
    best_k: usize,
}

fn split_sweep(platform: &str, c_in: usize, c_out: usize, kernel: usize, size: usize) -> chanmap::Result<SplitSweep> {
    let p = PlatformProfile::resolve(platform)?;
    let geometry = LayerGeometry {
        c_in,
        c_out,
        kernel,
        stride: 1,
        padding: kernel / 2,
        in_h: size,
        in_w: size,
        out_h: size,
        out_w: size,
    };
    // on the depthwise platform the first branch is the depthwise alternative
    let (first, second) = if p.cus.iter().any(|c| c.operator == chanmap::hwmodel::OperatorSupport::DwConv) {
        if c_in != c_out {
            return Err(chanmap::Error::Invalid("a depthwise alternative needs c_in == c_out".into()));
        }
        (
            (p.cu_index("dwe").unwrap_or(1), OpKind::DwConv),
            (p.cu_index("cluster").unwrap_or(0), OpKind::StdConv),
        )
    } else {
        ((0, OpKind::StdConv), (1, OpKind::StdConv))
    };
    let mut rows = Vec::with_capacity(c_out + 1);
    for k in 0..=c_out {
        let load = LayerLoad {
            name: "layer".into(),
            geometry,
            units: vec![
                Unit { cu: first.0, op: first.1, channels: k as f64 },
                Unit { cu: second.0, op: second.1, channels: (c_out - k) as f64 },
            ],
        };
        let c = layer_cost(&p, &load, Rounding::Ceil)?;
        rows.push(SplitRow { k, cu_cycles: c.cu_cycles, cycles: c.cycles, energy: c.energy });
    }
    let best_k = rows
        .iter()
        .min_by(|a, b| a.cycles.total_cmp(&b.cycles))
        .map(|r| r.k)
        .unwrap_or(0);
    Ok(SplitSweep {
        cu_names: vec![p.cus[first.0].name.clone(), p.cus[second.0].name.clone()],
        ops: vec![first.1.as_str(), second.1.as_str()],
        rows,
        best_k,
    })
}

/// Exact layer latency for every split of `c_out` channels between the two
/// CUs of a builtin platform.
#[wasm_bindgen]
pub fn latency_vs_split(platform: &str, c_in: usize, c_out: usize, kernel: usize, size: usize) -> String {
    respond(split_sweep(platform, c_in, c_out, kernel, size))
}

#[derive(Serialize)]
struct SmoothMaxCurve {
    max: f32,
    mean: f32,
    default_fraction: f32,
    /// `(tau / mean, smooth max)` pairs.
    points: Vec<(f32, f32)>,
}

fn smooth_curve(values: &[f32], fractions: &[f32]) -> chanmap::Result<SmoothMaxCurve> {
    if values.is_empty() {
        return Err(chanmap::Error::Invalid("no values".into()));
    }
    let mean = values.iter().sum::<f32>() / values.len() as f32;
    if !(mean > 0.0) {
        return Err(chanmap::Error::Invalid("latencies must have a positive mean".into()));
    }
    let points = fractions
        .iter()
        .map(|&f| Ok((f, smooth_max(values, f * mean)?)))
        .collect::<chanmap::Result<Vec<_>>>()?;
    Ok(SmoothMaxCurve {
        max: values.iter().cloned().fold(f32::NEG_INFINITY, f32::max),
        mean,
        default_fraction: SMOOTH_MAX_REL_TAU,
        points,
    })
}

/// Smooth maximum of per-CU latencies at each temperature `fraction * mean`.
#[wasm_bindgen]
pub fn smooth_max_curve(values: Vec<f32>, fractions: Vec<f32>) -> String {
    respond(smooth_curve(&values, &fractions))
}

#[derive(Serialize)]
struct SplitView {
    split_probabilities: Vec<f32>,
    /// Probability of each channel being on the first branch.
    theta_first: Vec<f32>,
    effective_channels: [f32; 2],
    assignment: Vec<usize>,
}

fn split_view(logits: &[f32], tau: f32) -> chanmap::Result<SplitView> {
    if logits.len() < 2 {
        return Err(chanmap::Error::Invalid("need at least two split logits".into()));
    }
    if !(tau > 0.0) {
        return Err(chanmap::Error::Invalid("temperature must be positive".into()));
    }
    let mut store = ParamStore::new();
    let mut bank = ThetaBank::new(&mut store, "demo", ThetaMode::Contiguous { channels: logits.len() - 1 })?;
    bank.tau = tau;
    *store.value_mut(bank.logits) = Tensor::from_vec(logits.to_vec());
    let theta = bank.probabilities(&store);
    Ok(SplitView {
        split_probabilities: bank.split_probabilities(&store).unwrap_or_default(),
        theta_first: theta.data().chunks(2).map(|r| r[0]).collect(),
        effective_channels: [effective_channels(&theta, 0), effective_channels(&theta, 1)],
        assignment: bank.discretize(&store),
    })
}

/// Contiguous assignment implied by `C + 1` split-point logits.
#[wasm_bindgen]
pub fn contiguous_split(logits: Vec<f32>, tau: f32) -> String {
    respond(split_view(&logits, tau))
}
