//! Smooth max, the latency/energy model and the min-cost baseline against
//! independent reference computations.

use chanmap::autograd::Tape;
use chanmap::hwmodel::{
    cu_latency, layer_cost, relaxed_layer_cost, smooth_max, CostTarget, CuProfile, LayerLoad, OpKind, OperatorSupport,
    PlatformProfile, RelaxedUnit, Rounding, Tau, Unit,
};
use chanmap::mapping::ThetaMode;
use chanmap::netspec::{mbv1_micro, resnet8_slim, tiny_cnn, LayerGeometry, LayerOp, LayerSpec, MapMode, NetworkSpec};
use chanmap::quant::Precision;
use chanmap::rng::{self, Rng};
use chanmap::search::{build_baseline, BaselineKind};
use chanmap::supernet::{BankAssignment, Placement, Supernet, SupernetConfig};
use chanmap::Tensor;
use rand::Rng as _;

use crate::Outcome;

pub fn smooth_max_bounds() -> Outcome {
    let mut r = rng::seeded(0x736d);
    let mut bound_violations = 0;
    for _ in 0..1000 {
        let len = r.random_range(1..17);
        let scale = 10f32.powf(r.random_range(-2.0..4.0));
        let v: Vec<f32> = (0..len).map(|_| r.random_range(-1.0..1.0) * scale).collect();
        let tau = 10f32.powf(r.random_range(-4.0..3.0)) * scale;
        let m = smooth_max(&v, tau).unwrap();
        let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        bound_violations += usize::from(!(lo <= m && m <= hi));
    }
    let mut worst_gap = 0.0f32;
    for _ in 0..1000 {
        let len = r.random_range(2..17);
        let top: f32 = r.random_range(-100.0..100.0);
        let mut v: Vec<f32> = (0..len).map(|_| top - r.random_range(1.0..50.0)).collect();
        let at = r.random_range(0..len);
        v[at] = top;
        worst_gap = worst_gap.max((smooth_max(&v, 1e-6).unwrap() - top).abs());
    }
    Outcome::new(
        bound_violations == 0 && worst_gap <= 1e-6,
        format!("{bound_violations}/1000 outside [min, max]; tau=1e-6 max error {worst_gap:e} (<= 1e-6)"),
    )
}

fn random_geometry(r: &mut Rng, max_c: usize) -> LayerGeometry {
    let k = [1, 3, 5, 7][r.random_range(0..4)];
    let stride = r.random_range(1..3);
    let size = r.random_range(k..24);
    let pad = r.random_range(0..=k / 2);
    let out = (size + 2 * pad - k) / stride + 1;
    LayerGeometry {
        c_in: r.random_range(1..=max_c),
        c_out: r.random_range(1..=max_c),
        kernel: k,
        stride,
        padding: pad,
        in_h: size,
        in_w: size,
        out_h: out,
        out_w: out,
    }
}

fn random_cu(name: &str, operator: OperatorSupport, precision: Precision, r: &mut Rng) -> CuProfile {
    CuProfile {
        name: name.into(),
        operator,
        precision,
        p_out: r.random_range(1..40),
        p_in: r.random_range(1..40),
        cycles_per_step: r.random_range(1..5) as f64,
        overhead_cycles: r.random_range(0..300) as f64,
        active_power_mw: r.random_range(0..30) as f64,
        max_kernel_rows: None,
    }
}

/// Cycle count by walking the tiles: output channels in groups of `P_out`,
/// input channels in groups of `P_in` (depthwise: one input per output),
/// one step per output pixel and kernel tap.
fn tile_loop_cycles(cu: &CuProfile, op: OpKind, g: &LayerGeometry, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let in_channels = if op == OpKind::DwConv { 1 } else { g.c_in };
    let mut steps: u64 = 0;
    let mut out_start = 0;
    while out_start < n {
        let mut in_start = 0;
        while in_start < in_channels {
            for _oy in 0..g.out_h {
                for _ox in 0..g.out_w {
                    for _tap in 0..g.kernel * g.kernel {
                        steps += 1;
                    }
                }
            }
            in_start += if op == OpKind::DwConv { 1 } else { cu.p_in as usize };
        }
        out_start += cu.p_out as usize;
    }
    cu.cycles_per_step * steps as f64 + cu.overhead_cycles
}

pub fn cost_oracle() -> Outcome {
    let mut r = rng::seeded(0x6f72);
    let mut mismatches = Vec::new();
    for i in 0..200 {
        let g = random_geometry(&mut r, 96);
        let op = [OpKind::StdConv, OpKind::DwConv, OpKind::Linear][r.random_range(0..3)];
        let g = if op == OpKind::Linear {
            LayerGeometry { kernel: 1, stride: 1, padding: 0, in_h: 1, in_w: 1, out_h: 1, out_w: 1, ..g }
        } else {
            g
        };
        let cu = random_cu("cu", OperatorSupport::Any, Precision::Int8, &mut r);
        let n = r.random_range(0..=g.c_out);
        let got = cu_latency(&cu, op, &g, n as f64, Rounding::Ceil).unwrap();
        let want = tile_loop_cycles(&cu, op, &g, n);
        if got != want {
            mismatches.push(format!("#{i}: {got} vs {want}"));
        }
    }

    // one-hot relaxed cost against the exact cost under linear rounding
    let mut worst = 0.0f64;
    let tau = Tau::Fixed(1e-3);
    for _ in 0..100 {
        let n_cu = r.random_range(2..4);
        let mut p = PlatformProfile::diana_like();
        p.cus = (0..n_cu)
            .map(|i| random_cu(&format!("cu{i}"), OperatorSupport::Any, Precision::Int8, &mut r))
            .collect();
        p.idle_power_mw = r.random_range(0..10) as f64;
        let g = random_geometry(&mut r, 64);
        let op = if r.random_bool(0.5) { OpKind::StdConv } else { OpKind::DwConv };
        // integer channel counts summing to c_out, as a one-hot theta yields
        let mut counts = vec![0usize; n_cu];
        for _ in 0..g.c_out {
            counts[r.random_range(0..n_cu)] += 1;
        }
        worst = worst.max(relative_gap(&p, &g, op, &counts, tau));
        // the whole layer on one CU with the default relative temperature
        let mut single = vec![0usize; n_cu];
        single[r.random_range(0..n_cu)] = g.c_out;
        worst = worst.max(relative_gap(&p, &g, op, &single, Tau::Relative));
    }
    // whole networks with hard assignments
    for i in 0..20 {
        let (spec, platform) = random_net(&mut r, i);
        let mut net = Supernet::build(&spec, &platform, SupernetConfig::default(), &mut r).unwrap();
        let a = random_assignment(&net, &mut r);
        net.set_hard_assignment(&a).unwrap();
        for target in [CostTarget::Latency, CostTarget::Energy] {
            let mut t = Tape::new();
            let thetas = net.thetas(&mut t).unwrap();
            let relaxed = net.relaxed_cost(&mut t, &thetas, target, tau).unwrap();
            let relaxed = t.value(relaxed).item() as f64;
            let exact = net.cost_report(&a, Rounding::Linear).unwrap().value(target);
            worst = worst.max((relaxed - exact).abs() / exact.abs().max(1e-12));
        }
    }
    let passed = mismatches.is_empty() && worst < 1e-4;
    let mut detail = format!(
        "{}/200 tile-loop mismatches; one-hot relaxed vs exact (linear) worst rel. error {worst:.2e} (< 1e-4)",
        mismatches.len()
    );
    if !mismatches.is_empty() {
        detail.push_str(&format!(": {}", mismatches.join(", ")));
    }
    Outcome::new(passed, detail)
}

fn relative_gap(p: &PlatformProfile, g: &LayerGeometry, op: OpKind, counts: &[usize], tau: Tau) -> f64 {
    let load = LayerLoad {
        name: "l".into(),
        geometry: *g,
        units: counts.iter().enumerate().map(|(cu, &n)| Unit { cu, op, channels: n as f64 }).collect(),
    };
    let exact = layer_cost(p, &load, Rounding::Linear).unwrap();
    let mut t = Tape::new();
    let units: Vec<RelaxedUnit> = counts
        .iter()
        .enumerate()
        .map(|(cu, &n)| RelaxedUnit { cu, op, channels: t.constant(Tensor::scalar(n as f32)) })
        .collect();
    let (m, e) = relaxed_layer_cost(&mut t, p, g, &units, tau).unwrap();
    let rel = |a: f64, b: f64| if b == 0.0 { a.abs() } else { (a - b).abs() / b.abs() };
    rel(t.value(m).item() as f64, exact.cycles).max(rel(t.value(e).item() as f64, exact.energy))
}

fn random_assignment(net: &Supernet, r: &mut Rng) -> BankAssignment {
    net.banks
        .iter()
        .map(|b| {
            let c = b.channels();
            match b.mode {
                ThetaMode::PerChannel { branches, .. } => (0..c).map(|_| r.random_range(0..branches)).collect(),
                ThetaMode::Contiguous { .. } => {
                    let k = r.random_range(0..=c);
                    (0..c).map(|i| usize::from(i >= k)).collect()
                }
            }
        })
        .collect()
}

/// A builtin network on a matching platform with randomized CU numbers.
fn random_net(r: &mut Rng, i: usize) -> (NetworkSpec, PlatformProfile) {
    let size = [8, 12, 16][r.random_range(0..3)];
    let input = [3, size, size];
    let (spec, mut p) = match i % 3 {
        0 => (tiny_cnn(input, 10), PlatformProfile::diana_like()),
        1 => (resnet8_slim(input, 10), PlatformProfile::diana_like()),
        _ => (mbv1_micro(input, 10, [0.25, 0.5, 1.0][r.random_range(0..3)]), PlatformProfile::darkside_like()),
    };
    for cu in &mut p.cus {
        cu.p_out = 1 << r.random_range(0..6);
        cu.p_in = 1 << r.random_range(0..6);
        cu.cycles_per_step = [0.5, 1.0, 2.0, 3.0][r.random_range(0..4)];
        cu.overhead_cycles = r.random_range(0..300) as f64;
        cu.active_power_mw = r.random_range(0..40) as f64;
    }
    p.idle_power_mw = r.random_range(0..8) as f64;
    (spec, p)
}

/// One mappable convolution followed by a fixed classifier.
fn single_layer_net(g: &LayerGeometry) -> NetworkSpec {
    NetworkSpec {
        format_version: chanmap::netspec::NET_FORMAT_VERSION,
        name: "single".into(),
        input: [g.c_in, g.in_h, g.in_w],
        classes: 2,
        layers: vec![
            LayerSpec {
                c_out: Some(g.c_out),
                kernel: Some(g.kernel),
                stride: Some(g.stride),
                padding: Some(g.padding),
                mappable: true,
                mode: MapMode::Precision,
                ..LayerSpec::new("conv", LayerOp::Conv)
            },
            LayerSpec::new("pool", LayerOp::GlobalAvgPool),
            LayerSpec {
                c_out: Some(2),
                ..LayerSpec::new("fc", LayerOp::Linear)
            },
        ],
    }
}

/// Exhaustive search over the number of channels on the digital CU. Ties
/// keep the largest digital share.
fn exhaustive_digital_channels(p: &PlatformProfile, g: &LayerGeometry, digital: usize, target: CostTarget) -> usize {
    let analog = 1 - digital;
    let lat = |cu: &CuProfile, n: usize| -> f64 {
        if n == 0 {
            return 0.0;
        }
        let lanes = n.div_ceil(cu.p_out as usize);
        let inner = g.c_in.div_ceil(cu.p_in as usize) * g.out_h * g.out_w * g.kernel * g.kernel;
        cu.cycles_per_step * (lanes * inner) as f64 + cu.overhead_cycles
    };
    let mut best: Option<(f64, usize)> = None;
    for k in 0..=g.c_out {
        let (ld, la) = (lat(&p.cus[digital], k), lat(&p.cus[analog], g.c_out - k));
        let m = ld.max(la);
        let cost = match target {
            CostTarget::Latency => m,
            CostTarget::Energy => p.cus[digital].active_power_mw * ld + p.cus[analog].active_power_mw * la + p.idle_power_mw * m,
        };
        if best.is_none_or(|(c, _)| cost <= c) {
            best = Some((cost, k));
        }
    }
    best.unwrap().1
}

pub fn min_cost_optimality() -> Outcome {
    let mut r = rng::seeded(0x6d63);
    let mut mismatches = Vec::new();
    let mut ties = 0;
    for i in 0..100 {
        let target = if i < 50 { CostTarget::Latency } else { CostTarget::Energy };
        let mut g = random_geometry(&mut r, 16);
        g.c_in = r.random_range(1..9);
        let digital = r.random_range(0..2);
        let mut p = PlatformProfile::diana_like();
        let mut cus = vec![
            random_cu("digital", OperatorSupport::Any, Precision::Int8, &mut r),
            random_cu("analog", OperatorSupport::Any, Precision::Ternary, &mut r),
        ];
        for cu in &mut cus {
            cu.p_out = r.random_range(1..17);
            cu.p_in = r.random_range(1..17);
        }
        if digital == 1 {
            cus.swap(0, 1);
        }
        p.cus = cus;
        p.default_cu = Some("digital".into());
        p.idle_power_mw = r.random_range(0..10) as f64;
        let spec = single_layer_net(&g);
        let net = match Supernet::build(&spec, &p, SupernetConfig::default(), &mut r) {
            Ok(n) => n,
            Err(e) => {
                mismatches.push(format!("#{i}: {e}"));
                continue;
            }
        };
        let want = exhaustive_digital_channels(&p, &g, digital, target);
        let a = build_baseline(&BaselineKind::MinCost, &net, target).unwrap();
        let layer = net.bank_layers[0][0];
        let Some(Placement::Precision { cus, .. }) = net.nodes[layer].compute.as_ref().map(|c| &c.placement) else {
            mismatches.push(format!("#{i}: layer is not in precision mode"));
            continue;
        };
        let got = a[0].iter().filter(|&&b| cus[b] == digital).count();
        if want != got {
            mismatches.push(format!("#{i}: {got} digital channels, exhaustive {want}"));
        }
        let alt = exhaustive_first_minimum(&p, &g, digital, target);
        ties += usize::from(alt != want);
    }
    let mut detail = format!("{}/100 mismatches ({ties} instances with tied optima)", mismatches.len());
    if !mismatches.is_empty() {
        detail.push_str(&format!(": {}", mismatches.join(", ")));
    }
    Outcome::new(mismatches.is_empty(), detail)
}

/// Smallest digital count reaching the minimum; differs from
/// [`exhaustive_digital_channels`] exactly when the optimum is tied.
fn exhaustive_first_minimum(p: &PlatformProfile, g: &LayerGeometry, digital: usize, target: CostTarget) -> usize {
    let cost_at = |k: usize| {
        let load = LayerLoad {
            name: String::new(),
            geometry: *g,
            units: vec![
                Unit { cu: digital, op: OpKind::StdConv, channels: k as f64 },
                Unit { cu: 1 - digital, op: OpKind::StdConv, channels: (g.c_out - k) as f64 },
            ],
        };
        let lc = layer_cost(p, &load, Rounding::Ceil).unwrap();
        match target {
            CostTarget::Latency => lc.cycles,
            CostTarget::Energy => lc.energy,
        }
    };
    let costs: Vec<f64> = (0..=g.c_out).map(cost_at).collect();
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    costs.iter().position(|&c| c == min).unwrap()
}

pub fn idle_energy() -> Outcome {
    let mut r = rng::seeded(0x6964);
    let mut failures = Vec::new();
    for i in 0..50 {
        let (spec, mut p) = random_net(&mut r, i);
        for cu in &mut p.cus {
            cu.active_power_mw = 0.0;
        }
        // dyadic idle power keeps every product exact
        p.idle_power_mw = r.random_range(1..64) as f64 / 8.0;
        let net = Supernet::build(&spec, &p, SupernetConfig::default(), &mut r).unwrap();
        let a = random_assignment(&net, &mut r);
        let report = net.cost_report(&a, Rounding::Ceil).unwrap();
        let sum_m: f64 = report.layers.iter().map(|l| l.cycles).sum();
        let want = p.idle_power_mw * sum_m;
        if report.total_energy != want {
            failures.push(format!("#{i} {}: {} vs {want}", spec.name, report.total_energy));
        }
    }
    let mut detail = format!("{}/50 networks differ from P_idle * sum(M)", failures.len());
    if !failures.is_empty() {
        detail.push_str(&format!(": {}", failures.join(", ")));
    }
    Outcome::new(failures.is_empty(), detail)
}
