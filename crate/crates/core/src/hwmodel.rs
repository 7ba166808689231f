//! Per-CU latency and platform energy models.
//!
//! Every CU is a lane-parallel roofline with a fixed per-layer overhead:
//!
//! ```text
//! std-conv / linear:  A * r(n / P_out) * r(C_in / P_in) * O_x * O_y * K^2 + B * [n > 0]
//! dw-conv:            A * r(n / P_out) * O_x * O_y * K^2                + B * [n > 0]
//! ```
//!
//! with `r = ceil` for exact evaluation and `r(x) = x` for the relaxed,
//! differentiable training-time model. A layer's latency is the max over the
//! CUs it runs on (they run in parallel); energy adds active power times each
//! CU's busy time plus idle power over the whole layer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{smooth_max_weights, Tape, Var};
use crate::error::{Error, Result};
use crate::netspec::LayerGeometry;
use crate::quant::Precision;

/// Operator actually executed by one branch of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpKind {
    StdConv,
    DwConv,
    Linear,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::StdConv => "std-conv",
            OpKind::DwConv => "dw-conv",
            OpKind::Linear => "linear",
        }
    }
}

/// Operators a CU can execute. `std-conv` CUs also run linear layers
/// (a linear layer is a 1x1 convolution on a 1x1 map).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorSupport {
    StdConv,
    DwConv,
    Linear,
    Any,
}

impl OperatorSupport {
    pub fn supports(self, op: OpKind) -> bool {
        matches!(
            (self, op),
            (OperatorSupport::Any, _)
                | (OperatorSupport::StdConv, OpKind::StdConv | OpKind::Linear)
                | (OperatorSupport::DwConv, OpKind::DwConv)
                | (OperatorSupport::Linear, OpKind::Linear)
        )
    }

    /// Generality used to break cost ties (more general is preferred).
    fn generality(self) -> u8 {
        match self {
            OperatorSupport::Any => 3,
            OperatorSupport::StdConv => 2,
            OperatorSupport::Linear => 1,
            OperatorSupport::DwConv => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CuProfile {
    pub name: String,
    pub operator: OperatorSupport,
    pub precision: Precision,
    /// Parallel lanes over output channels.
    pub p_out: u32,
    /// Parallel lanes over input channels (ignored by depthwise layers).
    pub p_in: u32,
    /// Cycles per inner step (`A`).
    pub cycles_per_step: f64,
    /// Fixed per-layer overhead in cycles (`B`).
    #[serde(default)]
    pub overhead_cycles: f64,
    /// Active power above idle, mW.
    #[serde(default)]
    pub active_power_mw: f64,
    /// Capacity of a weight array in rows; a layer fits when `K^2 * C_in` does not exceed it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_kernel_rows: Option<u32>,
}

impl CuProfile {
    pub fn can_run(&self, op: OpKind, geometry: &LayerGeometry) -> bool {
        if !self.operator.supports(op) {
            return false;
        }
        match (self.max_kernel_rows, op) {
            (Some(rows), OpKind::StdConv | OpKind::Linear) => {
                geometry.kernel * geometry.kernel * geometry.c_in <= rows as usize
            }
            (Some(rows), OpKind::DwConv) => geometry.kernel * geometry.kernel <= rows as usize,
            (None, _) => true,
        }
    }

    /// Preference order among CUs when costs tie: higher precision, then generality.
    pub fn accuracy_rank(&self) -> (u8, u8) {
        (self.precision.rank(), self.operator.generality())
    }

    fn validate(&self) -> Result<()> {
        if self.p_out == 0 || self.p_in == 0 {
            return Err(Error::Config(format!("cu `{}`: p_out and p_in must be >= 1", self.name)));
        }
        if !(self.cycles_per_step > 0.0) || !self.cycles_per_step.is_finite() {
            return Err(Error::Config(format!("cu `{}`: cycles_per_step must be positive", self.name)));
        }
        for (what, v) in [
            ("overhead_cycles", self.overhead_cycles),
            ("active_power_mw", self.active_power_mw),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("cu `{}`: {what} must be non-negative", self.name)));
            }
        }
        Ok(())
    }
}

pub const PLATFORM_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformProfile {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    pub name: String,
    pub idle_power_mw: f64,
    pub clock_hz: f64,
    /// CU running layers that are not mapped; defaults to the most accurate general CU.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_cu: Option<String>,
    #[serde(rename = "cu")]
    pub cus: Vec<CuProfile>,
}

fn default_format_version() -> u32 {
    PLATFORM_FORMAT_VERSION
}

impl PlatformProfile {
    pub fn from_toml(text: &str) -> Result<Self> {
        let p: PlatformProfile = toml::from_str(text).map_err(|e| Error::Config(format!("platform: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("platform serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// A shipped profile by name, or a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match name_or_path {
            "diana-like" => Ok(Self::diana_like()),
            "darkside-like" => Ok(Self::darkside_like()),
            path => Self::load(Path::new(path)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != PLATFORM_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "platform format_version {} (supported: {PLATFORM_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.cus.len() < 2 {
            return Err(Error::Config(format!("platform `{}` needs at least two CUs", self.name)));
        }
        for (i, cu) in self.cus.iter().enumerate() {
            cu.validate()?;
            if self.cus[..i].iter().any(|c| c.name == cu.name) {
                return Err(Error::Config(format!("duplicate CU name `{}`", cu.name)));
            }
        }
        if !(self.idle_power_mw >= 0.0) || !(self.clock_hz > 0.0) {
            return Err(Error::Config("idle_power_mw must be >= 0 and clock_hz > 0".into()));
        }
        if let Some(d) = &self.default_cu {
            self.cu_index(d)?;
        }
        Ok(())
    }

    pub fn cu_index(&self, name: &str) -> Result<usize> {
        self.cus
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownCu(name.to_string()))
    }

    /// CU used for layers that are not mapped.
    pub fn default_cu_for(&self, op: OpKind, geometry: &LayerGeometry) -> Result<usize> {
        if let Some(name) = &self.default_cu {
            let i = self.cu_index(name)?;
            if self.cus[i].can_run(op, geometry) {
                return Ok(i);
            }
        }
        (0..self.cus.len())
            .filter(|&i| self.cus[i].can_run(op, geometry))
            .max_by_key(|&i| (self.cus[i].accuracy_rank(), std::cmp::Reverse(i)))
            .ok_or_else(|| Error::Unsupported(format!("no CU of `{}` runs {} with this geometry", self.name, op.as_str())))
    }

    /// DIANA-like SoC: an 8-bit digital PE grid and a ternary analog in-memory array.
    pub fn diana_like() -> Self {
        PlatformProfile {
            format_version: PLATFORM_FORMAT_VERSION,
            name: "diana-like".into(),
            idle_power_mw: 5.0,
            clock_hz: 260e6,
            default_cu: Some("digital".into()),
            cus: vec![
                CuProfile {
                    name: "digital".into(),
                    operator: OperatorSupport::Any,
                    precision: Precision::Int8,
                    p_out: 16,
                    p_in: 16,
                    cycles_per_step: 1.0,
                    overhead_cycles: 50.0,
                    active_power_mw: 20.0,
                    max_kernel_rows: None,
                },
                CuProfile {
                    name: "analog".into(),
                    operator: OperatorSupport::StdConv,
                    precision: Precision::Ternary,
                    p_out: 512,
                    p_in: 128,
                    cycles_per_step: 3.0,
                    overhead_cycles: 200.0,
                    active_power_mw: 8.0,
                    max_kernel_rows: Some(1152),
                },
            ],
        }
    }

    /// Darkside-like SoC: a general-purpose core cluster and a depthwise engine.
    pub fn darkside_like() -> Self {
        PlatformProfile {
            format_version: PLATFORM_FORMAT_VERSION,
            name: "darkside-like".into(),
            idle_power_mw: 3.0,
            clock_hz: 200e6,
            default_cu: Some("cluster".into()),
            cus: vec![
                CuProfile {
                    name: "cluster".into(),
                    operator: OperatorSupport::Any,
                    precision: Precision::Float,
                    p_out: 8,
                    p_in: 1,
                    cycles_per_step: 1.0,
                    overhead_cycles: 100.0,
                    active_power_mw: 15.0,
                    max_kernel_rows: None,
                },
                CuProfile {
                    name: "dwe".into(),
                    operator: OperatorSupport::DwConv,
                    precision: Precision::Float,
                    p_out: 16,
                    p_in: 1,
                    cycles_per_step: 0.5,
                    overhead_cycles: 100.0,
                    active_power_mw: 5.0,
                    max_kernel_rows: None,
                },
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    /// Integer ceiling of lane occupancy.
    Ceil,
    /// `r(x) = x`, the differentiable relaxation.
    Linear,
}

impl Rounding {
    fn apply(self, x: f64) -> f64 {
        match self {
            Rounding::Ceil => x.ceil(),
            Rounding::Linear => x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostTarget {
    Latency,
    Energy,
}

impl std::str::FromStr for CostTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latency" => Ok(CostTarget::Latency),
            "energy" => Ok(CostTarget::Energy),
            other => Err(Error::Invalid(format!("unknown cost target `{other}` (latency|energy)"))),
        }
    }
}

fn check_support(profile: &CuProfile, op: OpKind, geometry: &LayerGeometry) -> Result<()> {
    if profile.can_run(op, geometry) {
        Ok(())
    } else {
        Err(Error::Unsupported(format!(
            "CU `{}` cannot run {} (C_in {}, K {})",
            profile.name,
            op.as_str(),
            geometry.c_in,
            geometry.kernel
        )))
    }
}

/// Per-channel slope and fixed term of the latency model under `rounding`
/// (slope is only meaningful for `Rounding::Linear`).
fn inner_steps(profile: &CuProfile, op: OpKind, geometry: &LayerGeometry, rounding: Rounding) -> f64 {
    let spatial = (geometry.out_h * geometry.out_w * geometry.kernel * geometry.kernel) as f64;
    match op {
        OpKind::DwConv => spatial,
        OpKind::StdConv | OpKind::Linear => {
            rounding.apply(geometry.c_in as f64 / profile.p_in as f64) * spatial
        }
    }
}

/// Latency in cycles of `n` output channels of a layer on one CU.
pub fn cu_latency(
    profile: &CuProfile,
    op: OpKind,
    geometry: &LayerGeometry,
    n: f64,
    rounding: Rounding,
) -> Result<f64> {
    check_support(profile, op, geometry)?;
    if !(0.0..=geometry.c_out as f64).contains(&n) {
        return Err(Error::Invalid(format!("{n} channels outside [0, {}]", geometry.c_out)));
    }
    if n == 0.0 {
        return Ok(0.0);
    }
    let lanes = rounding.apply(n / profile.p_out as f64);
    let steps = lanes * inner_steps(profile, op, geometry, rounding);
    Ok(profile.cycles_per_step * steps + profile.overhead_cycles)
}

/// Softmax-weighted mean of `values`: `sum_i softmax(v / tau)_i * v_i`.
pub fn smooth_max(values: &[f32], tau: f32) -> Result<f32> {
    if values.is_empty() {
        return Err(Error::Invalid("smooth_max of an empty vector".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("smooth_max temperature must be positive, got {tau}")));
    }
    Ok(smooth_max_weights(values, tau).0)
}

/// Fraction of the mean input used as smooth-max temperature.
pub const SMOOTH_MAX_REL_TAU: f32 = 0.1;

/// Temperature used per layer per step: 10% of the mean of the inputs.
pub fn default_tau(values: &[f32]) -> f32 {
    let mean = values.iter().sum::<f32>() / values.len() as f32;
    if mean > 0.0 {
        SMOOTH_MAX_REL_TAU * mean
    } else {
        1.0
    }
}

/// One CU's share of a layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Unit {
    pub cu: usize,
    pub op: OpKind,
    pub channels: f64,
}

/// A costed layer: its geometry and the CUs executing (parts of) it.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerLoad {
    pub name: String,
    pub geometry: LayerGeometry,
    pub units: Vec<Unit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    /// Busy cycles per platform CU (0 where unused).
    pub cu_cycles: Vec<f64>,
    /// Layer latency `M`, the max over CUs.
    pub cycles: f64,
    /// mW * cycles.
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub cu_names: Vec<String>,
    pub layers: Vec<LayerCost>,
    pub total_cycles: f64,
    /// mW * cycles.
    pub total_energy: f64,
    pub latency_s: f64,
    pub energy_uj: f64,
}

impl CostReport {
    pub fn value(&self, target: CostTarget) -> f64 {
        match target {
            CostTarget::Latency => self.total_cycles,
            CostTarget::Energy => self.total_energy,
        }
    }
}

pub fn layer_cost(platform: &PlatformProfile, load: &LayerLoad, rounding: Rounding) -> Result<LayerCost> {
    let mut cu_cycles = vec![0.0; platform.cus.len()];
    for u in &load.units {
        let cu = platform
            .cus
            .get(u.cu)
            .ok_or_else(|| Error::UnknownCu(format!("#{}", u.cu)))?;
        cu_cycles[u.cu] += cu_latency(cu, u.op, &load.geometry, u.channels, rounding)?;
    }
    let cycles = cu_cycles.iter().fold(0.0f64, |m, &v| m.max(v));
    let active: f64 = cu_cycles
        .iter()
        .zip(&platform.cus)
        .map(|(c, cu)| cu.active_power_mw * c)
        .sum();
    Ok(LayerCost {
        name: load.name.clone(),
        cu_cycles,
        cycles,
        energy: active + platform.idle_power_mw * cycles,
    })
}

/// Latency (sum of per-layer maxima) and energy of a discrete mapping.
pub fn evaluate(platform: &PlatformProfile, loads: &[LayerLoad], rounding: Rounding) -> Result<CostReport> {
    let layers = loads
        .iter()
        .map(|l| layer_cost(platform, l, rounding))
        .collect::<Result<Vec<_>>>()?;
    let total_cycles = layers.iter().map(|l| l.cycles).sum::<f64>();
    let total_energy = layers.iter().map(|l| l.energy).sum::<f64>();
    Ok(CostReport {
        cu_names: platform.cus.iter().map(|c| c.name.clone()).collect(),
        layers,
        total_cycles,
        total_energy,
        latency_s: total_cycles / platform.clock_hz,
        energy_uj: total_energy / platform.clock_hz * 1e3,
    })
}

pub fn latency_cost(platform: &PlatformProfile, loads: &[LayerLoad], rounding: Rounding) -> Result<f64> {
    Ok(evaluate(platform, loads, rounding)?.total_cycles)
}

pub fn energy_cost(platform: &PlatformProfile, loads: &[LayerLoad], rounding: Rounding) -> Result<f64> {
    Ok(evaluate(platform, loads, rounding)?.total_energy)
}

/// One CU's share of a layer with a differentiable channel count.
#[derive(Clone, Copy, Debug)]
pub struct RelaxedUnit {
    pub cu: usize,
    pub op: OpKind,
    /// Scalar effective channel count.
    pub channels: Var,
}

/// Smooth-max temperature policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Tau {
    /// 10% of the mean of the layer's CU latencies, recomputed on every call.
    Relative,
    Fixed(f32),
}

/// Differentiable `(M, energy)` of one layer under the linear relaxation.
pub fn relaxed_layer_cost(
    tape: &mut Tape,
    platform: &PlatformProfile,
    geometry: &LayerGeometry,
    units: &[RelaxedUnit],
    tau: Tau,
) -> Result<(Var, Var)> {
    let mut lats = Vec::with_capacity(units.len());
    for u in units {
        let cu = platform
            .cus
            .get(u.cu)
            .ok_or_else(|| Error::UnknownCu(format!("#{}", u.cu)))?;
        check_support(cu, u.op, geometry)?;
        let slope = cu.cycles_per_step / cu.p_out as f64 * inner_steps(cu, u.op, geometry, Rounding::Linear);
        let n = tape.value(u.channels).item();
        let scaled = tape.scale(u.channels, slope as f32);
        let lat = if n > 0.0 {
            tape.add_scalar(scaled, cu.overhead_cycles as f32)
        } else {
            scaled
        };
        lats.push(lat);
    }
    let stacked = tape.stack(&lats)?;
    let t = match tau {
        Tau::Relative => default_tau(tape.value(stacked).data()),
        Tau::Fixed(t) => t,
    };
    let m = tape.smooth_max(stacked, t)?;
    let mut energy = tape.scale(m, platform.idle_power_mw as f32);
    for (u, &lat) in units.iter().zip(&lats) {
        let p = platform.cus[u.cu].active_power_mw as f32;
        let e = tape.scale(lat, p);
        energy = tape.add(energy, e)?;
    }
    Ok((m, energy))
}
