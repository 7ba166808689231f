//! Declarative network descriptions and the shipped seed networks.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NET_FORMAT_VERSION: u32 = 1;

/// Shapes seen by the cost model. Linear layers use `kernel = 1` and 1x1 maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl LayerGeometry {
    pub fn macs(&self, depthwise: bool) -> usize {
        let per_out = if depthwise { 1 } else { self.c_in };
        self.c_out * per_out * self.kernel * self.kernel * self.out_h * self.out_w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerOp {
    Conv,
    DwConv,
    Linear,
    Add,
    AvgPool,
    GlobalAvgPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

/// How a mappable layer is searched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapMode {
    /// Chosen from the platform when the supernet is built.
    #[default]
    Auto,
    /// Same operator, one quantized copy of the filter per CU.
    Precision,
    /// Depthwise vs standard convolution over a contiguous channel split.
    Operator,
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub op: LayerOp,
    /// Producer layer names (or `input`). Empty means the previous layer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_in: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_out: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub batchnorm: bool,
    #[serde(default, skip_serializing_if = "is_default")]
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "is_false")]
    pub mappable: bool,
    #[serde(default, skip_serializing_if = "is_default")]
    pub mode: MapMode,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, op: LayerOp) -> Self {
        LayerSpec {
            name: name.into(),
            op,
            inputs: Vec::new(),
            c_in: None,
            c_out: None,
            kernel: None,
            stride: None,
            padding: None,
            batchnorm: false,
            activation: Activation::None,
            mappable: false,
            mode: MapMode::Auto,
        }
    }

    fn conv(name: &str, c_out: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec {
            c_out: Some(c_out),
            kernel: Some(kernel),
            stride: Some(stride),
            padding: Some(kernel / 2),
            batchnorm: true,
            activation: Activation::Relu,
            ..LayerSpec::new(name, LayerOp::Conv)
        }
    }

    fn from(mut self, inputs: &[&str]) -> Self {
        self.inputs = inputs.iter().map(|s| s.to_string()).collect();
        self
    }

    fn mappable(mut self) -> Self {
        self.mappable = true;
        self
    }

    fn no_relu(mut self) -> Self {
        self.activation = Activation::None;
        self
    }
}

/// Where a layer reads its input from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Input,
    Layer(usize),
}

/// A layer with inputs and shapes resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedLayer {
    pub inputs: Vec<Source>,
    /// `[C, H, W]` of the (first) input.
    pub in_shape: [usize; 3],
    pub out_shape: [usize; 3],
    pub geometry: LayerGeometry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(default = "default_version")]
    pub format_version: u32,
    pub name: String,
    /// `[C, H, W]`.
    pub input: [usize; 3],
    pub classes: usize,
    #[serde(rename = "layer")]
    pub layers: Vec<LayerSpec>,
}

fn default_version() -> u32 {
    NET_FORMAT_VERSION
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

impl NetworkSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: NetworkSpec = toml::from_str(text).map_err(|e| Error::Config(format!("network spec: {e}")))?;
        spec.resolve()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("network spec serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// A builtin name (`tiny-cnn`, `resnet8-slim`, `mbv1-micro[-W]`) or a TOML file.
    pub fn resolve_name(name_or_path: &str) -> Result<Self> {
        if let Some(spec) = builtin(name_or_path) {
            return Ok(spec);
        }
        let path = Path::new(name_or_path);
        if path.exists() {
            return Self::load(path);
        }
        Err(Error::Config(format!(
            "`{name_or_path}` is neither a builtin network nor a readable file"
        )))
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Validates the graph and infers every layer's shapes.
    pub fn resolve(&self) -> Result<Vec<ResolvedLayer>> {
        let bad = |msg: String| Error::Config(format!("network `{}`: {msg}", self.name));
        if self.format_version != NET_FORMAT_VERSION {
            return Err(bad(format!(
                "format_version {} (supported: {NET_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.input.iter().any(|&d| d == 0) || self.classes < 2 || self.layers.is_empty() {
            return Err(bad("needs a non-empty input shape, >= 2 classes and >= 1 layer".into()));
        }
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut out: Vec<ResolvedLayer> = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            if l.name.is_empty() || l.name == "input" || index.contains_key(l.name.as_str()) {
                return Err(bad(format!("invalid or duplicate layer name `{}`", l.name)));
            }
            let inputs: Vec<Source> = if l.inputs.is_empty() {
                vec![if i == 0 { Source::Input } else { Source::Layer(i - 1) }]
            } else {
                l.inputs
                    .iter()
                    .map(|n| match n.as_str() {
                        "input" => Ok(Source::Input),
                        n => index
                            .get(n)
                            .map(|&j| Source::Layer(j))
                            .ok_or_else(|| bad(format!("layer `{}` reads `{n}`, which is not an earlier layer", l.name))),
                    })
                    .collect::<Result<_>>()?
            };
            let shape_of = |s: Source| match s {
                Source::Input => self.input,
                Source::Layer(j) => out[j].out_shape,
            };
            let in_shape = shape_of(inputs[0]);
            let [c, h, w] = in_shape;
            if !matches!(l.op, LayerOp::Add) && inputs.len() != 1 {
                return Err(bad(format!("layer `{}` takes exactly one input", l.name)));
            }
            if l.mappable && !matches!(l.op, LayerOp::Conv | LayerOp::DwConv | LayerOp::Linear) {
                return Err(bad(format!("layer `{}`: only conv, dw-conv and linear layers can be mappable", l.name)));
            }
            if let Some(ci) = l.c_in {
                let expect = if l.op == LayerOp::Linear { c * h * w } else { c };
                if ci != expect {
                    return Err(bad(format!("layer `{}` declares c_in {ci} but receives {expect}", l.name)));
                }
            }
            let geometry = match l.op {
                LayerOp::Conv | LayerOp::DwConv => {
                    let k = l.kernel.unwrap_or(1);
                    let s = l.stride.unwrap_or(1);
                    let p = l.padding.unwrap_or(0);
                    let c_out = match (l.op, l.c_out) {
                        (LayerOp::DwConv, None) => c,
                        (LayerOp::DwConv, Some(co)) if co != c => {
                            return Err(bad(format!("depthwise layer `{}` needs c_out == c_in ({c})", l.name)))
                        }
                        (_, Some(co)) => co,
                        (_, None) => return Err(bad(format!("layer `{}` needs c_out", l.name))),
                    };
                    if k == 0 || s == 0 || c_out == 0 {
                        return Err(bad(format!("layer `{}`: kernel, stride and c_out must be >= 1", l.name)));
                    }
                    let (oh, ow) = match (conv_out(h, k, s, p), conv_out(w, k, s, p)) {
                        (Some(a), Some(b)) => (a, b),
                        _ => return Err(bad(format!("layer `{}`: kernel {k} larger than padded input {h}x{w}", l.name))),
                    };
                    if l.mode == MapMode::Operator && c_out != c {
                        return Err(bad(format!(
                            "layer `{}`: operator alternatives need c_in == c_out ({c} vs {c_out})",
                            l.name
                        )));
                    }
                    LayerGeometry {
                        c_in: c,
                        c_out,
                        kernel: k,
                        stride: s,
                        padding: p,
                        in_h: h,
                        in_w: w,
                        out_h: oh,
                        out_w: ow,
                    }
                }
                LayerOp::Linear => {
                    let c_out = l.c_out.ok_or_else(|| bad(format!("layer `{}` needs c_out", l.name)))?;
                    if l.mode == MapMode::Operator {
                        return Err(bad(format!("layer `{}`: linear layers have no operator alternative", l.name)));
                    }
                    LayerGeometry {
                        c_in: c * h * w,
                        c_out,
                        kernel: 1,
                        stride: 1,
                        padding: 0,
                        in_h: 1,
                        in_w: 1,
                        out_h: 1,
                        out_w: 1,
                    }
                }
                LayerOp::Add => {
                    if inputs.len() < 2 {
                        return Err(bad(format!("add `{}` needs at least two inputs", l.name)));
                    }
                    if let Some(s) = inputs.iter().map(|&s| shape_of(s)).find(|s| *s != in_shape) {
                        return Err(bad(format!("add `{}` joins {in_shape:?} with {s:?}", l.name)));
                    }
                    passthrough(in_shape, 1, 1, h, w)
                }
                LayerOp::AvgPool => {
                    let k = l.kernel.unwrap_or(2);
                    let s = l.stride.unwrap_or(k);
                    if k == 0 || s == 0 || k > h || k > w {
                        return Err(bad(format!("pool `{}`: bad kernel {k} / stride {s} for {h}x{w}", l.name)));
                    }
                    passthrough(in_shape, k, s, (h - k) / s + 1, (w - k) / s + 1)
                }
                LayerOp::GlobalAvgPool => passthrough(in_shape, 1, 1, 1, 1),
            };
            let out_shape = [geometry.c_out, geometry.out_h, geometry.out_w];
            index.insert(&l.name, i);
            out.push(ResolvedLayer {
                inputs,
                in_shape,
                out_shape,
                geometry,
            });
        }
        let last = out.last().expect("non-empty").out_shape;
        if last != [self.classes, 1, 1] {
            return Err(bad(format!("output shape {last:?} does not match {} classes", self.classes)));
        }
        Ok(out)
    }
}

fn passthrough(in_shape: [usize; 3], k: usize, s: usize, oh: usize, ow: usize) -> LayerGeometry {
    LayerGeometry {
        c_in: in_shape[0],
        c_out: in_shape[0],
        kernel: k,
        stride: s,
        padding: 0,
        in_h: in_shape[1],
        in_w: in_shape[2],
        out_h: oh,
        out_w: ow,
    }
}

/// Three mappable 3x3 convolutions and a fixed classifier.
pub fn tiny_cnn(input: [usize; 3], classes: usize) -> NetworkSpec {
    NetworkSpec {
        format_version: NET_FORMAT_VERSION,
        name: "tiny-cnn".into(),
        input,
        classes,
        layers: vec![
            LayerSpec::conv("conv1", 8, 3, 1).mappable(),
            LayerSpec::conv("conv2", 16, 3, 2).mappable(),
            LayerSpec::conv("conv3", 16, 3, 2).mappable(),
            LayerSpec::new("pool", LayerOp::GlobalAvgPool),
            LayerSpec {
                c_out: Some(classes),
                ..LayerSpec::new("fc", LayerOp::Linear)
            },
        ],
    }
}

/// ResNet-8 with 16/32/64 channels; every conv is mappable, the classifier is not.
pub fn resnet8_slim(input: [usize; 3], classes: usize) -> NetworkSpec {
    let mut layers = vec![LayerSpec::conv("stem", 16, 3, 1).mappable()];
    let mut prev = "stem".to_string();
    for (stage, (width, stride)) in [(16, 1), (32, 2), (64, 2)].into_iter().enumerate() {
        let s = stage + 1;
        let a = format!("s{s}.conv1");
        let b = format!("s{s}.conv2");
        let join = format!("s{s}.add");
        layers.push(LayerSpec::conv(&a, width, 3, stride).mappable().from(&[&prev]));
        layers.push(LayerSpec::conv(&b, width, 3, 1).mappable().no_relu().from(&[&a]));
        let skip = if stride == 1 {
            prev.clone()
        } else {
            let ds = format!("s{s}.down");
            layers.push(LayerSpec::conv(&ds, width, 1, stride).mappable().no_relu().from(&[&prev]));
            ds
        };
        layers.push(LayerSpec {
            activation: Activation::Relu,
            ..LayerSpec::new(&join, LayerOp::Add).from(&[&b, &skip])
        });
        prev = join;
    }
    layers.push(LayerSpec::new("pool", LayerOp::GlobalAvgPool).from(&[&prev]));
    layers.push(LayerSpec {
        c_out: Some(classes),
        ..LayerSpec::new("fc", LayerOp::Linear)
    });
    NetworkSpec {
        format_version: NET_FORMAT_VERSION,
        name: "resnet8-slim".into(),
        input,
        classes,
        layers,
    }
}

/// Channel count scaled by a width multiplier, rounded to a multiple of 8 (at least 8).
pub fn scale_width(base: usize, width: f64) -> usize {
    (((base as f64 * width) / 8.0).round() as usize).max(1) * 8
}

/// Depthwise-separable MobileNet-style seed. The depthwise layers are mappable.
pub fn mbv1_micro(input: [usize; 3], classes: usize, width: f64) -> NetworkSpec {
    let c = |b| scale_width(b, width);
    let mut layers = vec![LayerSpec::conv("stem", c(16), 3, 2)];
    let blocks = [(32, 1), (32, 2), (64, 1), (64, 2)];
    for (i, (out, stride)) in blocks.into_iter().enumerate() {
        layers.push(LayerSpec {
            op: LayerOp::DwConv,
            c_out: None,
            ..LayerSpec::conv(&format!("b{}.dw", i + 1), 0, 3, stride).mappable()
        });
        layers.push(LayerSpec::conv(&format!("b{}.pw", i + 1), c(out), 1, 1));
    }
    layers.push(LayerSpec::new("pool", LayerOp::GlobalAvgPool));
    layers.push(LayerSpec {
        c_out: Some(classes),
        ..LayerSpec::new("fc", LayerOp::Linear)
    });
    let name = if width == 1.0 {
        "mbv1-micro".to_string()
    } else {
        format!("mbv1-micro-{width}")
    };
    NetworkSpec {
        format_version: NET_FORMAT_VERSION,
        name,
        input,
        classes,
        layers,
    }
}

pub const CIFAR_INPUT: [usize; 3] = [3, 32, 32];

pub const BUILTIN_NAMES: &[&str] = &[
    "tiny-cnn",
    "resnet8-slim",
    "mbv1-micro",
    "mbv1-micro-0.5",
    "mbv1-micro-0.25",
];

/// Builtin seeds for 3x32x32 inputs and 10 classes.
pub fn builtin(name: &str) -> Option<NetworkSpec> {
    Some(match name {
        "tiny-cnn" => tiny_cnn(CIFAR_INPUT, 10),
        "resnet8-slim" => resnet8_slim(CIFAR_INPUT, 10),
        "mbv1-micro" | "mbv1-micro-1" | "mbv1-micro-1.0" => mbv1_micro(CIFAR_INPUT, 10, 1.0),
        "mbv1-micro-0.5" => mbv1_micro(CIFAR_INPUT, 10, 0.5),
        "mbv1-micro-0.25" => mbv1_micro(CIFAR_INPUT, 10, 0.25),
        _ => return None,
    })
}

pub fn builtin_specs() -> Vec<NetworkSpec> {
    BUILTIN_NAMES.iter().map(|n| builtin(n).expect("builtin")).collect()
}
