use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    Separator,
    Decoder,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Encoder, Component::Separator, Component::Decoder];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Separator => "separator",
            Component::Decoder => "decoder",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv1d,
    ConvTranspose1d,
    PointwiseConv,
    ChannelNorm,
    Prelu,
    Relu,
    Sigmoid,
    AddJunction,
    SplitMasks,
    ElementwiseMul,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv1d => "conv1d",
            LayerKind::ConvTranspose1d => "conv_transpose1d",
            LayerKind::PointwiseConv => "pointwise_conv",
            LayerKind::ChannelNorm => "channel_norm",
            LayerKind::Prelu => "prelu",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::AddJunction => "add_junction",
            LayerKind::SplitMasks => "split_masks",
            LayerKind::ElementwiseMul => "elementwise_mul",
        }
    }

    pub fn is_conv(self) -> bool {
        matches!(
            self,
            LayerKind::Conv1d | LayerKind::ConvTranspose1d | LayerKind::PointwiseConv
        )
    }
}

/// Where a layer input comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// The `[B, 1, T]` mixture fed to the model.
    Mixture,
    Layer { layer: usize, port: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Channels on each input port.
    pub in_channels: usize,
    /// Channels on each output port. A multi-input transposed convolution
    /// (the shared decoder) emits `inputs.len() * out_channels` channels.
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
    pub component: Component,
    pub prunable: bool,
    pub inputs: Vec<Source>,
    pub outputs: usize,
}

impl LayerSpec {
    pub(crate) fn new(name: impl Into<String>, kind: LayerKind, component: Component) -> Self {
        Self {
            name: name.into(),
            kind,
            in_channels: 0,
            out_channels: 0,
            kernel: 1,
            stride: 1,
            dilation: 1,
            padding: 0,
            groups: 1,
            bias: false,
            component,
            prunable: false,
            inputs: Vec::new(),
            outputs: 1,
        }
    }

    pub fn out_port_channels(&self) -> usize {
        if self.kind == LayerKind::ConvTranspose1d {
            self.inputs.len() * self.out_channels
        } else {
            self.out_channels
        }
    }

    pub fn param_name(&self, what: &str) -> String {
        format!("{}.{what}", self.name)
    }

    /// Names and shapes of the arrays this layer owns.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        match self.kind {
            LayerKind::Conv1d | LayerKind::PointwiseConv => {
                v.push((
                    self.param_name("weight"),
                    vec![self.out_channels, self.in_channels / self.groups.max(1), self.kernel],
                ));
                if self.bias {
                    v.push((self.param_name("bias"), vec![self.out_channels]));
                }
            }
            LayerKind::ConvTranspose1d => {
                v.push((
                    self.param_name("weight"),
                    vec![self.in_channels, self.out_channels, self.kernel],
                ));
                if self.bias {
                    v.push((self.param_name("bias"), vec![self.out_channels]));
                }
            }
            LayerKind::ChannelNorm => {
                v.push((self.param_name("gain"), vec![self.in_channels]));
                v.push((self.param_name("bias"), vec![self.in_channels]));
            }
            LayerKind::Prelu => v.push((self.param_name("slope"), vec![self.in_channels])),
            _ => {}
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortSide {
    In,
    Out,
}

/// One channel axis inside a dependency group. `tiles > 1` means the port
/// holds that many back-to-back copies of the group's channel index (the
/// mask head emits one copy per speaker).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PortRef {
    pub layer: usize,
    pub side: PortSide,
    pub port: usize,
    pub tiles: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyGroup {
    pub id: usize,
    pub name: String,
    pub channels: usize,
    pub members: Vec<PortRef>,
    /// Layers whose first output is multiplied by this group's mask.
    pub mask_sites: Vec<usize>,
    pub prunable: bool,
}

/// Everything about a model except its parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDescription {
    pub name: String,
    pub speakers: usize,
    pub layers: Vec<LayerSpec>,
    pub groups: Vec<DependencyGroup>,
}

/// A producer → consumer wire between two layer ports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub from: Source,
    pub to_layer: usize,
    pub to_port: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub desc: GraphDescription,
    pub params: BTreeMap<String, Tensor<f32>>,
}

impl ModelGraph {
    pub fn new(desc: GraphDescription, params: BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        let g = Self { desc, params };
        g.validate()?;
        Ok(g)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.desc.layers
    }

    pub fn groups(&self) -> &[DependencyGroup] {
        &self.desc.groups
    }

    pub fn speakers(&self) -> usize {
        self.desc.speakers
    }

    pub fn prunable_groups(&self) -> impl Iterator<Item = &DependencyGroup> {
        self.desc.groups.iter().filter(|g| g.prunable)
    }

    pub fn group(&self, id: usize) -> Option<&DependencyGroup> {
        self.desc.groups.iter().find(|g| g.id == id)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.desc.layers.iter().position(|l| l.name == name)
    }

    pub fn edges(&self) -> Vec<Edge> {
        self.desc
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.inputs.iter().enumerate().map(move |(p, s)| Edge {
                    from: *s,
                    to_layer: i,
                    to_port: p,
                })
            })
            .collect()
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// The group a port belongs to, with its tile count.
    pub fn port_group(&self, layer: usize, side: PortSide, port: usize) -> Option<(&DependencyGroup, usize)> {
        self.desc.groups.iter().find_map(|g| {
            g.members
                .iter()
                .find(|m| m.layer == layer && m.side == side && m.port == port)
                .map(|m| (g, m.tiles))
        })
    }

    fn source_channels(&self, s: Source) -> Result<usize> {
        match s {
            Source::Mixture => Ok(1),
            Source::Layer { layer, port } => {
                let l = self
                    .desc
                    .layers
                    .get(layer)
                    .ok_or_else(|| Error::invalid(format!("edge from missing layer {layer}")))?;
                if port >= l.outputs {
                    return Err(Error::invalid(format!("layer `{}` has no output port {port}", l.name)));
                }
                Ok(l.out_port_channels())
            }
        }
    }

    /// Checks wiring, channel counts, group soundness and parameter shapes.
    pub fn validate(&self) -> Result<()> {
        let d = &self.desc;
        if d.layers.is_empty() {
            return Err(Error::invalid("model has no layers"));
        }
        let mut names = HashSet::new();
        for (i, l) in d.layers.iter().enumerate() {
            if !names.insert(l.name.as_str()) {
                return Err(Error::invalid(format!("duplicate layer name `{}`", l.name)));
            }
            if l.inputs.is_empty() {
                return Err(Error::invalid(format!("layer `{}` has no inputs", l.name)));
            }
            if l.in_channels == 0 || l.out_channels == 0 || l.kernel == 0 || l.stride == 0 || l.dilation == 0 || l.groups == 0 {
                return Err(Error::invalid(format!("layer `{}` has a zero dimension", l.name)));
            }
            for (p, s) in l.inputs.iter().enumerate() {
                if let Source::Layer { layer, .. } = s {
                    if *layer >= i {
                        return Err(Error::invalid(format!(
                            "layer `{}` input {p} is not produced by an earlier layer",
                            l.name
                        )));
                    }
                }
                let c = self.source_channels(*s)?;
                if c != l.in_channels {
                    return Err(Error::invalid(format!(
                        "layer `{}` input {p} expects {} channels, producer gives {c}",
                        l.name, l.in_channels
                    )));
                }
            }
            match l.kind {
                LayerKind::AddJunction | LayerKind::ElementwiseMul => {
                    if l.inputs.len() != 2 || l.in_channels != l.out_channels {
                        return Err(Error::invalid(format!(
                            "`{}` must join two equal-width inputs",
                            l.name
                        )));
                    }
                }
                LayerKind::SplitMasks => {
                    if l.in_channels != l.outputs * l.out_channels {
                        return Err(Error::invalid(format!("`{}` split widths do not add up", l.name)));
                    }
                }
                LayerKind::Conv1d | LayerKind::PointwiseConv => {
                    if l.in_channels % l.groups != 0 || l.out_channels % l.groups != 0 {
                        return Err(Error::invalid(format!("`{}` channels not divisible by groups", l.name)));
                    }
                    if l.kind == LayerKind::PointwiseConv && l.kernel != 1 {
                        return Err(Error::invalid(format!("`{}` pointwise kernel must be 1", l.name)));
                    }
                }
                LayerKind::ChannelNorm | LayerKind::Prelu | LayerKind::Relu | LayerKind::Sigmoid => {
                    if l.in_channels != l.out_channels {
                        return Err(Error::invalid(format!("`{}` must preserve width", l.name)));
                    }
                }
                LayerKind::ConvTranspose1d => {}
            }
            if l.kind != LayerKind::SplitMasks && l.outputs != 1 {
                return Err(Error::invalid(format!("`{}` must have one output", l.name)));
            }
            for (name, shape) in l.param_shapes() {
                let t = self.param(&name)?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::invalid(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
            }
        }
        let expected: usize = d.layers.iter().map(|l| l.param_shapes().len()).sum();
        if expected != self.params.len() {
            return Err(Error::invalid("model holds parameters no layer owns"));
        }

        let mut seen: HashMap<(usize, PortSide, usize), usize> = HashMap::new();
        let mut ids = HashSet::new();
        for g in &d.groups {
            if !ids.insert(g.id) {
                return Err(Error::invalid(format!("duplicate group id {}", g.id)));
            }
            if g.channels == 0 {
                return Err(Error::invalid(format!("group `{}` is empty", g.name)));
            }
            for m in &g.members {
                let l = d
                    .layers
                    .get(m.layer)
                    .ok_or_else(|| Error::invalid(format!("group `{}` names missing layer", g.name)))?;
                let width = match m.side {
                    PortSide::In => l.in_channels,
                    PortSide::Out => l.out_port_channels(),
                };
                if width != g.channels * m.tiles.max(1) {
                    return Err(Error::invalid(format!(
                        "group `{}` has {} channels but port of `{}` has {width}",
                        g.name, g.channels, l.name
                    )));
                }
                if seen.insert((m.layer, m.side, m.port), g.id).is_some() {
                    return Err(Error::invalid(format!(
                        "port of `{}` belongs to more than one group",
                        l.name
                    )));
                }
            }
            for &site in &g.mask_sites {
                if !seen.get(&(site, PortSide::Out, 0)).is_some_and(|&gid| gid == g.id) {
                    return Err(Error::invalid(format!(
                        "mask site of group `{}` is not one of its output ports",
                        g.name
                    )));
                }
            }
        }
        // wires must stay inside one group (or outside all of them)
        for e in self.edges() {
            let to = seen.get(&(e.to_layer, PortSide::In, e.to_port));
            let from = match e.from {
                Source::Mixture => None,
                Source::Layer { layer, port } => seen.get(&(layer, PortSide::Out, port)),
            };
            if to != from {
                return Err(Error::invalid(format!(
                    "edge into `{}` crosses dependency groups",
                    d.layers[e.to_layer].name
                )));
            }
        }
        for (i, l) in d.layers.iter().enumerate() {
            let in_prunable = d.groups.iter().any(|g| g.prunable && g.members.iter().any(|m| m.layer == i));
            if l.prunable && !in_prunable {
                return Err(Error::invalid(format!(
                    "layer `{}` is marked prunable outside any prunable group",
                    l.name
                )));
            }
        }
        Ok(())
    }
}
