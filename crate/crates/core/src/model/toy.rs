use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{
    Component, DependencyGroup, GraphDescription, LayerKind, LayerSpec, ModelGraph, PortRef,
    PortSide, Source,
};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::metrics::MAX_PIT_SPEAKERS;

/// Dimensions of the toy encoder → separator → decoder network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SepNetConfig {
    /// Encoder / residual-stream channels `E`.
    pub channels: usize,
    /// Number of separator blocks `R`.
    pub blocks: usize,
    /// Hidden channels inside each block `H`.
    pub block_channels: usize,
    /// Depthwise kernel `K` (odd).
    pub kernel: usize,
    /// Speakers `C`.
    pub speakers: usize,
    pub encoder_kernel: usize,
    pub encoder_stride: usize,
}

impl Default for SepNetConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            blocks: 4,
            block_channels: 128,
            kernel: 3,
            speakers: 2,
            encoder_kernel: 16,
            encoder_stride: 8,
        }
    }
}

impl SepNetConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("channels", self.channels),
            ("blocks", self.blocks),
            ("block_channels", self.block_channels),
            ("kernel", self.kernel),
            ("speakers", self.speakers),
            ("encoder_kernel", self.encoder_kernel),
            ("encoder_stride", self.encoder_stride),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "depthwise kernel must be odd to keep lengths fixed, got {}",
                self.kernel
            )));
        }
        if self.speakers > MAX_PIT_SPEAKERS {
            return Err(Error::invalid(format!(
                "at most {MAX_PIT_SPEAKERS} speakers supported, got {}",
                self.speakers
            )));
        }
        if self.blocks > 16 {
            return Err(Error::invalid("at most 16 separator blocks supported"));
        }
        Ok(())
    }
}

struct Builder {
    layers: Vec<LayerSpec>,
}

impl Builder {
    fn push(&mut self, layer: LayerSpec) -> usize {
        self.layers.push(layer);
        self.layers.len() - 1
    }
}

fn out(layer: usize) -> Source {
    Source::Layer { layer, port: 0 }
}

fn port(layer: usize, side: PortSide, port: usize, tiles: usize) -> PortRef {
    PortRef {
        layer,
        side,
        port,
        tiles,
    }
}

fn io(layer: usize) -> [PortRef; 2] {
    [port(layer, PortSide::In, 0, 1), port(layer, PortSide::Out, 0, 1)]
}

/// Builds the toy network with freshly initialized weights.
pub fn build_toy_sepnet(cfg: &SepNetConfig, seed: u64) -> Result<ModelGraph> {
    let desc = toy_description(cfg)?;
    let params = init_params(&desc, seed);
    ModelGraph::new(desc, params)
}

/// The layer list and dependency groups of the toy network.
pub fn toy_description(cfg: &SepNetConfig) -> Result<GraphDescription> {
    cfg.validate()?;
    let (e, h, c) = (cfg.channels, cfg.block_channels, cfg.speakers);
    let mut b = Builder { layers: Vec::new() };
    let mut residual = Vec::new();
    let mut residual_sites = Vec::new();
    let mut block_groups = Vec::new();

    let mut l = LayerSpec::new("encoder.conv", LayerKind::Conv1d, Component::Encoder);
    l.in_channels = 1;
    l.out_channels = e;
    l.kernel = cfg.encoder_kernel;
    l.stride = cfg.encoder_stride;
    l.inputs = vec![Source::Mixture];
    let enc = b.push(l);
    residual.push(port(enc, PortSide::Out, 0, 1));

    let mut l = LayerSpec::new("encoder.relu", LayerKind::Relu, Component::Encoder);
    l.in_channels = e;
    l.out_channels = e;
    l.inputs = vec![out(enc)];
    let enc_act = b.push(l);
    residual.extend(io(enc_act));
    residual_sites.push(enc_act);

    let sep = |name: String, kind: LayerKind, cin: usize, cout: usize, input: Source| {
        let mut l = LayerSpec::new(name, kind, Component::Separator);
        l.in_channels = cin;
        l.out_channels = cout;
        l.inputs = vec![input];
        l.prunable = true;
        l
    };

    let mut stream = enc_act;
    for r in 0..cfg.blocks {
        let dilation = 1usize << r;
        let mut l = sep(format!("block{r}.pw1"), LayerKind::PointwiseConv, e, h, out(stream));
        l.bias = true;
        let pw1 = b.push(l);

        let mut l = sep(format!("block{r}.dconv"), LayerKind::Conv1d, h, h, out(pw1));
        l.kernel = cfg.kernel;
        l.dilation = dilation;
        l.padding = dilation * (cfg.kernel - 1) / 2;
        l.groups = h;
        l.bias = true;
        let dconv = b.push(l);

        let norm = b.push(sep(format!("block{r}.norm"), LayerKind::ChannelNorm, h, h, out(dconv)));
        let prelu = b.push(sep(format!("block{r}.prelu"), LayerKind::Prelu, h, h, out(norm)));

        let mut l = sep(format!("block{r}.pw2"), LayerKind::PointwiseConv, h, e, out(prelu));
        l.bias = true;
        let pw2 = b.push(l);

        let mut l = sep(format!("block{r}.add"), LayerKind::AddJunction, e, e, out(stream));
        l.inputs.push(out(pw2));
        let add = b.push(l);

        let mut members = vec![port(pw1, PortSide::Out, 0, 1)];
        members.extend(io(dconv));
        members.extend(io(norm));
        members.extend(io(prelu));
        members.push(port(pw2, PortSide::In, 0, 1));
        block_groups.push((format!("block{r}"), members, prelu));

        residual.push(port(pw1, PortSide::In, 0, 1));
        residual.push(port(pw2, PortSide::Out, 0, 1));
        residual.push(port(add, PortSide::In, 0, 1));
        residual.push(port(add, PortSide::In, 1, 1));
        residual.push(port(add, PortSide::Out, 0, 1));
        residual_sites.push(pw2);
        stream = add;
    }

    let mut l = sep("mask.conv".into(), LayerKind::PointwiseConv, e, c * e, out(stream));
    l.bias = true;
    let head = b.push(l);
    let act = b.push(sep("mask.sigmoid".into(), LayerKind::Sigmoid, c * e, c * e, out(head)));
    let mut l = sep("mask.split".into(), LayerKind::SplitMasks, c * e, e, out(act));
    l.outputs = c;
    let split = b.push(l);
    residual.push(port(head, PortSide::In, 0, 1));
    residual.push(port(head, PortSide::Out, 0, c));
    residual.push(port(act, PortSide::In, 0, c));
    residual.push(port(act, PortSide::Out, 0, c));
    residual.push(port(split, PortSide::In, 0, c));

    let mut applied = Vec::new();
    for s in 0..c {
        residual.push(port(split, PortSide::Out, s, 1));
        let mut l = sep(
            format!("mask.apply{s}"),
            LayerKind::ElementwiseMul,
            e,
            e,
            out(enc_act),
        );
        l.inputs.push(Source::Layer { layer: split, port: s });
        let m = b.push(l);
        residual.push(port(m, PortSide::In, 0, 1));
        residual.push(port(m, PortSide::In, 1, 1));
        residual.push(port(m, PortSide::Out, 0, 1));
        applied.push(out(m));
    }

    let mut l = LayerSpec::new("decoder", LayerKind::ConvTranspose1d, Component::Decoder);
    l.in_channels = e;
    l.out_channels = 1;
    l.kernel = cfg.encoder_kernel;
    l.stride = cfg.encoder_stride;
    l.inputs = applied;
    let dec = b.push(l);
    for s in 0..c {
        residual.push(port(dec, PortSide::In, s, 1));
    }

    let mut groups = vec![DependencyGroup {
        id: 0,
        name: "residual".into(),
        channels: e,
        members: residual,
        mask_sites: residual_sites,
        prunable: true,
    }];
    for (i, (name, members, site)) in block_groups.into_iter().enumerate() {
        groups.push(DependencyGroup {
            id: i + 1,
            name,
            channels: h,
            members,
            mask_sites: vec![site],
            prunable: true,
        });
    }
    Ok(GraphDescription {
        name: "toy_sepnet".into(),
        speakers: c,
        layers: b.layers,
        groups,
    })
}

/// Uniform `±1/√fan_in` weights and biases; unit norm gains; PReLU slopes 0.25.
pub fn init_params(desc: &GraphDescription, seed: u64) -> BTreeMap<String, Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for l in &desc.layers {
        let fan_in = match l.kind {
            LayerKind::ConvTranspose1d => l.out_channels * l.kernel,
            _ => (l.in_channels / l.groups.max(1)) * l.kernel,
        };
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        for (name, shape) in l.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = match (l.kind, name.rsplit('.').next()) {
                (LayerKind::ChannelNorm, Some("gain")) => vec![1.0; n],
                (LayerKind::ChannelNorm, _) => vec![0.0; n],
                (LayerKind::Prelu, _) => vec![0.25; n],
                _ => (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect(),
            };
            params.insert(name, Tensor::new(shape, data).expect("shape matches data"));
        }
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_and_validate() {
        let m = build_toy_sepnet(&SepNetConfig::default(), 0).unwrap();
        assert_eq!(m.prunable_groups().count(), 5);
        assert_eq!(m.speakers(), 2);
    }

    #[test]
    fn every_junction_shares_the_encoder_group() {
        let m = build_toy_sepnet(&SepNetConfig::default(), 0).unwrap();
        let enc = m.layer_index("encoder.conv").unwrap();
        let (g, _) = m.port_group(enc, PortSide::Out, 0).unwrap();
        for (i, l) in m.layers().iter().enumerate() {
            if l.kind == LayerKind::AddJunction {
                for p in 0..2 {
                    assert_eq!(m.port_group(i, PortSide::In, p).unwrap().0.id, g.id);
                }
                let feeder = match l.inputs[1] {
                    Source::Layer { layer, .. } => layer,
                    Source::Mixture => unreachable!(),
                };
                assert_eq!(m.port_group(feeder, PortSide::Out, 0).unwrap().0.id, g.id);
            }
        }
    }

    #[test]
    fn single_block_has_two_prunable_groups() {
        let cfg = SepNetConfig {
            channels: 8,
            block_channels: 8,
            blocks: 1,
            ..SepNetConfig::default()
        };
        let m = build_toy_sepnet(&cfg, 1).unwrap();
        assert_eq!(m.prunable_groups().count(), 2);
    }

    #[test]
    fn rejects_bad_dimensions() {
        for cfg in [
            SepNetConfig { channels: 0, ..Default::default() },
            SepNetConfig { blocks: 0, ..Default::default() },
            SepNetConfig { kernel: 0, ..Default::default() },
            SepNetConfig { kernel: 4, ..Default::default() },
            SepNetConfig { speakers: 0, ..Default::default() },
            SepNetConfig { speakers: 5, ..Default::default() },
        ] {
            assert!(matches!(build_toy_sepnet(&cfg, 0), Err(Error::InvalidArgument(_))), "{cfg:?}");
        }
    }

    #[test]
    fn init_is_seeded() {
        let cfg = SepNetConfig::default();
        let a = build_toy_sepnet(&cfg, 7).unwrap();
        let b = build_toy_sepnet(&cfg, 7).unwrap();
        let c = build_toy_sepnet(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn validation_catches_broken_wiring() {
        let cfg = SepNetConfig::default();
        let mut m = build_toy_sepnet(&cfg, 0).unwrap();
        m.desc.layers[2].in_channels += 1;
        assert!(m.validate().is_err());

        let mut m = build_toy_sepnet(&cfg, 0).unwrap();
        m.params.remove("block0.pw1.weight");
        assert!(m.validate().is_err());

        let mut m = build_toy_sepnet(&cfg, 0).unwrap();
        m.desc.groups[1].members.push(PortRef {
            layer: 0,
            side: PortSide::Out,
            port: 0,
            tiles: 1,
        });
        assert!(m.validate().is_err());

        let mut m = build_toy_sepnet(&cfg, 0).unwrap();
        m.desc.layers[0].prunable = false;
        m.desc.layers[1].inputs = vec![Source::Layer { layer: 5, port: 0 }];
        assert!(m.validate().is_err());
    }
}
