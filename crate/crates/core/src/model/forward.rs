use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::graph::{LayerKind, ModelGraph, Source};
use crate::autodiff::{Conv1dConfig, ConvTranspose1dConfig, NodeId, Scalar, Tape, Tensor};
use crate::error::{Error, Result};

/// Binary keep/drop decision per channel for each dependency group.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMasks(pub BTreeMap<usize, Vec<bool>>);

impl GroupMasks {
    /// Keeps every channel of every prunable group.
    pub fn all_ones(model: &ModelGraph) -> Self {
        Self(
            model
                .prunable_groups()
                .map(|g| (g.id, vec![true; g.channels]))
                .collect(),
        )
    }

    pub fn get(&self, group: usize) -> Option<&[bool]> {
        self.0.get(&group).map(Vec::as_slice)
    }

    pub fn kept_indices(&self, group: usize) -> Vec<usize> {
        self.get(group)
            .map(|m| m.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect())
            .unwrap_or_default()
    }

    pub fn kept_count(&self, group: usize) -> usize {
        self.get(group).map_or(0, |m| m.iter().filter(|&&k| k).count())
    }

    pub fn total_kept(&self) -> usize {
        self.0.values().map(|m| m.iter().filter(|&&k| k).count()).sum()
    }

    /// Checks that every entry names a prunable group of `model` with the right width.
    pub fn check_against(&self, model: &ModelGraph) -> Result<()> {
        for (&id, m) in &self.0 {
            let g = model
                .group(id)
                .filter(|g| g.prunable)
                .ok_or_else(|| Error::invalid(format!("mask names unknown or fixed group {id}")))?;
            if m.len() != g.channels {
                return Err(Error::invalid(format!(
                    "mask for group {id} has {} entries, group has {} channels",
                    m.len(),
                    g.channels
                )));
            }
        }
        Ok(())
    }
}

/// Tape handles for every model parameter.
#[derive(Clone, Debug)]
pub struct BoundParams {
    ids: HashMap<String, NodeId>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` not bound")))
    }

    /// Parameter names with their handles, in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        let mut v: Vec<_> = self.ids.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v.into_iter()
    }
}

/// Records every parameter of `model` on `tape`.
pub fn bind_params<T: Scalar>(tape: &mut Tape<T>, model: &ModelGraph, trainable: bool) -> Result<BoundParams> {
    let mut ids = HashMap::with_capacity(model.params.len());
    for (name, t) in &model.params {
        ids.insert(name.clone(), tape.leaf(t.cast(), trainable)?);
    }
    Ok(BoundParams { ids })
}

/// Runs the model on `mixture` (`[B, 1, T]`), multiplying each mask site's
/// output by its group's `[C]` mask node. Returns the `[B, speakers, T]`
/// estimates.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelGraph,
    params: &BoundParams,
    mixture: NodeId,
    masks: &BTreeMap<usize, NodeId>,
) -> Result<NodeId> {
    let shape = tape.shape(mixture).to_vec();
    let [batch, 1, len] = shape[..] else {
        return Err(Error::invalid(format!("mixture must be [B, 1, T], got {shape:?}")));
    };
    let mut site_mask: HashMap<usize, NodeId> = HashMap::new();
    for (&id, &node) in masks {
        let g = model
            .group(id)
            .filter(|g| g.prunable)
            .ok_or_else(|| Error::invalid(format!("mask names unknown or fixed group {id}")))?;
        if tape.shape(node) != [g.channels] {
            return Err(Error::invalid(format!(
                "mask for group {id} must be [{}], got {:?}",
                g.channels,
                tape.shape(node)
            )));
        }
        for &site in &g.mask_sites {
            site_mask.insert(site, node);
        }
    }

    let mut outputs: Vec<Vec<NodeId>> = Vec::with_capacity(model.layers().len());
    for (i, l) in model.layers().iter().enumerate() {
        let ins: Vec<NodeId> = l
            .inputs
            .iter()
            .map(|s| match *s {
                Source::Mixture => mixture,
                Source::Layer { layer, port } => outputs[layer][port],
            })
            .collect();
        let p = |what: &str| params.get(&l.param_name(what));
        let bias = |what: &str| if l.bias { p(what).map(Some) } else { Ok(None) };
        let mut outs = match l.kind {
            LayerKind::Conv1d | LayerKind::PointwiseConv => {
                let cfg = Conv1dConfig {
                    stride: l.stride,
                    dilation: l.dilation,
                    groups: l.groups,
                    padding: l.padding,
                };
                vec![tape.conv1d(ins[0], p("weight")?, bias("bias")?, cfg)?]
            }
            LayerKind::ConvTranspose1d => {
                let cfg = ConvTranspose1dConfig {
                    stride: l.stride,
                    padding: l.padding,
                };
                let (w, b) = (p("weight")?, bias("bias")?);
                let parts = ins
                    .iter()
                    .map(|&x| tape.conv_transpose1d(x, w, b, cfg))
                    .collect::<Result<Vec<_>>>()?;
                let joined = if parts.len() == 1 { parts[0] } else { tape.concat_channels(&parts)? };
                vec![tape.fit_length(joined, len)?]
            }
            LayerKind::ChannelNorm => vec![tape.channel_norm(ins[0], p("gain")?, p("bias")?)?],
            LayerKind::Prelu => vec![tape.prelu(ins[0], p("slope")?)?],
            LayerKind::Relu => vec![tape.relu(ins[0])?],
            LayerKind::Sigmoid => vec![tape.sigmoid(ins[0])?],
            LayerKind::AddJunction => vec![tape.add(ins[0], ins[1])?],
            LayerKind::ElementwiseMul => vec![tape.mul(ins[0], ins[1])?],
            LayerKind::SplitMasks => (0..l.outputs)
                .map(|k| tape.narrow_channels(ins[0], k * l.out_channels, l.out_channels))
                .collect::<Result<Vec<_>>>()?,
        };
        if let Some(&m) = site_mask.get(&i) {
            outs[0] = tape.mul(outs[0], m)?;
        }
        outputs.push(outs);
    }
    let out = outputs.last().expect("validated model has layers")[0];
    let oshape = tape.shape(out);
    if oshape != [batch, model.speakers(), len] {
        return Err(Error::invalid(format!(
            "model produced {oshape:?}, expected [{batch}, {}, {len}]",
            model.speakers()
        )));
    }
    Ok(out)
}

impl ModelGraph {
    /// Inference without gradients, optionally under binary masks.
    pub fn separate<T: Scalar>(&self, mixture: &Tensor<T>, masks: Option<&GroupMasks>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = bind_params(&mut tape, self, false)?;
        let x = tape.constant(mixture.clone())?;
        let mut nodes = BTreeMap::new();
        if let Some(m) = masks {
            m.check_against(self)?;
            for (&id, keep) in &m.0 {
                let v = keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect();
                nodes.insert(id, tape.constant(Tensor::new(vec![keep.len()], v)?)?);
            }
        }
        let out = forward_on_tape(&mut tape, self, &params, x, &nodes)?;
        Ok(tape.value(out).clone())
    }
}
