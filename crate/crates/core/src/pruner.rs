//! Structural channel pruning driven by per-group binary masks, plus the
//! random and magnitude baseline mask generators.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{GroupMasks, LayerKind, ModelGraph, PortSide, Source};

/// Kept channel indices for one layer's input and output axes. `None` leaves
/// that axis untouched.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlice {
    pub layer: String,
    pub kept_in: Option<Vec<usize>>,
    pub kept_out: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneBlueprint {
    /// Kept indices per prunable group, strictly increasing.
    pub groups: BTreeMap<usize, Vec<usize>>,
    /// One entry per layer, in layer order.
    pub layers: Vec<LayerSlice>,
}

fn tiled(kept: &[usize], channels: usize, tiles: usize) -> Vec<usize> {
    (0..tiles.max(1))
        .flat_map(|t| kept.iter().map(move |&k| t * channels + k))
        .collect()
}

/// Kept indices for one side of a layer, derived from group membership. All
/// ports on a side must agree.
fn side_slice(
    model: &ModelGraph,
    groups: &BTreeMap<usize, Vec<usize>>,
    layer: usize,
    side: PortSide,
    ports: usize,
) -> Result<Option<Vec<usize>>> {
    let mut result: Option<Option<Vec<usize>>> = None;
    for p in 0..ports {
        let slice = match model.port_group(layer, side, p) {
            Some((g, tiles)) if g.prunable => {
                let kept = groups
                    .get(&g.id)
                    .ok_or_else(|| Error::invalid(format!("no kept list for group {}", g.id)))?;
                Some(tiled(kept, g.channels, tiles))
            }
            _ => None,
        };
        match &result {
            None => result = Some(slice),
            Some(prev) if *prev == slice => {}
            Some(_) => {
                return Err(Error::invalid(format!(
                    "ports of `{}` disagree on their channel groups",
                    model.layers()[layer].name
                )))
            }
        }
    }
    Ok(result.flatten())
}

/// Turns binary masks into kept-index lists for every group and layer.
pub fn blueprint_from_masks(model: &ModelGraph, masks: &GroupMasks) -> Result<PruneBlueprint> {
    masks.check_against(model)?;
    let mut groups = BTreeMap::new();
    for g in model.prunable_groups() {
        if masks.get(g.id).is_none() {
            return Err(Error::invalid(format!("no mask for prunable group {}", g.id)));
        }
        let kept = masks.kept_indices(g.id);
        if kept.is_empty() {
            return Err(Error::invalid(format!("mask empties group {} (`{}`)", g.id, g.name)));
        }
        groups.insert(g.id, kept);
    }
    let layers = model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            Ok(LayerSlice {
                layer: l.name.clone(),
                kept_in: side_slice(model, &groups, i, PortSide::In, l.inputs.len())?,
                kept_out: side_slice(model, &groups, i, PortSide::Out, l.outputs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bp = PruneBlueprint { groups, layers };
    check_blueprint(model, &bp)?;
    Ok(bp)
}

fn check_list(list: &[usize], bound: usize, what: &str) -> Result<()> {
    if list.is_empty() {
        return Err(Error::invalid(format!("{what}: empty kept list")));
    }
    if list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("{what}: kept list not strictly increasing")));
    }
    if list.last().is_some_and(|&v| v >= bound) {
        return Err(Error::invalid(format!("{what}: kept index out of range")));
    }
    Ok(())
}

/// Verifies the structural invariants of a blueprint against its model.
pub fn check_blueprint(model: &ModelGraph, bp: &PruneBlueprint) -> Result<()> {
    if bp.layers.len() != model.layers().len() {
        return Err(Error::invalid("blueprint layer count differs from model"));
    }
    for (id, kept) in &bp.groups {
        let g = model
            .group(*id)
            .filter(|g| g.prunable)
            .ok_or_else(|| Error::invalid(format!("blueprint names unknown group {id}")))?;
        check_list(kept, g.channels, &g.name)?;
    }
    for (l, s) in model.layers().iter().zip(&bp.layers) {
        if l.name != s.layer {
            return Err(Error::invalid(format!("blueprint layer `{}` out of order", s.layer)));
        }
        if let Some(k) = &s.kept_in {
            check_list(k, l.in_channels, &l.name)?;
        }
        if let Some(k) = &s.kept_out {
            check_list(k, l.out_port_channels(), &l.name)?;
        }
    }
    for e in model.edges() {
        let Source::Layer { layer, .. } = e.from else { continue };
        let produced = &bp.layers[layer].kept_out;
        let consumed = &bp.layers[e.to_layer].kept_in;
        if produced != consumed {
            return Err(Error::invalid(format!(
                "edge `{}` → `{}` slices producer and consumer differently",
                model.layers()[layer].name,
                model.layers()[e.to_layer].name
            )));
        }
    }
    Ok(())
}

/// Gathers `axis` of a row-major tensor at `keep`.
fn select(t: &Tensor<f32>, axis: usize, keep: &[usize]) -> Result<Tensor<f32>> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let n = shape[axis];
    let mut data = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &k in keep {
            if k >= n {
                return Err(Error::invalid("slice index out of range"));
            }
            let at = (o * n + k) * inner;
            data.extend_from_slice(&t.data()[at..at + inner]);
        }
    }
    let mut s = shape.to_vec();
    s[axis] = keep.len();
    Tensor::new(s, data)
}

/// Builds the smaller model described by `bp`. Parameters are exact
/// sub-slices of the originals, in original channel order.
pub fn apply_prune(model: &ModelGraph, bp: &PruneBlueprint) -> Result<ModelGraph> {
    check_blueprint(model, bp)?;
    let mut desc = model.desc.clone();
    let mut params = BTreeMap::new();
    for (l, s) in desc.layers.iter_mut().zip(&bp.layers) {
        let depthwise = l.groups > 1 && l.groups == l.in_channels && l.groups == l.out_channels;
        if l.groups > 1 && !depthwise && (s.kept_in.is_some() || s.kept_out.is_some()) {
            return Err(Error::invalid(format!("cannot slice grouped conv `{}`", l.name)));
        }
        if depthwise && s.kept_in != s.kept_out {
            return Err(Error::invalid(format!("depthwise `{}` must keep matching channels", l.name)));
        }
        let mut put = |name: String, t: Tensor<f32>| {
            params.insert(name, t);
        };
        let original = |what: &str| model.param(&l.param_name(what)).cloned();
        let by = |t: Tensor<f32>, axis: usize, keep: &Option<Vec<usize>>| match keep {
            Some(k) => select(&t, axis, k),
            None => Ok(t),
        };
        match l.kind {
            LayerKind::Conv1d | LayerKind::PointwiseConv => {
                let w = by(original("weight")?, 0, &s.kept_out)?;
                let w = if depthwise { w } else { by(w, 1, &s.kept_in)? };
                put(l.param_name("weight"), w);
                if l.bias {
                    put(l.param_name("bias"), by(original("bias")?, 0, &s.kept_out)?);
                }
            }
            LayerKind::ConvTranspose1d => {
                let w = by(original("weight")?, 0, &s.kept_in)?;
                put(l.param_name("weight"), by(w, 1, &s.kept_out)?);
                if l.bias {
                    put(l.param_name("bias"), by(original("bias")?, 0, &s.kept_out)?);
                }
            }
            LayerKind::ChannelNorm => {
                put(l.param_name("gain"), by(original("gain")?, 0, &s.kept_in)?);
                put(l.param_name("bias"), by(original("bias")?, 0, &s.kept_in)?);
            }
            LayerKind::Prelu => put(l.param_name("slope"), by(original("slope")?, 0, &s.kept_in)?),
            _ => {}
        }
        if let Some(k) = &s.kept_in {
            l.in_channels = k.len();
        }
        if let Some(k) = &s.kept_out {
            l.out_channels = match l.kind {
                LayerKind::SplitMasks => k.len(),
                LayerKind::ConvTranspose1d => k.len() / l.inputs.len(),
                _ => k.len(),
            };
        }
        if depthwise {
            l.groups = l.in_channels;
        }
    }
    for g in desc.groups.iter_mut() {
        if let Some(k) = bp.groups.get(&g.id) {
            g.channels = k.len();
        }
    }
    ModelGraph::new(desc, params)
}

/// Keep counts per prunable group for a uniform keep fraction in `(0, 1]`.
pub fn keep_counts(model: &ModelGraph, fraction: f64) -> Result<BTreeMap<usize, usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("keep fraction must be in (0, 1], got {fraction}")));
    }
    model
        .prunable_groups()
        .map(|g| {
            let k = (fraction * g.channels as f64).round() as usize;
            if k < 1 {
                return Err(Error::invalid(format!(
                    "keep fraction {fraction} leaves group `{}` empty",
                    g.name
                )));
            }
            Ok((g.id, k))
        })
        .collect()
}

fn checked_count(model: &ModelGraph, counts: &BTreeMap<usize, usize>, id: usize) -> Result<(usize, usize)> {
    let g = model.group(id).expect("prunable group");
    let k = *counts
        .get(&id)
        .ok_or_else(|| Error::invalid(format!("no keep count for group {id}")))?;
    if k < 1 || k > g.channels {
        return Err(Error::invalid(format!(
            "keep count {k} invalid for group `{}` of {} channels",
            g.name, g.channels
        )));
    }
    Ok((k, g.channels))
}

fn mask_from_kept(channels: usize, kept: impl IntoIterator<Item = usize>) -> Vec<bool> {
    let mut m = vec![false; channels];
    for k in kept {
        m[k] = true;
    }
    m
}

/// Uniformly random kept subsets with exactly `counts[g]` channels per group.
pub fn random_mask(model: &ModelGraph, counts: &BTreeMap<usize, usize>, seed: u64) -> Result<GroupMasks> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<usize> = model.prunable_groups().map(|g| g.id).collect();
    let mut out = BTreeMap::new();
    for id in ids {
        let (k, c) = checked_count(model, counts, id)?;
        let picked = rand::seq::index::sample(&mut rng, c, k);
        out.insert(id, mask_from_kept(c, picked));
    }
    Ok(GroupMasks(out))
}

/// Per-channel L1 norm of every convolution weight that produces the group.
pub fn channel_l1_scores(model: &ModelGraph, group: usize) -> Result<Vec<f64>> {
    let g = model
        .group(group)
        .ok_or_else(|| Error::invalid(format!("unknown group {group}")))?;
    let mut scores = vec![0.0f64; g.channels];
    for m in g.members.iter().filter(|m| m.side == PortSide::Out) {
        let l = &model.layers()[m.layer];
        if !matches!(l.kind, LayerKind::Conv1d | LayerKind::PointwiseConv) {
            continue;
        }
        let w = model.param(&l.param_name("weight"))?;
        let row: usize = w.shape()[1..].iter().product();
        for (r, chunk) in w.data().chunks(row).enumerate() {
            scores[r % g.channels] += chunk.iter().map(|v| v.abs() as f64).sum::<f64>();
        }
    }
    Ok(scores)
}

/// Keeps the `counts[g]` channels with the largest producer-weight L1 norm;
/// ties go to the lower index.
pub fn magnitude_mask(model: &ModelGraph, counts: &BTreeMap<usize, usize>) -> Result<GroupMasks> {
    let mut out = BTreeMap::new();
    for g in model.prunable_groups() {
        let (k, c) = checked_count(model, counts, g.id)?;
        let scores = channel_l1_scores(model, g.id)?;
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        out.insert(g.id, mask_from_kept(c, order.into_iter().take(k)));
    }
    Ok(GroupMasks(out))
}
