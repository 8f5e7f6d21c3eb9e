//! Gumbel-Softmax channel masks: sampling, straight-through binarization,
//! gradient-descent search with frozen weights, finalization and mask files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, NodeId, Tape, Tensor};
use crate::data::AudioBatch;
use crate::error::{Error, MaskFileError, Result};
use crate::model::{bind_params, GroupMasks, ModelGraph};
use crate::train::{adam_update, batch_loss, new_adam, param_order};

/// Temperature over the course of mask learning.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TauSchedule {
    Constant { tau: f64 },
    /// Linear from `start` at the first iteration to `end` at the last.
    Linear { start: f64, end: f64 },
}

impl Default for TauSchedule {
    fn default() -> Self {
        TauSchedule::Constant { tau: 1.0 }
    }
}

impl TauSchedule {
    pub fn anneal() -> Self {
        TauSchedule::Linear { start: 2.0, end: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |t: f64| t > 0.0 && t.is_finite();
        let good = match *self {
            TauSchedule::Constant { tau } => ok(tau),
            TauSchedule::Linear { start, end } => ok(start) && ok(end),
        };
        if good {
            Ok(())
        } else {
            Err(Error::invalid("temperatures must be positive and finite"))
        }
    }

    pub fn at(&self, iteration: usize, total: usize) -> f64 {
        match *self {
            TauSchedule::Constant { tau } => tau,
            TauSchedule::Linear { start, end } => {
                if total <= 1 {
                    end
                } else {
                    start + (end - start) * iteration.min(total - 1) as f64 / (total - 1) as f64
                }
            }
        }
    }

    pub fn last(&self) -> f64 {
        match *self {
            TauSchedule::Constant { tau } => tau,
            TauSchedule::Linear { end, .. } => end,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GumbelChannelMask {
    pub group_id: usize,
    /// `[C, 2]` row-major: keep logit then drop logit per channel.
    pub logits: Vec<f32>,
    pub tau: f64,
    pub eps: f64,
    /// Keep probabilities from the latest sample (or the noise-free readout).
    pub pi: Vec<f64>,
    pub m: Vec<bool>,
}

impl GumbelChannelMask {
    pub fn channels(&self) -> usize {
        self.logits.len() / 2
    }

    /// `σ((α_keep − α_drop) / τ)` per channel.
    pub fn noise_free_pi(&self, tau: f64) -> Vec<f64> {
        self.logits
            .chunks_exact(2)
            .map(|a| sigmoid((a[0] as f64 - a[1] as f64) / tau))
            .collect()
    }

    /// The keep probability of the underlying two-way softmax, `σ(α_keep − α_drop)`.
    pub fn keep_softmax(&self) -> Vec<f64> {
        self.noise_free_pi(1.0)
    }
}

/// One mask per prunable group, in group order.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<GumbelChannelMask>,
    pub eps: f64,
    pub tau: TauSchedule,
    pub seed: u64,
}

impl MaskSet {
    pub fn get(&self, group: usize) -> Option<&GumbelChannelMask> {
        self.masks.iter().find(|m| m.group_id == group)
    }

    /// Verifies that the set covers every prunable group of `model` exactly once.
    pub fn check_against(&self, model: &ModelGraph) -> Result<()> {
        let want: Vec<(usize, usize)> = model.prunable_groups().map(|g| (g.id, g.channels)).collect();
        let have: Vec<(usize, usize)> = self.masks.iter().map(|m| (m.group_id, m.channels())).collect();
        if want != have {
            return Err(Error::invalid(format!(
                "mask set covers groups {have:?}, model needs {want:?}"
            )));
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("threshold must lie in (0, 1), got {eps}")))
    }
}

/// Equal keep and drop logits (π = 0.5) for every channel of every prunable group.
pub fn init_masks(model: &ModelGraph, eps: f64, tau: TauSchedule, seed: u64) -> Result<MaskSet> {
    check_eps(eps)?;
    tau.validate()?;
    let masks: Vec<GumbelChannelMask> = model
        .prunable_groups()
        .map(|g| GumbelChannelMask {
            group_id: g.id,
            logits: vec![0.0; 2 * g.channels],
            tau: tau.at(0, 1),
            eps,
            pi: vec![0.5; g.channels],
            m: vec![false; g.channels],
        })
        .collect();
    if masks.is_empty() {
        return Err(Error::invalid("model has no prunable groups"));
    }
    Ok(MaskSet { masks, eps, tau, seed })
}

/// A standard Gumbel draw `−ln(−ln U)`; `U` is redrawn until it lies strictly
/// inside `(0, 1)`.
pub fn gumbel<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 && u < 1.0 {
            return -(-u.ln()).ln();
        }
    }
}

fn draw_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| gumbel(rng)).collect()
}

/// One Gumbel-Softmax keep probability per channel at the mask's temperature.
pub fn sample_soft<R: Rng>(mask: &GumbelChannelMask, rng: &mut R) -> Vec<f64> {
    let g = draw_noise(rng, mask.logits.len());
    soft_with_noise(mask, &g, mask.tau)
}

/// Keep probabilities for given Gumbel draws (`[C, 2]`, keep then drop).
pub fn soft_with_noise(mask: &GumbelChannelMask, noise: &[f64], tau: f64) -> Vec<f64> {
    mask.logits
        .chunks_exact(2)
        .zip(noise.chunks_exact(2))
        .map(|(a, g)| sigmoid(((a[0] as f64 + g[0]) - (a[1] as f64 + g[1])) / tau))
        .collect()
}

/// `m = 1[π > ε]`.
pub fn binarize(pi: &[f64], eps: f64) -> Vec<bool> {
    pi.iter().map(|&p| p > eps).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnConfig {
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.1,
            seed: 0,
        }
    }
}

type Recorded = (BTreeMap<usize, NodeId>, Vec<NodeId>, Vec<NodeId>);

/// Records sampled, binarized masks for every group on `tape` and returns
/// the mask nodes together with the logits leaves.
fn record_masks(
    tape: &mut Tape<f32>,
    masks: &MaskSet,
    rng: &mut ChaCha8Rng,
    tau: f64,
) -> Result<Recorded> {
    let mut nodes = BTreeMap::new();
    let mut logits = Vec::with_capacity(masks.masks.len());
    let mut probs = Vec::with_capacity(masks.masks.len());
    for m in &masks.masks {
        let c = m.channels();
        let a = tape.param(Tensor::new(vec![c, 2], m.logits.clone())?)?;
        let noise: Vec<f32> = draw_noise(rng, 2 * c).into_iter().map(|v| v as f32).collect();
        let pi = tape.gumbel_keep_prob(a, &noise, tau as f32)?;
        let bin = tape.binarize_ste(pi, masks.eps as f32)?;
        nodes.insert(m.group_id, bin);
        logits.push(a);
        probs.push(pi);
    }
    Ok((nodes, logits, probs))
}

/// Negative PIT SI-SDR of the frozen model under freshly sampled masks.
/// Returns the loss node and the logits leaves, the only nodes that receive
/// gradients.
pub fn masked_forward_loss(
    tape: &mut Tape<f32>,
    model: &ModelGraph,
    masks: &MaskSet,
    batch: &AudioBatch,
    rng: &mut ChaCha8Rng,
    tau: f64,
) -> Result<(NodeId, Vec<NodeId>)> {
    masks.check_against(model)?;
    let params = bind_params(tape, model, false)?;
    let (nodes, logits, _) = record_masks(tape, masks, rng, tau)?;
    let loss = batch_loss(tape, model, &params, batch, &nodes)?;
    Ok((loss, logits))
}

fn search(
    model: &ModelGraph,
    masks: &MaskSet,
    data: &[AudioBatch],
    cfg: &LearnConfig,
    weights: Option<(f64, AdamConfig)>,
) -> Result<(MaskSet, ModelGraph)> {
    masks.check_against(model)?;
    if data.is_empty() {
        return Err(Error::invalid("mask learning needs a non-empty dataset"));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::invalid("mask learning rate must be positive"));
    }
    let mut out = masks.clone();
    let mut model = model.clone();
    if cfg.iterations == 0 {
        return Ok((out, model));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = weights.map(|(_, a)| new_adam(&model, a));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut tape = Tape::<f32>::new();
    for it in 0..cfg.iterations {
        if it % data.len() == 0 {
            order.shuffle(&mut rng);
        }
        let batch = &data[order[it % data.len()]];
        let tau = out.tau.at(it, cfg.iterations);
        tape.clear();
        let params = bind_params(&mut tape, &model, weights.is_some())?;
        let (nodes, logits, probs) = record_masks(&mut tape, &out, &mut rng, tau)?;
        let loss = batch_loss(&mut tape, &model, &params, batch, &nodes)?;
        tape.backward(loss)?;
        for ((m, &a), &p) in out.masks.iter_mut().zip(&logits).zip(&probs) {
            if let Some(g) = tape.grad(a) {
                for (l, d) in m.logits.iter_mut().zip(g) {
                    *l = (*l as f64 - cfg.lr * *d as f64) as f32;
                }
            }
            m.tau = tau;
            m.pi = tape.value(p).data().iter().map(|&v| v as f64).collect();
            m.m = binarize(&m.pi, m.eps);
        }
        if let (Some((lr, _)), Some(state)) = (weights, adam.as_mut()) {
            let ids = param_order(&model, &params)?;
            adam_update(&mut model, &tape, &ids, state, lr)?;
        }
    }
    let tau = out.tau.last();
    for m in out.masks.iter_mut() {
        m.tau = tau;
        m.pi = m.noise_free_pi(tau);
        m.m = binarize(&m.pi, m.eps);
    }
    Ok((out, model))
}

/// Gradient descent on the mask logits with the model weights frozen.
pub fn learn_masks(model: &ModelGraph, masks: &MaskSet, data: &[AudioBatch], cfg: &LearnConfig) -> Result<MaskSet> {
    search(model, masks, data, cfg, None).map(|(m, _)| m)
}

/// Like [`learn_masks`], but the weights also take an Adam step with
/// `weight_lr` at every iteration.
pub fn joint_optimize(
    model: &ModelGraph,
    masks: &MaskSet,
    data: &[AudioBatch],
    cfg: &LearnConfig,
    weight_lr: f64,
    adam: AdamConfig,
) -> Result<(MaskSet, ModelGraph)> {
    search(model, masks, data, cfg, Some((weight_lr, adam)))
}

/// Noise-free binary masks at threshold `eps`, plus the groups that had to
/// keep their single most probable channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Finalized {
    pub masks: GroupMasks,
    pub forced: Vec<usize>,
    /// Noise-free keep probabilities per group.
    pub pi: BTreeMap<usize, Vec<f64>>,
    pub eps: f64,
}

pub fn finalize_masks(masks: &MaskSet) -> Finalized {
    finalize_at(masks, masks.eps)
}

/// Thresholds noise-free keep probabilities at `eps`; a group that would
/// lose every channel keeps its highest-π channel (lowest index on ties).
pub fn finalize_at(masks: &MaskSet, eps: f64) -> Finalized {
    let tau = masks.tau.last();
    let mut out = BTreeMap::new();
    let mut forced = Vec::new();
    let mut pis = BTreeMap::new();
    for m in &masks.masks {
        let pi = m.noise_free_pi(tau);
        let mut keep = binarize(&pi, eps);
        if !keep.iter().any(|&k| k) {
            let top = (0..pi.len())
                .fold(0, |best, j| if pi[j] > pi[best] { j } else { best });
            keep[top] = true;
            forced.push(m.group_id);
            log::warn!(
                "group {} would lose every channel at threshold {eps}; keeping channel {top}",
                m.group_id
            );
        }
        out.insert(m.group_id, keep);
        pis.insert(m.group_id, pi);
    }
    Finalized {
        masks: GroupMasks(out),
        forced,
        pi: pis,
        eps,
    }
}

/// One line per group: `group_id channels eps kept pi`, kept and pi as
/// comma-separated lists.
pub fn mask_file_text(f: &Finalized) -> String {
    let mut s = String::from("# group_id channels eps kept pi\n");
    for (id, keep) in &f.masks.0 {
        let kept: Vec<String> = f.masks.kept_indices(*id).iter().map(usize::to_string).collect();
        let pi: Vec<String> = f.pi[id].iter().map(|p| format!("{p:.6}")).collect();
        writeln!(s, "{id} {} {} {} {}", keep.len(), f.eps, kept.join(","), pi.join(",")).unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskRecord {
    pub group_id: usize,
    pub channels: usize,
    pub eps: f64,
    pub kept: Vec<usize>,
    pub pi: Vec<f64>,
}

pub fn parse_mask_file(text: &str) -> Result<Vec<MaskRecord>> {
    let mut out: Vec<MaskRecord> = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line_no = no + 1;
        let bad = |detail: &str| MaskFileError::Malformed {
            line: line_no,
            detail: detail.into(),
        };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields").into());
        }
        let group_id: usize = f[0].parse().map_err(|_| bad("bad group id"))?;
        let channels: usize = f[1].parse().map_err(|_| bad("bad channel count"))?;
        let eps: f64 = f[2].parse().map_err(|_| bad("bad threshold"))?;
        let kept = f[3]
            .split(',')
            .map(|v| v.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("bad kept list"))?;
        let pi = f[4]
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("bad probability list"))?;
        if kept.is_empty() || kept.windows(2).any(|w| w[0] >= w[1]) || kept.iter().any(|&k| k >= channels) {
            return Err(bad("kept indices must be increasing and in range").into());
        }
        if pi.len() != channels || pi.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(bad("need one probability in [0, 1] per channel").into());
        }
        if out.iter().any(|r| r.group_id == group_id) {
            return Err(bad("duplicate group").into());
        }
        out.push(MaskRecord {
            group_id,
            channels,
            eps,
            kept,
            pi,
        });
    }
    Ok(out)
}

/// Binary masks from mask-file records.
pub fn records_to_masks(records: &[MaskRecord]) -> GroupMasks {
    GroupMasks(
        records
            .iter()
            .map(|r| {
                let mut m = vec![false; r.channels];
                r.kept.iter().for_each(|&k| m[k] = true);
                (r.group_id, m)
            })
            .collect(),
    )
}

pub fn save_mask_file(f: &Finalized, path: &Path) -> Result<()> {
    std::fs::write(path, mask_file_text(f))?;
    Ok(())
}

pub fn load_mask_file(path: &Path) -> Result<GroupMasks> {
    Ok(records_to_masks(&parse_mask_file(&std::fs::read_to_string(path)?)?))
}

const SIDECAR_MAGIC: [u8; 4] = *b"SEPM";
const SIDECAR_VERSION: u16 = 1;

/// Raw logits and hyperparameters for resuming a search.
pub fn encode_logits(masks: &MaskSet) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&SIDECAR_MAGIC);
    b.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
    b.extend_from_slice(&masks.eps.to_le_bytes());
    let (kind, t0, t1) = match masks.tau {
        TauSchedule::Constant { tau } => (0u8, tau, tau),
        TauSchedule::Linear { start, end } => (1u8, start, end),
    };
    b.push(kind);
    b.extend_from_slice(&t0.to_le_bytes());
    b.extend_from_slice(&t1.to_le_bytes());
    b.extend_from_slice(&masks.seed.to_le_bytes());
    b.extend_from_slice(&(masks.masks.len() as u32).to_le_bytes());
    for m in &masks.masks {
        b.extend_from_slice(&(m.group_id as u32).to_le_bytes());
        b.extend_from_slice(&(m.channels() as u32).to_le_bytes());
        for v in &m.logits {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

pub fn decode_logits(bytes: &[u8]) -> Result<MaskSet> {
    let bad = |d: &str| -> Error { MaskFileError::BadSidecar(d.into()).into() };
    if bytes.len() < 4 + 2 + 8 + 1 + 16 + 8 + 4 + 4 {
        return Err(bad("file too short"));
    }
    if bytes[..4] != SIDECAR_MAGIC {
        return Err(bad("bad magic"));
    }
    let split = bytes.len() - 4;
    if crc32fast::hash(&bytes[..split]) != u32::from_le_bytes(bytes[split..].try_into().unwrap()) {
        return Err(bad("checksum mismatch"));
    }
    let mut pos = 4;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > split {
            return Err(bad("truncated"));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if u16::from_le_bytes(take(2)?.try_into().unwrap()) != SIDECAR_VERSION {
        return Err(bad("unsupported version"));
    }
    let f64_at = |s: &[u8]| f64::from_le_bytes(s.try_into().unwrap());
    let eps = f64_at(take(8)?);
    let kind = take(1)?[0];
    let t0 = f64_at(take(8)?);
    let t1 = f64_at(take(8)?);
    let tau = match kind {
        0 => TauSchedule::Constant { tau: t0 },
        1 => TauSchedule::Linear { start: t0, end: t1 },
        _ => return Err(bad("unknown temperature schedule")),
    };
    let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut masks = Vec::new();
    for _ in 0..count {
        let group_id = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let raw = take(c.checked_mul(8).ok_or_else(|| bad("group too large"))?)?;
        let logits: Vec<f32> = raw.chunks_exact(4).map(|v| f32::from_le_bytes(v.try_into().unwrap())).collect();
        let mut m = GumbelChannelMask {
            group_id,
            logits,
            tau: tau.last(),
            eps,
            pi: Vec::new(),
            m: Vec::new(),
        };
        m.pi = m.noise_free_pi(m.tau);
        m.m = binarize(&m.pi, eps);
        masks.push(m);
    }
    if pos != split {
        return Err(bad("trailing bytes"));
    }
    check_eps(eps)?;
    tau.validate()?;
    Ok(MaskSet { masks, eps, tau, seed })
}
