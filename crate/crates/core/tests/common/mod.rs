#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepprune::autodiff::{Conv1dConfig, ConvTranspose1dConfig, NodeId, Tape, Tensor};
use sepprune::gradcheck::check_gradients;
use sepprune::model::{bind_params, build_toy_sepnet, forward_on_tape, GroupMasks, ModelGraph, SepNetConfig};
use sepprune::Result;

pub fn small_config() -> SepNetConfig {
    SepNetConfig {
        channels: 6,
        blocks: 2,
        block_channels: 10,
        kernel: 3,
        ..SepNetConfig::default()
    }
}

pub fn small_model(seed: u64) -> ModelGraph {
    build_toy_sepnet(&small_config(), seed).unwrap()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn positive(t: Tensor<f64>) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.abs() + 0.2).collect()).unwrap()
}

/// Weighted sum, so upstream gradients differ per element.
fn weighted_sum(tape: &mut Tape<f64>, x: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let w = rand_tensor(&mut rng, tape.shape(x));
    let w = tape.constant(w)?;
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn bcl(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.gen_range(1..=2), rng.gen_range(1..=6), rng.gen_range(4..=24)]
}

type Case = Box<dyn Fn(u64) -> Result<f64>>;

fn elementwise(build: fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>, arity: usize, pos: bool) -> Case {
    Box::new(move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = bcl(&mut rng);
        let mut inputs: Vec<_> = (0..arity).map(|_| rand_tensor(&mut rng, &shape)).collect();
        if pos {
            inputs = inputs.into_iter().map(positive).collect();
        }
        let rep = check_gradients(&inputs, |t, ids| {
            let y = build(t, ids)?;
            weighted_sum(t, y, seed)
        })?;
        Ok(rep.max_rel_error())
    })
}

fn channel_broadcast(build: fn(&mut Tape<f64>, NodeId, NodeId) -> Result<NodeId>) -> Case {
    Box::new(move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = bcl(&mut rng);
        let inputs = vec![rand_tensor(&mut rng, &shape), rand_tensor(&mut rng, &shape[1..2])];
        let rep = check_gradients(&inputs, |t, ids| {
            let y = build(t, ids[0], ids[1])?;
            weighted_sum(t, y, seed)
        })?;
        Ok(rep.max_rel_error())
    })
}

/// Every differentiable op plus the composed loss, each under central
/// differences for `seeds` random draws. Returns the worst relative error
/// per case.
pub fn gradient_suite(seeds: u64) -> Vec<(&'static str, f64)> {
    let cases: Vec<(&'static str, Case)> = vec![
        (
            "conv1d",
            Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let groups = [1, 2, 3][rng.gen_range(0..3)];
                let cin = groups * rng.gen_range(1..=2);
                let cout = groups * rng.gen_range(1..=2);
                let k = rng.gen_range(1..=4);
                let cfg = Conv1dConfig {
                    stride: rng.gen_range(1..=3),
                    dilation: rng.gen_range(1..=2),
                    groups,
                    padding: rng.gen_range(0..=2),
                };
                let len = rng.gen_range(k * cfg.dilation + 1..=24);
                let inputs = vec![
                    rand_tensor(&mut rng, &[2, cin, len]),
                    rand_tensor(&mut rng, &[cout, cin / groups, k]),
                    rand_tensor(&mut rng, &[cout]),
                ];
                let rep = check_gradients(&inputs, |t, ids| {
                    let y = t.conv1d(ids[0], ids[1], Some(ids[2]), cfg)?;
                    weighted_sum(t, y, seed)
                })?;
                Ok(rep.max_rel_error())
            }),
        ),
        (
            "conv_transpose1d",
            Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (cin, cout, k) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(2..=5));
                let cfg = ConvTranspose1dConfig {
                    stride: rng.gen_range(1..=3),
                    padding: rng.gen_range(0..=1),
                };
                let len = rng.gen_range(2..=12);
                let inputs = vec![
                    rand_tensor(&mut rng, &[2, cin, len]),
                    rand_tensor(&mut rng, &[cin, cout, k]),
                    rand_tensor(&mut rng, &[cout]),
                ];
                let rep = check_gradients(&inputs, |t, ids| {
                    let y = t.conv_transpose1d(ids[0], ids[1], Some(ids[2]), cfg)?;
                    weighted_sum(t, y, seed)
                })?;
                Ok(rep.max_rel_error())
            }),
        ),
        ("relu", elementwise(|t, i| t.relu(i[0]), 1, false)),
        ("sigmoid", elementwise(|t, i| t.sigmoid(i[0]), 1, false)),
        ("log", elementwise(|t, i| t.log(i[0]), 1, true)),
        ("exp", elementwise(|t, i| t.exp(i[0]), 1, false)),
        ("square", elementwise(|t, i| t.square(i[0]), 1, false)),
        ("sqrt", elementwise(|t, i| t.sqrt(i[0]), 1, true)),
        ("scalar_mul", elementwise(|t, i| t.scalar_mul(i[0], 2.3), 1, false)),
        ("add", elementwise(|t, i| t.add(i[0], i[1]), 2, false)),
        ("sub", elementwise(|t, i| t.sub(i[0], i[1]), 2, false)),
        ("mul", elementwise(|t, i| t.mul(i[0], i[1]), 2, false)),
        ("add per channel", channel_broadcast(|t, a, b| t.add(a, b))),
        ("sub per channel", channel_broadcast(|t, a, b| t.sub(a, b))),
        ("mul per channel", channel_broadcast(|t, a, b| t.mul(a, b))),
        ("prelu", channel_broadcast(|t, a, b| t.prelu(a, b))),
        (
            "sum",
            elementwise(
                |t, i| {
                    let s = t.sum(i[0])?;
                    t.square(s)
                },
                1,
                false,
            ),
        ),
        (
            "mean",
            elementwise(
                |t, i| {
                    let s = t.mean(i[0])?;
                    t.square(s)
                },
                1,
                false,
            ),
        ),
        (
            "channel_norm",
            Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let shape = bcl(&mut rng);
                let c = shape[1];
                let inputs = vec![
                    rand_tensor(&mut rng, &shape),
                    rand_tensor(&mut rng, &[c]),
                    rand_tensor(&mut rng, &[c]),
                ];
                let rep = check_gradients(&inputs, |t, ids| {
                    let y = t.channel_norm(ids[0], ids[1], ids[2])?;
                    weighted_sum(t, y, seed)
                })?;
                Ok(rep.max_rel_error())
            }),
        ),
        (
            "narrow/concat/fit_length",
            Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let shape = bcl(&mut rng);
                let (c, l) = (shape[1], shape[2]);
                let inputs = vec![rand_tensor(&mut rng, &shape), rand_tensor(&mut rng, &shape)];
                let start = rng.gen_range(0..c);
                let width = rng.gen_range(1..=c - start);
                let target = rng.gen_range(1..=2 * l);
                let rep = check_gradients(&inputs, |t, ids| {
                    let n = t.narrow_channels(ids[0], start, width)?;
                    let cat = t.concat_channels(&[ids[1], n])?;
                    let y = t.fit_length(cat, target)?;
                    weighted_sum(t, y, seed)
                })?;
                Ok(rep.max_rel_error())
            }),
        ),
        (
            "gumbel_keep_prob",
            Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let c = rng.gen_range(1..=8);
                let logits = rand_tensor(&mut rng, &[c, 2]);
                let noise: Vec<f64> = (0..2 * c).map(|_| rng.gen_range(-1.0..2.0)).collect();
                let tau = rng.gen_range(0.5..2.0);
                let rep = check_gradients(&[logits], |t, ids| {
                    let p = t.gumbel_keep_prob(ids[0], &noise, tau)?;
                    weighted_sum(t, p, seed)
                })?;
                Ok(rep.max_rel_error())
            }),
        ),
        (
            "pit_neg_sisdr",
            Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let refs = rand_tensor(&mut rng, &[2, 2, 32]);
                let est = rand_tensor(&mut rng, &[2, 2, 32]);
                let rep = check_gradients(&[est], |t, ids| t.pit_neg_sisdr(ids[0], &refs))?;
                Ok(rep.max_rel_error())
            }),
        ),
        (
            "toy model loss",
            Box::new(|seed| {
                let model = small_model(seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = 64;
                let mut inputs = vec![rand_tensor(&mut rng, &[1, 1, t])];
                let groups: Vec<(usize, usize)> = model.prunable_groups().map(|g| (g.id, g.channels)).collect();
                for &(_, c) in &groups {
                    inputs.push(positive(rand_tensor(&mut rng, &[c])));
                }
                let refs = rand_tensor(&mut rng, &[1, 2, t]);
                let rep = check_gradients(&inputs, |tape, ids| {
                    let params = bind_params(tape, &model, false)?;
                    let masks: BTreeMap<usize, NodeId> =
                        groups.iter().zip(&ids[1..]).map(|(&(g, _), &n)| (g, n)).collect();
                    let y = forward_on_tape(tape, &model, &params, ids[0], &masks)?;
                    tape.pit_neg_sisdr(y, &refs)
                })?;
                Ok(rep.max_rel_error())
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, case)| {
            let worst = (0..seeds)
                .map(|s| case(1000 + s).unwrap_or(f64::INFINITY))
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

/// A random non-empty keep set for every prunable group.
pub fn random_group_masks(model: &ModelGraph, rng: &mut ChaCha8Rng) -> GroupMasks {
    GroupMasks(
        model
            .prunable_groups()
            .map(|g| {
                let k = rng.gen_range(1..=g.channels);
                let mut m = vec![false; g.channels];
                sample(rng, g.channels, k).into_iter().for_each(|i| m[i] = true);
                (g.id, m)
            })
            .collect(),
    )
}

/// Hand-derived parameter and MAC totals per component (encoder, separator,
/// decoder) for the toy network with `e` residual channels and block widths
/// `h`, at input length `t`.
pub fn toy_closed_form(cfg: &SepNetConfig, e: u64, h: &[u64], t: u64) -> [(u64, u64); 3] {
    let (ek, es) = (cfg.encoder_kernel as u64, cfg.encoder_stride as u64);
    let k = cfg.kernel as u64;
    let c = cfg.speakers as u64;
    let l = (t - ek) / es + 1;
    let enc = (e * ek, e * ek * l + e * l);
    let mut sep = (0, 0);
    for &hr in h {
        sep.0 += (hr * e + hr) + (hr * k + hr) + 2 * hr + hr + (e * hr + e);
        sep.1 += hr * e * l + hr * k * l + 4 * hr * l + hr * l + e * hr * l + e * l;
    }
    sep.0 += c * e * e + c * e;
    sep.1 += c * e * e * l + c * e * l + c * e * l;
    let dec = (e * ek, c * e * ek * l);
    [enc, sep, dec]
}
