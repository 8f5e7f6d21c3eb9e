//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepprune::autodiff::{AdamConfig, Tape, Tensor};
use sepprune::data::{make_dataset, AudioBatch, SynthParams};
use sepprune::mask::{
    encode_logits, finalize_at, finalize_masks, init_masks, joint_optimize, learn_masks, mask_file_text,
    sample_soft, GumbelChannelMask, LearnConfig, MaskSet, TauSchedule,
};
use sepprune::model::{build_toy_sepnet, encode_checkpoint, init_params, GroupMasks, ModelGraph, SepNetConfig};
use sepprune::profiler::{profile, timing_harness, TimingMode};
use sepprune::pruner::{apply_prune, blueprint_from_masks, random_mask};
use sepprune::train::{evaluate, finetune, log_csv, train, TrainConfig};
use sepprune::Result;

const LENGTH: usize = 2048;
const SEEDS: u64 = 5;
const MASK_SEEDS: u64 = 20;
const RANDOM_MASKS: u64 = 20;
const EPS: f64 = 0.7;

fn desk_config() -> SepNetConfig {
    SepNetConfig {
        channels: 16,
        blocks: 2,
        block_channels: 32,
        ..SepNetConfig::default()
    }
}

struct Data {
    train: Vec<AudioBatch>,
    val: Vec<AudioBatch>,
    test: Vec<AudioBatch>,
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

struct Report {
    failures: Vec<usize>,
}

impl Report {
    fn run(&mut self, id: usize, name: &str, f: impl FnOnce() -> Result<Verdict>) {
        let start = Instant::now();
        let v = f().unwrap_or_else(|e| Verdict {
            pass: false,
            detail: format!("error: {e}"),
        });
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} [{tag}] {name}: {} ({:.1} s)",
            v.detail,
            start.elapsed().as_secs_f64()
        );
        if !v.pass {
            self.failures.push(id);
        }
    }
}

fn prune(model: &ModelGraph, masks: &GroupMasks) -> Result<ModelGraph> {
    apply_prune(model, &blueprint_from_masks(model, masks)?)
}

fn test_sisdri(model: &ModelGraph, data: &Data) -> Result<f64> {
    Ok(evaluate(model, &data.test, None)?.mean_si_sdri)
}

fn finetune_one(model: &ModelGraph, data: &Data, seed: u64) -> Result<ModelGraph> {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    Ok(finetune(model, &data.train, &data.val, &cfg, 1)?.checkpoint.model)
}

fn learned(model: &ModelGraph, data: &Data, seed: u64) -> Result<MaskSet> {
    let init = init_masks(model, EPS, TauSchedule::default(), seed)?;
    learn_masks(
        model,
        &init,
        &data.train,
        &LearnConfig {
            seed,
            ..LearnConfig::default()
        },
    )
}

fn kept_counts(m: &GroupMasks) -> std::collections::BTreeMap<usize, usize> {
    m.0.keys().map(|&g| (g, m.kept_count(g))).collect()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct SeedRun {
    full: f64,
    stepwise: f64,
    scratch: f64,
    joint: f64,
    pruned: ModelGraph,
}

fn seed_run(full: &ModelGraph, data: &Data, seed: u64) -> Result<SeedRun> {
    let full_score = test_sisdri(full, data)?;
    let masks = finalize_masks(&learned(full, data, seed)?).masks;
    let pruned = prune(full, &masks)?;
    let stepwise = test_sisdri(&finetune_one(&pruned, data, seed)?, data)?;

    let fresh = ModelGraph::new(pruned.desc.clone(), init_params(&pruned.desc, 7919 + seed))?;
    let scratch = test_sisdri(&finetune_one(&fresh, data, seed)?, data)?;

    let init = init_masks(full, EPS, TauSchedule::default(), seed)?;
    let cfg = LearnConfig {
        seed,
        ..LearnConfig::default()
    };
    let (jm, jw) = joint_optimize(full, &init, &data.train, &cfg, 1e-3, AdamConfig::default())?;
    let jp = prune(&jw, &finalize_masks(&jm).masks)?;
    let joint = test_sisdri(&finetune_one(&jp, data, seed)?, data)?;
    Ok(SeedRun {
        full: full_score,
        stepwise,
        scratch,
        joint,
        pruned,
    })
}

fn criterion_gradients() -> Result<Verdict> {
    let rows = common::gradient_suite(10);
    let worst = rows.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let bad: Vec<&str> = rows.iter().filter(|r| r.1.is_nan() || r.1 >= 1e-4).map(|r| r.0).collect();
    verdict(
        bad.is_empty(),
        format!(
            "{} cases x 10 seeds, worst rel. error {:.2e} ({}){}",
            rows.len(),
            worst.1,
            worst.0,
            if bad.is_empty() { String::new() } else { format!(", over 1e-4: {bad:?}") }
        ),
    )
}

fn criterion_equivalence() -> Result<Verdict> {
    let model = build_toy_sepnet(&desk_config(), 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut exact = 0;
    let mut worst32 = 0.0f64;
    for _ in 0..100 {
        let masks = common::random_group_masks(&model, &mut rng);
        let pruned = prune(&model, &masks)?;
        let x: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x64 = Tensor::new(vec![1, 1, 512], x)?;
        let a = model.separate(&x64, Some(&masks))?;
        let b = pruned.separate(&x64, None)?;
        if a.data() == b.data() {
            exact += 1;
        }
        let x32: Tensor<f32> = x64.cast();
        let a: Tensor<f64> = model.separate(&x32, Some(&masks))?.cast();
        let b: Tensor<f64> = pruned.separate(&x32, None)?.cast();
        let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(p, q)| p - q).collect();
        worst32 = worst32.max(max_abs(&diff) / max_abs(a.data()).max(1e-30));
    }
    verdict(
        exact == 100 && worst32 <= 1e-5,
        format!("64-bit identical in {exact}/100, worst 32-bit relative gap {worst32:.1e}"),
    )
}

fn criterion_profiler() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for cfg in [desk_config(), SepNetConfig::default()] {
        let model = build_toy_sepnet(&cfg, 0)?;
        let e = cfg.channels as u64;
        let full_h = vec![cfg.block_channels as u64; cfg.blocks];
        for t in [2048usize, 8000, 16000] {
            let rep = profile(&model, t)?;
            let want = common::toy_closed_form(&cfg, e, &full_h, t as u64);
            let got: Vec<(u64, u64)> = rep.components.iter().map(|c| (c.params, c.macs)).collect();
            if got != want {
                return verdict(false, format!("{cfg:?} at T={t}: profiler {got:?}, closed form {want:?}"));
            }
            checked += 1;
            for _ in 0..10 {
                let masks = common::random_group_masks(&model, &mut rng);
                let rep = profile(&prune(&model, &masks)?, t)?;
                let groups = model.groups();
                let e_kept = masks.kept_count(groups[0].id) as u64;
                let h_kept: Vec<u64> = groups[1..].iter().map(|g| masks.kept_count(g.id) as u64).collect();
                let want = common::toy_closed_form(&cfg, e_kept, &h_kept, t as u64);
                let got: Vec<(u64, u64)> = rep.components.iter().map(|c| (c.params, c.macs)).collect();
                if got != want {
                    return verdict(false, format!("pruned at T={t}: profiler {got:?}, closed form {want:?}"));
                }
                checked += 1;
            }
        }
    }
    verdict(true, format!("{checked} full and pruned models match the hand formulas exactly"))
}

fn criterion_sampling() -> Result<Verdict> {
    let draws = 100_000;
    let mut worst = 0.0f64;
    for setting in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + setting);
        let c = 8;
        let mask = GumbelChannelMask {
            group_id: 0,
            logits: (0..2 * c).map(|_| rng.gen_range(-2.5f32..2.5)).collect(),
            tau: rng.gen_range(0.5..2.0),
            eps: 0.5,
            pi: Vec::new(),
            m: Vec::new(),
        };
        let target = mask.keep_softmax();
        let mut hits = vec![0usize; c];
        for _ in 0..draws {
            for (h, p) in hits.iter_mut().zip(sample_soft(&mask, &mut rng)) {
                *h += (p > 0.5) as usize;
            }
        }
        for (h, t) in hits.iter().zip(&target) {
            worst = worst.max((*h as f64 / draws as f64 - t).abs());
        }
    }
    verdict(
        worst <= 0.01,
        format!("5 settings x 8 channels, 1e5 draws, worst |freq - softmax| = {worst:.4}"),
    )
}

fn criterion_ste() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let trials = 50;
    for _ in 0..trials {
        let n = 64;
        let eps = rng.gen_range(0.05..0.95);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let up: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut tape = Tape::<f64>::new();
        let pn = tape.param(Tensor::new(vec![n], p.clone())?)?;
        let m = tape.binarize_ste(pn, eps)?;
        let u = tape.constant(Tensor::new(vec![n], up.clone())?)?;
        let prod = tape.mul(m, u)?;
        let loss = tape.sum(prod)?;
        tape.backward(loss)?;
        let fwd_ok = tape
            .value(m)
            .data()
            .iter()
            .zip(&p)
            .all(|(&v, &q)| v == if q > eps { 1.0 } else { 0.0 });
        let grad_ok = tape
            .grad(pn)
            .unwrap()
            .iter()
            .zip(&up)
            .all(|(&g, &u)| g == u.clamp(-1.0, 1.0));
        mismatches += (!fwd_ok || !grad_ok) as usize;
    }
    verdict(
        mismatches == 0,
        format!("{trials} random trials, {mismatches} with a forward or gradient mismatch"),
    )
}

fn criterion_monotone(masks: &MaskSet) -> Result<Verdict> {
    let eps = [0.5, 0.6, 0.7, 0.8, 0.9];
    let finals: Vec<GroupMasks> = eps.iter().map(|&e| finalize_at(masks, e).masks).collect();
    let totals: Vec<usize> = finals.iter().map(|m| m.total_kept()).collect();
    let per_group_ok = finals.windows(2).all(|w| w[0].0.keys().all(|&g| w[1].kept_count(g) <= w[0].kept_count(g)));
    let ok = per_group_ok && totals.windows(2).all(|w| w[1] <= w[0]);
    verdict(ok, format!("kept channels over eps {eps:?}: {totals:?}"))
}

fn criterion_mask_quality(full: &ModelGraph, data: &Data) -> Result<(Verdict, MaskSet)> {
    let mut wins = 0;
    let mut margins = Vec::new();
    let mut first = None;
    for s in 0..MASK_SEEDS {
        let set = learned(full, data, s)?;
        let masks = finalize_masks(&set).masks;
        let ours = test_sisdri(&finetune_one(&prune(full, &masks)?, data, s)?, data)?;
        let counts = kept_counts(&masks);
        let mut random = 0.0;
        for j in 0..RANDOM_MASKS {
            let rm = random_mask(full, &counts, 100_000 + s * 1000 + j)?;
            random += test_sisdri(&finetune_one(&prune(full, &rm)?, data, s)?, data)?;
        }
        random /= RANDOM_MASKS as f64;
        wins += (ours > random) as usize;
        margins.push(ours - random);
        println!("    mask seed {s:>2}: kept {counts:?}, learned {ours:.3} dB vs random mean {random:.3} dB");
        first.get_or_insert(set);
    }
    let mean_margin = margins.iter().sum::<f64>() / margins.len() as f64;
    Ok((
        Verdict {
            pass: wins >= 18,
            detail: format!(
                "learned beats mean of {RANDOM_MASKS} random masks in {wins}/{MASK_SEEDS} seeds (need 18), mean margin {mean_margin:.3} dB"
            ),
        },
        first.unwrap(),
    ))
}

fn criterion_determinism(full: &ModelGraph, data: &Data) -> Result<Verdict> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("thread pool");
    pool.install(|| {
        let run_mask = || -> Result<(String, Vec<u8>)> {
            let init = init_masks(full, EPS, TauSchedule::default(), 3)?;
            let cfg = LearnConfig {
                seed: 3,
                ..LearnConfig::default()
            };
            let set = learn_masks(full, &init, &data.train, &cfg)?;
            Ok((mask_file_text(&finalize_masks(&set)), encode_logits(&set)))
        };
        let run_train = || -> Result<(String, Vec<u8>)> {
            let model = build_toy_sepnet(&desk_config(), 21)?;
            let cfg = TrainConfig {
                max_epochs: 3,
                seed: 21,
                ..TrainConfig::default()
            };
            let out = train(&model, &data.train[..128], &data.val, &cfg)?;
            Ok((log_csv(&out.log), encode_checkpoint(&out.checkpoint)?))
        };
        let masks_same = run_mask()? == run_mask()?;
        let logs_same = run_train()? == run_train()?;
        verdict(
            masks_same && logs_same,
            format!("mask files identical: {masks_same}, training logs and checkpoints identical: {logs_same}"),
        )
    })
}

fn main() {
    let start = Instant::now();
    let [tr, va, te] = make_dataset(512, 64, 64, 0, LENGTH, &SynthParams::default()).expect("manifests");
    let data = Data {
        train: tr.materialize().expect("train split"),
        val: va.materialize().expect("val split"),
        test: te.materialize().expect("test split"),
    };
    let mut report = Report { failures: Vec::new() };

    report.run(1, "gradient suite", criterion_gradients);
    report.run(2, "pruning equivalence", criterion_equivalence);
    report.run(3, "profiler exactness", criterion_profiler);
    report.run(4, "Gumbel sampling law", criterion_sampling);
    report.run(5, "straight-through contract", criterion_ste);

    let mut full = Vec::new();
    for s in 0..SEEDS {
        let t0 = Instant::now();
        let model = build_toy_sepnet(&desk_config(), s).expect("model");
        let cfg = TrainConfig {
            seed: s,
            ..TrainConfig::default()
        };
        let out = train(&model, &data.train, &data.val, &cfg).expect("pretraining");
        let best = out.checkpoint.meta.best_val_sisdri.unwrap_or(f64::NAN);
        println!(
            "    pretrain seed {s}: {} epochs, best val SI-SDRi {best:.3} dB at epoch {:?} ({:.1} s)",
            out.log.len(),
            out.checkpoint.meta.epoch,
            t0.elapsed().as_secs_f64()
        );
        full.push(out.checkpoint.model);
    }

    let mut learned_set = None;
    let mut quality = None;
    let t7 = Instant::now();
    match criterion_mask_quality(&full[0], &data) {
        Ok((v, set)) => {
            quality = Some(v);
            learned_set = Some(set);
        }
        Err(e) => println!("    mask quality run failed: {e}"),
    }
    let t7 = t7.elapsed();

    report.run(6, "threshold monotonicity", || match &learned_set {
        Some(set) => criterion_monotone(set),
        None => verdict(false, "no learned logits available"),
    });
    report.run(7, "mask quality vs random", || {
        let mut v = quality.take().unwrap_or(Verdict {
            pass: false,
            detail: "run failed".into(),
        });
        v.detail = format!("{}, {:.1} s", v.detail, t7.as_secs_f64());
        v.pass &= t7.as_secs() < 30 * 60;
        Ok(v)
    });

    let runs: Vec<Result<SeedRun>> = (0..SEEDS).map(|s| seed_run(&full[s as usize], &data, s)).collect();
    for (s, r) in runs.iter().enumerate() {
        match r {
            Ok(r) => println!(
                "    seed {s}: full {:.3}, pruned+1 {:.3}, scratch+1 {:.3}, joint+1 {:.3} dB",
                r.full, r.stepwise, r.scratch, r.joint
            ),
            Err(e) => println!("    seed {s}: {e}"),
        }
    }
    let ok: Vec<&SeedRun> = runs.iter().filter_map(|r| r.as_ref().ok()).collect();
    let count = |f: &dyn Fn(&SeedRun) -> bool| ok.iter().filter(|r| f(r)).count();

    report.run(8, "fast recovery", || {
        let ratios: Vec<String> = ok.iter().map(|r| format!("{:.2}", r.stepwise / r.full)).collect();
        let n = count(&|r| r.full > 0.0 && r.stepwise >= 0.7 * r.full);
        verdict(n >= 4, format!("{n}/{SEEDS} seeds recover at least 70% (ratios {ratios:?})"))
    });
    report.run(9, "pruned vs scratch", || {
        let n = count(&|r| r.stepwise > r.scratch);
        verdict(n >= 4, format!("pruned+finetune beats scratch in {n}/{SEEDS} seeds"))
    });
    report.run(10, "step-wise vs joint", || {
        let n = count(&|r| r.stepwise >= r.joint);
        verdict(n >= 4, format!("step-wise at least as good as joint in {n}/{SEEDS} seeds"))
    });
    report.run(11, "timing direction", || {
        let pruned = &ok.first().ok_or_else(|| sepprune::Error::InvalidArgument("no pruned model".into()))?.pruned;
        let a = timing_harness(&full[0], LENGTH, 1000, TimingMode::Forward)?;
        let b = timing_harness(pruned, LENGTH, 1000, TimingMode::Forward)?;
        verdict(b <= a, format!("original {a:.3} ms, pruned {b:.3} ms per forward over 1000 runs"))
    });
    report.run(12, "determinism", || criterion_determinism(&full[0], &data));

    println!(
        "{} of 12 criteria passed in {:.1} s",
        12 - report.failures.len(),
        start.elapsed().as_secs_f64()
    );
    if !report.failures.is_empty() {
        println!("failed: {:?}", report.failures);
        std::process::exit(1);
    }
}
