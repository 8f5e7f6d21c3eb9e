use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use serde_json::json;
use sepprune::data::{make_dataset, AudioBatch, DatasetManifest};
use sepprune::mask::{
    encode_logits, finalize_at, finalize_masks, init_masks, joint_optimize, learn_masks, load_mask_file,
    save_mask_file, MaskSet,
};
use sepprune::metrics::Improvement;
use sepprune::model::{build_toy_sepnet, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, GroupMasks, ModelGraph};
use sepprune::profiler::{profile, timing_harness, TimingMode, TABLE_HEADER};
use sepprune::pruner::{apply_prune, blueprint_from_masks, magnitude_mask, random_mask};
use sepprune::train::{evaluate, finetune, log_csv, train, EvalRecord, EVAL_HEADER};

use crate::config::RunConfig;
use crate::{Cli, Command, UsageError, VERSION};

const MAC_NOTE: &str = "MAC counts follow this tool's counting convention for the toy network at the stated input \
length; absolute comparison with published GMac figures for other architectures is out of scope.";

struct Ctx {
    cfg: RunConfig,
    hash: String,
    root: PathBuf,
    force: bool,
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let ctx = Ctx {
        hash: cfg.hash(),
        cfg,
        root: cli.out.clone(),
        force: cli.force,
    };
    match &cli.command {
        Command::Profile {
            checkpoint,
            length,
            timing_runs,
        } => ctx.profile(checkpoint.as_deref(), *length, *timing_runs),
        Command::Train => ctx.train(),
        Command::LearnMask { checkpoint } => ctx.learn_mask(checkpoint.as_deref()),
        Command::Prune { checkpoint, masks } => ctx.prune(checkpoint.as_deref(), masks.as_deref()),
        Command::Finetune { checkpoint } => ctx.finetune(checkpoint.as_deref()),
        Command::Eval => ctx.eval(),
        Command::Ablate { checkpoint } => ctx.ablate(checkpoint.as_deref()),
        Command::ShowConfig => {
            print!("{}", ctx.cfg.to_toml()?);
            Ok(())
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn counts(masks: &GroupMasks) -> BTreeMap<usize, usize> {
    masks.0.keys().map(|&g| (g, masks.kept_count(g))).collect()
}

fn table(records: &[EvalRecord]) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for r in records {
        s += &r.table_row();
        s.push('\n');
    }
    s
}

impl Ctx {
    /// Creates the stage directory, refusing to replace existing outputs
    /// unless forced.
    fn claim(&self, stage: &str, files: &[String]) -> Result<PathBuf> {
        let dir = self.root.join(stage);
        if !self.force {
            if let Some(f) = files.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
                return Err(UsageError(format!(
                    "{} already exists; pass --force to overwrite",
                    f.display()
                ))
                .into());
            }
        }
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    /// An explicit path, or the default output of an earlier stage.
    fn input(&self, given: Option<&Path>, stage: &str, file: &str) -> Result<PathBuf> {
        match given {
            Some(p) if p.exists() => Ok(p.to_path_buf()),
            Some(p) => Err(UsageError(format!("{} does not exist", p.display())).into()),
            None => {
                let p = self.root.join(stage).join(file);
                if p.exists() {
                    Ok(p)
                } else {
                    Err(UsageError(format!(
                        "{} not found; run `sepprune {stage}` first or pass the path explicitly",
                        p.display()
                    ))
                    .into())
                }
            }
        }
    }

    fn load(&self, path: &Path) -> Result<Checkpoint> {
        let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        match &ckpt.meta.config_hash {
            Some(h) if *h != self.hash => {
                warn!("{} was produced under config {h}, current config is {}", path.display(), self.hash)
            }
            _ => {}
        }
        Ok(ckpt)
    }

    fn manifests(&self) -> Result<[DatasetManifest; 3]> {
        let d = &self.cfg.data;
        Ok(make_dataset(d.n_train, d.n_val, d.n_test, d.base_seed, d.length, &d.synth())?)
    }

    /// Synthesized splits; `which` selects train, val, test.
    fn data(&self, which: [bool; 3]) -> Result<[Vec<AudioBatch>; 3]> {
        let m = self.manifests()?;
        let mut out: [Vec<AudioBatch>; 3] = Default::default();
        for i in 0..3 {
            if which[i] {
                info!("synthesizing {} split ({} utterances)", m[i].split, m[i].len());
                out[i] = m[i].materialize()?;
            }
        }
        Ok(out)
    }

    fn record(&self, dir: &Path, name: &str, stage: &str, inputs: &[(&str, &Path)], extra: serde_json::Value) -> Result<()> {
        let inputs: BTreeMap<&str, String> = inputs.iter().map(|(k, p)| (*k, p.display().to_string())).collect();
        let doc = json!({
            "stage": stage,
            "version": VERSION,
            "config_hash": self.hash,
            "seed": self.cfg.seed,
            "data_base_seed": self.cfg.data.base_seed,
            "inputs": inputs,
            "config": self.cfg,
            "results": extra,
        });
        write(&dir.join(name), serde_json::to_string_pretty(&doc)? + "\n")
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            config_hash: Some(self.hash.clone()),
            ..CheckpointMeta::default()
        }
    }

    fn profile(&self, checkpoint: Option<&Path>, length: Option<usize>, timing_runs: usize) -> Result<()> {
        let length = length.unwrap_or(self.cfg.data.length);
        let (model, source) = match checkpoint {
            Some(p) => {
                let p = self.input(Some(p), "train", "model.sepp")?;
                (self.load(&p)?.model, p)
            }
            None => (build_toy_sepnet(&self.cfg.model, self.cfg.seed)?, PathBuf::from("<initialized>")),
        };
        let files = [
            format!("layers_L{length}.csv"),
            format!("components_L{length}.csv"),
            format!("run_L{length}.json"),
        ];
        let dir = self.claim("profile", &files)?;
        let rep = profile(&model, length)?;
        write(&dir.join(&files[0]), rep.layers_csv())?;
        let mut comp = String::from("component,params,macs\n");
        for c in &rep.components {
            comp += &format!("{},{},{}\n", c.component.as_str(), c.params, c.macs);
        }
        comp += &format!("total,{},{}\n", rep.total_params, rep.total_macs);
        write(&dir.join(&files[1]), &comp)?;
        let row = rep.table_row(&model.desc.name);
        let timing = if timing_runs > 0 {
            Some(timing_harness(&model, length, timing_runs, TimingMode::Forward)?)
        } else {
            None
        };
        println!("{TABLE_HEADER}\n{}\n{}", row.render(), row.render_exact());
        if let Some(ms) = timing {
            println!("mean forward time over {timing_runs} runs: {ms:.3} ms");
        }
        println!("{MAC_NOTE}");
        self.record(
            &dir,
            &files[2],
            "profile",
            &[("model", &source)],
            json!({ "length": length, "table": row, "forward_ms": timing, "note": MAC_NOTE }),
        )
    }

    fn train(&self) -> Result<()> {
        let files = ["model.sepp", "log.csv", "train.manifest", "val.manifest", "test.manifest", "run.json"]
            .map(String::from);
        let dir = self.claim("train", &files)?;
        let manifests = self.manifests()?;
        for m in &manifests {
            m.save(&dir.join(format!("{}.manifest", m.split)))?;
        }
        let [tr, va, _] = self.data([true, true, false])?;
        let model = build_toy_sepnet(&self.cfg.model, self.cfg.seed)?;
        let out = train(&model, &tr, &va, &self.cfg.train_config())?;
        let mut ckpt = out.checkpoint;
        ckpt.meta.config_hash = Some(self.hash.clone());
        save_checkpoint(&ckpt, &dir.join("model.sepp"))?;
        write(&dir.join("log.csv"), log_csv(&out.log))?;
        println!(
            "trained {} epochs; best validation SI-SDRi {:.3} dB at epoch {:?}",
            out.log.len(),
            ckpt.meta.best_val_sisdri.unwrap_or(f64::NAN),
            ckpt.meta.epoch
        );
        self.record(
            &dir,
            "run.json",
            "train",
            &[],
            json!({ "epochs_run": out.log.len(), "best_epoch": ckpt.meta.epoch, "best_val_sisdri": ckpt.meta.best_val_sisdri }),
        )
    }

    fn learn(&self, model: &ModelGraph, train_set: &[AudioBatch], iterations: usize) -> Result<MaskSet> {
        let init = init_masks(model, self.cfg.mask.eps, self.cfg.mask.tau, self.cfg.seed)?;
        Ok(learn_masks(model, &init, train_set, &self.cfg.learn_config(iterations))?)
    }

    fn learn_mask(&self, checkpoint: Option<&Path>) -> Result<()> {
        let src = self.input(checkpoint, "train", "model.sepp")?;
        let files = ["masks.txt", "logits.bin", "run.json"].map(String::from);
        let dir = self.claim("learn-mask", &files)?;
        let model = self.load(&src)?.model;
        let [tr, _, _] = self.data([true, false, false])?;
        let set = self.learn(&model, &tr, self.cfg.mask.iterations)?;
        let fin = finalize_masks(&set);
        save_mask_file(&fin, &dir.join("masks.txt"))?;
        write(&dir.join("logits.bin"), encode_logits(&set))?;
        for g in model.prunable_groups() {
            println!("group {} ({}): kept {}/{}", g.id, g.name, fin.masks.kept_count(g.id), g.channels);
        }
        self.record(
            &dir,
            "run.json",
            "learn-mask",
            &[("model", &src)],
            json!({ "kept": counts(&fin.masks), "forced_groups": fin.forced }),
        )
    }

    fn prune(&self, checkpoint: Option<&Path>, masks: Option<&Path>) -> Result<()> {
        let src = self.input(checkpoint, "train", "model.sepp")?;
        let mask_path = self.input(masks, "learn-mask", "masks.txt")?;
        let files = ["pruned.sepp", "blueprint.json", "profile.csv", "run.json"].map(String::from);
        let dir = self.claim("prune", &files)?;
        let model = self.load(&src)?.model;
        let masks = load_mask_file(&mask_path)?;
        let bp = blueprint_from_masks(&model, &masks)?;
        let pruned = apply_prune(&model, &bp)?;
        write(&dir.join("blueprint.json"), serde_json::to_string_pretty(&bp)? + "\n")?;
        save_checkpoint(
            &Checkpoint {
                model: pruned.clone(),
                meta: CheckpointMeta {
                    blueprint: Some(bp),
                    ..self.meta()
                },
            },
            &dir.join("pruned.sepp"),
        )?;
        let len = self.cfg.data.length;
        let (a, b) = (profile(&model, len)?, profile(&pruned, len)?);
        let csv = format!(
            "model,params,macs\noriginal,{},{}\npruned,{},{}\n",
            a.total_params, a.total_macs, b.total_params, b.total_macs
        );
        write(&dir.join("profile.csv"), &csv)?;
        print!("{csv}");
        self.record(
            &dir,
            "run.json",
            "prune",
            &[("model", &src), ("masks", &mask_path)],
            json!({ "params": [a.total_params, b.total_params], "macs": [a.total_macs, b.total_macs], "length": len }),
        )
    }

    fn finetune(&self, checkpoint: Option<&Path>) -> Result<()> {
        let src = self.input(checkpoint, "prune", "pruned.sepp")?;
        let files = ["model.sepp", "log.csv", "run.json"].map(String::from);
        let dir = self.claim("finetune", &files)?;
        let input = self.load(&src)?;
        let [tr, va, _] = self.data([true, true, false])?;
        let out = finetune(&input.model, &tr, &va, &self.cfg.train_config(), self.cfg.finetune.epochs)?;
        let mut ckpt = out.checkpoint;
        ckpt.meta.config_hash = Some(self.hash.clone());
        ckpt.meta.blueprint = input.meta.blueprint;
        save_checkpoint(&ckpt, &dir.join("model.sepp"))?;
        write(&dir.join("log.csv"), log_csv(&out.log))?;
        println!(
            "fine-tuned {} epochs; validation SI-SDRi {:.3} dB",
            out.log.len(),
            ckpt.meta.best_val_sisdri.unwrap_or(f64::NAN)
        );
        self.record(
            &dir,
            "run.json",
            "finetune",
            &[("model", &src)],
            json!({ "epochs_run": out.log.len(), "best_val_sisdri": ckpt.meta.best_val_sisdri }),
        )
    }

    /// Prunes `model` under `masks`, fine-tunes with the configured budget
    /// and evaluates on the test split.
    fn prune_tune_eval(&self, model: &ModelGraph, masks: &GroupMasks, data: &[Vec<AudioBatch>; 3], name: &str) -> Result<EvalRecord> {
        let pruned = apply_prune(model, &blueprint_from_masks(model, masks)?)?;
        let tuned = finetune(&pruned, &data[0], &data[1], &self.cfg.train_config(), self.cfg.finetune.epochs)?;
        let mut rec = evaluate(&tuned.checkpoint.model, &data[2], None)?;
        rec.model = name.into();
        Ok(rec)
    }

    fn eval(&self) -> Result<()> {
        let orig_path = self.input(None, "train", "model.sepp")?;
        let mask_path = self.input(None, "learn-mask", "masks.txt")?;
        let tuned_path = self.input(None, "finetune", "model.sepp")?;
        let methods = ["original", "random", "magnitude", "sepprune"];
        let mut files: Vec<String> = ["table.csv", "records.json", "report.txt", "run.json"].map(String::from).to_vec();
        files.extend(methods.iter().map(|m| format!("{m}_utterances.csv")));
        let dir = self.claim("eval", &files)?;

        let original = self.load(&orig_path)?.model;
        let tuned = self.load(&tuned_path)?.model;
        let masks = load_mask_file(&mask_path)?;
        masks.check_against(&original)?;
        let kept = counts(&masks);
        let data = self.data([true, true, true])?;

        let mut records = Vec::new();
        let mut rec = evaluate(&original, &data[2], None)?;
        rec.model = "Original".into();
        records.push(rec);

        let draws = self.cfg.eval.random_masks;
        let mut runs = Vec::with_capacity(draws);
        for i in 0..draws {
            let rm = random_mask(&original, &kept, self.cfg.seed.wrapping_mul(1000).wrapping_add(i as u64))?;
            info!("random baseline {}/{draws}", i + 1);
            runs.push(self.prune_tune_eval(&original, &rm, &data, "Random")?);
        }
        let imps: Vec<Improvement> = (0..data[2].len())
            .map(|u| Improvement {
                sdri: runs.iter().map(|r| r.sdri[u]).sum::<f64>() / draws as f64,
                si_sdri: runs.iter().map(|r| r.si_sdri[u]).sum::<f64>() / draws as f64,
            })
            .collect();
        records.push(EvalRecord::from_improvements("Random", runs[0].params, runs[0].macs, &imps));

        let mm = magnitude_mask(&original, &kept)?;
        records.push(self.prune_tune_eval(&original, &mm, &data, "Magnitude")?);

        let mut rec = evaluate(&tuned, &data[2], None)?;
        rec.model = "SepPrune".into();
        records.push(rec);

        let t = table(&records);
        write(&dir.join("table.csv"), &t)?;
        write(&dir.join("records.json"), serde_json::to_string_pretty(&records)? + "\n")?;
        for (m, r) in methods.iter().zip(&records) {
            write(&dir.join(format!("{m}_utterances.csv")), r.per_utterance_csv())?;
        }
        let report = format!(
            "{t}\nParams and MACs at input length {}; SDRi and SI-SDRi in dB, means over {} test utterances; \
random row averages {draws} masks.\n{MAC_NOTE}\n",
            self.cfg.data.length,
            data[2].len()
        );
        write(&dir.join("report.txt"), &report)?;
        print!("{report}");
        self.record(
            &dir,
            "run.json",
            "eval",
            &[("original", &orig_path), ("masks", &mask_path), ("finetuned", &tuned_path)],
            json!({ "means": records.iter().map(|r| json!({"method": r.model, "sdri": r.mean_sdri, "si_sdri": r.mean_si_sdri})).collect::<Vec<_>>() }),
        )
    }

    fn ablate(&self, checkpoint: Option<&Path>) -> Result<()> {
        let src = self.input(checkpoint, "train", "model.sepp")?;
        let files = ["eps_sweep.csv", "iterations.csv", "joint_vs_stepwise.csv", "run.json"].map(String::from);
        let dir = self.claim("ablate", &files)?;
        let model = self.load(&src)?.model;
        let data = self.data([true, true, true])?;
        let base_iters = self.cfg.mask.iterations;

        let learned = self.learn(&model, &data[0], base_iters)?;
        let mut eps_rows = Vec::new();
        for &eps in &self.cfg.ablate.eps {
            info!("threshold {eps}");
            let masks = finalize_at(&learned, eps).masks;
            eps_rows.push(self.prune_tune_eval(&model, &masks, &data, &format!("{eps}"))?);
        }
        let eps_csv = table(&eps_rows).replacen("Method", "eps", 1);
        write(&dir.join("eps_sweep.csv"), &eps_csv)?;

        let mut iter_rows = Vec::new();
        let mut stepwise = None;
        for &n in &self.cfg.ablate.iterations {
            info!("{n} mask iterations");
            let set = if n == base_iters { learned.clone() } else { self.learn(&model, &data[0], n)? };
            let rec = self.prune_tune_eval(&model, &finalize_masks(&set).masks, &data, &n.to_string())?;
            if n == base_iters {
                stepwise = Some(rec.clone());
            }
            iter_rows.push(rec);
        }
        let iter_csv = table(&iter_rows).replacen("Method", "iterations", 1);
        write(&dir.join("iterations.csv"), &iter_csv)?;

        let mut stepwise = match stepwise {
            Some(r) => r,
            None => self.prune_tune_eval(&model, &finalize_masks(&learned).masks, &data, "step-wise")?,
        };
        stepwise.model = "step-wise".into();
        let init = init_masks(&model, self.cfg.mask.eps, self.cfg.mask.tau, self.cfg.seed)?;
        let (jm, jw) = joint_optimize(
            &model,
            &init,
            &data[0],
            &self.cfg.learn_config(base_iters),
            self.cfg.train.lr,
            self.cfg.train.adam,
        )?;
        let joint = self.prune_tune_eval(&jw, &finalize_masks(&jm).masks, &data, "joint")?;
        let jv_csv = table(&[stepwise.clone(), joint.clone()]);
        write(&dir.join("joint_vs_stepwise.csv"), &jv_csv)?;
        print!("{eps_csv}\n{iter_csv}\n{jv_csv}\n{MAC_NOTE}\n");
        self.record(
            &dir,
            "run.json",
            "ablate",
            &[("model", &src)],
            json!({ "stepwise_si_sdri": stepwise.mean_si_sdri, "joint_si_sdri": joint.mean_si_sdri }),
        )
    }
}
