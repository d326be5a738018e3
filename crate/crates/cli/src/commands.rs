use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use vdpcr_core::corpus::{build_vocab, generate_synthetic, load_corpus, save_corpus, Dialog};
use vdpcr_core::encoder::{write_attention_dump, write_mention_sidecar};
use vdpcr_core::headselect::{attention_records, head_margins, margin_report_tsv, select_heads};
use vdpcr_core::metrics::{report_tsv, Prf, ReportRow};
use vdpcr_core::numerics::write_atomic;
use vdpcr_core::pipeline::{
    bootstrap_pseudo_labels, ensemble, epoch_log_tsv, evaluate, evaluate_pcr, rank_dialogs,
    resolve, strip_labels, summarize_rounds, train_phase0, train_phase1, train_phase2, Model,
    PcrModeKind, PipelineConfig, RankEvaluation, RoundScores, TrainReport,
};
use vdpcr_core::pruning::{prune_records, prune_records_jsonl, PruneRule};
use vdpcr_core::taskheads::PcrMode;

use crate::config;
use crate::error::CliError;
use crate::manifest::{hash_file, now_unix, InputFile, RunManifest};
use crate::{Command, Common};

/// Bookkeeping for one command: effective config, inputs read, outputs written.
struct Run {
    name: &'static str,
    common: Common,
    cfg: PipelineConfig,
    inputs: Vec<InputFile>,
    outputs: Vec<PathBuf>,
    started: f64,
}

impl Run {
    fn start(name: &'static str, common: Common) -> Result<Self, CliError> {
        let started = now_unix();
        if let Some(n) = common.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
        }
        let mut cfg = config::load(common.config.as_deref(), &common.overrides)?;
        if let Some(seed) = common.seed {
            for phase in [&mut cfg.phase0, &mut cfg.phase1, &mut cfg.phase2] {
                phase.seed = seed;
            }
        }
        fs::create_dir_all(&common.out)?;
        let mut run = Self {
            name,
            common,
            cfg,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started,
        };
        if let Some(p) = run.common.config.clone() {
            run.inputs.push(hash_file(&p)?);
        }
        Ok(run)
    }

    fn seed(&self) -> u64 {
        self.common.seed.unwrap_or(0)
    }

    fn input(&mut self, path: &Path) -> Result<PathBuf, CliError> {
        self.inputs.push(hash_file(path)?);
        Ok(path.to_path_buf())
    }

    fn corpus(&mut self, path: &Path) -> Result<Vec<Dialog>, CliError> {
        let path = self.input(path)?;
        Ok(load_corpus(&path, None)?.0)
    }

    fn model(&mut self, path: &Path) -> Result<Model<f64>, CliError> {
        let path = self.input(path)?;
        Ok(Model::load(&path)?.0)
    }

    /// Path of an output file; refuses to overwrite any input.
    fn output(&mut self, name: &str) -> Result<PathBuf, CliError> {
        let path = self.common.out.join(name);
        let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
        if self.inputs.iter().any(|i| canon(&i.path) == canon(&path)) {
            return Err(CliError::Config(format!(
                "output {} would overwrite an input",
                path.display()
            )));
        }
        self.outputs.push(path.clone());
        Ok(path)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.output(name)?;
        write_atomic(&path, bytes)?;
        Ok(())
    }

    fn save_model(&mut self, model: &Model<f64>, info: Value) -> Result<(), CliError> {
        let path = self.output("model.ckpt")?;
        model.save(&path, &info)?;
        Ok(())
    }

    fn save_corpus(&mut self, name: &str, dialogs: &[Dialog]) -> Result<(), CliError> {
        let path = self.output(name)?;
        save_corpus(&path, dialogs)?;
        Ok(())
    }

    fn finish(self, metrics: Value) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.name.to_string(),
            args: std::env::args().collect(),
            seed: self.seed(),
            config: config::to_toml(&self.cfg),
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix: self.started,
            finished_unix: now_unix(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        manifest.write(&self.common.out)?;
        if self.common.json {
            println!("{}", serde_json::to_string(&metrics)?);
        }
        Ok(())
    }
}

fn train_info(phase: &str, seed: u64, report: &TrainReport) -> Value {
    json!({
        "phase": phase,
        "seed": seed,
        "best_epoch": report.best_epoch,
        "best_value": report.best_value,
    })
}

#[derive(Serialize, Deserialize)]
struct ScoreLine {
    dialog_id: String,
    round: usize,
    gt_index: Option<usize>,
    scores: Vec<f64>,
}

fn scores_jsonl(rounds: &[RoundScores]) -> Result<String, CliError> {
    let mut out = String::new();
    for r in rounds {
        let line = ScoreLine {
            dialog_id: r.dialog_id.clone(),
            round: r.round,
            gt_index: r.result.gt_index,
            scores: r.result.scores.clone(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

fn pcr_rows(split: &str, prf: &Prf) -> Vec<ReportRow> {
    vec![
        ReportRow::new(split, "all", "pcr_precision", prf.precision),
        ReportRow::new(split, "all", "pcr_recall", prf.recall),
        ReportRow::new(split, "all", "pcr_f1", prf.f1),
    ]
}

fn ranking_json(rule: PruneRule, eval: &RankEvaluation) -> Value {
    json!({
        "rule": rule.as_str(),
        "retrieval": eval.retrieval,
        "ndcg": eval.ndcg,
        "ndcg_flagged": eval.ndcg_flagged,
    })
}

#[derive(Serialize, Deserialize)]
struct HeadsFile {
    a_thres: f64,
    heads: Vec<(usize, usize)>,
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenSynthetic {
            common,
            n,
            val,
            test,
            unlabeled_fraction,
        } => {
            if !(0.0..=1.0).contains(&unlabeled_fraction) {
                return Err(CliError::Config(format!(
                    "--unlabeled-fraction must lie in [0, 1], got {unlabeled_fraction}"
                )));
            }
            let mut run = Run::start("gen-synthetic", common)?;
            let all = generate_synthetic(n + val + test, run.seed(), &run.cfg.synthetic)?;
            let (train, rest) = all.split_at(n);
            let n_unlabeled = (n as f64 * unlabeled_fraction).round() as usize;
            let (labeled, unlabeled) = train.split_at(n - n_unlabeled);
            run.save_corpus("train.jsonl", labeled)?;
            if n_unlabeled > 0 {
                run.save_corpus("unlabeled.jsonl", &strip_labels(unlabeled))?;
            }
            if val > 0 {
                run.save_corpus("val.jsonl", &rest[..val])?;
            }
            if test > 0 {
                run.save_corpus("test.jsonl", &rest[val..])?;
            }
            let counts =
                json!({"train": labeled.len(), "unlabeled": n_unlabeled, "val": val, "test": test});
            info!("wrote {counts}");
            run.finish(counts)
        }
        Command::TrainPhase0 { common, train, val } => {
            let mut run = Run::start("train-phase0", common)?;
            let train = run.corpus(&train)?;
            let val = run.corpus(&val)?;
            let vocab = build_vocab(&train);
            let model_cfg = run.cfg.model.config_for(&vocab, &train)?;
            let mut model = Model::<f64>::init(model_cfg, vocab, run.cfg.phase0.seed)?;
            let report = train_phase0(&mut model, &train, &val, &run.cfg.phase0)?;
            let prf = evaluate_pcr(&model, &val)?;
            info!(
                "phase0 best epoch {} val f1 {:.4}",
                report.best_epoch, prf.f1
            );
            run.save_model(&model, train_info("phase0", run.cfg.phase0.seed, &report))?;
            run.write("train_log.tsv", epoch_log_tsv(&report.epochs).as_bytes())?;
            run.write("report.tsv", report_tsv(&pcr_rows("val", &prf)).as_bytes())?;
            run.finish(json!({"best_epoch": report.best_epoch, "val": prf}))
        }
        Command::PseudoLabel {
            common,
            teacher,
            labeled,
            unlabeled,
            val,
        } => {
            let mut run = Run::start("pseudo-label", common)?;
            let teacher = run.model(&teacher)?;
            let labeled = run.corpus(&labeled)?;
            let unlabeled = run.corpus(&unlabeled)?;
            let val = run.corpus(&val)?;
            let b = bootstrap_pseudo_labels(&teacher, &labeled, &unlabeled, &val, &run.cfg.phase0)?;
            let teacher_prf = evaluate_pcr(&teacher, &val)?;
            let prf = evaluate_pcr(&b.model, &val)?;
            info!(
                "pseudo-label val f1 teacher {:.4} retrained {:.4}",
                teacher_prf.f1, prf.f1
            );
            run.save_corpus("merged.jsonl", &b.merged)?;
            run.save_model(
                &b.model,
                train_info("pseudo-label", run.cfg.phase0.seed, &b.report),
            )?;
            run.write("train_log.tsv", epoch_log_tsv(&b.report.epochs).as_bytes())?;
            let mut rows = pcr_rows("val_teacher", &teacher_prf);
            rows.extend(pcr_rows("val", &prf));
            run.write("report.tsv", report_tsv(&rows).as_bytes())?;
            run.finish(json!({"teacher": teacher_prf, "val": prf, "merged": b.merged.len()}))
        }
        Command::AnalyzeHeads {
            common,
            checkpoint,
            corpus,
            dump,
        } => {
            let mut run = Run::start("analyze-heads", common)?;
            let model = run.model(&checkpoint)?;
            let dialogs = run.corpus(&corpus)?;
            let margins = head_margins(
                model.encoder(),
                &model.store,
                &dialogs,
                &model.vocab,
                &model.assembly(),
            )?;
            let a_thres = run.cfg.phase1.a_thres;
            let heads = select_heads(&margins, a_thres);
            info!("selected heads {heads:?}");
            run.write("margins.tsv", margin_report_tsv(&margins).as_bytes())?;
            let file = HeadsFile { a_thres, heads };
            run.write(
                "heads.json",
                (serde_json::to_string_pretty(&file)? + "\n").as_bytes(),
            )?;
            if dump {
                let records = attention_records(
                    model.encoder(),
                    &model.store,
                    &dialogs,
                    &model.vocab,
                    &model.assembly(),
                )?;
                let mut bin = Vec::new();
                write_attention_dump(BufWriter::new(&mut bin), &records)?;
                run.write("attention.bin", &bin)?;
                let mut side = Vec::new();
                write_mention_sidecar(BufWriter::new(&mut side), &records)?;
                run.write("attention.mentions", &side)?;
            }
            run.finish(json!({"heads": file.heads, "margins": margins}))
        }
        Command::TrainPhase1 {
            common,
            init,
            train,
            val,
            heads,
        } => {
            let mut run = Run::start("train-phase1", common)?;
            let base = run.model(&init)?;
            let train = run.corpus(&train)?;
            let val = run.corpus(&val)?;
            let cfg = run.cfg.phase1.clone();
            let mode = match cfg.pcr_mode {
                PcrModeKind::LastLayer => PcrMode::LastLayer,
                PcrModeKind::SelectedHeads => {
                    let path = heads.ok_or_else(|| {
                        CliError::Config(
                            "phase1.pcr_mode = \"selected_heads\" needs --heads".into(),
                        )
                    })?;
                    let path = run.input(&path)?;
                    let file: HeadsFile = serde_json::from_str(&fs::read_to_string(&path)?)?;
                    PcrMode::SelectedHeads(file.heads)
                }
            };
            let mut model = base.with_pcr_mode(mode, cfg.seed)?;
            let report = train_phase1(&mut model, &train, &val, &cfg)?;
            let (_, eval) = evaluate(&model, &val, cfg.prune_rule)?;
            run.save_model(&model, train_info("phase1", cfg.seed, &report))?;
            run.write("train_log.tsv", epoch_log_tsv(&report.epochs).as_bytes())?;
            run.write("report.tsv", report_tsv(&eval.rows("val")).as_bytes())?;
            run.finish(ranking_json(cfg.prune_rule, &eval))
        }
        Command::Prune {
            common,
            corpus,
            rule,
        } => {
            let mut run = Run::start("prune", common)?;
            let dialogs = run.corpus(&corpus)?;
            let records = prune_records(&dialogs, rule);
            run.write("prune.jsonl", prune_records_jsonl(&records)?.as_bytes())?;
            run.finish(json!({"rule": rule.as_str(), "rounds": records.len()}))
        }
        Command::TrainPhase2 {
            common,
            init,
            train,
            val,
        } => {
            let mut run = Run::start("train-phase2", common)?;
            let mut model = run.model(&init)?;
            let train = run.corpus(&train)?;
            let val = run.corpus(&val)?;
            let cfg = run.cfg.phase2.clone();
            let report = train_phase2(&mut model, &train, &val, &cfg)?;
            let (_, eval) = evaluate(&model, &val, cfg.prune_rule)?;
            run.save_model(&model, train_info("phase2", cfg.seed, &report))?;
            run.write("train_log.tsv", epoch_log_tsv(&report.epochs).as_bytes())?;
            run.write("report.tsv", report_tsv(&eval.rows("val")).as_bytes())?;
            run.finish(ranking_json(cfg.prune_rule, &eval))
        }
        Command::Evaluate {
            common,
            checkpoint,
            corpus,
            rule,
        } => {
            let mut run = Run::start("evaluate", common)?;
            let model = run.model(&checkpoint)?;
            let dialogs = run.corpus(&corpus)?;
            let (rounds, eval) = evaluate(&model, &dialogs, rule)?;
            let prf = evaluate_pcr(&model, &dialogs)?;
            let mut rows = eval.rows("eval");
            rows.extend(pcr_rows("eval", &prf));
            run.write("report.tsv", report_tsv(&rows).as_bytes())?;
            run.write("scores.jsonl", scores_jsonl(&rounds)?.as_bytes())?;
            let mut out = ranking_json(rule, &eval);
            out["pcr"] = serde_json::to_value(prf)?;
            run.finish(out)
        }
        Command::Ensemble {
            common,
            checkpoints,
            corpus,
            rule,
        } => {
            let mut run = Run::start("ensemble", common)?;
            let dialogs = run.corpus(&corpus)?;
            let mut members = Vec::new();
            for c in &checkpoints {
                let model = run.model(c)?;
                members.push(rank_dialogs(&model, &dialogs, rule)?);
            }
            let rounds = ensemble(&members)?;
            let eval = summarize_rounds(&rounds)?;
            run.write("report.tsv", report_tsv(&eval.rows("ensemble")).as_bytes())?;
            run.write("scores.jsonl", scores_jsonl(&rounds)?.as_bytes())?;
            let mut out = ranking_json(rule, &eval);
            out["members"] = json!(checkpoints.len());
            run.finish(out)
        }
        Command::Resolve {
            common,
            checkpoint,
            corpus,
        } => {
            let mut run = Run::start("resolve", common)?;
            let model = run.model(&checkpoint)?;
            let dialogs = run.corpus(&corpus)?;
            let resolved = resolve(&model, &dialogs)?;
            run.save_corpus("resolved.jsonl", &resolved)?;
            let pronouns: usize = resolved.iter().map(|d| d.coref.len()).sum();
            run.finish(json!({"dialogs": resolved.len(), "pronouns": pronouns}))
        }
    }
}
