use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use weakshot_core::evalkit::{self, curve_csv, GtIndex};
use weakshot_core::synthdata::{self, CorpusConfig, ManifestBox};
use weakshot_core::trainer::{self, Ablation, Dataset, EvalContext, TrainingConfig, TrainingState};
use weakshot_core::{config, simnet, Error, Result};

/// Relative `--out` paths resolve against this directory when it is set.
const OUT_ROOT_VAR: &str = "WEAKSHOT_OUT_ROOT";
const MAX_SWEEP_VALUES: usize = 8;

#[derive(Parser)]
#[command(name = "weakshot", version, about = "Weak-shot object detection on a synthetic shapes corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the iterative training pipeline.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = AblationArg::Full)]
        ablation: AblationArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Also retrain a clean detector on the final pseudo boxes.
        #[arg(long)]
        distill: bool,
        /// Skip the similarity-network evaluation after training.
        #[arg(long)]
        skip_similarity: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::TargetTest)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// One pipeline run per value of a hyperparameter.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, num_args = 1.., required = true)]
        values: Vec<f64>,
        /// Seeds per value (defaults to the config seed).
        #[arg(long, num_args = 1..)]
        seeds: Vec<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    NoMask,
    NoSim,
    CosineSim,
    MaskB2,
    Plain,
}

impl AblationArg {
    fn ablation(self) -> Ablation {
        match self {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoMask => Ablation::NoMask,
            AblationArg::NoSim => Ablation::NoSim,
            AblationArg::CosineSim => Ablation::CosineSim,
            AblationArg::MaskB2 => Ablation::MaskB2,
            AblationArg::Plain => Ablation::Plain,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    TargetTest,
    TargetTrain,
    SourceVal,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SweepParam {
    Alpha,
    Beta,
    Gamma,
    #[value(name = "K")]
    K,
    #[value(name = "M")]
    M,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
            SweepParam::Gamma => "gamma",
            SweepParam::K => "K",
            SweepParam::M => "M",
        }
    }

    fn apply(self, cfg: &mut TrainingConfig, v: f64) -> Result<()> {
        let count = || {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::config(self.name(), format!("{v} is not a positive integer")))
            }
        };
        match self {
            SweepParam::Alpha => cfg.alpha = v,
            SweepParam::Beta => cfg.beta = v,
            SweepParam::Gamma => cfg.gamma = v,
            SweepParam::K => cfg.k = count()?,
            SweepParam::M => cfg.m = count()?,
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: String,
    config_hash: String,
    corpus_hash: String,
    started_unix: u64,
    finished_unix: u64,
    outputs: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::NumericAbort { .. } => 3,
        Error::Mismatch(_) | Error::Checkpoint(_) | Error::Manifest { .. } | Error::UnknownCategory { .. } | Error::Image { .. } => 4,
        _ => 1,
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn out_dir(out: &Path) -> Result<PathBuf> {
    let dir = match std::env::var_os(OUT_ROOT_VAR) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, text: &str, outputs: &mut Vec<String>) -> Result<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    outputs.push(name.to_string());
    Ok(())
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn training_config(path: Option<&Path>) -> Result<TrainingConfig> {
    match path {
        Some(p) => config::from_json_file(p),
        None => Ok(TrainingConfig::default()),
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config: cfg_path, out, seed } => {
            let mut cfg: CorpusConfig = match cfg_path {
                Some(p) => config::from_json_file(&p)?,
                None => CorpusConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let dir = out_dir(&out)?;
            let (corpus, held) = synthdata::generate_corpus(&cfg)?;
            synthdata::save_corpus(&corpus, &held, &dir)?;
            println!("{}", synthdata::corpus_hash(&corpus, &held));
            Ok(())
        }
        Command::Train { config: cfg_path, corpus, out, ablation, seed, iterations, distill, skip_similarity } => {
            let started = now();
            let mut cfg = training_config(cfg_path.as_deref())?;
            ablation.ablation().apply(&mut cfg);
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = iterations {
                cfg.iterations = t;
            }
            cfg.distill |= distill;
            cfg.validate()?;
            let dir = out_dir(&out)?;
            let (corpus, held) = synthdata::load_corpus(&corpus)?;
            let corpus_hash = synthdata::corpus_hash(&corpus, &held);
            let data = Dataset::from_corpus(&corpus)?;
            let ctx = EvalContext::new(&held);
            let mut outputs = Vec::new();
            let mut similarity = None;
            let result = trainer::run_pipeline_with(&cfg, &data, &ctx, |st, rec| {
                let (ckpt, state) = trainer::save_checkpoint(st, rec, &dir.join("checkpoints"))?;
                for p in [ckpt, state] {
                    outputs.push(p.strip_prefix(&dir).unwrap_or(&p).display().to_string());
                }
                let pool: BTreeMap<&String, Vec<ManifestBox>> = st.pseudo_pool.iter().map(|(id, ps)| (id, ps.iter().map(|p| p.to_manifest_box()).collect())).collect();
                write(&dir, &format!("pseudo/iter_{}.json", st.iteration), &json(&pool), &mut outputs)?;
                if !skip_similarity && st.iteration == st.cfg.iterations {
                    similarity = Some(trainer::similarity_eval(st, 0.5, 64)?);
                }
                Ok(())
            });
            let result = match result {
                Ok(r) => r,
                Err(e) => {
                    if let Error::NumericAbort { .. } = e {
                        write(&dir, "abort.txt", &format!("{e}\n"), &mut outputs)?;
                    }
                    return Err(e);
                }
            };
            write(&dir, "metrics.csv", &curve_csv(&result.metrics()), &mut outputs)?;
            write(&dir, "iterations.json", &json(&result.records), &mut outputs)?;
            let mut losses = String::from("iteration,step,epoch,loss\n");
            for l in &result.losses {
                losses.push_str(&format!("{},{},{},{:.9}\n", l.iteration, l.step, l.epoch, l.loss));
            }
            write(&dir, "losses.csv", &losses, &mut outputs)?;
            if let Some(rows) = similarity {
                let rows: Vec<(&str, _)> = rows.iter().map(|(s, m)| (s.as_str(), *m)).collect();
                write(&dir, "similarity.csv", &simnet::similarity_csv(&rows), &mut outputs)?;
            }
            if let Some(d) = &result.distill {
                write(&dir, "distill.json", &json(d), &mut outputs)?;
            }
            write(&dir, "config.json", &json(&cfg), &mut outputs)?;
            let last = result.records.last().expect("at least one evaluation");
            println!("final mAP {:.4} CorLoc {:.4} candidate recall {:.4}", last.metrics.map, last.metrics.corloc, last.metrics.candidate_recall);
            outputs.push("run_manifest.json".into());
            let manifest = RunManifest {
                command: format!("train --ablation {}", ablation.ablation().name()),
                version: env!("CARGO_PKG_VERSION").into(),
                config_hash: cfg.hash(),
                corpus_hash,
                started_unix: started,
                finished_unix: now(),
                outputs,
            };
            fs::write(dir.join("run_manifest.json"), json(&manifest)).map_err(|e| Error::io(dir.join("run_manifest.json"), e))
        }
        Command::Eval { checkpoint, corpus, split, out } => {
            let (state, model) = trainer::load_checkpoint(&checkpoint)?;
            let (corpus, held) = synthdata::load_corpus(&corpus)?;
            let data = Dataset::from_corpus(&corpus)?;
            if state.categories != data.categories {
                return Err(Error::Mismatch(format!("checkpoint categories {:?} differ from corpus {:?}", state.categories, data.categories)));
            }
            let ctx = EvalContext::new(&held);
            let st = TrainingState::with_model(state.config.clone(), &data, model)?;
            let report = match split {
                Split::TargetTest => st.evaluate(&ctx)?.report,
                Split::TargetTrain => {
                    let samples: Vec<_> = data.target.iter().collect();
                    let (dets, _) = st.detect(&samples)?;
                    evalkit::evaluate("target_train", &data.novel_categories(), &dets, &ctx.corloc_gt, Some((&dets, &ctx.corloc_gt)), state.config.ap_mode)
                }
                Split::SourceVal => {
                    let samples: Vec<_> = data.source_val.iter().collect();
                    let (dets, boxes) = st.detect_with_classes(&samples, &data.base_ids)?;
                    let gts: GtIndex = data.source_val.iter().map(|s| (s.image_id.clone(), s.gt.clone())).collect();
                    let cats: Vec<(usize, String)> = data.categories.iter().filter(|(id, _)| data.base_ids.contains(id)).cloned().collect();
                    let mut r = evalkit::evaluate("source_val", &cats, &dets, &gts, Some((&dets, &gts)), state.config.ap_mode);
                    r.candidate_recall = evalkit::candidate_recall(&boxes, &gts, evalkit::DEFAULT_IOU);
                    r
                }
            };
            let dir = out_dir(&out)?;
            report.write(&dir.join(format!("eval_{}.csv", report.split)), &dir.join(format!("eval_{}.json", report.split)))?;
            println!("{} mAP {:.4}", report.split, report.map);
            Ok(())
        }
        Command::Sweep { config: cfg_path, corpus, out, param, values, seeds } => {
            if values.len() > MAX_SWEEP_VALUES {
                return Err(Error::config("values", format!("at most {MAX_SWEEP_VALUES} values per sweep, got {}", values.len())));
            }
            let base = training_config(cfg_path.as_deref())?;
            let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds };
            let mut runs = Vec::new();
            for &v in &values {
                for &s in &seeds {
                    let mut cfg = base.clone();
                    param.apply(&mut cfg, v)?;
                    cfg.seed = s;
                    cfg.validate()?;
                    runs.push((v, s, cfg));
                }
            }
            let (corpus, held) = synthdata::load_corpus(&corpus)?;
            let data = Dataset::from_corpus(&corpus)?;
            let ctx = EvalContext::new(&held);
            let dir = out_dir(&out)?;
            let mut csv = String::from("param,value,seed,final_mAP\n");
            for (v, s, cfg) in runs {
                let result = trainer::run_pipeline(&cfg, &data, &ctx)?;
                let map = result.records.last().map_or(0.0, |r| r.metrics.map);
                log::info!("{} = {v} seed {s}: final mAP {map:.4}", param.name());
                csv.push_str(&format!("{},{v},{s},{map:.6}\n", param.name()));
                fs::write(dir.join("sweep.csv"), &csv).map_err(|e| Error::io(dir.join("sweep.csv"), e))?;
            }
            print!("{csv}");
            Ok(())
        }
    }
}
