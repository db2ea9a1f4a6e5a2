//! `nspbert`: corpus generation, pre-training, zero-shot evaluation,
//! few-shot tuning and reporting from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use nsp_bert::checkpoint::{vocab_path, Checkpoint};
use nsp_bert::corpus::{self, generate_corpus, generate_documents, sample_nsp_pairs, CorpusConfig};
use nsp_bert::data::{kshot_split, load_jsonl, Example, DEFAULT_SEEDS};
use nsp_bert::harness::{
    evaluate, make_synthetic_task, run_experiment, summary_csv, EvalMode, ExperimentConfig,
    ExperimentReport, Method, SyntheticConfig, SyntheticKind,
};
use nsp_bert::pretrain::{corpus_vocab, nsp_accuracy, pretrain, PretrainConfig};
use nsp_bert::prompting::{Strategy, TaskConfig};
use nsp_bert::scoring::{
    probability_histogram, read_scored, samples_contrast, score_dataset, thresholds_from_dev,
    write_histogram, write_scored, LabelDistribution, Score,
};
use nsp_bert::tuning::{results_csv, TuningConfig, Variant};
use nsp_bert::{EncoderConfig, EncoderModel, Preset, Vocab};

#[derive(Parser)]
#[command(
    name = "nspbert",
    version,
    about = "Prompt learning through a next-sentence-prediction head"
)]
struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the command (corpus, pre-training or split seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "micro.ckpt")]
    checkpoint: PathBuf,
    /// Output file of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the synthetic pre-training corpus as JSONL.
    GenCorpus,
    /// Pre-trains an encoder on MLM + NSP and saves the checkpoint.
    Pretrain {
        /// Corpus JSONL; generated from the config when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Zero-shot evaluation on the test set.
    EvalZeroshot {
        #[arg(long, value_enum, default_value = "nsp")]
        mode: ZeroShotMode,
        /// Also writes the per-sample probabilities as JSONL.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Maps scored samples to labels by samples-contrast or thresholds.
    MapSamples {
        /// Scored test samples (JSONL from `eval-zeroshot --scores`).
        #[arg(long)]
        scores: PathBuf,
        /// Scored development samples with gold labels.
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Task configuration JSON.
        #[arg(long)]
        task: PathBuf,
    },
    /// Few-shot NSP-tuning over the seed suite.
    NspTune {
        #[arg(long, default_value = "coupled_bce")]
        variant: Variant,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Fine-tuning baseline with a fresh linear head.
    FineTune {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Every NSP-tuning variant on identical splits.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Summary CSV of saved experiment reports.
    Report {
        /// Report JSON files written by `nsp-tune`, `fine-tune` or `ablate`.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Histogram of scored probabilities.
    Histogram {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ZeroShotMode {
    Nsp,
    Pet,
    SamplesContrast,
    Thresholds,
}

/// Task source: user files, or the synthetic task of the config.
#[derive(Args)]
struct DataArgs {
    #[arg(long, requires_all = ["pool", "test"])]
    task: Option<PathBuf>,
    /// Labelled pool for K-shot sampling (JSONL).
    #[arg(long, requires = "task")]
    pool: Option<PathBuf>,
    #[arg(long, requires = "task")]
    test: Option<PathBuf>,
    /// Synthetic task kind when no task files are given.
    #[arg(long, value_enum)]
    kind: Option<Kind>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Topic,
    Pair,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    corpus: CorpusConfig,
    preset: Option<Preset>,
    pretrain: PretrainConfig,
    task: SyntheticConfig,
    k: Option<usize>,
    seeds: Option<Vec<u64>>,
    tuning: TuningConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let diverged = e.chain().any(|c| {
                c.downcast_ref::<nsp_bert::Error>()
                    .is_some_and(|e| e.is_divergence())
            });
            ExitCode::from(if diverged { 3 } else { 2 })
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn write_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_model(checkpoint: &Path) -> Result<(EncoderModel, Vocab)> {
    let ck = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let vpath = vocab_path(checkpoint);
    let vocab = Vocab::load(&vpath).with_context(|| format!("loading {}", vpath.display()))?;
    if vocab.len() != ck.model.config().vocab_size {
        bail!(
            "vocabulary {} has {} tokens, checkpoint expects {}",
            vpath.display(),
            vocab.len(),
            ck.model.config().vocab_size
        );
    }
    Ok((ck.model, vocab))
}

struct Data {
    pool: Vec<Example>,
    test: Vec<Example>,
    task: TaskConfig,
}

fn load_data(args: &DataArgs, cfg: &RunConfig) -> Result<Data> {
    if let (Some(task), Some(pool), Some(test)) = (&args.task, &args.pool, &args.test) {
        let task = TaskConfig::load(task)?;
        return Ok(Data {
            pool: load_jsonl(pool, &task)?,
            test: load_jsonl(test, &task)?,
            task,
        });
    }
    let mut synth = cfg.task.clone();
    if let Some(kind) = args.kind {
        synth.kind = match kind {
            Kind::Topic => SyntheticKind::Topic,
            Kind::Pair => SyntheticKind::Pair,
        };
    }
    let t = make_synthetic_task(&cfg.corpus, &synth, 0)?;
    Ok(Data {
        pool: t.pool,
        test: t.test,
        task: t.task,
    })
}

fn experiment_config(cfg: &RunConfig, seed: Option<u64>, method: Method) -> ExperimentConfig {
    ExperimentConfig {
        method,
        k: cfg.k.unwrap_or(16),
        seeds: match seed {
            Some(s) => vec![s],
            None => cfg.seeds.clone().unwrap_or_else(|| DEFAULT_SEEDS.to_vec()),
        },
        tuning: cfg.tuning.clone(),
    }
}

fn print_report(r: &ExperimentReport) {
    for s in &r.seeds {
        eprintln!(
            "{} seed {}: best epoch {}, dev {:.4}, test {:.4}",
            r.method, s.seed, s.best_epoch, s.dev_acc, s.test_acc
        );
    }
    println!(
        "{}: {:.2} +/- {:.2}",
        r.method,
        100.0 * r.mean,
        100.0 * r.std
    );
}

/// Saves reports as JSON at `out` and the summary and per-epoch rows as
/// CSV beside it.
fn save_reports(out: Option<&Path>, reports: &[ExperimentReport]) -> Result<()> {
    let Some(out) = out else { return Ok(()) };
    write_json(out, &reports)?;
    std::fs::write(out.with_extension("csv"), summary_csv(reports))?;
    let rows: Vec<_> = reports
        .iter()
        .flat_map(|r| r.rows.iter().cloned())
        .collect();
    std::fs::write(out.with_extension("epochs.csv"), results_csv(&rows))?;
    Ok(())
}

fn run_methods(cli: &Cli, cfg: &RunConfig, data: &DataArgs, methods: &[Method]) -> Result<()> {
    let (model, vocab) = load_model(&cli.checkpoint)?;
    let d = load_data(data, cfg)?;
    let mut reports = Vec::new();
    for &method in methods {
        let ecfg = experiment_config(cfg, cli.seed, method);
        let r = run_experiment(&model, &vocab, &d.pool, &d.test, &d.task, &ecfg)?;
        print_report(&r);
        reports.push(r);
    }
    save_reports(cli.out.as_deref(), &reports)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::GenCorpus => {
            if let Some(s) = cli.seed {
                cfg.corpus.seed = s;
            }
            let docs = generate_corpus(&cfg.corpus)?;
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("corpus.jsonl"));
            corpus::write_jsonl(&out, &docs)?;
            eprintln!("wrote {} documents to {}", docs.len(), out.display());
        }
        Command::Pretrain { corpus: path } => {
            if let Some(s) = cli.seed {
                cfg.pretrain.seed = s;
            }
            let docs = match path {
                Some(p) => corpus::read_jsonl(p)?,
                None => generate_corpus(&cfg.corpus)?,
            };
            let vocab = corpus_vocab(&docs)?;
            let config = EncoderConfig::preset(cfg.preset.unwrap_or(Preset::Micro), vocab.len());
            let mut model = EncoderModel::new(config, cfg.pretrain.seed)?;
            eprintln!(
                "pre-training {} parameters on {} documents for {} steps",
                model.num_parameters(),
                docs.len(),
                cfg.pretrain.steps
            );
            let start = Instant::now();
            let trace = pretrain(&mut model, &vocab, &docs, &cfg.pretrain, |s| {
                if s.step % 100 == 0 {
                    eprintln!(
                        "step {:>5}  loss {:.4}  mlm {:.4}  nsp {:.4}  {:.0}s",
                        s.step,
                        s.total,
                        s.mlm,
                        s.nsp,
                        start.elapsed().as_secs_f64()
                    );
                }
            })?;
            Checkpoint::new(model.clone(), trace.len() as u64, cfg.pretrain.seed)
                .save(&cli.checkpoint)?;
            vocab.save(vocab_path(&cli.checkpoint))?;
            eprintln!("saved {}", cli.checkpoint.display());
            if path.is_none() {
                let first = cfg.corpus.documents as u64;
                let held = generate_documents(&cfg.corpus, first..first + 200)?;
                let pairs = sample_nsp_pairs(&held, 2000, cfg.pretrain.seed)?;
                let acc = nsp_accuracy(&model, &vocab, &held, &pairs, cfg.pretrain.max_len)?;
                println!("held-out NSP accuracy {:.4}", acc);
            }
            if let Some(out) = &cli.out {
                let mut csv = String::from("step,total,mlm,nsp\n");
                for s in &trace {
                    csv.push_str(&format!("{},{},{},{}\n", s.step, s.total, s.mlm, s.nsp));
                }
                std::fs::write(out, csv)?;
            }
        }
        Command::EvalZeroshot { mode, scores, data } => {
            let (model, vocab) = load_model(&cli.checkpoint)?;
            let d = load_data(data, &cfg)?;
            let seed = cli.seed.unwrap_or(DEFAULT_SEEDS[0]);
            let k = cfg.k.unwrap_or(16);
            let dev = || -> Result<Vec<Example>> {
                Ok(kshot_split(&d.pool, &d.task.labels(), k, seed)?.dev)
            };
            let (name, acc) = match mode {
                ZeroShotMode::Nsp => (
                    "zero_shot_nsp",
                    evaluate(&model, &vocab, &d.test, &d.task, EvalMode::ZeroShotNsp)?,
                ),
                ZeroShotMode::Pet => (
                    "zero_shot_pet",
                    evaluate(&model, &vocab, &d.test, &d.task, EvalMode::ZeroShotPet)?,
                ),
                ZeroShotMode::SamplesContrast => {
                    let dev = dev()?;
                    let labels = d.task.labels();
                    let gold: Vec<&str> = dev.iter().map(|e| e.label.as_str()).collect();
                    let dist = LabelDistribution::from_gold(&labels, &gold)?;
                    (
                        "samples_contrast",
                        evaluate(
                            &model,
                            &vocab,
                            &d.test,
                            &d.task,
                            EvalMode::SamplesContrast(&dist),
                        )?,
                    )
                }
                ZeroShotMode::Thresholds => {
                    let dev = dev()?;
                    (
                        "thresholds",
                        evaluate(
                            &model,
                            &vocab,
                            &d.test,
                            &d.task,
                            EvalMode::Thresholds { dev: &dev },
                        )?,
                    )
                }
            };
            println!("{name}: {:.4} on {} test examples", acc, d.test.len());
            if let Some(path) = scores {
                write_scored(path, &score_dataset(&model, &vocab, &d.test, &d.task)?)?;
            }
            if let Some(out) = &cli.out {
                write_json(
                    out,
                    &serde_json::json!({ "mode": name, "accuracy": acc, "examples": d.test.len() }),
                )?;
            }
        }
        Command::MapSamples { scores, dev, task } => {
            let task = TaskConfig::load(task)?;
            let labels = task.labels();
            let samples = read_scored(scores)?;
            let dev = dev.as_ref().map(read_scored).transpose()?;
            let label_index = |l: &str| {
                labels
                    .iter()
                    .position(|x| *x == l)
                    .ok_or_else(|| nsp_bert::Error::UnknownLabel(l.to_string()))
            };
            let pred: Vec<usize> = match task.mapping.strategy {
                Strategy::SamplesContrast => {
                    let dist = match &dev {
                        Some(dev) => {
                            let gold = dev
                                .iter()
                                .map(|s| {
                                    s.gold.as_deref().context("dev sample without a gold label")
                                })
                                .collect::<Result<Vec<_>>>()?;
                            LabelDistribution::from_gold(&labels, &gold)?
                        }
                        None => LabelDistribution::uniform(&labels)?,
                    };
                    let bs = task.mapping.batch_size.unwrap_or(samples.len()).max(1);
                    samples_contrast(&samples, task.mapping.order, &dist, bs)?
                }
                Strategy::Thresholds => {
                    let dev = dev.context("thresholds need --dev with gold labels")?;
                    let pairs = dev
                        .iter()
                        .map(|s| {
                            let gold = s
                                .gold
                                .as_deref()
                                .context("dev sample without a gold label")?;
                            Ok((s.single()?, label_index(gold)?))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let t = thresholds_from_dev(&pairs)?;
                    samples
                        .iter()
                        .map(|s| Ok(t.apply(s.single()?)))
                        .collect::<Result<_>>()?
                }
                Strategy::CandidatesContrast => samples
                    .iter()
                    .map(|s| {
                        Ok(nsp_bert::scoring::predict_candidates_contrast(
                            s.candidates()?,
                        )?)
                    })
                    .collect::<Result<_>>()?,
            };
            let mut text = String::new();
            let mut correct = 0;
            let mut with_gold = 0;
            for (s, &p) in samples.iter().zip(&pred) {
                text.push_str(&serde_json::to_string(
                    &serde_json::json!({ "id": s.id, "label": labels[p] }),
                )?);
                text.push('\n');
                if let Some(g) = &s.gold {
                    with_gold += 1;
                    correct += usize::from(g == labels[p]);
                }
            }
            write_text(cli.out.as_deref(), &text)?;
            if with_gold > 0 {
                eprintln!(
                    "accuracy {:.4} on {with_gold} labelled samples",
                    correct as f64 / with_gold as f64
                );
            }
        }
        Command::NspTune { variant, data } => {
            run_methods(&cli, &cfg, data, &[Method::NspTune(*variant)])?
        }
        Command::FineTune { data } => run_methods(&cli, &cfg, data, &[Method::FineTune])?,
        Command::Ablate { data } => {
            let methods: Vec<Method> = Variant::ALL.into_iter().map(Method::NspTune).collect();
            run_methods(&cli, &cfg, data, &methods)?
        }
        Command::Report { reports } => {
            let mut all = Vec::new();
            for p in reports {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                let mut r: Vec<ExperimentReport> = match serde_json::from_str(&text) {
                    Ok(v) => v,
                    Err(_) => vec![serde_json::from_str(&text)
                        .with_context(|| format!("parsing {}", p.display()))?],
                };
                all.append(&mut r);
            }
            write_text(cli.out.as_deref(), &summary_csv(&all))?;
        }
        Command::Histogram { scores, bins } => {
            let q: Vec<f32> = read_scored(scores)?
                .into_iter()
                .flat_map(|s| match s.q {
                    Score::Single(q) => vec![q],
                    Score::Candidates(c) => c,
                })
                .collect();
            let h = probability_histogram(&q, *bins)?;
            match &cli.out {
                Some(out) => write_histogram(out, &h)?,
                None => print!("{}", nsp_bert::scoring::histogram_csv(&h)),
            }
        }
    }
    Ok(())
}
