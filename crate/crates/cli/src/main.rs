use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use stcgn_core::dataset;
use stcgn_core::gradcheck::{self, Module};
use stcgn_core::synth::{self, SynthSpec, Template};
use stcgn_core::train::{self, Splits};
use stcgn_core::{checkpoint, Error, ModelConfig, Result};

#[derive(Parser)]
#[command(name = "stcgn", version, about = "Train and inspect a parse-guided visual question answering model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; missing fields take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => ModelConfig::load(p).map_err(|e| match e {
                Error::Io(io) => Error::Config(format!("{}: {io}", p.display())),
                e => e,
            })?,
            None => ModelConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        min_entities: usize,
        #[arg(long, default_value_t = 10)]
        max_entities: usize,
        #[arg(long, default_value_t = 8)]
        answers: usize,
        #[arg(long, default_value_t = 32)]
        entity_dim: usize,
        /// Scale of coordinate jitter and noise columns, in [0, 1]
        #[arg(long, default_value_t = 1.0)]
        jitter: f64,
        /// Comma-separated subset of attr,left,right,next
        #[arg(long, value_delimiter = ',')]
        templates: Vec<String>,
    },
    /// Train on the train split and keep the best checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// Epoch log file; defaults to the checkpoint path with `.log` appended
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on one split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full model and each single-mechanism ablation
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// CSV output
        #[arg(long)]
        out: PathBuf,
    },
    /// One training run per message-passing step count
    SweepT {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "steps", value_delimiter = ',', default_values_t = train::DEFAULT_SWEEP)]
        steps: Vec<usize>,
    },
    /// Write the attention trace of one question as JSON
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        question_id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients at reduced dims
    Gradcheck {
        /// embeddings, tree-encoder, message-passing or answer-head
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Entries sampled per parameter
        #[arg(long, default_value_t = 16)]
        entries: usize,
    },
    /// Write one JSON prediction per question
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "all")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Invalid(_) | Error::Shape { .. } => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn write_output(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn load_splits(data: &Path, fractions: &[f64; 3]) -> Result<Splits> {
    let samples = dataset::load(data)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("{} holds no questions", data.display())));
    }
    Splits::new(&samples, fractions)
}

fn pick_split(splits: Splits, name: &str) -> Result<Vec<dataset::Sample>> {
    Ok(match name {
        "train" => splits.train,
        "val" => splits.val,
        "test" => splits.test,
        "all" => splits.all().cloned().collect(),
        other => return Err(Error::Config(format!("unknown split `{other}`"))),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth {
            out,
            num,
            seed,
            min_entities,
            max_entities,
            answers,
            entity_dim,
            jitter,
            templates,
        } => {
            let templates = if templates.is_empty() {
                Template::ALL.to_vec()
            } else {
                templates
                    .iter()
                    .map(|t| Template::parse(t).ok_or_else(|| Error::Config(format!("unknown template `{t}`"))))
                    .collect::<Result<_>>()?
            };
            let spec = SynthSpec {
                num_instances: num,
                min_entities,
                max_entities,
                num_answers: answers,
                entity_dim,
                templates,
                jitter,
                seed,
                ..SynthSpec::default()
            };
            let samples = synth::generate(&spec)?;
            dataset::write(&out, &samples)?;
            println!("wrote {} questions to {}", samples.len(), out.display());
        }
        Command::Train { common, data, out, log } => {
            let cfg = common.config()?;
            let splits = load_splits(&data, &cfg.split)?;
            info!(
                "{} train / {} val / {} test questions",
                splits.train.len(),
                splits.val.len(),
                splits.test.len()
            );
            let report = train::train_splits(&cfg, &splits)?;
            checkpoint::save(&report.model, &out)?;
            let log_path = log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".log");
                PathBuf::from(p)
            });
            let text = report.log_text();
            write_output(&log_path, &text)?;
            print!("{text}");
            if !splits.test.is_empty() {
                let r = train::evaluate(&report.model, &splits.test, cfg.threads)?;
                println!("test score {:.6} over {} questions", r.score, r.count);
            }
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            split,
            threads,
            out,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let samples = pick_split(load_splits(&data, &model.config.split)?, &split)?;
            let report = train::evaluate(&model, &samples, threads.unwrap_or(model.config.threads))?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => write_output(&p, &(text + "\n"))?,
                None => println!("{text}"),
            }
        }
        Command::Ablate { common, data, out } => {
            let cfg = common.config()?;
            let splits = load_splits(&data, &cfg.split)?;
            let rows = train::ablate(&cfg, &splits)?;
            let csv = train::ablation_csv(&rows);
            write_output(&out, &csv)?;
            print!("{csv}");
        }
        Command::SweepT {
            common,
            data,
            out,
            steps,
        } => {
            let cfg = common.config()?;
            let splits = load_splits(&data, &cfg.split)?;
            let rows = train::sweep_steps(&cfg, &splits, &steps)?;
            let csv = train::sweep_csv(&rows);
            write_output(&out, &csv)?;
            print!("{csv}");
        }
        Command::ExportAttention {
            checkpoint: ckpt,
            data,
            question_id,
            out,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let samples = dataset::load(&data)?;
            let sample = samples
                .iter()
                .find(|s| s.question_id == question_id)
                .ok_or_else(|| Error::Data(format!("no question {question_id} in {}", data.display())))?;
            let trace = train::export_attention(&model, sample)?;
            write_output(&out, &(serde_json::to_string_pretty(&trace)? + "\n"))?;
        }
        Command::Gradcheck { module, seed, entries } => {
            let filter = module
                .map(|m| Module::parse(&m).ok_or_else(|| Error::Config(format!("unknown module `{m}`"))))
                .transpose()?;
            let reports = gradcheck::gradcheck(&gradcheck::small_config(seed), filter, seed, entries)?;
            for r in &reports {
                println!("{r}");
            }
            if let Some(bad) = reports.iter().find(|r| !r.passed()) {
                return Err(Error::Numeric(format!("gradient mismatch in {}", bad.param)));
            }
        }
        Command::Predict {
            checkpoint: ckpt,
            data,
            split,
            out,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let samples = pick_split(load_splits(&data, &model.config.split)?, &split)?;
            let mut text = String::new();
            for s in &samples {
                text += &serde_json::to_string(&train::prediction_record(&model, s)?)?;
                text.push('\n');
            }
            write_output(&out, &text)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
