use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spikelm::config::RunConfig;
use spikelm::data::Vocab;
use spikelm::energy::EnergyReport;
use spikelm::finetune::toy_grad_check;
use spikelm::metrics::EvalReport;
use spikelm::model::{generate, load, save, DecodeMode, ModelCheckpoint};
use spikelm::{pipeline, Error};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "spikelm", version, about = "Train, convert, fine-tune and evaluate spiking character-level transformers")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for checkpoints and reports.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the analog baseline.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Convert an analog checkpoint into a spiking one.
    Convert {
        #[arg(long)]
        ann: Option<PathBuf>,
        #[arg(long)]
        percentile: Option<f64>,
        #[arg(long)]
        time_window: Option<usize>,
    },
    /// Fine-tune the spiking attention projections.
    Finetune {
        #[arg(long)]
        ann: Option<PathBuf>,
        #[arg(long)]
        snn: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score the analog model, and the spiking model when given.
    Eval {
        #[arg(long)]
        ann: Option<PathBuf>,
        #[arg(long)]
        snn: Option<PathBuf>,
        #[arg(long)]
        windows: Option<usize>,
        #[arg(long)]
        time_window: Option<usize>,
    },
    /// Decode text from a checkpoint of either kind.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 100)]
        n_tokens: usize,
        /// Sampling temperature; greedy when absent.
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Operation counts and energy of both attention paths.
    Energy {
        #[arg(long)]
        snn: Option<PathBuf>,
        #[arg(long)]
        time_window: Option<usize>,
    },
    /// Check the unrolled surrogate gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 5.0)]
        slope: f64,
    },
}

/// Failure carrying its exit code and machine-readable kind.
struct Failure {
    kind: &'static str,
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => 3,
            Error::WrongKind { .. } => 5,
            Error::Format(_) | Error::Json(_) => 6,
            Error::Corpus(_) | Error::TokenOutOfRange { .. } => 7,
            Error::Diverged { .. } => 8,
            Error::Io(_) => 10,
            _ => 1,
        };
        Failure {
            kind: e.kind(),
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn load_checkpoint(path: &Path) -> Outcome<ModelCheckpoint> {
    if !path.is_file() {
        return Err(Failure {
            kind: "missing_checkpoint",
            code: 4,
            message: format!("no checkpoint at {}", path.display()),
        });
    }
    Ok(load(path)?)
}

fn write(path: &Path, text: &str) -> Outcome<()> {
    fs::write(path, text)?;
    Ok(())
}

fn eval_outputs(dir: &Path, report: &EvalReport) -> Outcome<()> {
    write(&dir.join("eval_report.json"), &report.to_json()?)?;
    write(&dir.join("eval_report.csv"), &format!("{}\n{}\n", EvalReport::csv_header(), report.csv_row()))
}

fn energy_outputs(dir: &Path, report: &EnergyReport) -> Outcome<()> {
    write(&dir.join("energy_report.json"), &report.to_json()?)?;
    write(&dir.join("energy_report.csv"), &format!("{}\n{}\n", EnergyReport::csv_header(), report.csv_row()))
}

fn run(cli: Cli) -> Outcome<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let dir = cli.out_dir;
    fs::create_dir_all(&dir)?;
    let default_ann = dir.join("ann.ntck");
    match cli.command {
        Command::Train { steps, corpus } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(c) = corpus {
                cfg.data.corpus_path = c;
            }
            cfg.validate()?;
            let corpus = pipeline::load_corpus(&cfg)?;
            let (ck, report) = pipeline::train(&cfg, &corpus)?;
            save(&ck, &default_ann)?;
            let summary = serde_json::json!({
                "steps": report.steps,
                "initial_val_loss": report.initial_val_loss,
                "final_train_loss": report.final_train_loss,
                "val_loss": report.val_loss,
            });
            write(&dir.join("train_report.json"), &serde_json::to_string_pretty(&summary).map_err(Error::from)?)?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in report.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            write(&dir.join("train_loss.csv"), &csv)?;
            println!("{summary}");
        }
        Command::Convert { ann, percentile, time_window } => {
            if percentile.is_some() {
                cfg.convert.percentile = percentile;
            }
            if let Some(t) = time_window {
                cfg.snn.time_window = t;
            }
            cfg.validate()?;
            let corpus = pipeline::load_corpus(&cfg)?;
            let ann = load_checkpoint(&ann.unwrap_or(default_ann))?;
            let (mut snn, report) = pipeline::convert_stage(&cfg, &corpus, &ann)?;
            snn.report_ref = Some("conversion_report.json".into());
            write(&dir.join("conversion_report.json"), &report.to_json()?)?;
            save(&snn, dir.join("snn.ntck"))?;
            println!("{}", serde_json::json!({ "scales": report.scales.len(), "encoder_clip": report.encoder_clip }));
        }
        Command::Finetune { ann, snn, steps, lr } => {
            if let Some(s) = steps {
                cfg.finetune.steps = s;
            }
            if let Some(l) = lr {
                cfg.finetune.lr = l;
            }
            cfg.validate()?;
            let corpus = pipeline::load_corpus(&cfg)?;
            let ann = load_checkpoint(&ann.unwrap_or(default_ann))?;
            let snn = load_checkpoint(&snn.unwrap_or_else(|| dir.join("snn.ntck")))?;
            let (tuned, curve) = pipeline::finetune_stage(&cfg, &corpus, &ann, &snn)?;
            save(&tuned, dir.join("snn_ft.ntck"))?;
            write(&dir.join("finetune_loss.csv"), &curve.to_csv())?;
            if !curve.improved() {
                eprintln!(
                    "{}",
                    serde_json::json!({ "warning": "finetune_no_improvement", "initial": curve.initial(), "final": curve.last() })
                );
            }
            println!("{}", serde_json::json!({ "steps": curve.losses.len(), "initial_loss": curve.initial(), "final_loss": curve.last() }));
        }
        Command::Eval { ann, snn, windows, time_window } => {
            if let Some(w) = windows {
                cfg.eval.windows = w;
            }
            if let Some(t) = time_window {
                cfg.snn.time_window = t;
            }
            cfg.validate()?;
            let corpus = pipeline::load_corpus(&cfg)?;
            let ann = load_checkpoint(&ann.unwrap_or(default_ann))?;
            let snn = snn.map(|p| load_checkpoint(&p)).transpose()?;
            let report = pipeline::eval_stage(&cfg, &corpus, &ann, snn.as_ref())?;
            eval_outputs(&dir, &report)?;
            println!("{}", report.to_json()?);
            if let Some(s) = &snn {
                let (energy, _) = pipeline::energy_stage(&cfg, &corpus, s)?;
                energy_outputs(&dir, &energy)?;
                println!("{}", energy.to_json()?);
            }
        }
        Command::Generate {
            ckpt,
            prompt,
            n_tokens,
            temperature,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let table = ck.vocab.clone().ok_or_else(|| Error::Format("checkpoint carries no vocabulary".into()))?;
            let vocab = Vocab::from_table(&table)?;
            let ids = vocab.encode(&prompt)?;
            let mode = match temperature {
                Some(tau) => DecodeMode::Temperature { tau, seed: cfg.seed },
                None => DecodeMode::Greedy,
            };
            let out = generate(&ck, &ids, n_tokens, mode)?;
            println!("{}{}", prompt, vocab.decode(&out));
        }
        Command::Energy { snn, time_window } => {
            if let Some(t) = time_window {
                cfg.snn.time_window = t;
            }
            cfg.validate()?;
            let corpus = pipeline::load_corpus(&cfg)?;
            let snn = load_checkpoint(&snn.unwrap_or_else(|| dir.join("snn.ntck")))?;
            let (energy, ops) = pipeline::energy_stage(&cfg, &corpus, &snn)?;
            energy_outputs(&dir, &energy)?;
            println!("{}", energy.to_json()?);
            println!("{}", serde_json::json!({ "ac_count": ops.ac_count, "estimate": ops.estimate, "relative_gap": ops.relative_gap }));
        }
        Command::Gradcheck { eps, slope } => {
            let np = cfg.transformer(1).snn.neuron;
            let err = toy_grad_check(np, slope, cfg.finetune.kind, eps, cfg.seed)?;
            let pass = err <= GRADCHECK_TOLERANCE;
            println!("{}", serde_json::json!({ "max_rel_err": err, "tolerance": GRADCHECK_TOLERANCE, "eps": eps, "slope": slope, "pass": pass }));
            if !pass {
                return Err(Failure {
                    kind: "gradcheck_failed",
                    code: 9,
                    message: format!("max relative error {err:e} exceeds {GRADCHECK_TOLERANCE:e}"),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", serde_json::json!({ "error": f.kind, "code": f.code, "message": f.message }));
            ExitCode::from(f.code)
        }
    }
}
