//! Command-line surface. Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::checkpoint::{self, load_checkpoint, save_checkpoint};
use crate::config::{AnswerHead, Config, DecodeConfig, DecodeMode, Stage};
use crate::error::{Error, Result};
use crate::eval::{self, Taxonomy};
use crate::fusion;
use crate::model::McgModel;
use crate::sampling::{MediaSource, SampleMode};
use crate::synthetic::{make_synthetic_dataset, SyntheticSpec};
use crate::text::Vocabulary;
use crate::training::{self, Dataset, Trainer};

pub const CONFIG_ENV: &str = "MCG_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "mcg", version, about = "Generative video question answering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train with all three objectives.
    Pretrain(TrainArgs),
    /// Train with the answer objective only.
    Finetune(TrainArgs),
    /// Answer one question about one video.
    Answer(AnswerArgs),
    /// Score a manifest and print the metrics report.
    Evaluate(EvaluateArgs),
    /// Write the moving-square toy dataset.
    GenSynthetic(SyntheticArgs),
    /// List the arrays stored in a checkpoint.
    InspectCheckpoint(InspectArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Config file (defaults to $MCG_CONFIG).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Extra `key=value` config entries, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Where to write the final checkpoint.
    #[arg(long, default_value = "checkpoint.mcgc")]
    out: PathBuf,
    /// Copy matching weights from this checkpoint before training.
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// Continue a run from this checkpoint, including optimizer state and step.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print losses every N steps.
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Debug, Args)]
struct AnswerArgs {
    #[arg(long)]
    video: PathBuf,
    #[arg(long)]
    question: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report path; `.json` selects JSON, anything else the text form.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Taxonomy file for WUPS (defaults to the bundled toy taxonomy).
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Debug, Args)]
struct SyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
}

#[derive(Debug, Args)]
struct InspectArgs {
    checkpoint: PathBuf,
}

/// Parses `argv` (program name first) and runs the command.
pub fn run_command<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::Pretrain(a) => train(Stage::Pretrain, a, out),
        Command::Finetune(a) => train(Stage::Finetune, a, out),
        Command::Answer(a) => answer(a, out, err),
        Command::Evaluate(a) => evaluate(a, out),
        Command::GenSynthetic(a) => {
            let spec = SyntheticSpec {
                pairs: a.pairs,
                frames: a.frames,
                resolution: a.resolution,
                seed: a.seed,
            };
            let data = make_synthetic_dataset(&a.out, &spec)?;
            writeln!(
                out,
                "wrote {} records to {}",
                data.records.len(),
                data.manifest.display()
            )?;
            Ok(())
        }
        Command::InspectCheckpoint(a) => {
            let header = checkpoint::read_header(&a.checkpoint)?;
            writeln!(out, "version = {}", checkpoint::VERSION)?;
            writeln!(out, "step = {}", header.step)?;
            for e in header
                .arrays
                .iter()
                .filter(|e| e.group == checkpoint::ArrayGroup::Param)
            {
                writeln!(out, "{} {}x{} {}", e.name, e.shape[0], e.shape[1], e.dtype)?;
            }
            Ok(())
        }
    }
}

/// File config (explicit path, then `$MCG_CONFIG`, then stage defaults) plus overrides.
fn load_config(stage: Stage, args: &TrainArgs) -> Result<Config> {
    let path = args
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => Config::from_file(p)?,
        None => Config::for_stage(stage),
    };
    cfg.train.stage = stage;
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.train.stage = stage;
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(m) = &args.manifest {
        cfg.data.manifest = Some(m.display().to_string());
    }
    if let Some(v) = &args.vocab {
        cfg.data.vocab = Some(v.display().to_string());
    }
    cfg.model.validate()?;
    Ok(cfg)
}

fn train(stage: Stage, args: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut trainer = if let Some(path) = &args.resume {
        let ck = load_checkpoint(path)?;
        let mut t = Trainer::new(ck.model);
        t.optimizer = ck.optimizer;
        t.step = ck.step;
        if let Some(s) = args.steps {
            t.model.config.train.steps = s;
        }
        t
    } else {
        let cfg = load_config(stage, &args)?;
        let vocab = match &cfg.data.vocab {
            Some(p) => Vocabulary::from_file(p)?,
            None => Vocabulary::toy(),
        };
        let mut model = McgModel::new(cfg, vocab)?;
        if let Some(init) = &args.init {
            let source = load_checkpoint(init)?;
            let report = checkpoint::import_weights(&mut model.params, &source.model.params);
            writeln!(
                out,
                "imported {} arrays ({} unmatched, {} unused)",
                report.matched.len(),
                report.unmatched.len(),
                report.unused.len()
            )?;
        }
        Trainer::new(model)
    };
    let manifest =
        trainer.model.config.data.manifest.clone().ok_or_else(|| {
            Error::Config("no manifest: pass --manifest or set data.manifest".into())
        })?;
    let data = Dataset::from_manifest(&eval::load_manifest(&manifest)?)?;
    if data.is_empty() {
        return Err(Error::Invalid(format!(
            "manifest {manifest} has no records"
        )));
    }
    let every = args.log_every.max(1);
    let mut lines = Vec::new();
    trainer.run(&data, |step, l| {
        if step % every == 0 {
            lines.push(format!(
                "step {step} total {:.5} icl {:.5} tcl {:.5} vtm {:.5} lm {:.5}",
                l.total, l.l_icl, l.l_tcl, l.l_vtm, l.l_lm
            ));
            info!("{}", lines.last().unwrap());
        }
    })?;
    for line in lines {
        writeln!(out, "{line}")?;
    }
    save_checkpoint(&args.out, &trainer.model, &trainer.optimizer, trainer.step)?;
    writeln!(out, "saved {} at step {}", args.out.display(), trainer.step)?;
    Ok(())
}

fn decode_config(base: DecodeConfig, args: &DecodeArgs) -> DecodeConfig {
    let mut d = base;
    if let Some(w) = args.beam_width {
        d.beam_width = w;
        d.mode = if w > 1 {
            DecodeMode::Beam
        } else {
            DecodeMode::Greedy
        };
    }
    if let Some(m) = args.max_len {
        d.max_len = m;
    }
    d
}

fn answer(args: AnswerArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?.model;
    let clip = model.load_clip(&MediaSource::open(&args.video)?, SampleMode::Eval, 0)?;
    match model.config.model.answer_head {
        AnswerHead::Generator => {
            let decode = decode_config(model.config.decode, &args.decode);
            let a = fusion::generate_answer(&model, &clip, &args.question, &decode)?;
            writeln!(out, "{}", a.text)?;
            if a.truncated {
                writeln!(
                    err,
                    "warning: answer reached the length limit without an end token"
                )?;
            }
        }
        AnswerHead::Classifier => {
            let (best, _) = training::classify(&model, &clip, &args.question)?;
            writeln!(
                out,
                "{}",
                training::classifier_classes(&model.config.model)[best]
            )?;
        }
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?.model;
    let records = eval::load_manifest(&args.manifest)?;
    let taxonomy = match &args.taxonomy {
        Some(p) => Taxonomy::from_file(p)?,
        None => Taxonomy::toy(),
    };
    let decode = decode_config(model.config.decode, &args.decode);
    let (report, _) = eval::evaluate(&model, &records, &decode, &taxonomy);
    let text = report.to_text();
    write!(out, "{text}")?;
    if let Some(path) = &args.out {
        write_report(path, &report)?;
    }
    Ok(())
}

fn write_report(path: &Path, report: &eval::MetricsReport) -> Result<()> {
    let body = if path.extension().is_some_and(|e| e == "json") {
        report.to_json()
    } else {
        report.to_text()
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, body)?;
    Ok(())
}
