//! `sqllava` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sqllava::checkpoint::{self, Checkpoint};
use sqllava::data::{corpus_stats, load_dataset, records, Conversation, Stage};
use sqllava::pipeline::{self, RunOutputs};
use sqllava::runconfig::RunConfig;
use sqllava::sampler::{self, GenRequest};
use sqllava::trainer::Trainer;
use sqllava::warmup::{warmup_language_model, warmup_texts};
use sqllava::{Error, SqLlava};

#[derive(Parser, Debug)]
#[command(
    name = "sqllava",
    version,
    about = "Train and sample a toy self-questioning vision-language model"
)]
struct Cli {
    /// Overrides every seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Corpus preparation and inspection.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Stage 1: train the prototype extractor and projector on captions.
    Pretrain(TrainArgs),
    /// Stage 2: instruction tuning with adapters.
    Finetune(TrainArgs),
    /// Answer a question about an image (captions it when no question is given).
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        question: Option<String>,
        #[arg(long, default_value_t = sampler::DEFAULT_MAX_NEW_TOKENS)]
        max_new_tokens: usize,
    },
    /// Ask a question about an image.
    Selfq {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = sampler::DEFAULT_MAX_NEW_TOKENS)]
        max_new_tokens: usize,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
}

#[derive(Subcommand, Debug)]
enum DataCommand {
    /// Render conversations to a binary record file.
    Prepare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::Finetune)]
        stage: StageArg,
        /// Record file; defaults to `data.records`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a per-token text listing here.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Turn, token and loss-mask statistics as JSON.
    Stats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Pretrain,
    Finetune,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Pretrain => Stage::Pretrain,
            StageArg::Finetune => Stage::Finetune,
        }
    }
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Start from this checkpoint's weights.
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// Continue an interrupted run of the same stage.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed steps.
    #[arg(long)]
    steps: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric { .. } => 3,
        Error::Data(_)
        | Error::Format(_)
        | Error::Length { .. }
        | Error::Io { .. }
        | Error::Checkpoint(_)
        | Error::Tensor(_) => 2,
        Error::Config(_) | Error::Request(_) | Error::State(_) | Error::Pipeline(_) => 1,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> sqllava::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    log::info!("resolved config:\n{}", cfg.to_toml());
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> sqllava::Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("`{key}` is not set")))
}

/// Conversations for `stage` with the directory their images resolve against.
fn corpus(cfg: &RunConfig, stage: Stage) -> sqllava::Result<(Vec<Conversation>, Option<PathBuf>)> {
    let path = match stage {
        Stage::Pretrain => match &cfg.data.captions {
            Some(p) => p,
            None => required(&cfg.data.conversations, "data.captions")?,
        },
        Stage::Finetune => required(&cfg.data.conversations, "data.conversations")?,
    };
    let convs = load_dataset(path)?;
    let base = cfg
        .data
        .image_root
        .clone()
        .or_else(|| path.parent().map(Path::to_path_buf));
    Ok((convs, base))
}

fn outputs(cfg: &RunConfig) -> RunOutputs {
    RunOutputs {
        checkpoint_dir: cfg.io.checkpoint_dir.clone(),
        metrics: Some(cfg.io.metrics.clone()),
        save_every: cfg.io.save_every,
    }
}

fn warm_start(model: &mut SqLlava, cfg: &RunConfig) -> sqllava::Result<()> {
    if cfg.train.warmup.steps == 0 {
        return Ok(());
    }
    let mut convs = Vec::new();
    for p in [&cfg.data.conversations, &cfg.data.captions]
        .into_iter()
        .flatten()
    {
        convs.extend(load_dataset(p)?);
    }
    let texts = warmup_texts(&convs);
    log::info!(
        "decoder warm-up: {} steps over {} texts",
        cfg.train.warmup.steps,
        texts.len()
    );
    warmup_language_model(model, &texts, &cfg.train.warmup, |step, loss| {
        if step % 100 == 0 {
            log::info!("warmup step {step} loss {loss:.4}");
        }
        Ok(())
    })
}

fn train(stage: Stage, args: &TrainArgs, seed: Option<u64>) -> sqllava::Result<()> {
    let cfg = load_config(&args.config, seed)?;
    let (mut model, mut trainer) = if let Some(path) = &args.resume {
        let ck = checkpoint::load(path)?;
        let plan = ck.plan.ok_or_else(|| {
            Error::Checkpoint(format!("{} holds no training plan", path.display()))
        })?;
        if plan.stage != stage {
            return Err(Error::Pipeline(format!(
                "{} belongs to the {} stage",
                path.display(),
                pipeline::stage_name(plan.stage)
            )));
        }
        log::info!("resuming at step {}", ck.step);
        (ck.model, Trainer::resume(plan, ck.opt, ck.step)?)
    } else {
        let mut model = match &args.init {
            Some(path) => {
                let ck = checkpoint::load(path)?;
                if ck.model.config != cfg.model {
                    log::warn!(
                        "model section differs from {}; using the checkpoint's",
                        path.display()
                    );
                }
                ck.model
            }
            None => {
                let mut m = SqLlava::new(cfg.model.clone(), cfg.seed)?;
                warm_start(&mut m, &cfg)?;
                m
            }
        };
        if model.adapters.is_merged() {
            model.unmerge_adapters()?;
        }
        if stage == Stage::Finetune && model.adapters.is_empty() {
            model.attach_configured()?;
        }
        let plan = match stage {
            Stage::Pretrain => cfg.train.pretrain.clone(),
            Stage::Finetune => cfg.train.finetune.clone(),
        };
        (model, Trainer::new(plan)?)
    };
    let (convs, base) = corpus(&cfg, stage)?;
    let samples = pipeline::samples(&convs, stage, &cfg.data.policy, &model, base.as_deref())?;
    log::info!(
        "{}: {} records, {} steps planned",
        pipeline::stage_name(stage),
        samples.len(),
        trainer.plan.total_steps(samples.len())
    );
    let path = pipeline::run_stage(
        &mut model,
        &mut trainer,
        &samples,
        args.steps,
        &outputs(&cfg),
    )?;
    println!("{}", path.display());
    Ok(())
}

fn open_model(path: &Path) -> sqllava::Result<SqLlava> {
    let Checkpoint { model, .. } = checkpoint::load(path)?;
    log::info!(
        "checkpoint config:\n{}",
        serde_json::to_string_pretty(&model.config).expect("config serializes")
    );
    Ok(model)
}

fn run(cli: Cli) -> sqllava::Result<u8> {
    match cli.command {
        Command::Data { command } => match command {
            DataCommand::Prepare {
                config,
                stage,
                out,
                dump,
            } => {
                let cfg = load_config(&config, cli.seed)?;
                let stage = Stage::from(stage);
                let (convs, _) = corpus(&cfg, stage)?;
                let model = SqLlava::new(cfg.model.clone(), cfg.seed)?;
                let seqs = pipeline::render_all(&convs, stage, &cfg.data.policy, &model)?;
                let out = out.unwrap_or(cfg.data.records);
                let recs: Vec<records::Record> = seqs.iter().map(Into::into).collect();
                records::write(&out, &recs)?;
                if let Some(d) = dump {
                    std::fs::write(&d, records::debug_dump(&seqs, &model.vocab))
                        .map_err(|e| Error::io(&d, e))?;
                }
                log::info!("{} records written", recs.len());
                println!("{}", out.display());
            }
            DataCommand::Stats { config, out } => {
                let cfg = load_config(&config, cli.seed)?;
                let (convs, _) = corpus(&cfg, Stage::Finetune)?;
                let model = SqLlava::new(cfg.model.clone(), cfg.seed)?;
                let seqs = pipeline::render_all(&convs, Stage::Finetune, &cfg.data.policy, &model)?;
                let json =
                    serde_json::to_string_pretty(&corpus_stats(&seqs)).expect("stats serialize");
                match out {
                    Some(p) => std::fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?,
                    None => println!("{json}"),
                }
            }
        },
        Command::Pretrain(args) => train(Stage::Pretrain, &args, cli.seed)?,
        Command::Finetune(args) => train(Stage::Finetune, &args, cli.seed)?,
        Command::Generate {
            ckpt,
            image,
            question,
            max_new_tokens,
        } => {
            let model = open_model(&ckpt)?;
            let pixels = sqllava::image::load(&image)?;
            let g = match question {
                Some(q) => {
                    let mut req = GenRequest::answer(pixels, q);
                    req.max_new_tokens = max_new_tokens;
                    sampler::generate(&model, &req)?
                }
                None => sampler::caption(&model, pixels, None, max_new_tokens)?,
            };
            println!("{}", g.text);
        }
        Command::Selfq {
            ckpt,
            image,
            max_new_tokens,
        } => {
            let model = open_model(&ckpt)?;
            let mut req = GenRequest::selfq(sqllava::image::load(&image)?);
            req.max_new_tokens = max_new_tokens;
            println!("{}", sampler::generate(&model, &req)?.text);
        }
        Command::Gradcheck => {
            let reports =
                autodiff::gradcheck::run_suite(cli.seed.unwrap_or(0)).map_err(Error::Tensor)?;
            let mut failed = 0;
            for r in &reports {
                let tag = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{tag:4} {:16} cases {:2} max rel err {:.3e}",
                    r.op, r.cases, r.max_rel_err
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                eprintln!(
                    "error: {failed} operation(s) exceed relative error {:e}",
                    autodiff::gradcheck::TOLERANCE
                );
                return Ok(3);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
