use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand, ValueEnum};

use pbkd::commands::{self, Split};
use pbkd::config::{RunConfig, KEYS};
use pbkd::scheduler::Policy;
use pbkd::Result;

/// `--config FILE` plus one `--kebab-key VALUE` flag per config key.
#[derive(Debug, Clone, Default)]
struct ConfigArgs {
    file: Option<PathBuf>,
    overrides: Vec<(&'static str, String)>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        commands::resolve_config(self.file.as_deref(), &self.overrides)
    }
}

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let mut a = Self::default();
        a.update_from_arg_matches(m)?;
        Ok(a)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        self.file = m.get_one::<PathBuf>("config").cloned();
        self.overrides = KEYS
            .iter()
            .filter_map(|&k| m.get_one::<String>(k).map(|v| (k, v.clone())))
            .collect();
        Ok(())
    }
}

impl Args for ConfigArgs {
    fn augment_args(cmd: Command) -> Command {
        let cmd = cmd.arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value config file; flags override it"),
        );
        KEYS.iter().fold(cmd, |cmd, &k| {
            cmd.arg(Arg::new(k).long(k.replace('_', "-")).value_name("VALUE").help_heading("Config"))
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

#[derive(Parser)]
#[command(name = "pbkd", version, about = "Distill a CNN teacher into a student one block at a time, blocks in parallel")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a teacher from scratch.
    TrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Distill a trained teacher into a student.
    Distill {
        /// Teacher weights file.
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Schedule a task-weight profile.
    Plan {
        /// CSV with header `task_id,weight_seconds`.
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value = "wfd")]
        policy: String,
        #[arg(long)]
        json: bool,
    },
    /// MAC and parameter table of a model.
    Flops {
        /// Bundled model name or path to a model JSON.
        #[arg(long, default_value = "vgg16_cifar")]
        model: String,
        #[arg(long)]
        json: bool,
    },
    /// Speedup, efficiency and greenup from counter traces.
    Report {
        #[arg(long)]
        serial: PathBuf,
        #[arg(long)]
        parallel: PathBuf,
        /// Task trace of the parallel run.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Directory for report.json and timeline.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Top-1 accuracy of a weights file.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<String> {
    match cli.cmd {
        Cmd::TrainTeacher { cfg } => commands::train_teacher_cmd(&cfg.resolve()?),
        Cmd::Distill { teacher, cfg } => commands::distill_cmd(&cfg.resolve()?, &teacher),
        Cmd::Plan {
            profile,
            workers,
            policy,
            json,
        } => commands::plan_cmd(&profile, workers, policy.parse::<Policy>()?, json),
        Cmd::Flops { model, json } => commands::flops_cmd(&model, json),
        Cmd::Report {
            serial,
            parallel,
            trace,
            workers,
            out,
            json,
        } => commands::report_cmd(&serial, &parallel, trace.as_deref(), workers, out.as_deref(), json),
        Cmd::Eval { weights, split, cfg } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Eval => Split::Eval,
            };
            commands::eval_cmd(&cfg.resolve()?, &weights, split)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
