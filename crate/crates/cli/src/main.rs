//! `hyperphm`: train, evaluate, analyze and verify hypercomplex residual
//! networks.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error,
//! 3 training divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hyperphm::training::Schedule;
use toml::{Table, Value};

use crate::commands::{exit_code, EXIT_CONFIG};
use crate::config::{Dataset, Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "hyperphm",
    version,
    about = "Quaternion, vectormap and PHM residual networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoints and the resolved config
    /// to the run directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Run the algebra identity and layer oracle suite.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Parameter, MAC and latency budget of one or more architectures.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// A depth (e.g. 18) for the standard row set, or comma-separated presets.
        #[arg(long, value_name = "DEPTH|ARCHS")]
        compare: Option<String>,
        /// Timed single-image forward passes (0 skips latency).
        #[arg(long, value_name = "N")]
        latency_reps: Option<usize>,
        /// Break the budget down per layer.
        #[arg(long)]
        per_layer: bool,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Compare analytic and finite-difference gradients on small layers.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of phm4, phm5, quatconv, vectconv, block.
        #[arg(long, value_delimiter = ',')]
        target: Vec<String>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Negate one analytic gradient per target to exercise the failure path.
        #[arg(long, hide = true)]
        inject_wrong_sign: bool,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// TOML file of key = value settings.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any setting, e.g. --set warmup=5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Preset such as resnet18, quat50, vphm18, qphm34.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    widen: Option<usize>,
    /// Divide stage widths by this factor.
    #[arg(long)]
    narrow: Option<usize>,
    /// Use a PHM head of this dimension.
    #[arg(long)]
    phm_n: Option<usize>,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    dataset: Option<Dataset>,
    /// Directory holding the CIFAR binary files.
    #[arg(long, value_name = "DIR")]
    data_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    schedule: Option<Schedule>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    deterministic: Option<bool>,
    #[arg(long, value_name = "DIR")]
    run_dir: Option<PathBuf>,
}

#[derive(Default)]
struct Flags(Table);

impl Flags {
    fn put(&mut self, key: &str, value: Option<impl Into<Value>>) {
        if let Some(v) = value {
            self.0.insert(key.to_string(), v.into());
        }
    }

    fn int(&mut self, key: &str, value: Option<usize>) {
        self.put(key, value.map(|v| v as i64));
    }

    fn path(&mut self, key: &str, value: Option<PathBuf>) {
        self.put(key, value.map(|p| p.to_string_lossy().into_owned()));
    }

    fn common(&mut self, c: &Common) {
        self.put("seed", c.seed.map(|v| v as i64));
    }

    fn model(&mut self, m: ModelArgs) {
        self.put("arch", m.arch);
        self.int("classes", m.classes);
        self.int("widen", m.widen);
        self.int("narrow", m.narrow);
        self.int("phm_n", m.phm_n);
    }

    fn data(&mut self, d: DataArgs) {
        self.put("dataset", d.dataset.map(|d| d.to_string()));
        self.path("data_root", d.data_root);
    }

    fn train(&mut self, t: TrainArgs) {
        self.int("epochs", t.epochs);
        self.int("batch", t.batch);
        self.put("lr", t.lr);
        self.put("schedule", t.schedule.map(|s| s.to_string()));
        self.put("deterministic", t.deterministic);
        self.path("run_dir", t.run_dir);
    }
}

enum Action {
    Train,
    Eval,
    Verify { json: bool },
    Analyze { json: bool },
    Gradcheck { inject_wrong_sign: bool },
}

fn split(cmd: Command) -> (&'static str, Action, Common, Flags) {
    let mut f = Flags::default();
    match cmd {
        Command::Train {
            common,
            model,
            data,
            train,
        } => {
            f.common(&common);
            f.model(model);
            f.data(data);
            f.train(train);
            ("train", Action::Train, common, f)
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            batch,
        } => {
            f.common(&common);
            f.data(data);
            f.path("checkpoint", checkpoint);
            f.int("batch", batch);
            ("eval", Action::Eval, common, f)
        }
        Command::Verify { common, json } => {
            f.common(&common);
            ("verify", Action::Verify { json }, common, f)
        }
        Command::Analyze {
            common,
            model,
            compare,
            latency_reps,
            per_layer,
            json,
        } => {
            f.common(&common);
            f.model(model);
            f.put("compare", compare);
            f.int("latency_reps", latency_reps);
            f.put("per_layer", per_layer.then_some(true));
            ("analyze", Action::Analyze { json }, common, f)
        }
        Command::Gradcheck {
            common,
            target,
            eps,
            threshold,
            inject_wrong_sign,
        } => {
            f.common(&common);
            if !target.is_empty() {
                f.put(
                    "targets",
                    Some(Value::Array(target.into_iter().map(Value::String).collect())),
                );
            }
            f.put("eps", eps);
            f.put("threshold", threshold);
            ("gradcheck", Action::Gradcheck { inject_wrong_sign }, common, f)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, action, common, flags) = split(cli.command);
    let overrides = Overrides {
        file: common.config,
        set: common.set,
        flags: flags.0,
    };
    let result = RunConfig::resolve(name, overrides).and_then(|cfg| {
        let echo = cfg.to_toml()?;
        println!("# resolved configuration\n{echo}");
        match action {
            Action::Train => commands::train_cmd(&cfg, &echo),
            Action::Eval => commands::eval_cmd(&cfg),
            Action::Verify { json } => commands::verify_cmd(&cfg, json),
            Action::Analyze { json } => commands::analyze_cmd(&cfg, json),
            Action::Gradcheck { inject_wrong_sign } => commands::gradcheck_cmd(&cfg, inject_wrong_sign),
        }
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = exit_code(&e);
            if code == EXIT_CONFIG {
                eprintln!("(configuration error; see --help)");
            }
            ExitCode::from(code)
        }
    }
}
