use std::path::PathBuf;
use std::process::ExitCode;

use cfjoint_cli::commands::{self, CliError, EvalSource};
use cfjoint_cli::server::{self, AppState, DEFAULT_POOL};
use cfjoint_core::distill::AblationAxis;
use cfjoint_core::metrics::CSV_HEADER;
use cfjoint_core::synth::load_dataset;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cfjoint", version, about = "Counterfactual conditional joint trajectory prediction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run and world seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Inputs {
    /// Dataset directory written by gen-data.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Directory holding earlier checkpoints; defaults to --out.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic parking-lot dataset into --out.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5000)]
        n_train: usize,
        #[arg(long, default_value_t = 500)]
        n_val: usize,
    },
    /// Pretrain the score network.
    PretrainDenoiser {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Train the ego intention tokenizer.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Train the conditional joint predictor.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Score the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// model, oracle or cv
        #[arg(long, default_value = "model")]
        source: EvalSource,
    },
    /// Retrain Stage 2 along one ablation axis and tabulate the results.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// components, p_cf, teacher or token_source
        #[arg(long)]
        axis: AblationAxis,
    },
    /// Serve what-if queries over HTTP.
    Serve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Maximum concurrent predictions.
        #[arg(long, default_value_t = DEFAULT_POOL)]
        workers: usize,
    },
}

fn ckpt_of(common: &Common, inputs: &Inputs) -> PathBuf {
    inputs.ckpt.clone().unwrap_or_else(|| common.out.clone())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenData { common, n_train, n_val } => {
            let cfg = commands::load_config(common.config.as_deref(), common.seed)?;
            let m = commands::gen_data(&cfg, &common.out, n_train, n_val)?;
            println!("manifest {} ({} train, {} val)", m.hash(), m.n_train, m.n_val);
        }
        Cmd::PretrainDenoiser { common, inputs } => {
            let cfg = commands::load_config(common.config.as_deref(), common.seed)?;
            let log = commands::cmd_pretrain_denoiser(&cfg, &inputs.data, &ckpt_of(&common, &inputs), &common.out)?;
            for e in log {
                println!("epoch {} train {:.5} val {:.5} zero {:.5}", e.epoch, e.train_loss, e.val_loss, e.val_zero_loss);
            }
        }
        Cmd::TrainStage1 { common, inputs } => {
            let cfg = commands::load_config(common.config.as_deref(), common.seed)?;
            let log = commands::cmd_train_stage1(&cfg, &inputs.data, &ckpt_of(&common, &inputs), &common.out)?;
            for e in log {
                println!("epoch {} loss {:.5} val_min_endpoint_err {:.4}", e.epoch, e.loss, e.val_min_endpoint_err);
            }
        }
        Cmd::TrainStage2 { common, inputs } => {
            let cfg = commands::load_config(common.config.as_deref(), common.seed)?;
            let log = commands::cmd_train_stage2(&cfg, &inputs.data, &ckpt_of(&common, &inputs), &common.out)?;
            for e in log {
                println!(
                    "epoch {} l_gt {:.5} l_kd {:.5} cf_rate {:.3} val minFDE {:.4}",
                    e.epoch, e.l_gt, e.l_kd, e.cf_rate, e.val.min_fde
                );
            }
        }
        Cmd::Eval { common, inputs, source } => {
            let cfg = commands::load_config(common.config.as_deref(), common.seed)?;
            let t = commands::cmd_eval(&cfg, &inputs.data, &ckpt_of(&common, &inputs), &common.out, source)?;
            println!("{CSV_HEADER}\n{}", t.csv_row());
        }
        Cmd::Ablate { common, inputs, axis } => {
            let cfg = commands::load_config(common.config.as_deref(), common.seed)?;
            let rows = commands::cmd_ablate(&cfg, &inputs.data, &ckpt_of(&common, &inputs), &common.out, axis)?;
            print!("{}", commands::ablation_csv(&rows));
        }
        Cmd::Serve { common, inputs, port, workers } => {
            let cfg = commands::load_config(common.config.as_deref(), common.seed)?;
            let (model, loaded) = commands::load_model(&cfg, &ckpt_of(&common, &inputs))?;
            if loaded.len() < 3 {
                eprintln!("warning: only {loaded:?} checkpoints found; other components are untrained");
            }
            let scenes = match load_dataset(&inputs.data) {
                Ok(ds) => AppState::scenes_from(&ds),
                Err(e) => {
                    eprintln!("warning: no dataset at {} ({e}); only uploaded scenes are served", inputs.data.display());
                    Default::default()
                }
            };
            let addr = server::bind_addr(port).map_err(CliError::Usage)?;
            let state = AppState::new(model, scenes, workers);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(state, addr))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(e)) => {
            eprintln!("invalid configuration:\n{e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
