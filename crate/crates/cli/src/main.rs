use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use narx_cli::{cmd_evaluate, cmd_generate, cmd_grid_search, cmd_reproduce, cmd_train, CliError, ExperimentConfig, Scale};
use narx_core::{ModelKind, OrderCase};

#[derive(Parser)]
#[command(name = "narx", version, about = "NARX identification experiments on the Wiener-Hammerstein benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training, validation and test datasets.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit one model (LTI, ES, DR or NOE) on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compute NRMSE records of a saved model.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Search the DR (alpha, gamma) grid on a dataset directory.
    GridSearch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the Monte-Carlo protocol and write the summary tables.
    Reproduce {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "desk")]
        scale: Scale,
    },
}

/// Flags override the config file.
#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// HMO, OMO or CUSTOM.
    #[arg(long)]
    case: Option<OrderCase>,
    /// LTI, ES, DR or NOE.
    #[arg(long)]
    kind: Option<ModelKind>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    n_a: Option<usize>,
    #[arg(long)]
    n_b: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    gamma_grid: Option<Vec<f64>>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    anchor_stride: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn resolve(self) -> Result<ExperimentConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($f:ident => $g:ident),*) => { $( if let Some(v) = self.$f { c.$g = Some(v); } )* };
        }
        set!(out => output_dir, case => order_case, kind => model_kind, hidden => hidden, n_a => n_a, n_b => n_b,
             runs => runs, alpha_grid => alpha_grid, gamma_grid => gamma_grid, horizon => horizon,
             anchor_stride => anchor_stride, max_epochs => max_epochs, patience => patience, batch_size => batch_size);
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(w) = self.workers {
            c.workers = w;
        }
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = common.resolve()?;
            let dir = cfg.output_dir();
            let exp = cmd_generate(&cfg, &dir)?;
            println!(
                "wrote {} ({} train, {} val, {} white test, {} colored test samples)",
                dir.display(),
                exp.train.len(),
                exp.val.len(),
                exp.white_test.len(),
                exp.colored_test.len()
            );
        }
        Command::Train { common, data } => {
            let cfg = common.resolve()?;
            let out = cmd_train(&cfg, &data, &cfg.output_dir())?;
            print_trained(&out);
        }
        Command::GridSearch { common, data } => {
            let cfg = common.resolve()?;
            let out = cmd_grid_search(&cfg, &data, &cfg.output_dir())?;
            for p in &out.grid {
                println!("alpha={} gamma={:e} best_val={:.6e} epochs={}", p.alpha, p.gamma, p.best_val, p.epochs_run);
            }
            print_trained(&out);
        }
        Command::Evaluate { common, model, data } => {
            let cfg = common.resolve()?;
            for r in cmd_evaluate(&cfg, &model, &data, &cfg.output_dir())? {
                println!("{} {:?} {:.6}", r.dataset_role, r.mode, r.nrmse);
            }
        }
        Command::Reproduce { common, scale } => {
            let cfg = common.resolve()?;
            let out = cmd_reproduce(&cfg, scale, &cfg.output_dir())?;
            println!("one-step NRMSE (median)\n{}", out.table1);
            println!("simulation NRMSE (median)\n{}", out.table2);
            println!("{}/{} runs succeeded", out.result.successes(), out.spec.n_runs);
        }
    }
    Ok(())
}

fn print_trained(out: &narx_cli::commands::TrainOutput) {
    print!("{} {}", out.meta.kind, out.meta.case.case);
    if let (Some(a), Some(g)) = (out.meta.alpha, out.meta.gamma) {
        print!(" alpha={a} gamma={g:e}");
    }
    if let Some(r) = &out.report {
        print!(" best_val={:.6e} best_epoch={} epochs={}", r.best_val, r.best_epoch, r.epochs_run);
    }
    println!();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
