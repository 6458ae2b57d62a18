use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dgsct::harness::{
    count_params, exit_code, grad_check_cmd, grad_check_corrupted, report, run_demo, train_loop, write_output,
    Ablation, RunConfig, TrainReport,
};
use dgsct::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "dgsct", version, about = "Dual-guided cross-modal attention at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Options,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// One forward pass on the first synthetic clip; dumps attention maps as JSON.
    Demo,
    /// Finite-difference check of every trainable tensor.
    Gradcheck,
    /// Trains the attention modules and head; prints epoch losses and a CSV row.
    Train,
    /// Trainable versus frozen parameter counts.
    Params,
}

#[derive(clap::Args, Debug, Default)]
struct Options {
    /// Flat `key = value` config file applied before the flags.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "F")]
    alpha: Option<f64>,
    #[arg(long, global = true, value_name = "F")]
    beta: Option<f64>,
    #[arg(long, global = true, value_name = "F")]
    gamma: Option<f64>,
    /// Return only the attention delta from each attention call.
    #[arg(long, global = true)]
    delta_mode: bool,
    /// full, no_s, no_c, no_t, a2v_only, v2a_only or none.
    #[arg(long, global = true, value_name = "NAME")]
    ablation: Option<String>,
    /// Output file; stdout when absent.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Corrupts the first analytic gradient to exercise the failure path.
    #[arg(long, global = true, hide = true)]
    corrupt_gradient: bool,
}

fn load_config(command: Command, opts: &Options) -> Result<RunConfig> {
    let mut cfg = match command {
        Command::Gradcheck => RunConfig::grad_desk(),
        _ => RunConfig::default(),
    };
    if let Some(path) = &opts.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(alpha) = opts.alpha {
        cfg.alpha = alpha;
    }
    if let Some(beta) = opts.beta {
        cfg.beta = beta;
    }
    if let Some(gamma) = opts.gamma {
        cfg.gamma = gamma;
    }
    if opts.delta_mode {
        cfg.delta_mode = true;
    }
    if let Some(out) = &opts.out {
        cfg.out_path = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(cfg: &RunConfig, contents: &str) -> Result<()> {
    match &cfg.out_path {
        Some(path) => write_output(path, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn run(command: Command, opts: &Options) -> Result<()> {
    let cfg = load_config(command, opts)?;
    let ablation: Ablation = opts.ablation.as_deref().unwrap_or("full").parse()?;
    match command {
        Command::Demo => emit(&cfg, &run_demo(&cfg)?),
        Command::Params => emit(&cfg, &count_params(&cfg)?.render()),
        Command::Gradcheck => {
            let report = if opts.corrupt_gradient {
                grad_check_corrupted(&cfg)?
            } else {
                grad_check_cmd(&cfg)?
            };
            let text = report.render();
            if cfg.out_path.is_some() {
                print!("{text}");
            }
            emit(&cfg, &text)?;
            if report.passed() {
                Ok(())
            } else {
                Err(Error::GradientCheckFailed(report.max_rel_error()))
            }
        }
        Command::Train => {
            let outcome = train_loop(&cfg, ablation)?;
            let r = &outcome.report;
            for (i, loss) in r.epoch_losses.iter().enumerate() {
                let line = format!("epoch {} loss {}", i + 1, report::real(*loss));
                if cfg.out_path.is_some() {
                    println!("{line}");
                } else {
                    eprintln!("{line}");
                }
            }
            emit(&cfg, &format!("{}\n{}\n", TrainReport::CSV_HEADER, r.csv_row()))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command, &cli.opts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
