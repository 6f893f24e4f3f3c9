use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsp::data::ArithOp;
use fedsp::fed::TrainMode;
use fedsp::harness::{self, RunConfig, SweepGrid};
use fedsp::model::Selection;
use fedsp::Error;

#[derive(Parser)]
#[command(name = "fedsp", version, about = "Federated soft-prompt tuning simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain the toy global model and save its checkpoint.
    Pretrain(Common),
    /// Distill the client model from the global model.
    Distill(Common),
    /// Run one training mode and write metrics under --out.
    Run(Common),
    /// Probe accuracy of a checkpoint, optionally with prompts.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Finetuned global weights replacing --global-checkpoint's.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Prompt checkpoint to attach.
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Render Markdown tables from stored run summaries.
    Report {
        /// Run directories, searched recursively for summary.json.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the report to this file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run a grid of configurations and write sweep.md under --out.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Selections to try (default: BOT,MID,TOP).
        #[arg(long, value_delimiter = ',')]
        grid_selection: Vec<Selection>,
        /// Prompt (and server) learning rates to try.
        #[arg(long, value_delimiter = ',')]
        grid_prompt_lr: Vec<f64>,
        /// Round counts to try.
        #[arg(long, value_delimiter = ',')]
        grid_rounds: Vec<usize>,
        /// Local step counts to try.
        #[arg(long, value_delimiter = ',')]
        grid_local_steps: Vec<usize>,
    },
}

/// A config file plus per-field overrides.
#[derive(Args)]
struct Common {
    /// Flat JSON config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task_seed: Option<u64>,
    #[arg(long)]
    target: Option<ArithOp>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    local_steps: Option<usize>,
    #[arg(long)]
    server_steps: Option<usize>,
    #[arg(long)]
    selection: Option<Selection>,
    #[arg(long)]
    aux_layers: Option<usize>,
    #[arg(long)]
    prefix_len: Option<usize>,
    /// `off`, or the hidden width of the prompt MLP.
    #[arg(long, value_parser = parse_reparam)]
    reparam: Option<Option<usize>>,
    #[arg(long)]
    aux_lr: Option<f64>,
    #[arg(long)]
    prompt_lr: Option<f64>,
    #[arg(long)]
    server_lr: Option<f64>,
    #[arg(long)]
    kd_steps: Option<u64>,
    #[arg(long)]
    label_skew_alpha: Option<f64>,
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    global_checkpoint: Option<PathBuf>,
    #[arg(long)]
    aux_checkpoint: Option<PathBuf>,
}

fn parse_reparam(s: &str) -> Result<Option<usize>, String> {
    if s.eq_ignore_ascii_case("off") {
        return Ok(None);
    }
    s.parse::<usize>()
        .map(Some)
        .map_err(|_| format!("expected `off` or a hidden width, got `{}`", s))
}

macro_rules! set {
    ($cfg:ident, $src:ident, $($field:ident),*) => {
        $(if let Some(v) = $src.$field { $cfg.$field = v; })*
    };
}

impl Common {
    fn resolve(self) -> fedsp::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let o = self;
        set!(c, o, mode, seed, task_seed, target, rounds, clients, fraction, local_steps, server_steps);
        set!(c, o, selection, aux_layers, prefix_len, aux_lr, prompt_lr, server_lr, kd_steps, out, global_checkpoint);
        if let Some(r) = o.reparam {
            c.reparam_hidden = r;
        }
        if let Some(a) = o.label_skew_alpha {
            c.label_skew_alpha = Some(a);
        }
        if let Some(p) = o.aux_checkpoint {
            c.aux_checkpoint = Some(p);
        }
        c.parallel |= o.parallel;
        Ok(c)
    }
}

fn or_default<T: Clone>(v: Vec<T>, d: Vec<T>) -> Vec<T> {
    if v.is_empty() {
        d
    } else {
        v
    }
}

fn execute(cmd: Cmd) -> fedsp::Result<()> {
    match cmd {
        Cmd::Pretrain(common) => {
            let cfg = common.resolve()?;
            let r = harness::cmd_pretrain(&cfg)?;
            println!(
                "pretrained {}: loss {:.4} (uniform {:.4}), tagged acc {:.3}, neutral acc {:.3}",
                cfg.global_checkpoint.display(),
                r.final_loss,
                r.uniform_loss,
                r.tagged_acc,
                r.zero_shot_acc
            );
        }
        Cmd::Distill(common) => {
            let cfg = common.resolve()?;
            println!("wrote {}", harness::cmd_distill(&cfg)?.display());
        }
        Cmd::Run(common) => {
            let cfg = common.resolve()?;
            let s = harness::cmd_run(&cfg)?;
            println!(
                "{} seed {}: final acc {:.3}, best {:.3}, bytes up {} down {} -> {}",
                s.mode,
                s.seed,
                s.final_acc,
                s.best_acc,
                s.uploaded_bytes,
                s.downloaded_bytes,
                cfg.out.display()
            );
        }
        Cmd::Eval { common, model, prompts } => {
            let cfg = common.resolve()?;
            let acc = harness::cmd_eval(&cfg, model.as_deref(), prompts.as_deref())?;
            println!("{:.6}", acc);
        }
        Cmd::Report { dirs, output } => {
            let md = harness::render_report(&harness::load_summaries(&dirs)?);
            if let Some(p) = output {
                std::fs::write(p, &md)?;
            }
            print!("{}", md);
        }
        Cmd::Sweep {
            common,
            grid_selection,
            grid_prompt_lr,
            grid_rounds,
            grid_local_steps,
        } => {
            let cfg = common.resolve()?;
            let base = SweepGrid::selections_only(&cfg);
            let grid = SweepGrid {
                selections: or_default(grid_selection, base.selections),
                prompt_lrs: or_default(grid_prompt_lr, base.prompt_lrs),
                rounds: or_default(grid_rounds, base.rounds),
                local_steps: or_default(grid_local_steps, base.local_steps),
            };
            print!("{}", harness::cmd_sweep(&cfg, &grid)?);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingCheckpoint(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedsp: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
