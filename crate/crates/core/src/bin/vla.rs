use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vl_anomaly::aligner::AlignMode;
use vl_anomaly::cli::{cmd_eval, cmd_gen, cmd_infer, cmd_train, resolve_config, Overrides};
use vl_anomaly::inference::Sources;

#[derive(Parser)]
#[command(name = "vla", version, about = "Vision-language anomaly scoring on precomputed scene features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for generation, initialization and batching.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory from an earlier run.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes with a train/eval split.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train prompt context and aligner on the training split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Scene directory written by `gen`.
        #[arg(long)]
        scenes: PathBuf,
        /// Alignment mode: pixel, mask or both.
        #[arg(long)]
        align: Option<AlignMode>,
        /// Override the iteration count.
        #[arg(long)]
        iters: Option<usize>,
        /// Verify analytic gradients first; abort on any violation.
        #[arg(long)]
        grad_check: bool,
    },
    /// Score the evaluation split and export anomaly maps.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: PathBuf,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Expected alignment mode of the checkpoint.
        #[arg(long)]
        align: Option<AlignMode>,
        /// Score sources to fuse, e.g. `conf,text,img`.
        #[arg(long)]
        sources: Option<Sources>,
        /// Fuse raw cosine similarities instead of softmax-normalized ones.
        #[arg(long)]
        raw_sim: bool,
    },
    /// Compute pixel and component metrics for exported maps.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: PathBuf,
        /// Map directory written by `infer`.
        #[arg(long)]
        maps: PathBuf,
    },
}

fn run(cli: Cli) -> vl_anomaly::Result<()> {
    match cli.command {
        Command::Gen { common } => {
            let cfg = resolve_config(common.config.as_deref(), &Overrides { seed: common.seed, ..Overrides::default() })?;
            let s = cmd_gen(&cfg, &common.out, common.force)?;
            println!(
                "generated {} scenes ({} train, {} eval, {} blobs) in {}",
                s.train + s.eval,
                s.train,
                s.eval,
                s.blobs,
                common.out.display()
            );
        }
        Command::Train { common, scenes, align, iters, grad_check } => {
            let o = Overrides { seed: common.seed, align, iterations: iters, ..Overrides::default() };
            let cfg = resolve_config(common.config.as_deref(), &o)?;
            let s = cmd_train(&cfg, &scenes, &common.out, common.force, grad_check)?;
            if let Some(g) = &s.grad_check {
                println!("gradient check {g}");
            }
            let fmt = |r: Option<[f64; 3]>| {
                r.map(|[p, m, t]| format!("L_pixel {p:.6} L_mask {m:.6} total {t:.6}"))
                    .unwrap_or_else(|| "-".into())
            };
            println!("iterations {} ({})", s.iterations, s.status);
            println!("initial    {}", fmt(s.initial));
            println!("final      {}", fmt(s.last));
            println!("tau        {:.6}", s.tau);
            println!("L_seg      {}", s.l_seg);
        }
        Command::Infer { common, scenes, checkpoint, align, sources, raw_sim } => {
            let o = Overrides { seed: common.seed, sources, raw_sim, ..Overrides::default() };
            let cfg = resolve_config(common.config.as_deref(), &o)?;
            let s = cmd_infer(&cfg, &scenes, &checkpoint, &common.out, common.force, align)?;
            println!(
                "scored {} scenes (align {}, sources {}) into {}",
                s.scenes,
                s.align,
                s.sources,
                common.out.display()
            );
        }
        Command::Eval { common, scenes, maps } => {
            let cfg = resolve_config(common.config.as_deref(), &Overrides { seed: common.seed, ..Overrides::default() })?;
            let r = cmd_eval(&cfg, &scenes, &maps, &common.out, common.force)?;
            print!("{}", r.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
