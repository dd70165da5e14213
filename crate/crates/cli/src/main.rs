use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ra_marl::harness::{
    emit_outputs, evaluate_checkpoint, overhead_csv, overhead_table, run_experiment_with, Algorithm, Checkpoint,
    ExperimentConfig, OutputPaths, Summary,
};

#[derive(Parser)]
#[command(name = "ra-marl", version, about = "Decentralized multi-agent random access simulator and trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train or simulate an algorithm over several seeded runs.
    Train {
        /// TOML configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for CSV, JSON and checkpoints.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        /// proposed, ra-p, ra-fcw, ra-acw or ra-ctde.
        #[arg(long)]
        algo: Option<String>,
        /// Skip writing per-run checkpoints.
        #[arg(long)]
        no_checkpoint: bool,
    },
    /// Communication overhead of centralized critics versus reward gossip.
    Overhead {
        #[arg(long, default_value_t = 0.005)]
        eps: f64,
        #[arg(long, default_value_t = 2)]
        nmin: usize,
        #[arg(long, default_value_t = 64)]
        nmax: usize,
        /// History length used by the centralized schemes.
        #[arg(long, default_value_t = 4)]
        history: usize,
        /// CSV destination; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a saved checkpoint with learning disabled.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Write outputs here as well as printing the summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_summary(s: &Summary) {
    let p = &s.performance;
    println!(
        "{:<9} Pkt-T {:>7.3} Pkt-C {:>7.3} Pkt-L {:>6.3} TPut {:>7.3} Mbps ({:.3}) Delay {:>6.3} ms ({:.3})",
        s.algorithm, p.pkt_t.mean, p.pkt_c.mean, p.pkt_l.mean, p.tput.mean, p.tput.std, p.delay.mean, p.delay.std
    );
    let f = &s.fairness;
    println!(
        "{:<9} TPut min/max {:.3}/{:.3} N-Gap {:.3}  Delay min/max {:.3}/{:.3} N-Gap {:.3}",
        "", f.tput.min, f.tput.max, f.tput.n_gap, f.delay.min, f.delay.max, f.delay.n_gap
    );
}

fn train(
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    runs: Option<usize>,
    episodes: Option<usize>,
    algo: Option<String>,
    checkpoint: bool,
) -> Result<()> {
    let mut cfg = match &config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = runs {
        cfg.runs = r;
    }
    if let Some(e) = episodes {
        cfg.episodes = e;
    }
    if let Some(a) = algo {
        cfg.algorithm = a.parse::<Algorithm>()?;
    }
    cfg.validate()?;
    let paths = OutputPaths::prepare(&out)?;
    let save = checkpoint && cfg.algorithm.is_learning();
    let campaign = run_experiment_with(&cfg, |rec, ctl| {
        if save {
            Checkpoint::capture(&cfg, ctl, cfg.episodes, rec.seed)?.save(&cfg, paths.checkpoint(rec.run))?;
        }
        let last = rec.episodes.last().expect("at least one episode");
        eprintln!(
            "run {:>3} seed {:#018x}: {} updates, last episode TPut {:.3} Mbps, collisions {}",
            rec.run, rec.seed, rec.updates, last.tput_mbps, last.collisions
        );
        Ok(())
    })?;
    let summary = emit_outputs(&campaign, &paths)?;
    print_summary(&summary);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            out,
            seed,
            runs,
            episodes,
            algo,
            no_checkpoint,
        } => train(config, out, seed, runs, episodes, algo, !no_checkpoint),
        Command::Overhead {
            eps,
            nmin,
            nmax,
            history,
            out,
        } => {
            anyhow::ensure!(nmin <= nmax, "--nmin must not exceed --nmax");
            let csv = overhead_csv(&overhead_table(nmin..=nmax, history, eps)?);
            match out {
                Some(p) => std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            episodes,
            out,
        } => {
            let campaign = evaluate_checkpoint(&checkpoint, episodes)?;
            let summary = match out {
                Some(dir) => emit_outputs(&campaign, &OutputPaths::prepare(dir)?)?,
                None => ra_marl::harness::summarize(&campaign),
            };
            print_summary(&summary);
            Ok(())
        }
    }
}
