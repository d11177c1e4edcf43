use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spsg_cli::config::ExperimentConfig;
use spsg_cli::pipeline::{self, stage};
use spsg_core::nn::Network;
use spsg_core::proxy;
use spsg_core::spgq;
use spsg_core::Result;

#[derive(Parser)]
#[command(name = "spsg", about = "Superpixel sample-gradient model stealing laboratory")]
struct Cli {
    /// Experiment config file (flat `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the victim network and save it with its metrics.
    TrainVictim,
    /// Query the victim over the attack split and save the query set.
    BuildQueryset,
    /// Train the proxy on a saved query set.
    Steal,
    /// Accuracy, agreement, and adversarial-transfer metrics.
    Evaluate,
    /// Render SG-Map heatmaps from a saved query set.
    Sgmap,
    /// Replay the attack-split queries through the Prada monitor.
    PradaReport,
    /// Full pipeline: train, query, steal, evaluate, report.
    Run,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cfg.out.clone();
    match cli.cmd {
        Cmd::TrainVictim => {
            std::fs::create_dir_all(&out)?;
            let splits = stage("load-data", pipeline::load_splits(&cfg))?;
            let (victim, history) =
                stage("train-victim", pipeline::train_victim(&cfg, &splits))?;
            stage("train-victim", victim.save(&out.join("victim.net")))?;
            stage(
                "train-victim",
                pipeline::write_victim_metrics(&out.join("victim_metrics.csv"), &history),
            )?;
            let last = history.last().map(|&(_, _, a)| a).unwrap_or(0.0);
            println!("victim saved to {} (test accuracy {last})", out.display());
        }
        Cmd::BuildQueryset => {
            std::fs::create_dir_all(&out)?;
            let splits = stage("load-data", pipeline::load_splits(&cfg))?;
            let victim = stage("build-queryset", Network::load(&out.join("victim.net")))?;
            let oracle = pipeline::make_oracle(&cfg, victim, false);
            let qs = stage(
                "build-queryset",
                pipeline::build_queryset(&cfg, &oracle, &splits.attack),
            )?;
            stage(
                "build-queryset",
                spgq::save_query_set(&qs, &out.join("queryset.spsgqs")),
            )?;
            println!(
                "query set saved: {} records, {} victim queries",
                qs.records.len(),
                qs.ledger_total
            );
        }
        Cmd::Steal => {
            let splits = stage("load-data", pipeline::load_splits(&cfg))?;
            let victim = stage("steal", Network::load(&out.join("victim.net")))?;
            let qs = stage("steal", spgq::load_query_set(&out.join("queryset.spsgqs")))?;
            let (proxy_net, history) = stage(
                "steal",
                pipeline::steal_proxy(&cfg, &victim, &qs, &splits.attack, &splits.test),
            )?;
            stage("steal", proxy_net.save(&out.join("proxy.net")))?;
            stage(
                "steal",
                proxy::write_metrics_csv(&out.join("steal_metrics.csv"), &history),
            )?;
            if let Some(m) = history.last() {
                println!(
                    "proxy saved (final loss {}, agreement {:?})",
                    m.total, m.val_agreement
                );
            }
        }
        Cmd::Evaluate => {
            let splits = stage("load-data", pipeline::load_splits(&cfg))?;
            let victim = stage("evaluate", Network::load(&out.join("victim.net")))?;
            let proxy_net = stage("evaluate", Network::load(&out.join("proxy.net")))?;
            let rows = stage(
                "evaluate",
                pipeline::evaluate(&cfg, &victim, &proxy_net, &splits.test),
            )?;
            stage(
                "evaluate",
                pipeline::write_metric_rows(&out.join("evaluation.csv"), &rows),
            )?;
            for (k, v) in &rows {
                println!("{k} = {v}");
            }
        }
        Cmd::Sgmap => {
            let qs = stage("sgmap", spgq::load_query_set(&out.join("queryset.spsgqs")))?;
            let written = stage(
                "sgmap",
                pipeline::write_sgmaps(&qs, cfg.sgmap_count, &out.join("sgmaps")),
            )?;
            println!("wrote {} SG-Maps to {}", written.len(), out.join("sgmaps").display());
        }
        Cmd::PradaReport => {
            std::fs::create_dir_all(&out)?;
            let splits = stage("load-data", pipeline::load_splits(&cfg))?;
            let victim = stage("prada-report", Network::load(&out.join("victim.net")))?;
            let mut oracle = pipeline::make_oracle(&cfg, victim, true);
            stage(
                "prada-report",
                pipeline::build_queryset(&cfg, &oracle, &splits.attack).map(|_| ()),
            )?;
            let monitor = oracle.take_monitor().expect("monitor was attached");
            let pdir = out.join("prada");
            std::fs::create_dir_all(&pdir)?;
            stage("prada-report", monitor.report(&pdir))?;
            println!("Prada report written to {}", pdir.display());
        }
        Cmd::Run => {
            pipeline::run_experiment(&cfg)?;
            println!("experiment complete: {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
