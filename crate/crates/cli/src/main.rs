use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use relrl::checks::{enumcheck, gradcheck_all, GRADCHECK_TOLERANCE};
use relrl::config::{parse_kv, DomainKind, DomainSpec, RunConfig};
use relrl::run::{
    evaluate_policy, generalize, train, write_reports, EvalOptions, Policy, REPORT_FILE, REPORT_HEADER,
};

#[derive(Parser)]
#[command(name = "relrl", version, about = "Relational actor-critic training on graph-structured planning domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override any config key, e.g. `--set lr_start=1e-3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint on fresh instances.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to the training domain.
        #[arg(long)]
        domain: Option<DomainKind>,
        /// `N`, or `WxH/B` for Sokoban; defaults to the training size.
        #[arg(long)]
        size: Option<String>,
        /// Sokoban levels file or directory instead of generated levels.
        #[arg(long)]
        levels: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        /// Argmax decoding instead of sampling.
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        step_limit: Option<usize>,
        /// Also write the report to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint across sizes of its training domain.
    Generalize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        sizes: Vec<String>,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        step_limit: Option<usize>,
        /// Directory for report.csv; defaults to the checkpoint's parent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check on the smallest instance of every domain.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sum the policy over every grounded action for random parameters.
    Enumcheck {
        #[arg(long)]
        domain: DomainKind,
        #[arg(long)]
        size: String,
        #[arg(long, default_value_t = 100)]
        settings: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn seed_or_env(seed: Option<u64>) -> Result<u64> {
    match (seed, std::env::var("RELRL_SEED")) {
        (Some(s), _) => Ok(s),
        (None, Ok(v)) => v.trim().parse().with_context(|| format!("RELRL_SEED `{v}` is not an integer")),
        (None, Err(_)) => Ok(0),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, seed, out, set } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let file = parse_kv(&text)?;
            let mut flags = BTreeMap::new();
            for kv in set {
                let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
                flags.insert(k.trim().to_string(), v.trim().to_string());
            }
            if seed.is_some() || (!flags.contains_key("seed") && !file.contains_key("seed")) {
                flags.insert("seed".into(), seed_or_env(seed)?.to_string());
            }
            if let Some(out) = out {
                flags.insert("out".into(), out.display().to_string());
            }
            let cfg = RunConfig::resolve(&file, &flags)?;
            println!("training {} {} -> {}", cfg.domain.kind(), cfg.domain.size_label(), cfg.out.display());
            let summary = train(&cfg, |m| {
                println!(
                    "epoch {:>4}  step {:>8}  return {:>9.3}  solved {:>6.3}  length {:>7.2}",
                    m.epoch, m.step, m.mean_return, m.solved_fraction, m.mean_length
                )
            })?;
            println!("checkpoint written to {}", summary.checkpoint.display());
        }
        Command::Eval {
            ckpt,
            domain,
            size,
            levels,
            episodes,
            greedy,
            seed,
            step_limit,
            out,
        } => {
            let policy = Policy::load(&ckpt)?;
            let kind = domain.unwrap_or(policy.kind);
            let mut spec = match size {
                Some(s) => DomainSpec::parse(kind, &s)?,
                None if kind == policy.kind => policy.trained_on.clone(),
                None => bail!("--size is required when evaluating on another domain"),
            };
            if let Some(path) = levels {
                match &mut spec {
                    DomainSpec::Sokoban { levels, .. } => *levels = Some(path),
                    _ => bail!("--levels only applies to Sokoban"),
                }
            }
            let opts = EvalOptions {
                episodes,
                greedy,
                seed: seed_or_env(seed)?,
                step_limit,
                ..EvalOptions::default()
            };
            let report = evaluate_policy(&policy, &spec, &opts)?;
            println!("{REPORT_HEADER}\n{}", report.csv_row());
            if let Some(out) = out {
                write_reports(&out, &[report])?;
            }
        }
        Command::Generalize {
            ckpt,
            sizes,
            episodes,
            greedy,
            seed,
            step_limit,
            out,
        } => {
            if sizes.is_empty() {
                bail!("--sizes needs at least one size");
            }
            let policy = Policy::load(&ckpt)?;
            let opts = EvalOptions {
                episodes,
                greedy,
                seed: seed_or_env(seed)?,
                step_limit,
                ..EvalOptions::default()
            };
            let reports = generalize(&policy, policy.kind, &sizes, &opts)?;
            println!("{REPORT_HEADER}");
            for r in &reports {
                println!("{}", r.csv_row());
            }
            let dir = out.unwrap_or_else(|| ckpt.parent().map(PathBuf::from).unwrap_or_default());
            let path = dir.join(REPORT_FILE);
            write_reports(&path, &reports)?;
            println!("report written to {}", path.display());
        }
        Command::Gradcheck { seed } => {
            let mut ok = true;
            for (spec, report) in gradcheck_all(seed_or_env(seed)?)? {
                let pass = report.passed();
                ok &= pass;
                println!(
                    "{} {:<12} {:>5} coordinates  max relative error {:.3e}  {}",
                    if pass { "PASS" } else { "FAIL" },
                    format!("{} {}", spec.kind(), spec.size_label()),
                    report.checked,
                    report.max_relative_error,
                    if pass { String::new() } else { format!("({} above {GRADCHECK_TOLERANCE:e})", report.failures.len()) }
                );
                for f in report.failures.iter().take(5) {
                    println!("     {}[{}]: analytic {:.6e} numeric {:.6e}", f.name, f.index, f.analytic, f.numeric);
                }
            }
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::Enumcheck {
            domain,
            size,
            settings,
            seed,
        } => {
            let spec = DomainSpec::parse(domain, &size)?;
            let check = enumcheck(&spec, settings, seed_or_env(seed)?)?;
            let pass = check.max_deviation <= 1e-6;
            println!(
                "{} {} {}: {} parameter settings, {} actions, max |sum pi - 1| = {:.3e}",
                if pass { "PASS" } else { "FAIL" },
                spec.kind(),
                spec.size_label(),
                check.settings,
                check.actions,
                check.max_deviation
            );
            return Ok(if pass { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
    }
    Ok(ExitCode::SUCCESS)
}
