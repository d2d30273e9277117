use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bgtemp::backend::SliceSummary;
use bgtemp::campaign::{selftest, Campaign, Overrides};
use bgtemp::estimate::DistanceKind;
use bgtemp::metrics::MetricKind;
use bgtemp::report::heatmap_csv;
use bgtemp::Result;

/// Background-temperature estimation harness.
#[derive(Parser)]
#[command(name = "bgtemp", version)]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Campaign config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Store directory; overrides the config.
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use only the first N prompts.
    #[arg(long)]
    only_prompts: Option<usize>,
    /// Single metric instead of the configured ones.
    #[arg(long)]
    metric: Option<MetricKind>,
    /// ks, js[:bins] or kl[:bins].
    #[arg(long)]
    distance: Option<DistanceKind>,
}

impl Common {
    fn campaign(&self) -> Result<Campaign> {
        Campaign::load(
            &self.config,
            &Overrides {
                store: self.store.clone(),
                seed: self.seed,
                only_prompts: self.only_prompts,
                metric: self.metric,
                distance: self.distance,
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every reference at every grid temperature.
    RunReference(Common),
    /// Run the system under test at temperature 0 in every environment.
    RunSut(Common),
    /// Write all variability distributions as one long CSV.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Fit, aggregate and write the report bundle.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Distance matrix between two references.
    Heatmap {
        #[command(flatten)]
        common: Common,
        /// Two reference ids, comma separated; defaults to the first two
        /// (or the first against itself).
        #[arg(long)]
        pair: Option<String>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Offline end-to-end check on the synthetic lab model.
    Selftest {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Prompts in the synthetic prompt set.
        #[arg(long, default_value_t = 100)]
        only_prompts: usize,
        #[arg(long, default_value = "selftest-report")]
        out: PathBuf,
    },
}

fn print_summaries(summaries: &[SliceSummary]) -> bool {
    println!("backend\tT\trequested\twritten\tpresent\tfailed");
    for s in summaries {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            s.backend_id,
            s.temperature,
            s.requested,
            s.written,
            s.skipped,
            s.failures.len()
        );
    }
    let failures: Vec<_> = summaries
        .iter()
        .flat_map(|s| s.failures.iter().map(move |f| (s, f)))
        .collect();
    for (s, f) in &failures {
        eprintln!(
            "failed: {} T={} {} run {}: {}",
            s.backend_id, s.temperature, f.prompt_id, f.run_index, f.message
        );
    }
    failures.is_empty()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::RunReference(common) => {
            let c = common.campaign()?;
            let mut store = c.open_store()?;
            Ok(print_summaries(&c.run_reference(&mut store)?))
        }
        Command::RunSut(common) => {
            let c = common.campaign()?;
            let mut store = c.open_store()?;
            Ok(print_summaries(&c.run_sut(&mut store)?))
        }
        Command::Metrics { common, out } => {
            let c = common.campaign()?;
            let csv = c.metrics_csv(&c.open_store()?)?;
            fs::create_dir_all(&out)?;
            let path = out.join("distributions.csv");
            fs::write(&path, csv)?;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Estimate { common, out } => {
            let c = common.campaign()?;
            let bundle = c.estimate(&c.open_store()?)?;
            bundle.write(&out)?;
            print!("{}", bundle.summary_table());
            for note in &bundle.summary.notes {
                println!("note: {note}");
            }
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Heatmap { common, pair, out } => {
            let c = common.campaign()?;
            let refs: Vec<String> = c.config.references.iter().map(|r| r.id.clone()).collect();
            let (a, b) = match pair.as_deref().map(|p| p.split_once(',')) {
                Some(Some((a, b))) => (a.trim().to_string(), b.trim().to_string()),
                Some(None) => return Err(bgtemp::Error::Config("--pair takes two ids: a,b".into())),
                None => (refs[0].clone(), refs.get(1).unwrap_or(&refs[0]).clone()),
            };
            let h = c.heatmap(&c.open_store()?, &a, &b)?;
            fs::create_dir_all(&out)?;
            let path = out.join(format!(
                "heatmap_{}_{}.csv",
                bgtemp::store::encode_component(&a),
                bgtemp::store::encode_component(&b)
            ));
            fs::write(&path, heatmap_csv(&h))?;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Selftest {
            seed,
            only_prompts,
            out,
        } => {
            let report = selftest(seed, only_prompts, &out)?;
            for c in &report.checks {
                println!(
                    "{} {}: {} (seed {})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail,
                    c.seed
                );
            }
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
