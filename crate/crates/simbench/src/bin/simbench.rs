use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use datashare_simbench::messaging::{run_bandwidth_model, run_messaging_sim, BandwidthConfig, MessagingRow};
use datashare_simbench::psi::{run_psi_bench, PsiBench};
use datashare_simbench::{e2e, SimConfig, MB};

/// Simulations and cost benchmarks. Every subcommand prints CSV with a
/// header line to stdout (or to --out).
#[derive(Parser)]
#[command(name = "simbench", version)]
struct Cli {
    /// Write the CSV here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Operation counts, bytes and timings of MS-PSI, client-server PSI and
    /// vanilla PSI on one scenario.
    Psi {
        #[arg(long, default_value_t = 10)]
        m: usize,
        /// Number of server sets.
        #[arg(long = "N", default_value_t = 1000)]
        n: usize,
        /// Total elements over all sets.
        #[arg(long = "S", default_value_t = 100_000)]
        s: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Cover-traffic latency and per-journalist bandwidth.
    Messaging {
        #[arg(long, default_value_t = 1000)]
        journalists: usize,
        /// Cover messages per recipient per day. Repeat for a sweep.
        #[arg(long, default_values_t = vec![4.0])]
        rate: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        days: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also sweep the population (bandwidth only) and write
        /// `journalists total_mb_per_day` pairs for plotting.
        #[arg(long)]
        population_plot: Option<PathBuf>,
    },
    /// Full deployment from a JSON configuration file.
    E2e {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut out: Box<dyn Write> = match &cli.out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    match cli.command {
        Command::Psi { m, n, s, seed } => {
            let bench = run_psi_bench(m, n, s, seed)?;
            writeln!(out, "{}", PsiBench::CSV_HEADER)?;
            for row in bench.csv_rows() {
                writeln!(out, "{row}")?;
            }
            if !bench.agree {
                anyhow::bail!("the three variants disagree on intersection sizes");
            }
        }
        Command::Messaging {
            journalists,
            rate,
            days,
            seed,
            population_plot,
        } => {
            writeln!(out, "{}", MessagingRow::CSV_HEADER)?;
            for r in &rate {
                writeln!(out, "{}", run_messaging_sim(journalists, *r, days, seed)?.csv())?;
            }
            if let Some(path) = population_plot {
                let mut plot = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                writeln!(plot, "# journalists rate model_total_mb_per_day total_mb_per_day")?;
                for r in &rate {
                    for n in [50, 100, 200, 400, 700, 1000] {
                        let rep = run_bandwidth_model(&BandwidthConfig::new(n, *r, days.min(1.0), seed))?;
                        let total = |per: f64| per * n as f64;
                        writeln!(
                            plot,
                            "{n} {r} {:.1} {:.1}",
                            total(rep.model_mb_per_journalist_day()),
                            total(rep.total_mb_per_journalist_day())
                        )?;
                    }
                    writeln!(plot)?;
                }
            }
        }
        Command::E2e { config } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg: SimConfig = serde_json::from_str(&text).context("parsing the simulation config")?;
            let report = e2e::run_e2e_sim(&cfg)?;
            writeln!(out, "{}", e2e::E2eReport::CSV_HEADER)?;
            for row in report.csv_rows() {
                writeln!(out, "{row}")?;
            }
            let r = &report.reports;
            eprintln!(
                "trace {} | {} queries, {}/{} reports exact, {} overcounting, {} wrong",
                report.trace_hash, r.queries, r.exact, r.expected, r.overcounts, r.wrong
            );
            eprintln!(
                "conversation: completed={} latencies (min) {:?}, bound {:.0} min",
                report.conversation.completed, report.conversation.latency_min, report.conversation.bound_min
            );
            if let Some(d) = &report.owner_daily {
                eprintln!(
                    "owner day at {} journalists: {:.0} answers, {:.1} s compute, replies {:.2} MB padded ({:.2} MB unpadded), queries {:.2} MB",
                    d.journalists, d.answers_per_day, d.compute_s, d.reply_mb_padded, d.reply_mb_unpadded, d.query_download_mb
                );
            }
            let cover: u64 = report.parties.iter().map(|p| p.cover_bytes).sum();
            let search: u64 = report.parties.iter().map(|p| p.search_bytes).sum();
            eprintln!("cover {:.2} MB vs search {:.2} MB", cover as f64 / MB, search as f64 / MB);
            if r.wrong > 0 {
                anyhow::bail!("{} reports disagree with the brute-force answer", r.wrong);
            }
        }
    }
    Ok(())
}
