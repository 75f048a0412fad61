use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use datashare_leakage::{
    extract_mspsi, extract_num_doc, extract_one_bit, random_corpus, BooleanOracle, CorpusSpec, Doc, MspsiOracle,
    NumDocOracle, OneBitOracle,
};

#[derive(Parser)]
#[command(about = "Measure how many searches it takes to reconstruct a hidden corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run extraction on random corpora and print one CSV row per trial.
    Run {
        #[arg(long, value_enum)]
        oracle: OracleKind,
        /// Keyword universe size.
        #[arg(long)]
        n: usize,
        /// Documents per corpus.
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 3)]
        ulim: usize,
        /// Keywords per multi-set PSI query.
        #[arg(long, default_value_t = 10)]
        lim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        trials: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleKind {
    #[value(name = "one_bit")]
    OneBit,
    #[value(name = "num_doc")]
    NumDoc,
    Mspsi,
}

fn main() -> Result<()> {
    let Command::Run { oracle, n, d, ulim, lim, seed, trials } = Cli::parse().command;
    println!("seed,queries_used,recovered_fraction");
    for seed in seed..seed + trials {
        let docs = random_corpus(CorpusSpec::new(n, d), seed)?;
        let (queries, got) = match oracle {
            OracleKind::OneBit => {
                let mut o = OneBitOracle::new(&docs);
                let got = extract_one_bit(&mut o, n, ulim);
                (o.queries(), got)
            }
            OracleKind::NumDoc => {
                let mut o = NumDocOracle::new(&docs);
                let got = extract_num_doc(&mut o, n);
                (BooleanOracle::queries(&o), got)
            }
            OracleKind::Mspsi => {
                let mut o = MspsiOracle::new(&docs, lim, seed)?;
                let got = extract_mspsi(&mut o, n, docs.len())?;
                (o.queries(), got)
            }
        };
        println!("{seed},{queries},{:.4}", recovered_fraction(&docs, &got));
    }
    Ok(())
}

fn recovered_fraction(docs: &[Doc], got: &[Doc]) -> f64 {
    let hits = docs.iter().filter(|d| got.contains(d)).count();
    hits as f64 / docs.len().max(1) as f64
}
