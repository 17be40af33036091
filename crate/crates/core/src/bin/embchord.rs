use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use embchord::advertisement::{decode_advertisement, encode_advertisement, parse_text, render_plain};
use embchord::bench::{run_suite, DEFAULT_SEED, SUITES};
use embchord::error::{Error, Result};
use embchord::sim::metrics::MetricsReport;
use embchord::sim::scenario::Scenario;

#[derive(Parser)]
#[command(name = "embchord", version, about = "Overlay simulator and tooling")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file and print its metrics report.
    Run {
        file: PathBuf,
        /// RNG seed; EMBCHORD_SEED takes precedence.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Lines)]
        format: Format,
    },
    /// Run a canned suite (`acceptance` or `c1`..`c12`).
    Bench {
        suite: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize a report written by `run`.
    Inspect { report: PathBuf },
    /// Encode and decode each advertisement in a `key = value` file.
    Codec { file: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Lines,
    Table,
    Jsonl,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 2 } else { 0 });
        }
    };
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn seed(flag: Option<u64>) -> Result<Option<u64>> {
    match std::env::var("EMBCHORD_SEED") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Error::Config(format!("EMBCHORD_SEED is not a number: {v:?}"))),
        Err(_) => Ok(flag),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn dispatch(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Run { file, seed: s, out, format } => {
            let report = Scenario::parse(&read(&file)?)?.run(seed(s)?)?;
            let text = match format {
                Format::Lines => report.render_lines(),
                Format::Table => report.render_table(),
                Format::Jsonl => report.render_jsonl(),
            };
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Bench { suite, seed: s } => {
            if !SUITES.contains(&suite.as_str()) {
                eprintln!("error: unknown suite {suite:?}; expected one of {}", SUITES.join(", "));
                return Ok(ExitCode::from(2));
            }
            let report = run_suite(&suite, seed(s)?.unwrap_or(DEFAULT_SEED))?;
            print!("{}", report.render());
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Cmd::Inspect { report } => {
            print!("{}", MetricsReport::parse_any(&read(&report)?)?.summary());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Codec { file } => {
            let ads = parse_text(&read(&file)?)?;
            let mut all_ok = true;
            println!("{:<24} {:>8} {:>8} {:>7}  round-trip", "name", "binary", "text", "ratio");
            for a in &ads {
                let bytes = encode_advertisement(a)?;
                let ok = decode_advertisement(&bytes).as_ref() == Ok(a);
                all_ok &= ok;
                let plain = render_plain(a).len();
                println!(
                    "{:<24} {:>8} {:>8} {:>7.3}  {}",
                    a.name,
                    bytes.len(),
                    plain,
                    bytes.len() as f64 / plain as f64,
                    if ok { "ok" } else { "MISMATCH" }
                );
            }
            Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}
