use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kvrefresh::error::{Error, Result};
use kvrefresh::harness::{
    compare, nll_ratio_csv, parse_run_config, read_report, run, self_check, write_outputs,
    RunConfig,
};
use kvrefresh::tasks::chainkey::{evaluate_jsonl, generate_chain_instance, parse_instance_line};

#[derive(Parser)]
#[command(
    name = "kvrefresh",
    version,
    about = "Decode with refreshable partial KV caches and eviction baselines",
    after_help = "Config fields can be overridden with dotted flags mirroring the JSON keys, \
                  e.g. --policy.kind refreshkv --schedule.qc-stride 5"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write trace.jsonl and report.json.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; overrides the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Verify the policy equivalence ladder before running.
        #[arg(long)]
        self_check: bool,
    },
    /// Compare reports produced over the same task seed.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Write the comparison as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write per-token NLL ratios against the baseline here.
        #[arg(long)]
        nll_csv: Option<PathBuf>,
    },
    /// Emit chain-of-key instances as JSON lines.
    GenChainkey {
        #[arg(long, default_value_t = 100)]
        n_keys: usize,
        #[arg(long = "T", default_value_t = 10)]
        t: usize,
        #[arg(long = "W", default_value_t = 2)]
        w: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of instances, with seeds seed, seed+1, ...
        #[arg(long, default_value_t = 1)]
        count: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score {instance_id, output_text} lines against generated instances.
    EvalChainkey {
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the policy equivalence ladder and exit.
    SelfCheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Top-level config fields that can be set straight from the command line.
const TOP_LEVEL_KEYS: [&str; 3] = ["n_generate", "seed", "record_wall_clock"];

fn is_override_key(key: &str) -> bool {
    let name = key.split_once('=').map_or(key, |(k, _)| k).replace('-', "_");
    name.contains('.') || TOP_LEVEL_KEYS.contains(&name.as_str())
}

type Overrides = Vec<(String, String)>;

/// Pull `--a.b value` pairs out of the argument list of `run` and
/// `self-check`; clap sees the rest.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    if !matches!(args.get(1).map(String::as_str), Some("run" | "self-check")) {
        return Ok((args, Vec::new()));
    }
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        match arg.strip_prefix("--") {
            Some(key) if is_override_key(key) => {
                let (key, value) = match key.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => {
                        let v = it
                            .next()
                            .ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
                        (key.to_string(), v)
                    }
                };
                overrides.push((key, value));
            }
            _ => rest.push(arg),
        }
    }
    Ok((rest, overrides))
}

fn load_config(path: Option<&PathBuf>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = path.map(fs::read_to_string).transpose()?;
    parse_run_config(text.as_deref(), overrides)
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn print_ladder(config: &RunConfig) -> Result<()> {
    let report = self_check(config)?;
    for c in &report.checks {
        println!(
            "{} {} (max rel diff {:e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.max_relative_diff
        );
    }
    report.into_result().map(|_| ())
}

fn execute(command: Command, overrides: &[(String, String)]) -> Result<()> {
    match command {
        Command::Run {
            config,
            out,
            self_check,
        } => {
            let mut config = load_config(config.as_ref(), overrides)?;
            if out.is_some() {
                config.output = out;
            }
            config.validate()?;
            if self_check {
                print_ladder(&config)?;
            }
            let output = run(&config)?;
            match &config.output {
                Some(dir) => write_outputs(dir, &output)?,
                None => println!("{}", serde_json::to_string_pretty(&output.report)?),
            }
        }
        Command::Compare {
            reports,
            csv,
            nll_csv,
        } => {
            let reports = reports
                .iter()
                .map(|p| read_report(p))
                .collect::<Result<Vec<_>>>()?;
            let cmp = compare(&reports)?;
            print!("{}", cmp.to_table());
            if let Some(p) = csv {
                fs::write(p, cmp.to_csv())?;
            }
            if let Some(p) = nll_csv {
                fs::write(p, nll_ratio_csv(&reports)?)?;
            }
        }
        Command::GenChainkey {
            n_keys,
            t,
            w,
            seed,
            count,
            out,
        } => {
            let mut text = String::new();
            for s in seed..seed.saturating_add(count) {
                let inst = generate_chain_instance(n_keys, w, t, s)?;
                text.push_str(&serde_json::to_string(&inst)?);
                text.push('\n');
            }
            emit(out.as_ref(), &text)?;
        }
        Command::EvalChainkey {
            instances,
            outputs,
            out,
        } => {
            let instances = fs::read_to_string(instances)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(parse_instance_line)
                .collect::<Result<Vec<_>>>()?;
            let results = evaluate_jsonl(&instances, &fs::read_to_string(outputs)?)?;
            let mut text = String::new();
            for r in results {
                text.push_str(&serde_json::to_string(&r)?);
                text.push('\n');
            }
            emit(out.as_ref(), &text)?;
        }
        Command::SelfCheck { config } => {
            let config = load_config(config.as_ref(), overrides)?;
            print_ladder(&config)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
