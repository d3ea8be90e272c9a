use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spectral_experts::experiment::{
    check_gate, histogram_data, identifiability_reports, learning_curve, read_json_report,
    run_config, write_curve_csv, write_report, ExperimentConfig, Method, ReportFormat,
};
use spectral_experts::Error;

#[derive(Parser)]
#[command(name = "mixreg-bench", version, about = "Benchmarks for mixtures of linear regressions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write a per-attempt report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Report format: csv or json.
        #[arg(long, default_value = "csv")]
        format: ReportFormat,
    },
    /// Print the identifiability diagnostics for p = 1, 2, 3.
    CheckIdentifiability {
        #[command(flatten)]
        common: Common,
    },
    /// Sweep the sample size and write per-method statistics.
    Curve {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sample sizes.
        #[arg(long, value_delimiter = ',', default_value = "1000,3000,10000,30000,100000")]
        ns: Vec<usize>,
    },
    /// Bin the aligned errors of one method from a JSON report.
    Histogram {
        /// JSON report written by `run --format json`.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of spectral, em, spectral_em.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Output path; standard output if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the published sample size and repetition counts.
    #[arg(long)]
    paper_scale: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if self.paper_scale {
            cfg.paper_scale();
        }
        if let Some(n) = self.n {
            cfg.n = n;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(methods) = &self.methods {
            cfg.methods = methods.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Error> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { common, format } => {
            let cfg = common.load()?;
            let report = run_config(&cfg)?;
            for a in &report.aggregates {
                log::info!(
                    "{}: mean {:.4} +- {:.4} over {} ({} failed)",
                    a.method,
                    a.mean,
                    a.std,
                    a.count,
                    a.failures
                );
            }
            write_report(&report, format, output(&common.out)?)
        }
        Command::CheckIdentifiability { common } => {
            let cfg = common.load()?;
            let reports = identifiability_reports(&cfg)?;
            let mut w = output(&common.out)?;
            writeln!(w, "order,sigma_min,threshold,pass")?;
            for r in &reports {
                writeln!(w, "{},{:e},{:e},{}", r.order, r.sigma_min, r.threshold, r.pass)?;
            }
            w.flush()?;
            check_gate(cfg.identifiability_gate, &reports)
        }
        Command::Curve { common, ns } => {
            let cfg = common.load()?;
            let points = learning_curve(&cfg, &ns)?;
            let mut w = output(&common.out)?;
            write_curve_csv(&points, &mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::Histogram {
            report,
            method,
            bins,
            out,
        } => {
            let report = read_json_report(report)?;
            let mut w = output(&out)?;
            writeln!(w, "bin_lo,bin_hi,count")?;
            for b in histogram_data(&report, method, bins)? {
                writeln!(w, "{:e},{:e},{}", b.lo, b.hi, b.count)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::PreFlight { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
