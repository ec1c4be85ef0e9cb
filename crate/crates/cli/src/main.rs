use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qet_cli::compare::{compare, ReferenceTable};
use qet_cli::config::{ExperimentConfig, Format, OutputSpec, PhiMode, SweepConfig};
use qet_cli::pipeline::{run, sweep};
use qet_cli::report::{emit, ExperimentReport};
use qet_cli::{selftest, CliError, Result};
use qet_core::noise::ReadoutProfile;
use qet_core::protocol::ProtocolVariant;

#[derive(Parser)]
#[command(name = "qet", version, about = "Few-qubit quantum energy teleportation: exact, sampled, noisy and mitigated")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report.
    Run(RunArgs),
    /// Run a grid of parameter points.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Tabulate reports side by side, with reference values when available.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Reference values file; the bundled table is used when omitted.
        #[arg(long, conflicts_with = "no_reference")]
        reference: Option<PathBuf>,
        /// Leave out the reference columns.
        #[arg(long)]
        no_reference: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Readout profiles shipped with the tool.
    Profiles {
        #[command(subcommand)]
        command: ProfilesCommand,
    },
    /// Quick internal-consistency checks.
    Selftest,
}

#[derive(Subcommand)]
enum ProfilesCommand {
    List,
}

#[derive(Args)]
struct OutputArgs {
    /// Output file; stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// json or csv; defaults to the output extension, then json.
    #[arg(long)]
    format: Option<Format>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<ProtocolVariant>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    shots: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Bundled readout profile name, or "none".
    #[arg(long)]
    profile: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    mitigation: Option<bool>,
    /// closed_form, optimized, or an explicit angle in radians.
    #[arg(long, allow_hyphen_values = true)]
    phi: Option<PhiMode>,
    #[command(flatten)]
    output: OutputArgs,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => {
                let need = |what: &str| CliError::Config(format!("--{what} is required without --config"));
                ExperimentConfig::new(
                    self.variant.ok_or_else(|| need("variant"))?,
                    self.h.ok_or_else(|| need("h"))?,
                    self.k.ok_or_else(|| need("k"))?,
                )
            }
        };
        if let Some(v) = self.variant {
            c.variant = v;
        }
        if let Some(h) = self.h {
            c.h = h;
        }
        if let Some(k) = self.k {
            c.k = k;
        }
        if let Some(s) = self.shots {
            c.shots = s;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(p) = &self.profile {
            c.backend_profile = p.clone();
        }
        if let Some(m) = self.mitigation {
            c.mitigation = m;
        }
        if let Some(p) = self.phi {
            c.phi_mode = p;
        }
        c.output = self.output.resolve(c.output.take());
        c.validate()?;
        Ok(c)
    }
}

impl OutputArgs {
    fn resolve(&self, from_config: Option<OutputSpec>) -> Option<OutputSpec> {
        match (&self.output, from_config) {
            (Some(path), _) => Some(OutputSpec { path: path.clone(), format: self.format }),
            (None, Some(mut o)) => {
                o.format = self.format.or(o.format);
                Some(o)
            }
            (None, None) => None,
        }
    }

    fn format(&self, spec: Option<&OutputSpec>) -> Format {
        self.format.or_else(|| spec.map(OutputSpec::resolved_format)).unwrap_or(Format::Json)
    }
}

fn warn(message: &str) {
    eprintln!("warning: {message}");
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let config = args.config()?;
            let report = run(&config)?;
            let format = args.output.format(config.output.as_ref());
            emit(&report.render(format), config.output.as_ref())
        }
        Command::Sweep { config, output } => {
            let mut config = SweepConfig::load(&config)?;
            config.output = output.resolve(config.output.take());
            let (report, warnings) = sweep(&config)?;
            warnings.iter().for_each(|w| warn(w));
            let text = match output.format(config.output.as_ref()) {
                Format::Json => report.to_json(),
                Format::Csv => report.to_csv(),
            };
            emit(&text, config.output.as_ref())?;
            if !report.all_v_nonpositive {
                let failures: Vec<_> = report.assertions.iter().filter(|a| a.starts_with("FAIL")).cloned().collect();
                return Err(CliError::Invariant(failures.join("; ")));
            }
            Ok(())
        }
        Command::Compare { reports, reference, no_reference, output } => {
            let reports = reports.iter().map(|p| ExperimentReport::load(p)).collect::<Result<Vec<_>>>()?;
            let table = match (no_reference, reference) {
                (true, _) => None,
                (false, Some(path)) => {
                    let (table, warning) = ReferenceTable::load(&path)?;
                    if let Some(w) = warning {
                        warn(&w);
                    }
                    table
                }
                (false, None) => Some(ReferenceTable::bundled()),
            };
            let result = compare(&reports, table.as_ref())?;
            let spec = output.resolve(None);
            let text = match output.format(spec.as_ref()) {
                Format::Json => result.to_json(),
                Format::Csv => result.to_csv(),
            };
            emit(&text, spec.as_ref())
        }
        Command::Profiles { command: ProfilesCommand::List } => {
            for name in ReadoutProfile::bundled_names() {
                let p = ReadoutProfile::bundled(name)?;
                let errors: Vec<String> = p.qubits.iter().map(|q| format!("q{}: p10={} p01={}", q.index, q.p10, q.p01)).collect();
                println!("{name}  ({} qubits)  {}", p.width(), errors.join(", "));
            }
            Ok(())
        }
        Command::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            match checks.iter().filter(|c| !c.passed).count() {
                0 => Ok(()),
                n => Err(CliError::Invariant(format!("{n} self-test check(s) failed"))),
            }
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
