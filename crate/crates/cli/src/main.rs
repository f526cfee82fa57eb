use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowaudit::pipeline::{self as pl, Mode, PipelineConfig, PipelineError, ReportFormat};
use flowaudit::sigscan::{self, SignatureSpec, SigscanError};

#[derive(Parser)]
#[command(
    name = "flowaudit",
    version,
    about = "Audit app network traffic against privacy policy statements"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (YAML).
    #[arg(long, short)]
    config: PathBuf,
    /// `default` or `reference-policies`.
    #[arg(long, default_value = "default")]
    mode: Mode,
    /// Use only the first matching segment per sentence.
    #[arg(long)]
    first_match_only: bool,
}

#[derive(Subcommand)]
enum Command {
    /// All stages, writing every artifact to the output directory.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long = "report-format", value_parser = parse_format)]
        report_format: Vec<ReportFormat>,
    },
    /// Captures to transactions.jsonl.
    Ingest {
        #[command(flatten)]
        common: Common,
    },
    /// transactions.jsonl to flows.jsonl.
    Extract {
        #[command(flatten)]
        common: Common,
    },
    /// flows.jsonl to labels.jsonl.
    Label {
        #[command(flatten)]
        common: Common,
    },
    /// flows.jsonl and labels.jsonl to verdicts.jsonl.
    Check {
        #[command(flatten)]
        common: Common,
    },
    /// verdicts.jsonl to purposes.jsonl.
    Purpose {
        #[command(flatten)]
        common: Common,
    },
    /// Aggregate tables from the stage artifacts.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long = "report-format", value_parser = parse_format)]
        report_format: Vec<ReportFormat>,
        /// Also print each rendered report to stdout.
        #[arg(long)]
        stdout: bool,
    },
    /// Byte-signature tools for native binaries.
    Sigscan {
        #[command(subcommand)]
        command: SigCommand,
    },
}

#[derive(Subcommand)]
enum SigCommand {
    /// Derive a signature from a known function offset.
    Extract {
        /// Reference binary with a known function offset.
        binary: PathBuf,
        /// File offset of the function, hex (0x...) or decimal.
        #[arg(long, value_parser = parse_offset)]
        offset: u64,
        #[arg(long, default_value = "")]
        label: String,
        /// Write the signature JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Find every occurrence of a signature.
    Locate {
        /// Binary to search.
        binary: PathBuf,
        /// Signature JSON as written by `sigscan extract`.
        #[arg(long = "sig")]
        signature: PathBuf,
        /// Search executable ELF segments only and report virtual addresses.
        #[arg(long)]
        elf: bool,
    },
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    s.parse()
}

fn parse_offset(s: &str) -> Result<u64, String> {
    sigscan::parse_offset(s).ok_or_else(|| format!("invalid offset {s:?}"))
}

fn load_config(common: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    cfg.apply_mode(common.mode);
    cfg.first_match_only |= common.first_match_only;
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| PipelineError::Config(format!("output_dir {}: {e}", cfg.output_dir.display())))?;
    Ok(cfg)
}

fn formats(requested: &[ReportFormat]) -> Vec<ReportFormat> {
    if requested.is_empty() {
        ReportFormat::ALL.to_vec()
    } else {
        requested.to_vec()
    }
}

fn out(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

fn run_stage(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Run { common, report_format } => {
            let cfg = load_config(&common)?;
            let summary = pl::run_pipeline(&cfg, &formats(&report_format))?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
        }
        Command::Ingest { common } => {
            let cfg = load_config(&common)?;
            let (txns, stats) = pl::stage_ingest(&cfg)?;
            pl::write_records(&out(&cfg, pl::TRANSACTIONS_FILE), &txns, "ingest")?;
            log::info!(
                "{} transactions, {} unannotated packets",
                stats.transactions,
                stats.missing_annotation
            );
        }
        Command::Extract { common } => {
            let cfg = load_config(&common)?;
            let txns = pl::read_transactions(&out(&cfg, pl::TRANSACTIONS_FILE))?;
            let flows = pl::stage_extract(&cfg, &txns)?;
            pl::write_records(&out(&cfg, pl::FLOWS_FILE), &flows, "extract")?;
        }
        Command::Label { common } => {
            let cfg = load_config(&common)?;
            let flows = pl::read_records(&out(&cfg, pl::FLOWS_FILE), "label")?;
            let labels = pl::stage_label(&cfg, &flows)?;
            pl::write_records(&out(&cfg, pl::LABELS_FILE), &labels, "label")?;
        }
        Command::Check { common } => {
            let cfg = load_config(&common)?;
            let flows = pl::read_records(&out(&cfg, pl::FLOWS_FILE), "check")?;
            let labels = pl::read_records(&out(&cfg, pl::LABELS_FILE), "check")?;
            let verdicts = pl::stage_check(&cfg, &flows, &labels)?;
            pl::write_records(&out(&cfg, pl::VERDICTS_FILE), &verdicts, "check")?;
        }
        Command::Purpose { common } => {
            let cfg = load_config(&common)?;
            let verdicts = pl::read_records(&out(&cfg, pl::VERDICTS_FILE), "purpose")?;
            let purposed = pl::stage_purpose(&cfg, &verdicts)?;
            pl::write_records(&out(&cfg, pl::PURPOSES_FILE), &purposed, "purpose")?;
        }
        Command::Report {
            common,
            report_format,
            stdout,
        } => {
            let cfg = load_config(&common)?;
            let flows = pl::read_records(&out(&cfg, pl::FLOWS_FILE), "report")?;
            let labels = pl::read_records(&out(&cfg, pl::LABELS_FILE), "report")?;
            let verdicts = pl::read_records(&out(&cfg, pl::VERDICTS_FILE), "report")?;
            let purposed = pl::read_records(&out(&cfg, pl::PURPOSES_FILE), "report")?;
            let bundle = pl::stage_report(&flows, &labels, &verdicts, &purposed);
            let formats = formats(&report_format);
            pl::write_report(&cfg.output_dir, &bundle, &formats)?;
            if stdout {
                for f in formats {
                    print!("{}", f.render(&bundle));
                }
            }
        }
        Command::Sigscan { .. } => unreachable!("handled separately"),
    }
    Ok(())
}

#[derive(Debug)]
enum SigFailure {
    Io(String),
    Parse(String),
    Scan(SigscanError),
}

impl SigFailure {
    fn exit_code(&self) -> u8 {
        match self {
            SigFailure::Io(_) => 1,
            SigFailure::Parse(_) | SigFailure::Scan(SigscanError::BadHex { .. } | SigscanError::NotElf(_)) => 3,
            SigFailure::Scan(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            SigFailure::Io(m) | SigFailure::Parse(m) => m.clone(),
            SigFailure::Scan(e) => e.to_string(),
        }
    }
}

fn read_binary(path: &Path) -> Result<Vec<u8>, SigFailure> {
    std::fs::read(path).map_err(|e| SigFailure::Io(format!("{}: {e}", path.display())))
}

fn run_sigscan(command: SigCommand) -> Result<(), SigFailure> {
    match command {
        SigCommand::Extract {
            binary,
            offset,
            label,
            out,
        } => {
            let blob = read_binary(&binary)?;
            let sig = sigscan::extract_signature(&blob, offset, &label).map_err(SigFailure::Scan)?;
            let json = serde_json::to_string_pretty(&sig).expect("signature serializes") + "\n";
            match out {
                Some(p) => std::fs::write(&p, json).map_err(|e| SigFailure::Io(format!("{}: {e}", p.display())))?,
                None => print!("{json}"),
            }
        }
        SigCommand::Locate { binary, signature, elf } => {
            let blob = read_binary(&binary)?;
            let text = std::fs::read_to_string(&signature)
                .map_err(|e| SigFailure::Io(format!("{}: {e}", signature.display())))?;
            let sig: SignatureSpec =
                serde_json::from_str(&text).map_err(|e| SigFailure::Parse(format!("{}: {e}", signature.display())))?;
            let hits = if elf {
                sigscan::locate_in_elf(&blob, &sig).map_err(SigFailure::Scan)?
            } else {
                sigscan::locate(&blob, &sig)
            };
            if hits.is_empty() {
                log::warn!("signature {:?} not found", sig.label);
            }
            println!("{}", serde_json::to_string_pretty(&hits).expect("hits serialize"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Sigscan { command } => match run_sigscan(command) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: sigscan: {}", e.message());
                ExitCode::from(e.exit_code())
            }
        },
        other => match run_stage(other) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
    }
}
