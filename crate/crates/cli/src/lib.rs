//! `shiftedit` command-line interface.
//!
//! Exit codes: 0 on success, 1 on a usage error (bad flags, unreadable or
//! invalid manifest), 2 on a runtime failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use shiftedit_core::editing::EditMethod;
use shiftedit_core::evalreport::{EditSection, EditSource, Pipeline, ReportError, RunManifest};

/// Environment variable that overrides the manifest's output directory.
pub const OUT_ENV: &str = "SHIFTEDIT_OUT";

#[derive(Debug, Parser)]
#[command(name = "shiftedit", version, about = "Low-rank editing, surgical and full finetuning under synthetic shift")]
pub struct Cli {
    /// Root seed; overrides the manifest.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML run manifest; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "MANIFEST")]
    pub config: Option<PathBuf>,
    /// Output directory; overrides SHIFTEDIT_OUT and the manifest.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the base, aging and detector datasets to OUT/data.
    GenData,
    /// Train the base model and save OUT/base.ckpt.
    TrainBase,
    /// Run one edit; flags override the manifest's [edit] section.
    Edit {
        #[arg(long)]
        method: Option<EditMethod>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// `aging:<D>` or `detector`.
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Gated coarse-to-fine search of one method on one edit set.
    Search {
        #[arg(long)]
        method: EditMethod,
        /// `aging:<D>` or `detector`.
        #[arg(long, default_value = "aging:43")]
        dataset: String,
    },
    /// Cross-generalization matrix over every method and duration, then report.
    AgingMatrix,
    /// Detector seed study at every gating threshold, then report.
    DetectorBox,
    /// Rewrite the report files from stored experiment results.
    Report,
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        Failure { code: if e.is_usage() { 1 } else { 2 }, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

fn pipeline(cli: &Cli) -> Result<Pipeline, Failure> {
    let mut manifest = match &cli.config {
        Some(path) => RunManifest::load(path)?,
        None => RunManifest::default(),
    };
    if let Some(seed) = cli.seed {
        manifest.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| manifest.out.clone());
    Ok(Pipeline::new(manifest, out)?)
}

fn progress(line: String) {
    eprintln!("{line}");
}

/// Runs one parsed command.
pub fn execute(cli: Cli) -> Result<(), Failure> {
    let mut p = pipeline(&cli)?;
    let log = &mut progress;
    match cli.command {
        Command::GenData => {
            for f in p.gen_data()? {
                println!("{}", f.display());
            }
        }
        Command::TrainBase => {
            let ck = p.train_base()?;
            println!("base validation accuracy {:.4}", ck.provenance.base_val_accuracy);
            println!("{}", p.base_path().display());
        }
        Command::Edit { method, layer, lr, rank, steps, dataset } => {
            let mut e = match (p.manifest.edit.clone(), method, lr) {
                (Some(e), _, _) => e,
                (None, Some(method), Some(lr)) => EditSection {
                    method,
                    layer: 0,
                    lr,
                    rank: None,
                    steps: None,
                    seed: 0,
                    dataset: "aging:43".into(),
                },
                _ => return Err(usage("edit needs an [edit] manifest section or both --method and --lr")),
            };
            e.method = method.unwrap_or(e.method);
            e.layer = layer.unwrap_or(e.layer);
            e.lr = lr.unwrap_or(e.lr);
            e.rank = rank.or(e.rank);
            e.steps = steps.or(e.steps);
            e.dataset = dataset.unwrap_or(e.dataset);
            p.manifest.edit = Some(e);
            p.manifest.validate()?;
            let o = p.edit(log)?;
            println!(
                "train {:.4} heldout {:.4} drop {:.3} pp",
                o.train_accuracy,
                o.heldout_accuracy.unwrap_or(f64::NAN),
                o.baseline_drop
            );
        }
        Command::Search { method, dataset } => {
            let source: EditSource = dataset.parse().map_err(usage)?;
            let r = p.search(method, source, log)?;
            match &r.best {
                Some(b) => println!("winner layer {} lr {} ({} accepted seeds)", b.layer, b.lr, b.accepted_count()),
                None => println!("{}", r.absent_reason().unwrap_or_default()),
            }
        }
        Command::AgingMatrix => {
            p.aging_matrix(log)?;
            for f in p.report()? {
                println!("{}", f.display());
            }
        }
        Command::DetectorBox => {
            p.detector_box(log)?;
            for f in p.report()? {
                println!("{}", f.display());
            }
        }
        Command::Report => {
            for f in p.report()? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

/// Parses `argv` (program name first), runs it and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
