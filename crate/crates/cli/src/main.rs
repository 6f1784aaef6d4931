//! `hwlab`: runs the desk-scale experiments and writes CSV artifacts plus a
//! run manifest that `hwlab rerun` can replay.

mod experiments;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use experiments::Experiment;
use output::{run_id, stable_digest, RunHeader, RunManifest, RunOutput, MANIFEST_FILE};

#[derive(Parser, Debug)]
#[command(name = "hwlab", version, about = "Hybrid window attention lab")]
struct Cli {
    /// Output directory for artifacts and manifest.json.
    #[arg(long, global = true, default_value = "hwlab-out")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    #[command(subcommand)]
    command: TopCommand,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F64,
}

impl Precision {
    fn as_str(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
        }
    }
}

#[derive(Subcommand, Debug)]
enum TopCommand {
    #[command(flatten)]
    Experiment(Experiment),
    /// Replay a run from its manifest.json and compare every artifact.
    Rerun {
        /// manifest.json of the original run, or its directory.
        manifest: PathBuf,
    },
}

fn execute(dir: &Path, experiment: Experiment, seed: u64, precision: &str) -> Result<RunManifest> {
    let header = RunHeader {
        run_id: run_id(&experiment, seed, precision)?,
        seed,
        precision: precision.to_string(),
        experiment: experiment.clone(),
    };
    let mut out = RunOutput::new(dir, header)?;
    experiment.run(&mut out)?;
    out.finish()
}

fn rerun(path: &Path, dir: &Path) -> Result<()> {
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let original = RunManifest::load(&path)?;
    if original.precision != Precision::F64.as_str() {
        bail!("unsupported precision `{}`", original.precision);
    }
    for input in &original.inputs {
        let now = stable_digest(&input.path, &[])?;
        if now != input.sha256 {
            bail!("input {} changed since the original run", input.path.display());
        }
    }
    let fresh = execute(dir, original.experiment.clone(), original.seed, &original.precision)?;
    let mut mismatches = vec![];
    for a in &original.artifacts {
        let status = match fresh.artifacts.iter().find(|b| b.file == a.file) {
            Some(b) if b.sha256 == a.sha256 => "match",
            Some(_) => "differs",
            None => "missing",
        };
        println!("{}\t{status}", a.file);
        if status != "match" {
            mismatches.push(a.file.clone());
        }
    }
    for b in &fresh.artifacts {
        if !original.artifacts.iter().any(|a| a.file == b.file) {
            println!("{}\textra", b.file);
            mismatches.push(b.file.clone());
        }
    }
    if !mismatches.is_empty() {
        bail!(RerunMismatch(mismatches));
    }
    Ok(())
}

#[derive(Debug)]
struct RerunMismatch(Vec<String>);

impl std::fmt::Display for RerunMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "rerun outputs differ: {}", self.0.join(", "))
    }
}

impl std::error::Error for RerunMismatch {}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<hwlab_core::Error>() {
            return e.kind();
        }
        if cause.is::<RerunMismatch>() {
            return "rerun_mismatch";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() {
            return "json";
        }
    }
    "runtime"
}

fn report(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("usage", e.render().to_string().trim());
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        TopCommand::Experiment(exp) => exp
            .resolve()
            .and_then(|exp| execute(&cli.out, exp, cli.seed, cli.precision.as_str()))
            .map(|_| println!("{}", cli.out.join(MANIFEST_FILE).display())),
        TopCommand::Rerun { manifest } => rerun(&manifest, &cli.out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(error_kind(&e), &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
