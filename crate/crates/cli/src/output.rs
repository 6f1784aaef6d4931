//! CSV tables with a metadata comment block, run manifests and the
//! timing-insensitive digests used to check reruns.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::experiments::Experiment;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "hwlab-run/1";

#[derive(Clone, Debug, Default)]
pub struct Table {
    header: Vec<String>,
    timing: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            header: columns.iter().map(|c| c.to_string()).collect(),
            ..Self::default()
        }
    }

    /// Marks columns whose values depend on wall-clock time.
    pub fn timing(mut self, columns: &[&str]) -> Self {
        self.timing = columns.iter().map(|c| c.to_string()).collect();
        self
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn render(&self, meta: &[String]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for line in meta {
            out.extend_from_slice(format!("# {line}\n").as_bytes());
        }
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        drop(w);
        Ok(out)
    }
}

/// Formats a float with the shortest representation that round-trips;
/// negative zero prints as `0`.
pub fn num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    format!("{v}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    /// SHA-256 of the file with timing columns removed.
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub timing_columns: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    pub run_id: String,
    pub seed: u64,
    pub precision: String,
    pub experiment: Experiment,
    pub inputs: Vec<InputFile>,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading run manifest {}", path.display()))?;
        let m: RunManifest = serde_json::from_str(&text).with_context(|| format!("parsing run manifest {}", path.display()))?;
        if m.format != MANIFEST_FORMAT {
            bail!("unsupported run manifest format `{}`", m.format);
        }
        Ok(m)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Run id: the first 16 hex digits of the hash of the canonical config.
pub fn run_id(experiment: &Experiment, seed: u64, precision: &str) -> Result<String> {
    let canon = serde_json::to_string(&(experiment, seed, precision))?;
    Ok(sha256_hex(canon.as_bytes())[..16].to_string())
}

/// Digest of a file's deterministic content: comment lines verbatim, CSV rows
/// with `timing_columns` dropped. Without timing columns this is the plain
/// SHA-256 of the bytes.
pub fn stable_digest(path: &Path, timing_columns: &[String]) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if timing_columns.is_empty() {
        return Ok(sha256_hex(&bytes));
    }
    let text = String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", path.display()))?;
    let mut hasher = Sha256::new();
    let body_start = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .map(|l| l.len() + 1)
        .sum::<usize>()
        .min(text.len());
    hasher.update(&text.as_bytes()[..body_start]);
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(&text.as_bytes()[body_start..]);
    let mut keep: Option<Vec<bool>> = None;
    for rec in reader.records() {
        let rec = rec?;
        let mask = keep.get_or_insert_with(|| rec.iter().map(|c| !timing_columns.iter().any(|t| t == c)).collect());
        let kept: Vec<&str> = rec.iter().zip(mask.iter()).filter(|(_, k)| **k).map(|(c, _)| c).collect();
        hasher.update(kept.join("\u{1f}").as_bytes());
        hasher.update(b"\n");
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Collects the artifacts of one run in its output directory.
pub struct RunOutput {
    dir: PathBuf,
    header: RunHeader,
    meta: Vec<String>,
    artifacts: Vec<Artifact>,
    inputs: Vec<InputFile>,
}

impl RunOutput {
    pub fn new(dir: &Path, header: RunHeader) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        let meta = vec![
            format!("hwlab {}", header.experiment.name()),
            format!("run_id: {}", header.run_id),
            format!("seed: {}", header.seed),
            format!("config: {}", serde_json::to_string(&header.experiment)?),
        ];
        Ok(Self {
            dir: dir.to_path_buf(),
            header,
            meta,
            artifacts: vec![],
            inputs: vec![],
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn write_table(&mut self, file: &str, table: &Table) -> Result<()> {
        let path = self.path(file);
        fs::write(&path, table.render(&self.meta)?).with_context(|| format!("writing {}", path.display()))?;
        self.record(file, table.timing.clone())
    }

    pub fn write_text(&mut self, file: &str, text: &str) -> Result<()> {
        let path = self.path(file);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.record(file, vec![])
    }

    /// Registers a file already written into the output directory.
    pub fn record(&mut self, file: &str, timing_columns: Vec<String>) -> Result<()> {
        let sha256 = stable_digest(&self.path(file), &timing_columns)?;
        self.artifacts.push(Artifact {
            file: file.to_string(),
            sha256,
            timing_columns,
        });
        Ok(())
    }

    /// Records an input file and its digest.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading input {}", path.display()))?;
        self.inputs.push(InputFile {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.header.seed
    }

    pub fn finish(self) -> Result<RunManifest> {
        let m = RunManifest {
            format: MANIFEST_FORMAT.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            run_id: self.header.run_id,
            seed: self.header.seed,
            precision: self.header.precision,
            experiment: self.header.experiment,
            inputs: self.inputs,
            artifacts: self.artifacts,
        };
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(m)
    }
}

pub struct RunHeader {
    pub run_id: String,
    pub seed: u64,
    pub precision: String,
    pub experiment: Experiment,
}

/// Median, minimum and maximum wall time in milliseconds over `repeats`
/// calls, after `warmup` untimed calls.
pub fn time_ms(warmup: usize, repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64, f64)> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let start = std::time::Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    Ok((median, samples[0], samples[n - 1]))
}
