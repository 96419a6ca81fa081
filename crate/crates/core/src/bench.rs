//! Experiment harness: config files and flags, suites, and CSV/JSON reports.
//!
//! Config files are flat `key = value` lines. `[train]`, `[gas]`, `[latency]` and `[synth]`
//! headers scope the keys that follow; `section.key` spelled out in full works anywhere.
//! Suite files hold a `[defaults]` block and any number of `[run]` blocks using the same keys.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::fedcore::{Optimizer, SyntheticSpec};
use crate::ledger::{calibrate_gas, LatencyModel, REFERENCE_SIGNATURE_BYTES, REFERENCE_UPDATE_GAS};
use crate::protocol::{
    execute, stable_hash, ChainMode, DatasetSource, ExperimentConfig, ExperimentReport, ProtocolError, RoundMetrics,
};
use crate::sigsuite::{keygen, measure_primitives, sign, SchemeId, SigError};

pub const DEFAULT_TRIALS: usize = 100;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{origin}{}: {msg}", .line.map(|l| format!(":{l}")).unwrap_or_default())]
    Parse { origin: String, line: Option<usize>, msg: String },
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("duplicate configuration name {0}")]
    DuplicateName(String),
    #[error("scaling data needs at least 2 client counts, got {0}")]
    InsufficientPoints(usize),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Sig(#[from] SigError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl BenchError {
    fn parse(origin: &str, line: Option<usize>, msg: impl Into<String>) -> Self {
        BenchError::Parse { origin: origin.to_string(), line, msg: msg.into() }
    }
}

/// One `key = value` assignment with its source position.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

impl Entry {
    /// `section.key`, or just `key` at top level.
    pub fn full_key(&self) -> String {
        if self.section.is_empty() {
            self.key.clone()
        } else {
            format!("{}.{}", self.section, self.key)
        }
    }
}

/// Entries under one section header; the implicit top-level section has an empty name.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub entries: Vec<Entry>,
}

/// Splits text into sections in file order; `#` starts a comment.
pub fn parse_sections(text: &str, origin: &str) -> Result<Vec<Section>, BenchError> {
    let mut sections = vec![Section { name: String::new(), entries: Vec::new() }];
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| BenchError::parse(origin, Some(line), "unterminated section header"))?
                .trim();
            if name.is_empty() {
                return Err(BenchError::parse(origin, Some(line), "empty section name"));
            }
            sections.push(Section { name: name.to_ascii_lowercase(), entries: Vec::new() });
            continue;
        }
        let (key, value) =
            content.split_once('=').ok_or_else(|| BenchError::parse(origin, Some(line), format!("expected key = value, got {content:?}")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(BenchError::parse(origin, Some(line), "missing key"));
        }
        let current = sections.last_mut().expect("top-level section always present");
        current.entries.push(Entry { section: current.name.clone(), key: key.to_string(), value: value.trim().to_string(), line });
    }
    Ok(sections)
}

pub fn parse_entries(text: &str, origin: &str) -> Result<Vec<Entry>, BenchError> {
    Ok(parse_sections(text, origin)?.into_iter().flat_map(|s| s.entries).collect())
}

fn value<T: std::str::FromStr>(e: &Entry, origin: &str) -> Result<T, BenchError>
where
    T::Err: std::fmt::Display,
{
    e.value.parse().map_err(|err| BenchError::parse(origin, Some(e.line), format!("{}: {err}", e.full_key())))
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Some(true),
        "false" | "off" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn parse_dataset(s: &str, current: &DatasetSource) -> Option<DatasetSource> {
    if s.eq_ignore_ascii_case("synth") {
        let spec = match current {
            DatasetSource::Synth(spec) => *spec,
            DatasetSource::Csv { .. } => SyntheticSpec::default(),
        };
        return Some(DatasetSource::Synth(spec));
    }
    let path = s.strip_prefix("csv:")?;
    (!path.is_empty()).then(|| DatasetSource::Csv { path: PathBuf::from(path) })
}

fn parse_blockchain(s: &str) -> Option<ChainMode> {
    match s.to_ascii_lowercase().as_str() {
        "bc" => Some(ChainMode::Bc),
        "nobc" => Some(ChainMode::NoBc),
        other => parse_bool(other).map(|on| if on { ChainMode::Bc } else { ChainMode::NoBc }),
    }
}

/// Pending latency keys; the model is assembled once all entries are seen.
#[derive(Default)]
struct LatencyDraft {
    model: Option<String>,
    seconds: Option<f64>,
    low: Option<f64>,
    high: Option<f64>,
}

/// Applies entries on top of `config`. Later entries win.
pub fn apply_entries(config: &mut ExperimentConfig, entries: &[Entry], origin: &str) -> Result<(), BenchError> {
    let mut targets: BTreeMap<SchemeId, u64> = BTreeMap::new();
    let mut verify_overrides: BTreeMap<SchemeId, u64> = BTreeMap::new();
    let mut latency = LatencyDraft::default();
    let mut prices: [Option<u64>; 3] = [None; 3];

    for e in entries {
        let key = e.full_key();
        let bad = |what: &str| BenchError::parse(origin, Some(e.line), format!("{key}: expected {what}, got {:?}", e.value));
        match key.as_str() {
            "dataset" => config.dataset = parse_dataset(&e.value, &config.dataset).ok_or_else(|| bad("synth or csv:<path>"))?,
            "crypto" | "scheme" => config.scheme = value(e, origin)?,
            "clients" => config.n_clients = value(e, origin)?,
            "client_ids" => {
                config.client_ids = Some(
                    e.value.split(',').map(|s| s.trim().parse::<u64>()).collect::<Result<_, _>>().map_err(|_| bad("comma-separated ids"))?,
                )
            }
            "rounds" => config.rounds = value(e, origin)?,
            "blockchain" => config.chain_mode = parse_blockchain(&e.value).ok_or_else(|| bad("on or off"))?,
            "seed" => config.master_seed = value(e, origin)?,
            "alpha" => config.dirichlet_alpha = value(e, origin)?,
            "nobc_delay_s" => config.nobc_fixed_delay_s = value(e, origin)?,
            "submit_aggregation" => config.submit_aggregation = parse_bool(&e.value).ok_or_else(|| bad("a boolean"))?,
            "parallel_clients" => config.parallel_clients = parse_bool(&e.value).ok_or_else(|| bad("a boolean"))?,
            "real_sleep" => config.real_sleep = parse_bool(&e.value).ok_or_else(|| bad("a boolean"))?,
            "train.local_epochs" => config.train.local_epochs = value(e, origin)?,
            "train.batch_size" => config.train.batch_size = value(e, origin)?,
            "train.learning_rate" => config.train.learning_rate = value(e, origin)?,
            "train.optimizer" => {
                if !e.value.eq_ignore_ascii_case("adam") {
                    return Err(bad("adam"));
                }
                config.train.optimizer = Optimizer::Adam;
            }
            "gas.base" => prices[0] = Some(value(e, origin)?),
            "gas.per_byte" => prices[1] = Some(value(e, origin)?),
            "gas.per_record" => prices[2] = Some(value(e, origin)?),
            "latency.model" => latency.model = Some(e.value.to_ascii_lowercase()),
            "latency.seconds" => latency.seconds = Some(value(e, origin)?),
            "latency.low" => latency.low = Some(value(e, origin)?),
            "latency.high" => latency.high = Some(value(e, origin)?),
            "synth.samples" | "synth.features" | "synth.classes" | "synth.separation" => {
                let DatasetSource::Synth(spec) = &mut config.dataset else {
                    return Err(BenchError::parse(origin, Some(e.line), format!("{key} requires dataset = synth")));
                };
                match &key["synth.".len()..] {
                    "samples" => spec.n_samples = value(e, origin)?,
                    "features" => spec.n_features = value(e, origin)?,
                    "classes" => spec.n_classes = value(e, origin)?,
                    _ => spec.separation = value(e, origin)?,
                }
            }
            _ => {
                let scheme_key = |prefix: &str| key.strip_prefix(prefix).map(|s| s.parse::<SchemeId>());
                if let Some(scheme) = scheme_key("gas.target.") {
                    targets.insert(scheme.map_err(|_| bad("gas.target.<PQC|ECDSA|NONE>"))?, value(e, origin)?);
                } else if let Some(scheme) = scheme_key("gas.verify.") {
                    verify_overrides.insert(scheme.map_err(|_| bad("gas.verify.<PQC|ECDSA|NONE>"))?, value(e, origin)?);
                } else {
                    return Err(BenchError::parse(origin, Some(e.line), format!("unknown key {key}")));
                }
            }
        }
    }

    if !targets.is_empty() {
        let mut all = BTreeMap::from(REFERENCE_UPDATE_GAS);
        all.extend(targets);
        let verify = calibrate_gas(&all, &BTreeMap::from(REFERENCE_SIGNATURE_BYTES)).map_err(|err| BenchError::parse(origin, None, err.to_string()))?;
        config.gas.verify = verify.verify;
    }
    config.gas.verify.extend(verify_overrides);
    for (slot, price) in [&mut config.gas.base, &mut config.gas.per_byte, &mut config.gas.per_record].into_iter().zip(prices) {
        if let Some(p) = price {
            *slot = p;
        }
    }

    if latency.model.is_some() || latency.seconds.is_some() || latency.low.is_some() || latency.high.is_some() {
        let model = latency.model.as_deref().unwrap_or(if latency.seconds.is_some() { "constant" } else { "uniform" });
        config.latency = match model {
            "constant" => LatencyModel::Constant { seconds: latency.seconds.unwrap_or(0.32) },
            "uniform" => LatencyModel::Uniform { low: latency.low.unwrap_or(0.0), high: latency.high.unwrap_or(0.0) },
            other => return Err(BenchError::parse(origin, None, format!("latency.model: expected constant or uniform, got {other:?}"))),
        };
    }
    Ok(())
}

/// Command-line overrides; `None` leaves the file or default value alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub dataset: Option<String>,
    pub crypto: Option<String>,
    pub clients: Option<usize>,
    pub rounds: Option<usize>,
    pub blockchain: Option<String>,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, config: &mut ExperimentConfig) -> Result<(), BenchError> {
        let flag = |name: &str, v: &str, what: &str| BenchError::parse(&format!("--{name}"), None, format!("expected {what}, got {v:?}"));
        if let Some(d) = &self.dataset {
            config.dataset = parse_dataset(d, &config.dataset).ok_or_else(|| flag("dataset", d, "synth or csv:<path>"))?;
        }
        if let Some(c) = &self.crypto {
            config.scheme = c.parse().map_err(|_| flag("crypto", c, "PQC, ECDSA or NONE"))?;
        }
        if let Some(b) = &self.blockchain {
            config.chain_mode = parse_blockchain(b).ok_or_else(|| flag("blockchain", b, "on or off"))?;
        }
        if let Some(n) = self.clients {
            config.n_clients = n;
        }
        if let Some(r) = self.rounds {
            config.rounds = r;
        }
        if let Some(s) = self.seed {
            config.master_seed = s;
        }
        Ok(())
    }
}

fn validated(config: ExperimentConfig) -> Result<ExperimentConfig, BenchError> {
    let v = config.violations();
    if v.is_empty() {
        Ok(config)
    } else {
        Err(BenchError::Validation(v))
    }
}

/// Defaults, then the file (if any), then flags; the result is validated.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig, BenchError> {
    let mut config = ExperimentConfig::default();
    if let Some(path) = path {
        let origin = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| BenchError::parse(&origin, None, e.to_string()))?;
        apply_entries(&mut config, &parse_entries(&text, &origin)?, &origin)?;
    }
    overrides.apply(&mut config)?;
    validated(config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Formats {
    pub csv: bool,
    pub json: bool,
}

impl Default for Formats {
    fn default() -> Self {
        Self { csv: true, json: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSpec {
    pub configs: Vec<ExperimentConfig>,
    pub out_dir: PathBuf,
    pub formats: Formats,
    /// Run configs concurrently; timing columns are then flagged unreliable.
    pub parallel: bool,
}

impl SuiteSpec {
    pub fn new(configs: Vec<ExperimentConfig>, out_dir: impl Into<PathBuf>) -> Result<Self, BenchError> {
        let mut seen = BTreeSet::new();
        for c in &configs {
            if !seen.insert(c.name()) {
                return Err(BenchError::DuplicateName(c.name()));
            }
        }
        Ok(Self { configs, out_dir: out_dir.into(), formats: Formats::default(), parallel: false })
    }
}

/// Keys whose comma-separated values in a `[run]` block expand into one config each.
const SWEEP_KEYS: [&str; 4] = ["dataset", "crypto", "clients", "blockchain"];

fn expand_run(block: &[Entry]) -> Vec<Vec<Entry>> {
    let mut runs = vec![Vec::new()];
    for e in block {
        let choices: Vec<&str> =
            if SWEEP_KEYS.contains(&e.full_key().as_str()) { e.value.split(',').map(str::trim).collect() } else { vec![e.value.as_str()] };
        runs = runs
            .into_iter()
            .flat_map(|run| {
                choices.iter().map(move |v| {
                    let mut next = run.clone();
                    next.push(Entry { value: v.to_string(), ..e.clone() });
                    next
                })
            })
            .collect();
    }
    runs
}

fn rescope(e: &Entry) -> Entry {
    // Inside suite blocks keys are written out in full (`train.local_epochs`).
    match e.key.split_once('.') {
        Some((section, key)) => Entry { section: section.to_string(), key: key.to_string(), ..e.clone() },
        None => Entry { section: String::new(), ..e.clone() },
    }
}

/// Parses a suite file. Top-level keys: `out`, `formats`, `parallel`.
pub fn parse_suite(text: &str, origin: &str, overrides: &Overrides) -> Result<SuiteSpec, BenchError> {
    let mut out_dir = PathBuf::from("results");
    let mut formats = Formats::default();
    let mut parallel = false;
    let mut defaults = Vec::new();
    let mut blocks: Vec<Vec<Entry>> = Vec::new();

    for section in parse_sections(text, origin)? {
        match section.name.as_str() {
            "" => {
                for e in &section.entries {
                    match e.key.as_str() {
                        "out" => out_dir = PathBuf::from(&e.value),
                        "parallel" => {
                            parallel = parse_bool(&e.value).ok_or_else(|| BenchError::parse(origin, Some(e.line), "parallel: expected a boolean"))?
                        }
                        "formats" => {
                            formats = Formats { csv: false, json: false };
                            for f in e.value.split(',').map(|s| s.trim().to_ascii_lowercase()) {
                                match f.as_str() {
                                    "csv" => formats.csv = true,
                                    "json" => formats.json = true,
                                    other => return Err(BenchError::parse(origin, Some(e.line), format!("unknown format {other:?}"))),
                                }
                            }
                        }
                        other => return Err(BenchError::parse(origin, Some(e.line), format!("unknown suite key {other}"))),
                    }
                }
            }
            "defaults" => defaults.extend(section.entries.iter().map(rescope)),
            // An empty [run] block runs the defaults once.
            "run" => blocks.push(section.entries.iter().map(rescope).collect()),
            other => return Err(BenchError::parse(origin, None, format!("unknown suite section [{other}]"))),
        }
    }

    let mut configs = Vec::new();
    let mut violations = Vec::new();
    for block in blocks {
        for run in expand_run(&block) {
            let mut config = ExperimentConfig::default();
            apply_entries(&mut config, &defaults, origin)?;
            apply_entries(&mut config, &run, origin)?;
            overrides.apply(&mut config)?;
            violations.extend(config.violations().into_iter().map(|v| format!("{}: {v}", config.name())));
            configs.push(config);
        }
    }
    if !violations.is_empty() {
        return Err(BenchError::Validation(violations));
    }
    let mut spec = SuiteSpec::new(configs, out_dir)?;
    spec.formats = formats;
    spec.parallel = parallel;
    Ok(spec)
}

/// Suite seed: master seed XOR a hash of the name without the crypto and chain tokens, so
/// PQC/ECDSA/NONE and BC/NoBC variants of a setup share one trajectory.
pub fn suite_seed(config: &ExperimentConfig) -> u64 {
    config.master_seed ^ stable_hash(&format!("{}-{}c", config.dataset.token(), config.n_clients))
}

/// Deterministic per-configuration columns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub status: String,
    pub dataset: String,
    pub crypto: String,
    pub clients: usize,
    pub blockchain: String,
    pub rounds: usize,
    pub seed: u64,
    pub initial_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub mean_accuracy: Option<f64>,
    pub mean_tx_time_s: Option<f64>,
    pub mean_simulated_latency_s: Option<f64>,
    pub mean_gas_per_update: Option<f64>,
    pub gas_per_round: Option<f64>,
    pub accuracy_gain_per_gas: Option<f64>,
    pub total_verified: Option<usize>,
    pub total_rejected: Option<usize>,
    pub signature_bytes: Option<f64>,
    pub public_key_bytes: Option<usize>,
    pub private_key_bytes: Option<usize>,
    pub final_digest: Option<String>,
    pub error: String,
}

/// Measured wall-clock columns; these vary between runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub name: String,
    pub mean_round_time_s: f64,
    pub mean_compute_time_s: f64,
    pub mean_sign_ms: f64,
    pub mean_verify_ms: f64,
    pub mean_overhead_ratio: Option<f64>,
    pub mean_keygen_ms: f64,
    pub timing_reliable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRow {
    pub round: u64,
    pub accuracy: f64,
    pub round_time_s: f64,
    pub compute_time_s: f64,
    pub simulated_latency_s: f64,
    pub mean_sign_ms: f64,
    pub mean_verify_ms: f64,
    pub mean_tx_time_s: f64,
    pub mean_gas_per_update: Option<f64>,
    pub total_gas: Option<u64>,
    pub overhead_ratio: Option<f64>,
    pub verified_count: usize,
    pub rejected_count: usize,
    pub aggregated_count: usize,
    pub global_digest: String,
}

impl From<&RoundMetrics> for RoundRow {
    fn from(r: &RoundMetrics) -> Self {
        Self {
            round: r.round,
            accuracy: r.accuracy,
            round_time_s: r.round_time_s,
            compute_time_s: r.compute_time_s,
            simulated_latency_s: r.simulated_latency_s,
            mean_sign_ms: r.mean_sign_ms,
            mean_verify_ms: r.mean_verify_ms,
            mean_tx_time_s: r.mean_tx_time_s,
            mean_gas_per_update: r.mean_gas_per_update,
            total_gas: r.total_gas,
            overhead_ratio: r.overhead_ratio,
            verified_count: r.verified_count,
            rejected_count: r.rejected_count,
            aggregated_count: r.aggregated_count,
            global_digest: r.global_digest.to_hex(),
        }
    }
}

impl ComparisonRow {
    fn base(config: &ExperimentConfig) -> Self {
        Self {
            name: config.name(),
            status: "ok".into(),
            dataset: config.dataset.token(),
            crypto: config.scheme.to_string(),
            clients: config.n_clients,
            blockchain: config.chain_mode.as_str().into(),
            rounds: config.rounds,
            seed: config.master_seed,
            initial_accuracy: None,
            final_accuracy: None,
            mean_accuracy: None,
            mean_tx_time_s: None,
            mean_simulated_latency_s: None,
            mean_gas_per_update: None,
            gas_per_round: None,
            accuracy_gain_per_gas: None,
            total_verified: None,
            total_rejected: None,
            signature_bytes: None,
            public_key_bytes: None,
            private_key_bytes: None,
            final_digest: None,
            error: String::new(),
        }
    }

    pub fn from_report(report: &ExperimentReport) -> Self {
        let s = &report.summary;
        Self {
            initial_accuracy: Some(s.initial_accuracy),
            final_accuracy: Some(s.final_accuracy),
            mean_accuracy: Some(s.mean_accuracy),
            mean_tx_time_s: Some(s.mean_tx_time_s),
            mean_simulated_latency_s: Some(s.mean_simulated_latency_s),
            mean_gas_per_update: s.mean_gas_per_update,
            gas_per_round: report.gas_efficiency.map(|g| g.gas_per_round),
            accuracy_gain_per_gas: report.gas_efficiency.map(|g| g.accuracy_gain_per_gas),
            total_verified: Some(s.total_verified),
            total_rejected: Some(s.total_rejected),
            signature_bytes: Some(report.crypto.signature_bytes),
            public_key_bytes: Some(report.crypto.public_key_bytes),
            private_key_bytes: Some(report.crypto.private_key_bytes),
            final_digest: report.rounds.last().map(|r| r.global_digest.to_hex()),
            ..Self::base(&report.config)
        }
    }

    fn failed(config: &ExperimentConfig, err: &dyn std::fmt::Display) -> Self {
        Self { status: "error".into(), error: err.to_string(), ..Self::base(config) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub rows: Vec<ComparisonRow>,
    pub reports: Vec<ExperimentReport>,
}

impl SuiteOutcome {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status != "ok").count()
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Headers for row types so that even empty tables carry a stable schema.
fn header_of<T: Serialize>(sample: &T) -> Result<String, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(sample)?;
    let bytes = w.into_inner().map_err(|e| BenchError::Io(e.into_error()))?;
    Ok(String::from_utf8_lossy(&bytes).lines().next().unwrap_or_default().to_string())
}

fn write_table<T: Serialize>(path: &Path, rows: &[T], empty_sample: &T) -> Result<(), BenchError> {
    if rows.is_empty() {
        fs::write(path, format!("{}\n", header_of(empty_sample)?))?;
        Ok(())
    } else {
        write_csv(path, rows)
    }
}

fn write_outputs(dir: &Path, formats: Formats, report: &ExperimentReport, state: &crate::protocol::SystemState) -> Result<(), BenchError> {
    fs::create_dir_all(dir)?;
    if formats.json {
        let mut w = BufWriter::new(File::create(dir.join("report.json"))?);
        serde_json::to_writer_pretty(&mut w, report)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    if formats.csv {
        let rows: Vec<RoundRow> = report.rounds.iter().map(RoundRow::from).collect();
        write_table(&dir.join("rounds.csv"), &rows, &RoundRow::from(&placeholder_round()))?;
    }
    if let Some(ledger) = &state.ledger {
        let mut w = BufWriter::new(File::create(dir.join("chain.ndjson"))?);
        ledger.chain().export_ndjson(&mut w).map_err(ProtocolError::from)?;
        w.flush()?;
    }
    Ok(())
}

fn placeholder_round() -> RoundMetrics {
    RoundMetrics {
        round: 0,
        accuracy: 0.0,
        round_time_s: 0.0,
        compute_time_s: 0.0,
        simulated_latency_s: 0.0,
        mean_sign_ms: 0.0,
        mean_verify_ms: 0.0,
        mean_tx_time_s: 0.0,
        mean_gas_per_update: None,
        total_gas: None,
        overhead_ratio: None,
        verified_count: 0,
        rejected_count: 0,
        aggregated_count: 0,
        aggregation_recorded: None,
        mean_signature_bytes: 0.0,
        global_digest: Default::default(),
    }
}

fn run_one(config: &ExperimentConfig, spec: &SuiteSpec) -> (ComparisonRow, Option<(ExperimentReport, TimingRow)>) {
    let seeded = ExperimentConfig { master_seed: suite_seed(config), ..config.clone() };
    let result = execute(&seeded).map_err(BenchError::from).and_then(|(report, state)| {
        write_outputs(&spec.out_dir.join(seeded.name()), spec.formats, &report, &state)?;
        Ok(report)
    });
    match result {
        Ok(report) => {
            let s = &report.summary;
            let timing = TimingRow {
                name: report.name.clone(),
                mean_round_time_s: s.mean_round_time_s,
                mean_compute_time_s: s.mean_compute_time_s,
                mean_sign_ms: s.mean_sign_ms,
                mean_verify_ms: s.mean_verify_ms,
                mean_overhead_ratio: s.mean_overhead_ratio,
                mean_keygen_ms: report.crypto.mean_keygen_ms,
                timing_reliable: !spec.parallel,
            };
            (ComparisonRow::from_report(&report), Some((report, timing)))
        }
        Err(e) => (ComparisonRow::failed(&seeded, &e), None),
    }
}

/// Runs every config; failures become `error` rows and the rest still run.
pub fn run_suite(spec: &SuiteSpec) -> Result<SuiteOutcome, BenchError> {
    fs::create_dir_all(&spec.out_dir)?;
    let results: Vec<_> = if spec.parallel {
        spec.configs.par_iter().map(|c| run_one(c, spec)).collect()
    } else {
        spec.configs.iter().map(|c| run_one(c, spec)).collect()
    };
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut timings = Vec::new();
    for (row, ok) in results {
        rows.push(row);
        if let Some((report, timing)) = ok {
            reports.push(report);
            timings.push(timing);
        }
    }
    if spec.formats.csv {
        let empty = ComparisonRow::base(&ExperimentConfig::default());
        write_table(&spec.out_dir.join("comparison.csv"), &rows, &empty)?;
        let empty_timing = TimingRow {
            name: String::new(),
            mean_round_time_s: 0.0,
            mean_compute_time_s: 0.0,
            mean_sign_ms: 0.0,
            mean_verify_ms: 0.0,
            mean_overhead_ratio: None,
            mean_keygen_ms: 0.0,
            timing_reliable: true,
        };
        write_table(&spec.out_dir.join("timings.csv"), &timings, &empty_timing)?;
    }
    Ok(SuiteOutcome { rows, reports })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub n_clients: usize,
    pub mean_round_time_s: f64,
    pub mean_compute_time_s: f64,
    pub mean_tx_time_s: f64,
    pub mean_gas_per_round: Option<f64>,
    pub mean_gas_per_update: Option<f64>,
    pub name: String,
}

/// One row per report, sorted by client count.
pub fn scaling_rows(reports: &[ExperimentReport]) -> Result<Vec<ScalingRow>, BenchError> {
    let distinct: BTreeSet<usize> = reports.iter().map(|r| r.config.n_clients).collect();
    if distinct.len() < 2 {
        return Err(BenchError::InsufficientPoints(distinct.len()));
    }
    let mut rows: Vec<ScalingRow> = reports
        .iter()
        .map(|r| ScalingRow {
            n_clients: r.config.n_clients,
            mean_round_time_s: r.summary.mean_round_time_s,
            mean_compute_time_s: r.summary.mean_compute_time_s,
            mean_tx_time_s: r.summary.mean_tx_time_s,
            mean_gas_per_round: r.gas_efficiency.map(|g| g.gas_per_round),
            mean_gas_per_update: r.summary.mean_gas_per_update,
            name: r.name.clone(),
        })
        .collect();
    rows.sort_by_key(|r| r.n_clients);
    Ok(rows)
}

pub fn emit_scaling_data(reports: &[ExperimentReport], path: &Path) -> Result<Vec<ScalingRow>, BenchError> {
    let rows = scaling_rows(reports)?;
    write_csv(path, &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CryptoRow {
    pub scheme: String,
    pub trials: usize,
    pub keygen_ms: f64,
    pub sign_ms: f64,
    pub verify_ms: f64,
    /// Mean over the trial signatures; only ECDSA varies.
    pub signature_bytes: f64,
    pub public_key_bytes: usize,
    pub private_key_bytes: usize,
}

pub fn crypto_rows(schemes: &[SchemeId], trials: usize) -> Result<Vec<CryptoRow>, BenchError> {
    schemes
        .iter()
        .map(|&scheme| {
            let t = measure_primitives(scheme, trials, 32)?;
            let key = keygen(scheme, 0)?;
            let mut total = 0usize;
            for i in 0..trials as u64 {
                total += sign(&key, &i.to_le_bytes())?.len();
            }
            Ok(CryptoRow {
                scheme: scheme.to_string(),
                trials,
                keygen_ms: t.keygen_ms,
                sign_ms: t.sign_ms,
                verify_ms: t.verify_ms,
                signature_bytes: total as f64 / trials as f64,
                public_key_bytes: key.public_key.len(),
                private_key_bytes: key.private_key.len(),
            })
        })
        .collect()
}

pub fn emit_crypto_table(schemes: &[SchemeId], trials: usize, path: &Path) -> Result<Vec<CryptoRow>, BenchError> {
    let rows = crypto_rows(schemes, trials)?;
    write_csv(path, &rows)?;
    Ok(rows)
}
