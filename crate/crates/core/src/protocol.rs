//! End-to-end protocol: client registration, then per round
//! train → hash → sign → submit → verify → aggregate over the verified subset.
//!
//! In `BC` mode submissions go through the [`Ledger`] contract; in `NoBC` mode signatures
//! are checked locally and a fixed delay stands in for confirmation. Training randomness is
//! derived only from the master seed, client id and round, never from the signature scheme,
//! so every scheme and chain mode follows the same model trajectory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fedcore::{
    self, aggregate, evaluate, local_train, partition_dirichlet, ClientUpdate, Dataset, FedError, Mlp, ModelParams,
    Partition, SyntheticSpec, TrainConfig,
};
use crate::ledger::{Address, GasModel, LatencyModel, Ledger, LedgerError, Receipt};
use crate::sigsuite::{self, digest_model, keygen, sign, Hash32, KeyPair, SchemeId, SigError, Signature};

pub const DEFAULT_ROUNDS: usize = 50;
pub const DEFAULT_NOBC_DELAY_S: f64 = 0.05;
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Sig(#[from] SigError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("registration of {0} was rejected by the contract")]
    RegistrationRejected(Address),
    #[error("round {round}: no client update survived verification")]
    NoVerifiedUpdates { round: u64 },
    #[error("round {got} out of order, expected {expected}")]
    RoundOutOfOrder { expected: u64, got: u64 },
    #[error("overhead ratio needs a positive denominator")]
    ZeroDenominator,
    #[error("not applicable: {0}")]
    NotApplicable(String),
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Independent seed stream for one purpose (`domain`) under a master seed.
pub fn derive_seed(master: u64, domain: &str) -> u64 {
    splitmix64(master ^ stable_hash(domain))
}

/// Local-training seed for `client_id` in `round`: a per-round seed XOR the client id.
pub fn training_seed(master: u64, round: u64, client_id: u64) -> u64 {
    splitmix64(derive_seed(master, "train") ^ round) ^ client_id
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Synth(SyntheticSpec),
    Csv { path: PathBuf },
}

impl DatasetSource {
    /// Token used in configuration names.
    pub fn token(&self) -> String {
        match self {
            DatasetSource::Synth(_) => "synth".into(),
            DatasetSource::Csv { path } => path
                .file_stem()
                .map(|s| s.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_else(|| "csv".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainMode {
    #[serde(rename = "BC")]
    Bc,
    #[serde(rename = "NoBC")]
    NoBc,
}

impl ChainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ChainMode::Bc => "BC",
            ChainMode::NoBc => "NoBC",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub scheme: SchemeId,
    pub n_clients: usize,
    /// Explicit client ids; `0..n_clients` when absent.
    pub client_ids: Option<Vec<u64>>,
    pub rounds: usize,
    pub chain_mode: ChainMode,
    pub nobc_fixed_delay_s: f64,
    pub train: TrainConfig,
    pub dirichlet_alpha: f64,
    pub gas: GasModel,
    pub latency: LatencyModel,
    pub master_seed: u64,
    /// Aggregator signs and records the global-model hash each round (BC only).
    pub submit_aggregation: bool,
    pub parallel_clients: bool,
    /// Actually sleep for simulated delays instead of only accounting for them.
    pub real_sleep: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synth(SyntheticSpec::default()),
            scheme: SchemeId::Pqc,
            n_clients: 3,
            client_ids: None,
            rounds: DEFAULT_ROUNDS,
            chain_mode: ChainMode::Bc,
            nobc_fixed_delay_s: DEFAULT_NOBC_DELAY_S,
            train: TrainConfig::default(),
            dirichlet_alpha: DEFAULT_ALPHA,
            gas: GasModel::default(),
            latency: LatencyModel::default(),
            master_seed: 0,
            submit_aggregation: true,
            parallel_clients: true,
            real_sleep: false,
        }
    }
}

impl ExperimentConfig {
    /// `dataset-crypto-Nc-BC|NoBC`
    pub fn name(&self) -> String {
        format!("{}-{}-{}c-{}", self.dataset.token(), self.scheme, self.n_clients, self.chain_mode.as_str())
    }

    pub fn client_ids(&self) -> Vec<u64> {
        self.client_ids.clone().unwrap_or_else(|| (0..self.n_clients as u64).collect())
    }

    /// Every violated constraint, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_clients == 0 {
            v.push("clients must be at least 1".to_string());
        }
        if let Some(ids) = &self.client_ids {
            if ids.len() != self.n_clients {
                v.push(format!("{} client ids given for {} clients", ids.len(), self.n_clients));
            }
            let unique: BTreeSet<_> = ids.iter().collect();
            if unique.len() != ids.len() {
                v.push("client ids must be unique".to_string());
            }
        }
        if self.train.batch_size == 0 {
            v.push("train.batch_size must be at least 1".to_string());
        }
        if !(self.train.learning_rate.is_finite() && self.train.learning_rate > 0.0) {
            v.push(format!("train.learning_rate must be positive, got {}", self.train.learning_rate));
        }
        if !(self.dirichlet_alpha.is_finite() && self.dirichlet_alpha > 0.0) {
            v.push(format!("alpha must be positive, got {}", self.dirichlet_alpha));
        }
        if !(self.nobc_fixed_delay_s.is_finite() && self.nobc_fixed_delay_s > 0.0) {
            v.push(format!("nobc_delay_s must be positive, got {}", self.nobc_fixed_delay_s));
        }
        if let Err(e) = self.latency.validate() {
            v.push(e.to_string());
        }
        if let DatasetSource::Synth(spec) = &self.dataset {
            if spec.n_classes < 2 || spec.n_samples < spec.n_classes || spec.n_features == 0 {
                v.push(format!(
                    "synthetic dataset needs samples >= classes >= 2 and features >= 1 (got {}, {}, {})",
                    spec.n_samples, spec.n_classes, spec.n_features
                ));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ProtocolError::InvalidConfig(v))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    pub id: u64,
    pub address: Address,
    pub keys: KeyPair,
    pub partition: Partition,
}

/// Everything a run needs between rounds.
#[derive(Debug, Clone)]
pub struct SystemState {
    pub config: ExperimentConfig,
    pub train: Dataset,
    pub test: Dataset,
    pub model: Mlp,
    pub clients: Vec<Client>,
    pub aggregator_address: Address,
    pub aggregator_keys: KeyPair,
    /// `Some` in BC mode.
    pub ledger: Option<Ledger>,
    /// Keys known to the aggregator in NoBC mode.
    pub local_registry: BTreeMap<Address, (Vec<u8>, SchemeId)>,
    /// NoBC stand-in for the contract's verified-update records.
    pub local_verified: BTreeMap<(u64, Address), Hash32>,
    pub global: ModelParams,
    pub initial_accuracy: f64,
    pub rounds_completed: u64,
    pub mean_keygen_ms: f64,
}

impl SystemState {
    pub fn verified_hash(&self, round: u64, address: &Address) -> Option<Hash32> {
        match &self.ledger {
            Some(ledger) => ledger.state().verified_hash(round, address).copied(),
            None => self.local_verified.get(&(round, *address)).copied(),
        }
    }

    /// Number of ledger transactions issued so far, including pending ones.
    pub fn ledger_transactions(&self) -> usize {
        self.ledger
            .as_ref()
            .map_or(0, |l| l.chain().blocks.iter().map(|b| b.transactions.len()).sum::<usize>() + l.pending().len())
    }
}

fn load_dataset(config: &ExperimentConfig) -> Result<(Dataset, Dataset), ProtocolError> {
    let seed = derive_seed(config.master_seed, "dataset");
    let split = match &config.dataset {
        DatasetSource::Synth(spec) => spec.generate(seed)?,
        DatasetSource::Csv { path } => fedcore::load_csv(path)?.split(0.8, seed)?,
    };
    Ok((split.train, split.test))
}

/// Builds data and partitions, generates every key pair and registers them.
pub fn init_phase(config: &ExperimentConfig) -> Result<SystemState, ProtocolError> {
    config.validate()?;
    let ids = config.client_ids();
    let (train, test) = load_dataset(config)?;
    let partitions = partition_dirichlet(&train, config.n_clients, config.dirichlet_alpha, derive_seed(config.master_seed, "partition"))?;
    let model = Mlp::new(train.n_features(), train.n_classes());
    let global = model.init(derive_seed(config.master_seed, "init"));
    let initial_accuracy = evaluate(&global, &test)?;

    let key_seed = derive_seed(config.master_seed, "keys");
    let keygen_start = Instant::now();
    let mut clients = Vec::with_capacity(ids.len());
    for (id, mut partition) in ids.iter().copied().zip(partitions) {
        partition.client_id = id;
        let keys = keygen(config.scheme, splitmix64(key_seed ^ id))?;
        clients.push(Client { id, address: Address::participant(id), keys, partition });
    }
    let aggregator_keys = keygen(config.scheme, derive_seed(config.master_seed, "aggregator-key"))?;
    let mean_keygen_ms = keygen_start.elapsed().as_secs_f64() * 1e3 / (clients.len() + 1) as f64;
    let aggregator_address = Address::aggregator();

    let mut ledger = None;
    let mut local_registry = BTreeMap::new();
    match config.chain_mode {
        ChainMode::Bc => {
            let mut chain = Ledger::new(
                Some(aggregator_address),
                config.gas.clone(),
                config.latency,
                derive_seed(config.master_seed, "latency"),
            )?;
            let entries = std::iter::once((aggregator_address, &aggregator_keys)).chain(clients.iter().map(|c| (c.address, &c.keys)));
            for (address, keys) in entries {
                let receipt = chain.register_client(address, &keys.public_key, keys.scheme)?;
                if !receipt.is_verified() {
                    return Err(ProtocolError::RegistrationRejected(address));
                }
            }
            chain.mine_block();
            ledger = Some(chain);
        }
        ChainMode::NoBc => {
            local_registry.insert(aggregator_address, (aggregator_keys.public_key.clone(), config.scheme));
            for c in &clients {
                local_registry.insert(c.address, (c.keys.public_key.clone(), config.scheme));
            }
        }
    }

    Ok(SystemState {
        config: config.clone(),
        train,
        test,
        model,
        clients,
        aggregator_address,
        aggregator_keys,
        ledger,
        local_registry,
        local_verified: BTreeMap::new(),
        global,
        initial_accuracy,
        rounds_completed: 0,
        mean_keygen_ms,
    })
}

/// A client's round output as it travels to the contract (hash, signature) and to the
/// aggregator (full parameters, off-chain).
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub client_id: u64,
    pub round: u64,
    pub params: ModelParams,
    pub hash: Hash32,
    pub signature: Signature,
}

/// Hook that sees, and may alter, every envelope between signing and submission.
pub trait Interceptor {
    fn intercept(&mut self, envelope: &mut Envelope);
}

pub struct Passthrough;

impl Interceptor for Passthrough {
    fn intercept(&mut self, _: &mut Envelope) {}
}

impl<F: FnMut(&mut Envelope)> Interceptor for F {
    fn intercept(&mut self, envelope: &mut Envelope) {
        self(envelope)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub accuracy: f64,
    pub round_time_s: f64,
    /// Wall-clock from broadcast to aggregation completion.
    pub compute_time_s: f64,
    /// Simulated submission/confirmation latency added to the round.
    pub simulated_latency_s: f64,
    pub mean_sign_ms: f64,
    pub mean_verify_ms: f64,
    pub mean_tx_time_s: f64,
    pub mean_gas_per_update: Option<f64>,
    pub total_gas: Option<u64>,
    pub overhead_ratio: Option<f64>,
    pub verified_count: usize,
    pub rejected_count: usize,
    /// Verified clients whose off-chain parameters matched their recorded hash.
    pub aggregated_count: usize,
    pub aggregation_recorded: Option<bool>,
    pub mean_signature_bytes: f64,
    pub global_digest: Hash32,
}

/// `(sign + verify)` milliseconds as a fraction of `denominator_s` seconds.
pub fn overhead_ratio(sign_ms: f64, verify_ms: f64, denominator_s: f64) -> Result<f64, ProtocolError> {
    if denominator_s.is_nan() || denominator_s <= 0.0 {
        return Err(ProtocolError::ZeroDenominator);
    }
    Ok(((sign_ms + verify_ms) / 1000.0) / denominator_s)
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

struct ClientWork {
    envelope: Envelope,
    sign_ms: f64,
}

fn client_round(client: &Client, global: &ModelParams, train: &Dataset, cfg: &TrainConfig, master: u64, round: u64) -> Result<ClientWork, ProtocolError> {
    let cfg = TrainConfig { rng_seed: training_seed(master, round, client.id), ..*cfg };
    let params = local_train(global, train, &client.partition, &cfg)?;
    let hash = digest_model(&params);
    let start = Instant::now();
    let signature = sign(&client.keys, hash.as_bytes())?;
    let sign_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(ClientWork { envelope: Envelope { client_id: client.id, round, params, hash, signature }, sign_ms })
}

pub fn run_round(state: &mut SystemState, t: u64) -> Result<RoundMetrics, ProtocolError> {
    run_round_with(state, t, &mut Passthrough)
}

/// One federated round; `interceptor` may tamper with envelopes in flight.
pub fn run_round_with(state: &mut SystemState, t: u64, interceptor: &mut dyn Interceptor) -> Result<RoundMetrics, ProtocolError> {
    let expected = state.rounds_completed + 1;
    if t != expected {
        return Err(ProtocolError::RoundOutOfOrder { expected, got: t });
    }
    let config = &state.config;
    let master = config.master_seed;
    let started = Instant::now();

    let global = &state.global;
    let train = &state.train;
    let work: Vec<ClientWork> = if config.parallel_clients {
        state.clients.par_iter().map(|c| client_round(c, global, train, &config.train, master, t)).collect::<Result<_, _>>()?
    } else {
        state.clients.iter().map(|c| client_round(c, global, train, &config.train, master, t)).collect::<Result<_, _>>()?
    };
    let sign_times: Vec<f64> = work.iter().map(|w| w.sign_ms).collect();
    let mut envelopes: Vec<Envelope> = work.into_iter().map(|w| w.envelope).collect();
    for env in &mut envelopes {
        interceptor.intercept(env);
    }

    let mut verify_times = Vec::with_capacity(envelopes.len());
    let mut receipts: Vec<Receipt> = Vec::new();
    let mut verified_count = 0;
    let addresses: Vec<Address> = state.clients.iter().map(|c| c.address).collect();
    match state.ledger.as_mut() {
        Some(ledger) => {
            for (env, address) in envelopes.iter().zip(&addresses) {
                match ledger.submit_update(*address, t, &env.hash, &env.signature) {
                    Ok(receipt) => {
                        verify_times.push(receipt.verify_ms);
                        verified_count += usize::from(receipt.is_verified());
                        receipts.push(receipt);
                    }
                    // A scheme-swapped signature is inadmissible: counted as rejected.
                    Err(LedgerError::SchemeMismatch { .. }) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            ledger.mine_block();
        }
        None => {
            for (env, address) in envelopes.iter().zip(&addresses) {
                let (pk, scheme) = &state.local_registry[address];
                let start = Instant::now();
                let valid = sigsuite::verify(pk, *scheme, env.hash.as_bytes(), &env.signature).unwrap_or(false);
                verify_times.push(start.elapsed().as_secs_f64() * 1e3);
                if valid && !state.local_verified.contains_key(&(t, *address)) {
                    state.local_verified.insert((t, *address), env.hash);
                    verified_count += 1;
                }
            }
        }
    }

    // Aggregator: keep verified clients whose off-chain parameters hash to the recorded value.
    let mut updates = Vec::new();
    for (env, client) in envelopes.iter().zip(&state.clients) {
        let Some(recorded) = state.verified_hash(t, &client.address) else { continue };
        if digest_model(&env.params) == recorded {
            updates.push(ClientUpdate { client_id: client.id, params: env.params.clone(), n_samples: client.partition.len(), round: t });
        }
    }
    if updates.is_empty() {
        return Err(ProtocolError::NoVerifiedUpdates { round: t });
    }
    let new_global = aggregate(&updates)?;
    let accuracy = evaluate(&new_global, &state.test)?;
    let global_digest = digest_model(&new_global);

    let mut aggregation_recorded = None;
    let mut aggregation_receipt = None;
    if let (Some(ledger), true) = (state.ledger.as_mut(), state.config.submit_aggregation) {
        let sig = sign(&state.aggregator_keys, global_digest.as_bytes())?;
        let receipt = ledger.submit_aggregation(state.aggregator_address, t, &global_digest, &sig)?;
        aggregation_recorded = Some(receipt.is_verified());
        ledger.mine_block();
        aggregation_receipt = Some(receipt);
    }
    let compute_time_s = started.elapsed().as_secs_f64();

    let config = &state.config;
    let (mean_tx_time_s, simulated_latency_s, mean_gas_per_update, total_gas) = match config.chain_mode {
        ChainMode::Bc => {
            let slowest = receipts.iter().map(|r| r.confirm_time_s).fold(0.0, f64::max);
            let agg_latency = aggregation_receipt.as_ref().map_or(0.0, |r| r.confirm_time_s);
            let gas: u64 = receipts.iter().map(|r| r.gas_used).sum::<u64>() + aggregation_receipt.as_ref().map_or(0, |r| r.gas_used);
            (
                mean(receipts.iter().map(|r| r.confirm_time_s)),
                slowest + agg_latency,
                Some(mean(receipts.iter().map(|r| r.gas_used as f64))),
                Some(gas),
            )
        }
        ChainMode::NoBc => (config.nobc_fixed_delay_s, config.nobc_fixed_delay_s, None, None),
    };
    if config.real_sleep && simulated_latency_s > 0.0 {
        std::thread::sleep(Duration::from_secs_f64(simulated_latency_s));
    }

    let mean_sign_ms = mean(sign_times);
    let mean_verify_ms = mean(verify_times);
    let metrics = RoundMetrics {
        round: t,
        accuracy,
        round_time_s: compute_time_s + simulated_latency_s,
        compute_time_s,
        simulated_latency_s,
        mean_sign_ms,
        mean_verify_ms,
        mean_tx_time_s,
        mean_gas_per_update,
        total_gas,
        overhead_ratio: overhead_ratio(mean_sign_ms, mean_verify_ms, mean_tx_time_s).ok(),
        verified_count,
        rejected_count: state.clients.len() - verified_count,
        aggregated_count: updates.len(),
        aggregation_recorded,
        mean_signature_bytes: mean(envelopes.iter().map(|e| e.signature.len() as f64)),
        global_digest,
    };
    state.global = new_global;
    state.rounds_completed = t;
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub mean_accuracy: f64,
    pub mean_round_time_s: f64,
    pub mean_compute_time_s: f64,
    pub mean_simulated_latency_s: f64,
    pub mean_sign_ms: f64,
    pub mean_verify_ms: f64,
    pub mean_tx_time_s: f64,
    pub mean_gas_per_update: Option<f64>,
    pub mean_total_gas: Option<f64>,
    pub mean_overhead_ratio: Option<f64>,
    pub total_verified: usize,
    pub total_rejected: usize,
}

impl Summary {
    /// Arithmetic means over `rounds`; zero when there are no rounds.
    pub fn from_rounds(initial_accuracy: f64, rounds: &[RoundMetrics]) -> Self {
        let opt_mean = |values: Vec<Option<f64>>| -> Option<f64> {
            if values.is_empty() || values.iter().any(Option::is_none) {
                None
            } else {
                Some(mean(values.into_iter().flatten()))
            }
        };
        Self {
            initial_accuracy,
            final_accuracy: rounds.last().map_or(initial_accuracy, |r| r.accuracy),
            mean_accuracy: mean(rounds.iter().map(|r| r.accuracy)),
            mean_round_time_s: mean(rounds.iter().map(|r| r.round_time_s)),
            mean_compute_time_s: mean(rounds.iter().map(|r| r.compute_time_s)),
            mean_simulated_latency_s: mean(rounds.iter().map(|r| r.simulated_latency_s)),
            mean_sign_ms: mean(rounds.iter().map(|r| r.mean_sign_ms)),
            mean_verify_ms: mean(rounds.iter().map(|r| r.mean_verify_ms)),
            mean_tx_time_s: mean(rounds.iter().map(|r| r.mean_tx_time_s)),
            mean_gas_per_update: opt_mean(rounds.iter().map(|r| r.mean_gas_per_update).collect()),
            mean_total_gas: opt_mean(rounds.iter().map(|r| r.total_gas.map(|g| g as f64)).collect()),
            mean_overhead_ratio: opt_mean(rounds.iter().map(|r| r.overhead_ratio).collect()),
            total_verified: rounds.iter().map(|r| r.verified_count).sum(),
            total_rejected: rounds.iter().map(|r| r.rejected_count).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CryptoSizes {
    pub signature_bytes: f64,
    pub public_key_bytes: usize,
    pub private_key_bytes: usize,
    pub mean_keygen_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GasEfficiency {
    pub gas_per_round: f64,
    pub accuracy_gain_per_gas: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config: ExperimentConfig,
    pub rounds: Vec<RoundMetrics>,
    pub summary: Summary,
    pub crypto: CryptoSizes,
    pub gas_efficiency: Option<GasEfficiency>,
}

pub fn gas_efficiency(report: &ExperimentReport) -> Result<GasEfficiency, ProtocolError> {
    if report.config.chain_mode == ChainMode::NoBc {
        return Err(ProtocolError::NotApplicable("no gas is consumed without a blockchain".into()));
    }
    if report.rounds.is_empty() {
        return Err(ProtocolError::NotApplicable("report has no rounds".into()));
    }
    let gas: Vec<u64> = report
        .rounds
        .iter()
        .map(|r| r.total_gas.ok_or_else(|| ProtocolError::NotApplicable(format!("round {} has no gas", r.round))))
        .collect::<Result<_, _>>()?;
    let total: u64 = gas.iter().sum();
    let gain = report.summary.final_accuracy - report.summary.initial_accuracy;
    Ok(GasEfficiency {
        gas_per_round: total as f64 / gas.len() as f64,
        accuracy_gain_per_gas: if total == 0 { 0.0 } else { gain / total as f64 },
    })
}

pub fn build_report(state: &SystemState, rounds: Vec<RoundMetrics>) -> ExperimentReport {
    let summary = Summary::from_rounds(state.initial_accuracy, &rounds);
    let signature_bytes = if rounds.is_empty() {
        sign(&state.aggregator_keys, Hash32::ZERO.as_bytes()).map_or(0.0, |s| s.len() as f64)
    } else {
        mean(rounds.iter().map(|r| r.mean_signature_bytes))
    };
    let crypto = CryptoSizes {
        signature_bytes,
        public_key_bytes: state.aggregator_keys.public_key.len(),
        private_key_bytes: state.aggregator_keys.private_key.len(),
        mean_keygen_ms: state.mean_keygen_ms,
    };
    let mut report = ExperimentReport { name: state.config.name(), config: state.config.clone(), rounds, summary, crypto, gas_efficiency: None };
    report.gas_efficiency = gas_efficiency(&report).ok();
    report
}

/// Runs the whole experiment and hands back the final system state alongside the report.
pub fn execute(config: &ExperimentConfig) -> Result<(ExperimentReport, SystemState), ProtocolError> {
    let mut state = init_phase(config)?;
    let mut rounds = Vec::with_capacity(config.rounds);
    for t in 1..=config.rounds as u64 {
        rounds.push(run_round(&mut state, t)?);
    }
    Ok((build_report(&state, rounds), state))
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, ProtocolError> {
    execute(config).map(|(report, _)| report)
}
