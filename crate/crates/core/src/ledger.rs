//! In-memory ledger with smart-contract semantics.
//!
//! The contract keeps a key registry, write-once records of verified update hashes and
//! aggregation hashes, and charges gas for every processed transaction:
//!
//! ```text
//! gas = base + per_byte * |payload| + per_record * records_written + verify[scheme]
//! ```
//!
//! where the verification surcharge only applies to `SUBMIT_*` transactions. Failed
//! transactions still pay, with zero records written.
//!
//! Transactions are applied serially in submission order and packaged into hash-linked
//! blocks. [`chain_verify`] replays a chain from its genesis state and reports the first
//! height where anything disagrees.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sigsuite::{self, sha3_256, Hash32, SchemeId, Signature};

pub const DEFAULT_BASE_GAS: u64 = 21_000;
pub const DEFAULT_BYTE_GAS: u64 = 16;
pub const DEFAULT_RECORD_GAS: u64 = 20_000;

/// Per-update gas totals the default model is calibrated to reproduce.
pub const REFERENCE_UPDATE_GAS: [(SchemeId, u64); 3] =
    [(SchemeId::Pqc, 1_724_100), (SchemeId::Ecdsa, 188_900), (SchemeId::None, 173_650)];

/// Signature sizes assumed by the calibration of the default model.
pub const REFERENCE_SIGNATURE_BYTES: [(SchemeId, usize); 3] =
    [(SchemeId::Pqc, 3309), (SchemeId::Ecdsa, 71), (SchemeId::None, 32)];

const HASH_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("sender {0} is not registered")]
    UnregisteredClient(Address),
    #[error("sender registered with {registered} but submitted a {submitted} signature")]
    SchemeMismatch { registered: SchemeId, submitted: SchemeId },
    #[error("malformed transaction: {0}")]
    MalformedTransaction(String),
    #[error("calibration infeasible for {scheme}: {reason}")]
    InfeasibleCalibration { scheme: SchemeId, reason: String },
    #[error("invalid latency model: {0}")]
    InvalidLatency(String),
    #[error("chain import line {line}: {msg}")]
    Import { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 32-byte account identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Address(pub Hash32);

impl Address {
    pub fn participant(id: u64) -> Self {
        let mut seed = b"pqs-bfl:client:".to_vec();
        seed.extend_from_slice(&id.to_le_bytes());
        Address(sha3_256(&seed))
    }

    pub fn aggregator() -> Self {
        Address(sha3_256(b"pqs-bfl:aggregator"))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        self.0.as_bytes()
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Address({})", &self.0.to_hex()[..16])
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", self.0.to_hex())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxKind {
    #[serde(rename = "REGISTER")]
    Register,
    #[serde(rename = "SUBMIT_UPDATE")]
    SubmitUpdate,
    #[serde(rename = "SUBMIT_AGGREGATION")]
    SubmitAggregation,
}

impl TxKind {
    fn tag(self) -> u8 {
        match self {
            TxKind::Register => 1,
            TxKind::SubmitUpdate => 2,
            TxKind::SubmitAggregation => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub kind: TxKind,
    pub sender: Address,
    pub round: u64,
    /// Public key for `REGISTER`, otherwise the 32-byte hash followed by the signature.
    #[serde(with = "sigsuite::hex_bytes")]
    pub payload: Vec<u8>,
    pub scheme: SchemeId,
}

impl Transaction {
    pub fn registration(sender: Address, public_key: &[u8], scheme: SchemeId) -> Self {
        Self { kind: TxKind::Register, sender, round: 0, payload: public_key.to_vec(), scheme }
    }

    pub fn submission(kind: TxKind, sender: Address, round: u64, hash: &Hash32, sig: &Signature) -> Self {
        let mut payload = Vec::with_capacity(HASH_LEN + sig.len());
        payload.extend_from_slice(hash.as_bytes());
        payload.extend_from_slice(&sig.bytes);
        Self { kind, sender, round, payload, scheme: sig.scheme }
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(54 + self.payload.len());
        out.push(self.kind.tag());
        out.extend_from_slice(self.sender.as_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.push(self.scheme.tag());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn hash(&self) -> Hash32 {
        sha3_256(&self.canonical_bytes())
    }

    /// Splits a submission payload into its hash and signature parts.
    fn split_submission(&self) -> Result<(Hash32, Signature), LedgerError> {
        if self.payload.len() <= HASH_LEN {
            return Err(LedgerError::MalformedTransaction(format!(
                "submission payload of {} bytes lacks hash and signature",
                self.payload.len()
            )));
        }
        let hash = Hash32::from_slice(&self.payload[..HASH_LEN]).expect("32-byte prefix");
        Ok((hash, Signature { scheme: self.scheme, bytes: self.payload[HASH_LEN..].to_vec() }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxStatus {
    #[serde(rename = "VERIFIED")]
    Verified,
    #[serde(rename = "REJECTED")]
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub tx_hash: Hash32,
    pub status: TxStatus,
    pub gas_used: u64,
    pub confirm_time_s: f64,
    pub block_height: u64,
    /// Wall-clock time the contract spent in signature verification.
    pub verify_ms: f64,
    pub reason: Option<String>,
}

impl Receipt {
    pub fn is_verified(&self) -> bool {
        self.status == TxStatus::Verified
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisteredKey {
    #[serde(with = "sigsuite::hex_bytes")]
    pub public_key: Vec<u8>,
    pub scheme: SchemeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ContractState {
    /// Address allowed to submit aggregation records, fixed at deployment.
    pub aggregator: Option<Address>,
    pub registry: BTreeMap<Address, RegisteredKey>,
    pub verified_updates: BTreeMap<(u64, Address), Hash32>,
    pub aggregation_records: BTreeMap<u64, Hash32>,
}

/// What applying one transaction did to the contract.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub status: TxStatus,
    pub records_written: u64,
    pub verify_ms: f64,
    pub reason: Option<String>,
}

impl Outcome {
    fn rejected(reason: impl Into<String>, verify_ms: f64) -> Self {
        Self { status: TxStatus::Rejected, records_written: 0, verify_ms, reason: Some(reason.into()) }
    }

    fn verified(records_written: u64, verify_ms: f64) -> Self {
        Self { status: TxStatus::Verified, records_written, verify_ms, reason: None }
    }
}

impl ContractState {
    pub fn new(aggregator: Option<Address>) -> Self {
        Self { aggregator, ..Self::default() }
    }

    pub fn verified_hash(&self, round: u64, client: &Address) -> Option<&Hash32> {
        self.verified_updates.get(&(round, *client))
    }

    /// Verified update hashes recorded for `round`, in address order.
    pub fn verified_for_round(&self, round: u64) -> impl Iterator<Item = (&Address, &Hash32)> {
        self.verified_updates.range((round, Address(Hash32([0; 32])))..=(round, Address(Hash32([0xff; 32])))).map(|((_, a), h)| (a, h))
    }

    /// Digest of the canonical serialization of the whole state.
    pub fn root(&self) -> Hash32 {
        let mut out = Vec::new();
        match &self.aggregator {
            Some(a) => {
                out.push(1);
                out.extend_from_slice(a.as_bytes());
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.registry.len() as u64).to_le_bytes());
        for (addr, key) in &self.registry {
            out.extend_from_slice(addr.as_bytes());
            out.push(key.scheme.tag());
            out.extend_from_slice(&(key.public_key.len() as u64).to_le_bytes());
            out.extend_from_slice(&key.public_key);
        }
        out.extend_from_slice(&(self.verified_updates.len() as u64).to_le_bytes());
        for ((round, addr), hash) in &self.verified_updates {
            out.extend_from_slice(&round.to_le_bytes());
            out.extend_from_slice(addr.as_bytes());
            out.extend_from_slice(hash.as_bytes());
        }
        out.extend_from_slice(&(self.aggregation_records.len() as u64).to_le_bytes());
        for (round, hash) in &self.aggregation_records {
            out.extend_from_slice(&round.to_le_bytes());
            out.extend_from_slice(hash.as_bytes());
        }
        sha3_256(&out)
    }

    /// Applies one transaction. `Err` means the transaction is not admissible at all and
    /// leaves no trace; `Ok` outcomes (including rejections) are billable.
    pub fn apply(&mut self, tx: &Transaction) -> Result<Outcome, LedgerError> {
        if tx.payload.is_empty() {
            return Err(LedgerError::MalformedTransaction("empty payload".into()));
        }
        match tx.kind {
            TxKind::Register => Ok(self.apply_register(tx)),
            TxKind::SubmitUpdate | TxKind::SubmitAggregation => self.apply_submission(tx),
        }
    }

    fn apply_register(&mut self, tx: &Transaction) -> Outcome {
        if self.registry.contains_key(&tx.sender) {
            return Outcome::rejected("duplicate registration", 0.0);
        }
        self.registry.insert(tx.sender, RegisteredKey { public_key: tx.payload.clone(), scheme: tx.scheme });
        Outcome::verified(tx.payload.len().div_ceil(HASH_LEN) as u64, 0.0)
    }

    fn apply_submission(&mut self, tx: &Transaction) -> Result<Outcome, LedgerError> {
        let key = self.registry.get(&tx.sender).ok_or(LedgerError::UnregisteredClient(tx.sender))?;
        if key.scheme != tx.scheme {
            return Err(LedgerError::SchemeMismatch { registered: key.scheme, submitted: tx.scheme });
        }
        let (hash, sig) = tx.split_submission()?;
        let aggregation = tx.kind == TxKind::SubmitAggregation;
        if aggregation && self.aggregator != Some(tx.sender) {
            return Ok(Outcome::rejected("sender is not the aggregator", 0.0));
        }
        let duplicate = if aggregation {
            self.aggregation_records.contains_key(&tx.round)
        } else {
            self.verified_updates.contains_key(&(tx.round, tx.sender))
        };
        if duplicate {
            return Ok(Outcome::rejected("record already written for this round", 0.0));
        }

        let start = Instant::now();
        let valid = sigsuite::verify(&key.public_key, key.scheme, hash.as_bytes(), &sig).map_err(|_| {
            LedgerError::SchemeMismatch { registered: key.scheme, submitted: sig.scheme }
        })?;
        let verify_ms = start.elapsed().as_secs_f64() * 1e3;
        if !valid {
            return Ok(Outcome::rejected("signature verification failed", verify_ms));
        }
        if aggregation {
            self.aggregation_records.insert(tx.round, hash);
        } else {
            self.verified_updates.insert((tx.round, tx.sender), hash);
        }
        Ok(Outcome::verified(1, verify_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GasModel {
    pub base: u64,
    pub per_byte: u64,
    pub per_record: u64,
    pub verify: BTreeMap<SchemeId, u64>,
}

impl Default for GasModel {
    /// Default prices with verification surcharges calibrated to [`REFERENCE_UPDATE_GAS`].
    fn default() -> Self {
        calibrate_gas(&BTreeMap::from(REFERENCE_UPDATE_GAS), &BTreeMap::from(REFERENCE_SIGNATURE_BYTES))
            .expect("reference targets are feasible")
    }
}

impl GasModel {
    /// Default prices with no verification surcharge.
    pub fn uncalibrated() -> Self {
        Self { base: DEFAULT_BASE_GAS, per_byte: DEFAULT_BYTE_GAS, per_record: DEFAULT_RECORD_GAS, verify: BTreeMap::new() }
    }

    pub fn verify_cost(&self, scheme: SchemeId) -> u64 {
        self.verify.get(&scheme).copied().unwrap_or(0)
    }

    pub fn transaction_gas(&self, tx: &Transaction, records_written: u64) -> u64 {
        let surcharge = match tx.kind {
            TxKind::Register => 0,
            TxKind::SubmitUpdate | TxKind::SubmitAggregation => self.verify_cost(tx.scheme),
        };
        self.base + self.per_byte * tx.payload.len() as u64 + self.per_record * records_written + surcharge
    }

    /// Gas of a successful update submission carrying a signature of `sig_len` bytes.
    pub fn update_gas(&self, scheme: SchemeId, sig_len: usize) -> u64 {
        self.base + self.per_byte * (HASH_LEN + sig_len) as u64 + self.per_record + self.verify_cost(scheme)
    }
}

/// Solves the per-scheme verification surcharge so that a verified update submission costs
/// exactly `targets[scheme]`, holding base/byte/record prices at their defaults.
pub fn calibrate_gas(
    targets: &BTreeMap<SchemeId, u64>,
    sig_sizes: &BTreeMap<SchemeId, usize>,
) -> Result<GasModel, LedgerError> {
    let mut model = GasModel::uncalibrated();
    for (&scheme, &target) in targets {
        let infeasible = |reason: String| LedgerError::InfeasibleCalibration { scheme, reason };
        if target == 0 {
            return Err(infeasible("target must be positive".into()));
        }
        let size = *sig_sizes.get(&scheme).ok_or_else(|| infeasible("no signature size given".into()))?;
        let fixed = model.update_gas(scheme, size);
        let surcharge = target.checked_sub(fixed).ok_or_else(|| infeasible(format!("target {target} below fixed cost {fixed}")))?;
        model.verify.insert(scheme, surcharge);
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum LatencyModel {
    Constant { seconds: f64 },
    Uniform { low: f64, high: f64 },
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::Constant { seconds: 0.32 }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), LedgerError> {
        match *self {
            LatencyModel::Constant { seconds } if seconds.is_finite() && seconds >= 0.0 => Ok(()),
            LatencyModel::Uniform { low, high } if low.is_finite() && high.is_finite() && 0.0 <= low && low <= high => Ok(()),
            other => Err(LedgerError::InvalidLatency(format!("{other:?}"))),
        }
    }
}

/// Confirmation time in seconds.
pub fn latency_sample<R: Rng + ?Sized>(model: &LatencyModel, rng: &mut R) -> f64 {
    match *model {
        LatencyModel::Constant { seconds } => seconds,
        LatencyModel::Uniform { low, high } if low < high => rng.gen_range(low..high),
        LatencyModel::Uniform { low, .. } => low,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub parent_hash: Hash32,
    pub timestamp_ms: u64,
    pub tx_hashes: Vec<Hash32>,
    pub transactions: Vec<Transaction>,
    pub state_root: Hash32,
    pub hash: Hash32,
}

impl Block {
    /// Digest over the header: height, parent, timestamp, ordered tx hashes and state root.
    pub fn compute_hash(&self) -> Hash32 {
        let mut out = Vec::with_capacity(116 + 32 * self.tx_hashes.len());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(self.parent_hash.as_bytes());
        out.extend_from_slice(&self.timestamp_ms.to_le_bytes());
        out.extend_from_slice(&(self.tx_hashes.len() as u64).to_le_bytes());
        for h in &self.tx_hashes {
            out.extend_from_slice(h.as_bytes());
        }
        out.extend_from_slice(self.state_root.as_bytes());
        sha3_256(&out)
    }

    fn seal(
        height: u64,
        parent_hash: Hash32,
        timestamp_ms: u64,
        transactions: Vec<Transaction>,
        state_root: Hash32,
    ) -> Self {
        let tx_hashes = transactions.iter().map(Transaction::hash).collect();
        let mut block = Block { height, parent_hash, timestamp_ms, tx_hashes, transactions, state_root, hash: Hash32::ZERO };
        block.hash = block.compute_hash();
        block
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    pub genesis_state: ContractState,
    pub blocks: Vec<Block>,
}

impl Chain {
    pub fn new(genesis_state: ContractState) -> Self {
        let genesis = Block::seal(0, Hash32::ZERO, 0, Vec::new(), genesis_state.root());
        Self { genesis_state, blocks: vec![genesis] }
    }

    pub fn head(&self) -> &Block {
        self.blocks.last().expect("chain always holds genesis")
    }

    pub fn height(&self) -> u64 {
        self.head().height
    }

    /// Lists every block as one JSON object per line.
    pub fn export_ndjson<W: Write>(&self, mut out: W) -> Result<(), LedgerError> {
        for block in &self.blocks {
            let line = serde_json::to_string(block).map_err(std::io::Error::other)?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn import_ndjson<R: BufRead>(genesis_state: ContractState, input: R) -> Result<Self, LedgerError> {
        let mut blocks = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let block: Block = serde_json::from_str(&line).map_err(|e| LedgerError::Import { line: i + 1, msg: e.to_string() })?;
            blocks.push(block);
        }
        if blocks.is_empty() {
            return Err(LedgerError::Import { line: 0, msg: "no blocks".into() });
        }
        Ok(Self { genesis_state, blocks })
    }
}

/// Appends a block holding `pending` in submission order, committing to `state`.
pub fn mine_block<'a>(chain: &'a mut Chain, pending: Vec<Transaction>, state: &ContractState, timestamp_ms: u64) -> &'a Block {
    let parent = chain.head();
    let block = Block::seal(parent.height + 1, parent.hash, timestamp_ms, pending, state.root());
    chain.blocks.push(block);
    chain.head()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainStatus {
    Intact,
    BrokenAt(u64),
}

/// Re-derives every block hash, parent link, transaction hash and state root by replaying
/// all transactions from the genesis state.
pub fn chain_verify(chain: &Chain) -> ChainStatus {
    let mut state = chain.genesis_state.clone();
    let mut prev: Option<&Block> = None;
    for (index, block) in chain.blocks.iter().enumerate() {
        let broken = ChainStatus::BrokenAt(index as u64);
        let expected_parent = prev.map_or(Hash32::ZERO, |p| p.hash);
        if block.height != index as u64 || block.parent_hash != expected_parent || block.hash != block.compute_hash() {
            return broken;
        }
        if block.tx_hashes.len() != block.transactions.len()
            || block.tx_hashes.iter().zip(&block.transactions).any(|(h, tx)| *h != tx.hash())
        {
            return broken;
        }
        if index == 0 && !block.transactions.is_empty() {
            return broken;
        }
        for tx in &block.transactions {
            if state.apply(tx).is_err() {
                return broken;
            }
        }
        if block.state_root != state.root() {
            return broken;
        }
        prev = Some(block);
    }
    if chain.blocks.is_empty() {
        return ChainStatus::BrokenAt(0);
    }
    ChainStatus::Intact
}

/// Contract, gas meter, latency model and chain bundled as one serial state machine.
#[derive(Debug, Clone)]
pub struct Ledger {
    state: ContractState,
    chain: Chain,
    gas: GasModel,
    latency: LatencyModel,
    rng: ChaCha8Rng,
    pending: Vec<Transaction>,
    pending_latency_ms: u64,
    clock_ms: u64,
}

impl Ledger {
    pub fn new(aggregator: Option<Address>, gas: GasModel, latency: LatencyModel, seed: u64) -> Result<Self, LedgerError> {
        latency.validate()?;
        let state = ContractState::new(aggregator);
        Ok(Self {
            chain: Chain::new(state.clone()),
            state,
            gas,
            latency,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending: Vec::new(),
            pending_latency_ms: 0,
            clock_ms: 0,
        })
    }

    pub fn state(&self) -> &ContractState {
        &self.state
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn gas_model(&self) -> &GasModel {
        &self.gas
    }

    pub fn pending(&self) -> &[Transaction] {
        &self.pending
    }

    pub fn submit(&mut self, tx: Transaction) -> Result<Receipt, LedgerError> {
        let outcome = self.state.apply(&tx)?;
        let gas_used = self.gas.transaction_gas(&tx, outcome.records_written);
        let confirm_time_s = latency_sample(&self.latency, &mut self.rng);
        self.pending_latency_ms = self.pending_latency_ms.max((confirm_time_s * 1e3).round() as u64);
        let receipt = Receipt {
            tx_hash: tx.hash(),
            status: outcome.status,
            gas_used,
            confirm_time_s,
            block_height: self.chain.height() + 1,
            verify_ms: outcome.verify_ms,
            reason: outcome.reason,
        };
        self.pending.push(tx);
        Ok(receipt)
    }

    pub fn register_client(&mut self, address: Address, public_key: &[u8], scheme: SchemeId) -> Result<Receipt, LedgerError> {
        self.submit(Transaction::registration(address, public_key, scheme))
    }

    pub fn submit_update(&mut self, address: Address, round: u64, hash: &Hash32, sig: &Signature) -> Result<Receipt, LedgerError> {
        self.submit(Transaction::submission(TxKind::SubmitUpdate, address, round, hash, sig))
    }

    pub fn submit_aggregation(&mut self, address: Address, round: u64, hash: &Hash32, sig: &Signature) -> Result<Receipt, LedgerError> {
        self.submit(Transaction::submission(TxKind::SubmitAggregation, address, round, hash, sig))
    }

    /// Seals all pending transactions into a block; the simulated clock advances by the
    /// slowest pending confirmation.
    pub fn mine_block(&mut self) -> &Block {
        self.clock_ms += self.pending_latency_ms;
        self.pending_latency_ms = 0;
        let pending = std::mem::take(&mut self.pending);
        mine_block(&mut self.chain, pending, &self.state, self.clock_ms)
    }
}
