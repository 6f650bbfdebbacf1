//! Simulated permissioned ledger: signed, nonce-protected transactions
//! in hash-linked blocks, committed by strict-majority voting of the
//! registered full nodes. Blocks are immutable once appended and shared
//! between node chains via `Arc`.

pub mod codec;
pub mod sig;

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use thiserror::Error;

pub use codec::{sha256, CodecError, Digest, ZERO_DIGEST};
pub use sig::{sign, verify, KeyedDigest, SignatureScheme, WalletKey};

use codec::{Reader, Writer};

#[derive(Debug, Error, PartialEq)]
pub enum LedgerError {
    #[error("bad signature")]
    BadSignature,
    #[error("replayed nonce {nonce} from {sender}")]
    ReplayedNonce { sender: String, nonce: u64 },
    #[error("stale slot {got}, current is {current}")]
    StaleSlot { got: u64, current: u64 },
    #[error("unknown wallet {0}")]
    UnknownWallet(String),
    #[error("insufficient votes: {got} of {nodes} nodes")]
    InsufficientVotes { got: usize, nodes: usize },
    #[error("invalid transaction: {0}")]
    InvalidTransaction(String),
    #[error("block {height} invalid: {reason}")]
    InvalidBlock { height: u64, reason: String },
    #[error("malformed encoding: {0}")]
    Malformed(#[from] CodecError),
}

/// Transaction payloads carried by the ledger.
#[derive(Debug, Clone, PartialEq)]
pub enum TxPayload {
    PlugIn {
        ev_id: u64,
        node_id: String,
    },
    EvInfo {
        ev_id: u64,
        soc: f64,
        capacity: f64,
        beta: f64,
        u_idle: f64,
        a: f64,
    },
    OracleUpdate {
        p_real_time: f64,
        e_limit: f64,
        w_grid: f64,
        p_d_min: f64,
        p_d_max: f64,
        w_service: f64,
    },
    SolutionProposal {
        p_d_star: f64,
        r_service: f64,
        r_grid_v2g: f64,
        c_v2g: f64,
        c_limit: f64,
        total: f64,
    },
    Dispatch {
        ev_id: u64,
        x: f64,
        payment: f64,
    },
    Settlement {
        ev_id: u64,
        payment: f64,
        balance_after: f64,
    },
}

impl TxPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            TxPayload::PlugIn { .. } => "PlugIn",
            TxPayload::EvInfo { .. } => "EvInfo",
            TxPayload::OracleUpdate { .. } => "OracleUpdate",
            TxPayload::SolutionProposal { .. } => "SolutionProposal",
            TxPayload::Dispatch { .. } => "Dispatch",
            TxPayload::Settlement { .. } => "Settlement",
        }
    }

    fn encode(&self, w: &mut Writer) {
        match self {
            TxPayload::PlugIn { ev_id, node_id } => {
                w.put_u8(0);
                w.put_u64(*ev_id);
                w.put_str(node_id);
            }
            TxPayload::EvInfo {
                ev_id,
                soc,
                capacity,
                beta,
                u_idle,
                a,
            } => {
                w.put_u8(1);
                w.put_u64(*ev_id);
                w.put_f64(*soc);
                w.put_f64(*capacity);
                w.put_f64(*beta);
                w.put_f64(*u_idle);
                w.put_f64(*a);
            }
            TxPayload::OracleUpdate {
                p_real_time,
                e_limit,
                w_grid,
                p_d_min,
                p_d_max,
                w_service,
            } => {
                w.put_u8(2);
                w.put_f64(*p_real_time);
                w.put_f64(*e_limit);
                w.put_f64(*w_grid);
                w.put_f64(*p_d_min);
                w.put_f64(*p_d_max);
                w.put_f64(*w_service);
            }
            TxPayload::SolutionProposal {
                p_d_star,
                r_service,
                r_grid_v2g,
                c_v2g,
                c_limit,
                total,
            } => {
                w.put_u8(3);
                w.put_f64(*p_d_star);
                w.put_f64(*r_service);
                w.put_f64(*r_grid_v2g);
                w.put_f64(*c_v2g);
                w.put_f64(*c_limit);
                w.put_f64(*total);
            }
            TxPayload::Dispatch { ev_id, x, payment } => {
                w.put_u8(4);
                w.put_u64(*ev_id);
                w.put_f64(*x);
                w.put_f64(*payment);
            }
            TxPayload::Settlement {
                ev_id,
                payment,
                balance_after,
            } => {
                w.put_u8(5);
                w.put_u64(*ev_id);
                w.put_f64(*payment);
                w.put_f64(*balance_after);
            }
        }
    }

    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(match r.u8()? {
            0 => TxPayload::PlugIn {
                ev_id: r.u64()?,
                node_id: r.str()?,
            },
            1 => TxPayload::EvInfo {
                ev_id: r.u64()?,
                soc: r.f64()?,
                capacity: r.f64()?,
                beta: r.f64()?,
                u_idle: r.f64()?,
                a: r.f64()?,
            },
            2 => TxPayload::OracleUpdate {
                p_real_time: r.f64()?,
                e_limit: r.f64()?,
                w_grid: r.f64()?,
                p_d_min: r.f64()?,
                p_d_max: r.f64()?,
                w_service: r.f64()?,
            },
            3 => TxPayload::SolutionProposal {
                p_d_star: r.f64()?,
                r_service: r.f64()?,
                r_grid_v2g: r.f64()?,
                c_v2g: r.f64()?,
                c_limit: r.f64()?,
                total: r.f64()?,
            },
            4 => TxPayload::Dispatch {
                ev_id: r.u64()?,
                x: r.f64()?,
                payment: r.f64()?,
            },
            5 => TxPayload::Settlement {
                ev_id: r.u64()?,
                payment: r.f64()?,
                balance_after: r.f64()?,
            },
            k => return Err(CodecError::Invalid(format!("unknown payload kind {k}"))),
        })
    }
}

/// A signed, nonce-protected ledger record. The signature covers the
/// canonical encoding of every prior field.
#[derive(Debug, Clone, PartialEq)]
pub struct Transaction {
    pub payload: TxPayload,
    pub sender: String,
    pub nonce: u64,
    pub slot: u64,
    pub signature: Vec<u8>,
}

impl Transaction {
    /// Build and sign a transaction, consuming one nonce of `wallet`.
    pub fn signed(payload: TxPayload, wallet: &mut WalletKey, slot: u64) -> Self {
        let nonce = wallet.next_nonce;
        wallet.next_nonce += 1;
        let mut txn = Transaction {
            payload,
            sender: wallet.wallet_id.clone(),
            nonce,
            slot,
            signature: Vec::new(),
        };
        txn.signature = sig::sign(&wallet.signing_key, &txn.signing_bytes());
        txn
    }

    /// Canonical encoding of everything the signature covers.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.payload.encode(&mut w);
        w.put_str(&self.sender);
        w.put_u64(self.nonce);
        w.put_u64(self.slot);
        w.into_bytes()
    }

    pub fn encode(&self, w: &mut Writer) {
        self.payload.encode(w);
        w.put_str(&self.sender);
        w.put_u64(self.nonce);
        w.put_u64(self.slot);
        w.put_bytes(&self.signature);
    }

    pub fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(Transaction {
            payload: TxPayload::decode(r)?,
            sender: r.str()?,
            nonce: r.u64()?,
            slot: r.u64()?,
            signature: r.bytes()?,
        })
    }
}

/// Digest of a canonically encoded transaction list.
pub fn payload_digest(txns: &[Transaction]) -> Digest {
    let mut w = Writer::new();
    w.put_u32(txns.len() as u32);
    for t in txns {
        t.encode(&mut w);
    }
    sha256(&w.into_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockHeader {
    pub height: u64,
    pub slot: u64,
    pub prev_hash: Digest,
    pub payload_hash: Digest,
    pub proposer: String,
}

impl BlockHeader {
    pub fn encode(&self, w: &mut Writer) {
        w.put_u64(self.height);
        w.put_u64(self.slot);
        w.put_digest(&self.prev_hash);
        w.put_digest(&self.payload_hash);
        w.put_str(&self.proposer);
    }

    pub fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(BlockHeader {
            height: r.u64()?,
            slot: r.u64()?,
            prev_hash: r.digest()?,
            payload_hash: r.digest()?,
            proposer: r.str()?,
        })
    }

    pub fn digest(&self) -> Digest {
        let mut w = Writer::new();
        self.encode(&mut w);
        sha256(&w.into_bytes())
    }
}

/// A committed block: header, transactions, and the node votes that
/// approved it (signatures over the header digest).
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub header: BlockHeader,
    pub txns: Vec<Transaction>,
    pub votes: Vec<(String, Vec<u8>)>,
}

impl Block {
    pub fn encode(&self, w: &mut Writer) {
        self.header.encode(w);
        w.put_u32(self.txns.len() as u32);
        for t in &self.txns {
            t.encode(w);
        }
        w.put_u32(self.votes.len() as u32);
        for (node, sig) in &self.votes {
            w.put_str(node);
            w.put_bytes(sig);
        }
    }

    pub fn encode_to_vec(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let header = BlockHeader::decode(&mut r)?;
        // Counts come from untrusted bytes: grow lazily rather than
        // pre-allocating whatever the wire claims.
        let n = r.u32()? as usize;
        let mut txns = Vec::new();
        for _ in 0..n {
            txns.push(Transaction::decode(&mut r)?);
        }
        let n = r.u32()? as usize;
        let mut votes = Vec::new();
        for _ in 0..n {
            votes.push((r.str()?, r.bytes()?));
        }
        r.finish()?;
        Ok(Block {
            header,
            txns,
            votes,
        })
    }
}

/// Verify keys of all participants plus the full-node roster. Fixed at
/// genesis for the lifetime of a chain.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    /// Registered full nodes as (node_id, verify_key), in roster order.
    pub full_nodes: Vec<(String, Vec<u8>)>,
    /// Verify key per wallet id (EVs, nodes, oracle, aggregator).
    pub wallets: HashMap<String, Vec<u8>>,
}

impl Registry {
    pub fn wallet_key(&self, wallet_id: &str) -> Option<&[u8]> {
        self.wallets.get(wallet_id).map(|k| k.as_slice())
    }

    pub fn node_key(&self, node_id: &str) -> Option<&[u8]> {
        self.full_nodes
            .iter()
            .find(|(id, _)| id == node_id)
            .map(|(_, k)| k.as_slice())
    }

    /// Strict majority threshold: votes must exceed half the roster.
    pub fn quorum(&self) -> usize {
        self.full_nodes.len() / 2 + 1
    }

    pub fn encode_to_vec(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u32(self.full_nodes.len() as u32);
        for (id, key) in &self.full_nodes {
            w.put_str(id);
            w.put_bytes(key);
        }
        let mut wallets: Vec<_> = self.wallets.iter().collect();
        wallets.sort();
        w.put_u32(wallets.len() as u32);
        for (id, key) in wallets {
            w.put_str(id);
            w.put_bytes(key);
        }
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let n = r.u32()? as usize;
        let mut full_nodes = Vec::new();
        for _ in 0..n {
            full_nodes.push((r.str()?, r.bytes()?));
        }
        let n = r.u32()? as usize;
        let mut wallets = HashMap::new();
        for _ in 0..n {
            wallets.insert(r.str()?, r.bytes()?);
        }
        r.finish()?;
        Ok(Registry {
            full_nodes,
            wallets,
        })
    }
}

/// One node's copy of the ledger. Blocks are shared immutably, so
/// replicating a committed block to every node is an `Arc` clone.
#[derive(Debug, Clone)]
pub struct Chain {
    pub blocks: Vec<Arc<Block>>,
    pub registry: Arc<Registry>,
}

impl Chain {
    /// New chain holding only the genesis block.
    pub fn new(registry: Arc<Registry>) -> Self {
        let header = BlockHeader {
            height: 0,
            slot: 0,
            prev_hash: ZERO_DIGEST,
            payload_hash: payload_digest(&[]),
            proposer: "genesis".to_string(),
        };
        let genesis = Arc::new(Block {
            header,
            txns: Vec::new(),
            votes: Vec::new(),
        });
        Chain {
            blocks: vec![genesis],
            registry,
        }
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("chain always has genesis")
    }

    pub fn headers(&self) -> Vec<BlockHeader> {
        self.blocks.iter().map(|b| b.header.clone()).collect()
    }

    /// Append a pre-committed block, checking only linkage; full
    /// validation happened when the block was built.
    pub fn append(&mut self, block: Arc<Block>) -> Result<(), LedgerError> {
        let tip = self.tip();
        if block.header.height != tip.header.height + 1 {
            return Err(LedgerError::InvalidBlock {
                height: block.header.height,
                reason: format!("expected height {}", tip.header.height + 1),
            });
        }
        if block.header.prev_hash != tip.header.digest() {
            return Err(LedgerError::InvalidBlock {
                height: block.header.height,
                reason: "prev_hash does not match tip".into(),
            });
        }
        self.blocks.push(block);
        Ok(())
    }
}

/// Pending transactions plus the per-wallet nonce registry used for
/// replay protection. Nonces advance on acceptance and roll back if
/// the slot is abandoned.
#[derive(Debug, Default, Clone)]
pub struct TxPool {
    pub pending: Vec<Transaction>,
    nonces: HashMap<String, u64>,
    current_slot: u64,
}

impl TxPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open_slot(&mut self, slot: u64) {
        debug_assert!(self.pending.is_empty(), "previous slot not closed");
        self.current_slot = slot;
    }

    pub fn current_slot(&self) -> u64 {
        self.current_slot
    }

    pub fn next_nonce(&self, wallet_id: &str) -> u64 {
        self.nonces.get(wallet_id).copied().unwrap_or(0)
    }

    /// Drain accepted transactions for block assembly, keeping the
    /// advanced nonces.
    pub fn take_pending(&mut self) -> Vec<Transaction> {
        std::mem::take(&mut self.pending)
    }

    /// Abandon the slot: drop pending transactions and restore their
    /// senders' nonces.
    pub fn rollback_slot(&mut self) {
        for txn in self.pending.drain(..) {
            if let Some(n) = self.nonces.get_mut(&txn.sender) {
                *n -= 1;
            }
        }
    }
}

/// Validate a transaction against the chain's registry and the pool's
/// nonce state, accepting it into the pool. Each rejection names the
/// attack it blocks.
pub fn submit_transaction(
    pool: &mut TxPool,
    txn: Transaction,
    chain: &Chain,
) -> Result<(), LedgerError> {
    let key = chain
        .registry
        .wallet_key(&txn.sender)
        .ok_or_else(|| LedgerError::UnknownWallet(txn.sender.clone()))?;
    if !sig::verify(key, &txn.signing_bytes(), &txn.signature) {
        return Err(LedgerError::BadSignature);
    }
    if txn.slot != pool.current_slot {
        return Err(LedgerError::StaleSlot {
            got: txn.slot,
            current: pool.current_slot,
        });
    }
    let expected = pool.next_nonce(&txn.sender);
    if txn.nonce != expected {
        return Err(LedgerError::ReplayedNonce {
            sender: txn.sender.clone(),
            nonce: txn.nonce,
        });
    }
    pool.nonces.insert(txn.sender.clone(), expected + 1);
    pool.pending.push(txn);
    Ok(())
}

/// Build a block over `txns`, collect the given votes, enforce strict
/// majority, and append it to `chain`. Returns the committed block for
/// replication to other chains.
pub fn append_block(
    chain: &mut Chain,
    txns: Vec<Transaction>,
    proposer: &str,
    votes: Vec<(String, Vec<u8>)>,
    slot: u64,
) -> Result<Arc<Block>, LedgerError> {
    let header = BlockHeader {
        height: chain.tip().header.height + 1,
        slot,
        prev_hash: chain.tip().header.digest(),
        payload_hash: payload_digest(&txns),
        proposer: proposer.to_string(),
    };
    let digest = header.digest();
    let mut voters = HashSet::new();
    for (node_id, vote_sig) in &votes {
        let key = chain
            .registry
            .node_key(node_id)
            .ok_or_else(|| LedgerError::UnknownWallet(node_id.clone()))?;
        if !sig::verify(key, &digest, vote_sig) {
            return Err(LedgerError::BadSignature);
        }
        voters.insert(node_id.clone());
    }
    let quorum = chain.registry.quorum();
    if voters.len() < quorum {
        return Err(LedgerError::InsufficientVotes {
            got: voters.len(),
            nodes: chain.registry.full_nodes.len(),
        });
    }
    let block = Arc::new(Block {
        header,
        txns,
        votes,
    });
    chain.blocks.push(Arc::clone(&block));
    Ok(block)
}

/// Full-node validation: hash linkage, payload digests, transaction
/// signatures, chain-wide nonce uniqueness, and vote thresholds.
pub fn verify_chain(chain: &Chain) -> Result<(), LedgerError> {
    let mut seen_nonces: HashSet<(String, u64)> = HashSet::new();
    let mut prev_digest = ZERO_DIGEST;
    for (idx, block) in chain.blocks.iter().enumerate() {
        let height = block.header.height;
        let fail = |reason: String| LedgerError::InvalidBlock { height, reason };
        if height != idx as u64 {
            return Err(fail(format!("height {height} at index {idx}")));
        }
        if block.header.prev_hash != prev_digest {
            return Err(fail("broken hash linkage".into()));
        }
        if block.header.payload_hash != payload_digest(&block.txns) {
            return Err(fail("payload digest mismatch".into()));
        }
        for txn in &block.txns {
            let key = chain
                .registry
                .wallet_key(&txn.sender)
                .ok_or_else(|| fail(format!("unknown wallet {}", txn.sender)))?;
            if !sig::verify(key, &txn.signing_bytes(), &txn.signature) {
                return Err(fail(format!("bad signature from {}", txn.sender)));
            }
            if !seen_nonces.insert((txn.sender.clone(), txn.nonce)) {
                return Err(fail(format!(
                    "duplicate nonce {} from {}",
                    txn.nonce, txn.sender
                )));
            }
        }
        if idx > 0 {
            let digest = block.header.digest();
            let mut voters = HashSet::new();
            for (node_id, vote_sig) in &block.votes {
                let key = chain
                    .registry
                    .node_key(node_id)
                    .ok_or_else(|| fail(format!("unknown node {node_id}")))?;
                if !sig::verify(key, &digest, vote_sig) {
                    return Err(fail(format!("bad vote from {node_id}")));
                }
                voters.insert(node_id);
            }
            if voters.len() < chain.registry.quorum() {
                return Err(LedgerError::InsufficientVotes {
                    got: voters.len(),
                    nodes: chain.registry.full_nodes.len(),
                });
            }
        }
        prev_digest = block.header.digest();
    }
    Ok(())
}

/// Light-client validation: header linkage only.
pub fn verify_header_chain(headers: &[BlockHeader]) -> bool {
    let mut prev_digest = ZERO_DIGEST;
    for (idx, header) in headers.iter().enumerate() {
        if header.height != idx as u64 || header.prev_hash != prev_digest {
            return false;
        }
        prev_digest = header.digest();
    }
    true
}

/// Export a chain as newline-delimited hex: the registry first, then
/// one canonically encoded block per line.
pub fn export_chain(chain: &Chain) -> String {
    let mut out = String::new();
    out.push_str(&hex::encode(chain.registry.encode_to_vec()));
    out.push('\n');
    for block in &chain.blocks {
        out.push_str(&hex::encode(block.encode_to_vec()));
        out.push('\n');
    }
    out
}

/// Parse an exported chain. Structural decoding only; run
/// [`verify_chain`] on the result to validate it.
pub fn import_chain(text: &str) -> Result<Chain, LedgerError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let registry_line = lines
        .next()
        .ok_or_else(|| LedgerError::Malformed(CodecError::Invalid("empty file".into())))?;
    let registry_bytes = hex::decode(registry_line.trim())
        .map_err(|e| LedgerError::Malformed(CodecError::Invalid(e.to_string())))?;
    let registry = Arc::new(Registry::decode(&registry_bytes)?);
    let mut blocks = Vec::new();
    for line in lines {
        let bytes = hex::decode(line.trim())
            .map_err(|e| LedgerError::Malformed(CodecError::Invalid(e.to_string())))?;
        blocks.push(Arc::new(Block::decode(&bytes)?));
    }
    if blocks.is_empty() {
        return Err(LedgerError::Malformed(CodecError::Invalid(
            "no blocks in file".into(),
        )));
    }
    Ok(Chain { blocks, registry })
}
